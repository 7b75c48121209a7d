// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0
//
// In-process message transport. Every message is encoded to a wire frame,
// counted, and decoded again on the receiving side, so byte accounting and
// codec behavior match a networked deployment.

#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <vector>

#include "promptagg/serialize.hpp"

namespace promptagg {

struct TrafficCounter {
  std::size_t frames = 0;
  std::size_t frame_bytes = 0;   // full encoded frames, headers included
  std::size_t tensor_bytes = 0;  // Σ numel · 8 of the carried tensors
};

/// One record per transmitted frame, kept for privacy audits.
struct FrameRecord {
  MessageType type;
  std::vector<std::string> tensor_names;
  std::vector<std::pair<Index, Index>> shapes;
  std::size_t frame_bytes = 0;
};

class InProcessTransport {
 public:
  /// Encodes `frame`, records it, and returns what the receiver decodes.
  Frame send(const Frame& frame);

  const TrafficCounter& counter(MessageType type) const;
  /// Sum over all message types.
  TrafficCounter total() const;
  const std::vector<FrameRecord>& log() const { return log_; }
  void reset();

  /// Called with every encoded frame before delivery.
  void set_observer(std::function<void(const Bytes&)> observer) { observer_ = std::move(observer); }

 private:
  static constexpr std::size_t kTypes = 4;
  std::array<TrafficCounter, kTypes> counters_{};
  std::vector<FrameRecord> log_;
  std::function<void(const Bytes&)> observer_;
};

}  // namespace promptagg
