// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptagg/transport.hpp"

namespace promptagg {

namespace {

std::size_t slot(MessageType type) { return static_cast<std::size_t>(type) - 1; }

}  // namespace

Frame InProcessTransport::send(const Frame& frame) {
  const Bytes wire = encode_frame(frame);
  if (observer_) observer_(wire);
  TrafficCounter& c = counters_.at(slot(frame.type));
  c.frames += 1;
  c.frame_bytes += wire.size();
  c.tensor_bytes += tensor_data_bytes(frame.tensors);

  FrameRecord rec{frame.type, {}, {}, wire.size()};
  for (const auto& t : frame.tensors) {
    rec.tensor_names.push_back(t.name);
    rec.shapes.emplace_back(t.value.rows(), t.value.cols());
  }
  log_.push_back(std::move(rec));
  return decode_frame(wire);
}

const TrafficCounter& InProcessTransport::counter(MessageType type) const {
  return counters_.at(slot(type));
}

TrafficCounter InProcessTransport::total() const {
  TrafficCounter t;
  for (const auto& c : counters_) {
    t.frames += c.frames;
    t.frame_bytes += c.frame_bytes;
    t.tensor_bytes += c.tensor_bytes;
  }
  return t;
}

void InProcessTransport::reset() {
  counters_ = {};
  log_.clear();
}

}  // namespace promptagg
