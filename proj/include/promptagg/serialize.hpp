// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0
//
// Named-tensor binary formats.
//
// Tensor entry (shared by checkpoints and frames), all integers and floats
// little-endian:
//
//   u16 name_len | name bytes | u32 rows | u32 cols | f64 × rows·cols
//
// Checkpoint blob:
//
//   "PLNB" | u32 version | u32 config_len | config (UTF-8 JSON) |
//   u32 count | entries
//
// Wire frame:
//
//   "PLN1" | u8 message type | u32 body_len | entries (body_len bytes)
//
// so a frame occupies 9 + Σ (2 + name_len + 8 + 8·numel) bytes.

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "promptagg/tensor.hpp"

namespace promptagg {

struct NamedTensor {
  std::string name;
  Matrix value;
};
using TensorList = std::vector<NamedTensor>;
using Bytes = std::vector<std::uint8_t>;

inline constexpr std::uint32_t kBlobVersion = 1;

/// Σ numel · 8: the tensor-data size used for communication accounting.
std::size_t tensor_data_bytes(const TensorList& tensors);

struct Checkpoint {
  std::uint32_t version = kBlobVersion;
  std::string config;
  TensorList tensors;
};

Bytes encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

enum class MessageType : std::uint8_t {
  kGlobalPrompts = 1,      // server -> client, stage 1
  kLocalPrompts = 2,       // client -> server, stage 1
  kAggregationBundle = 3,  // server -> client, stage 2: all local prompts + aggregators
  kLocalAggregators = 4,   // client -> server, stage 2
};

const char* message_type_name(MessageType type);

struct Frame {
  MessageType type = MessageType::kGlobalPrompts;
  TensorList tensors;
};

Bytes encode_frame(const Frame& frame);
/// Throws ProtocolError on bad magic, unknown type, or truncation.
Frame decode_frame(std::span<const std::uint8_t> bytes);
/// Exact encoded size of a frame carrying `tensors`.
std::size_t frame_size(const TensorList& tensors);

/// FNV-1a over names, shapes, and raw value bytes.
std::uint64_t content_hash(const TensorList& tensors);

/// Looks up `name`; throws ProtocolError if absent.
const Matrix& find_tensor(const TensorList& tensors, const std::string& name);

}  // namespace promptagg
