// Copyright (c) 2026, The promptagg Authors
// SPDX-License-Identifier: Apache-2.0

#include "promptagg/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

namespace promptagg {

namespace {

constexpr char kBlobMagic[4] = {'P', 'L', 'N', 'B'};
constexpr char kFrameMagic[4] = {'P', 'L', 'N', '1'};

class Writer {
 public:
  explicit Writer(Bytes& out) : out_(out) {}

  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  template <typename T>
  void uint(T v) {
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      out_.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
    }
  }
  void f64(double v) { uint(std::bit_cast<std::uint64_t>(v)); }

  void entry(const NamedTensor& t) {
    if (t.name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw ProtocolError("tensor name too long: " + t.name.substr(0, 32) + "...");
    }
    uint(static_cast<std::uint16_t>(t.name.size()));
    raw(t.name.data(), t.name.size());
    uint(static_cast<std::uint32_t>(t.value.rows()));
    uint(static_cast<std::uint32_t>(t.value.cols()));
    for (Index i = 0; i < t.value.size(); ++i) f64(t.value.data()[i]);
  }

 private:
  Bytes& out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return in_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n) {
      throw ProtocolError(std::string("truncated input while reading ") + what, pos_);
    }
  }
  template <typename T>
  T uint(const char* what) {
    need(sizeof(T), what);
    T v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<T>(static_cast<T>(in_[pos_ + i]) << (8 * i));
    }
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(in_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  NamedTensor entry() {
    NamedTensor t;
    const auto len = uint<std::uint16_t>("tensor name length");
    t.name = str(len, "tensor name");
    const auto rows = uint<std::uint32_t>("tensor rows");
    const auto cols = uint<std::uint32_t>("tensor cols");
    const std::uint64_t n = static_cast<std::uint64_t>(rows) * cols;
    if (n > remaining() / 8) {
      throw ProtocolError("truncated tensor data for '" + t.name + "'", pos_);
    }
    t.value.resize(rows, cols);
    for (std::uint64_t i = 0; i < n; ++i) {
      t.value.data()[i] = std::bit_cast<double>(uint<std::uint64_t>("tensor data"));
    }
    return t;
  }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

void check_magic(Reader& r, const char (&magic)[4], const char* what) {
  const std::string got = r.str(4, what);
  if (std::memcmp(got.data(), magic, 4) != 0) throw ProtocolError(std::string("bad ") + what, 0);
}

std::size_t entry_size(const NamedTensor& t) {
  return 2 + t.name.size() + 8 + 8 * static_cast<std::size_t>(t.value.size());
}

}  // namespace

std::size_t tensor_data_bytes(const TensorList& tensors) {
  std::size_t n = 0;
  for (const auto& t : tensors) n += 8 * static_cast<std::size_t>(t.value.size());
  return n;
}

Bytes encode_checkpoint(const Checkpoint& ckpt) {
  Bytes out;
  Writer w(out);
  w.raw(kBlobMagic, 4);
  w.uint(ckpt.version);
  w.uint(static_cast<std::uint32_t>(ckpt.config.size()));
  w.raw(ckpt.config.data(), ckpt.config.size());
  w.uint(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& t : ckpt.tensors) w.entry(t);
  return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  check_magic(r, kBlobMagic, "checkpoint magic");
  Checkpoint ckpt;
  ckpt.version = r.uint<std::uint32_t>("version");
  if (ckpt.version != kBlobVersion) {
    throw ProtocolError("unsupported checkpoint version " + std::to_string(ckpt.version), 4);
  }
  const auto cfg_len = r.uint<std::uint32_t>("config length");
  ckpt.config = r.str(cfg_len, "config");
  const auto count = r.uint<std::uint32_t>("tensor count");
  for (std::uint32_t i = 0; i < count; ++i) ckpt.tensors.push_back(r.entry());
  if (r.remaining() != 0) throw ProtocolError("trailing bytes after checkpoint", r.offset());
  return ckpt;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  const Bytes bytes = encode_checkpoint(ckpt);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("failed writing " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ProtocolError("cannot open checkpoint " + path.string());
  Bytes bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

const char* message_type_name(MessageType type) {
  switch (type) {
    case MessageType::kGlobalPrompts:
      return "global_prompts";
    case MessageType::kLocalPrompts:
      return "local_prompts";
    case MessageType::kAggregationBundle:
      return "aggregation_bundle";
    case MessageType::kLocalAggregators:
      return "local_aggregators";
  }
  return "unknown";
}

std::size_t frame_size(const TensorList& tensors) {
  std::size_t n = 4 + 1 + 4;
  for (const auto& t : tensors) n += entry_size(t);
  return n;
}

Bytes encode_frame(const Frame& frame) {
  Bytes out;
  out.reserve(frame_size(frame.tensors));
  Writer w(out);
  w.raw(kFrameMagic, 4);
  w.uint(static_cast<std::uint8_t>(frame.type));
  std::size_t body = 0;
  for (const auto& t : frame.tensors) body += entry_size(t);
  if (body > std::numeric_limits<std::uint32_t>::max()) throw ProtocolError("frame too large");
  w.uint(static_cast<std::uint32_t>(body));
  for (const auto& t : frame.tensors) w.entry(t);
  return out;
}

Frame decode_frame(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  check_magic(r, kFrameMagic, "frame magic");
  Frame frame;
  const auto type = r.uint<std::uint8_t>("message type");
  if (type < 1 || type > 4) {
    throw ProtocolError("unknown message type " + std::to_string(type), 4);
  }
  frame.type = static_cast<MessageType>(type);
  const auto body = r.uint<std::uint32_t>("body length");
  if (r.remaining() < body) {
    throw ProtocolError("truncated frame: body declares " + std::to_string(body) + " bytes, " +
                            std::to_string(r.remaining()) + " present",
                        r.offset());
  }
  if (r.remaining() > body) throw ProtocolError("trailing bytes after frame body", 9 + body);
  while (r.remaining() > 0) frame.tensors.push_back(r.entry());
  return frame;
}

std::uint64_t content_hash(const TensorList& tensors) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& t : tensors) {
    mix(t.name.data(), t.name.size());
    const std::int64_t shape[2] = {t.value.rows(), t.value.cols()};
    mix(shape, sizeof(shape));
    mix(t.value.data(), sizeof(double) * static_cast<std::size_t>(t.value.size()));
  }
  return h;
}

const Matrix& find_tensor(const TensorList& tensors, const std::string& name) {
  for (const auto& t : tensors) {
    if (t.name == name) return t.value;
  }
  throw ProtocolError("missing tensor '" + name + "'");
}

}  // namespace promptagg
