#pragma once

// STUN checkpoints (little-endian):
//   "STUN" | u32 version=1 | u32 count
//   count x ( u32 name length | name | u32 rank | rank x u32 dims | f32 payload )
//   u32 config length | config text
// Tensors are written in name order, so save -> load -> save is byte-stable.

#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "swintext/config.hpp"
#include "swintext/errors.hpp"
#include "swintext/nn.hpp"
#include "swintext/tensor.hpp"
#include "swintext/text.hpp"

namespace swintext {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointTensor {
  Shape shape;
  std::vector<float> values;
};

struct Checkpoint {
  std::map<std::string, CheckpointTensor> tensors;
  std::string config;
};

inline std::string encode_checkpoint(const Checkpoint& ck) {
  std::string out = "STUN";
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(ck.tensors.size()));
  for (const auto& [name, t] : ck.tensors) {
    detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put_u32(out, static_cast<std::uint32_t>(t.shape.size()));
    for (auto d : t.shape) detail::put_u32(out, static_cast<std::uint32_t>(d));
    for (float f : t.values) detail::put_f32(out, f);
  }
  detail::put_u32(out, static_cast<std::uint32_t>(ck.config.size()));
  out += ck.config;
  return out;
}

inline Checkpoint decode_checkpoint(const std::string& bytes) {
  detail::ByteReader in(bytes, "STUN");
  if (bytes.size() < 4 || bytes.compare(0, 4, "STUN") != 0) in.fail("bad magic, expected \"STUN\"", 0);
  in.take(4, "magic");
  const auto version_at = in.offset();
  const auto version = in.u32("version");
  if (version != kCheckpointVersion) in.fail("unsupported version " + std::to_string(version), version_at);
  const auto count = in.u32("tensor count");
  Checkpoint ck;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto at = in.offset();
    const auto len = in.u32("name length");
    const std::string name = in.take(len, "tensor name");
    const auto rank_at = in.offset();
    const auto rank = in.u32("rank");
    if (rank > 8) in.fail("rank " + std::to_string(rank) + " of '" + name + "' exceeds 8", rank_at);
    CheckpointTensor t;
    std::uint64_t numel = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      const auto dim_at = in.offset();
      const auto d = in.u32("dim");
      numel *= d;
      if (d == 0) in.fail("zero dim in '" + name + "'", dim_at);
      if (numel > (std::uint64_t{1} << 40)) in.fail("dims of '" + name + "' overflow", dim_at);
      t.shape.push_back(d);
    }
    in.need(static_cast<std::size_t>(numel) * 4, "payload of '" + name + "'");
    t.values.resize(static_cast<std::size_t>(numel));
    for (auto& f : t.values) f = in.f32("value");
    if (!ck.tensors.emplace(name, std::move(t)).second) in.fail("duplicate tensor name '" + name + "'", at);
  }
  const auto len = in.u32("config length");
  ck.config = in.take(len, "config text");
  if (!in.done()) in.fail(std::to_string(in.remaining()) + " trailing bytes", in.offset());
  return ck;
}

template <class T>
Checkpoint make_checkpoint(const ParamStore<T>& params, const std::string& config_text) {
  Checkpoint ck;
  ck.config = config_text;
  for (const auto& [name, p] : params.all()) {
    CheckpointTensor t{p.shape(), std::vector<float>(p.numel())};
    const auto d = p.data();
    for (std::size_t i = 0; i < d.size(); ++i) t.values[i] = static_cast<float>(d[i]);
    ck.tensors.emplace(name, std::move(t));
  }
  return ck;
}

/// Copies checkpoint values into `params`. Every parameter must be present
/// with the same shape; extra tensors in the file are an error too.
template <class T>
void load_into(const Checkpoint& ck, ParamStore<T>& params) {
  for (const auto& [name, p] : params.all()) {
    auto it = ck.tensors.find(name);
    if (it == ck.tensors.end()) throw ShapeError("checkpoint has no tensor '" + name + "'");
    if (it->second.shape != p.shape()) {
      throw ShapeError("tensor '" + name + "' has shape " + shape_str(it->second.shape) + " in the checkpoint, model expects " +
                       shape_str(p.shape()));
    }
  }
  for (const auto& [name, _] : ck.tensors)
    if (!params.contains(name)) throw ShapeError("checkpoint tensor '" + name + "' is not a model parameter");
  for (const auto& [name, p] : params.all()) {
    Tensor<T> dst = p;
    const auto& src = ck.tensors.at(name).values;
    auto d = dst.mutable_data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<T>(src[i]);
  }
}

template <class T>
void save_checkpoint(const std::string& path, const ParamStore<T>& params, const std::string& config_text) {
  detail::write_file_bytes(path, encode_checkpoint(make_checkpoint(params, config_text)));
}

inline Checkpoint read_checkpoint(const std::string& path) {
  return decode_checkpoint(detail::read_file_bytes(path));
}

}  // namespace swintext
