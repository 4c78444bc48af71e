#pragma once

// Parameter registry, seeded initializers and the small layers shared by the
// encoder, the guidance blocks and the decoder.

#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "swintext/errors.hpp"
#include "swintext/ops.hpp"
#include "swintext/tensor.hpp"

namespace swintext {

/// Portable seeded generator. The standard distributions are
/// implementation-defined, so the conversions are done here.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * std::numbers::pi * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * std::numbers::pi * u2);
  }

  /// Normal(0, std) redrawn outside +-2 std.
  double trunc_normal(double std) {
    for (;;) {
      const double z = normal();
      if (std::abs(z) <= 2.0) return z * std;
    }
  }

  std::size_t below(std::size_t n) { return static_cast<std::size_t>(uniform() * static_cast<double>(n)); }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

/// Mixes several integers into one seed (splitmix64 finalizer).
inline std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x9E3779B97F4A7C15ULL;
  for (auto p : parts) {
    h ^= p + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
    h ^= h >> 30;
    h *= 0xBF58476D1CE4E5B9ULL;
    h ^= h >> 27;
    h *= 0x94D049BB133111EBULL;
    h ^= h >> 31;
  }
  return h;
}

/// Named trainable tensors, iterated in name order.
template <class T>
class ParamStore {
 public:
  Tensor<T> add(const std::string& name, Tensor<T> tensor) {
    if (params_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    tensor.set_requires_grad(true);
    params_.emplace(name, tensor);
    return tensor;
  }

  Tensor<T> zeros(const std::string& name, Shape shape) { return add(name, Tensor<T>::zeros(std::move(shape))); }

  Tensor<T> ones(const std::string& name, Shape shape) { return add(name, Tensor<T>::full(std::move(shape), T(1))); }

  Tensor<T> trunc_normal(const std::string& name, Shape shape, Rng& rng, double std = 0.02) {
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.trunc_normal(std));
    return add(name, Tensor<T>(std::move(shape), std::move(v)));
  }

  const Tensor<T>& get(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw ConfigError("unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  const std::map<std::string, Tensor<T>>& all() const { return params_; }
  std::size_t size() const { return params_.size(); }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
  }

  std::size_t elements_with_prefix(const std::string& prefix) const {
    std::size_t n = 0;
    for (const auto& [name, t] : params_)
      if (name.rfind(prefix, 0) == 0) n += t.numel();
    return n;
  }

  void zero_grad() {
    for (auto& [_, t] : params_) {
      Tensor<T> copy = t;
      copy.zero_grad();
    }
  }

 private:
  std::map<std::string, Tensor<T>> params_;
};

template <class T>
struct Linear {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out] or undefined

  static Linear create(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
                       bool with_bias = true) {
    Linear l;
    l.weight = store.trunc_normal(name + ".weight", {in, out}, rng);
    if (with_bias) l.bias = store.zeros(name + ".bias", {out});
    return l;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight, bias); }
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

template <class T>
struct LayerNorm {
  Tensor<T> gamma;
  Tensor<T> beta;
  double eps = 1e-5;

  static LayerNorm create(ParamStore<T>& store, const std::string& name, std::size_t dim, double eps) {
    return {store.ones(name + ".weight", {dim}), store.zeros(name + ".bias", {dim}), eps};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma, beta, eps); }
};

/// Linear(C -> ratio*C) - GELU - Linear(ratio*C -> C).
template <class T>
struct Mlp {
  Linear<T> fc1;
  Linear<T> fc2;

  static Mlp create(ParamStore<T>& store, const std::string& name, std::size_t dim, std::size_t ratio, Rng& rng) {
    Mlp m;
    m.fc1 = Linear<T>::create(store, name + ".fc1", dim, dim * ratio, rng);
    m.fc2 = Linear<T>::create(store, name + ".fc2", dim * ratio, dim, rng);
    return m;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(gelu(fc1(x))); }
};

template <class T>
struct Conv2d {
  Tensor<T> weight;  // [out, in, k, k]
  Tensor<T> bias;

  static Conv2d create(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                       std::size_t kernel, Rng& rng) {
    Conv2d c;
    c.weight = store.trunc_normal(name + ".weight", {out, in, kernel, kernel}, rng);
    c.bias = store.zeros(name + ".bias", {out});
    return c;
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight, bias, weight.dim(2) / 2); }
};

template <class T>
struct GroupNorm {
  std::size_t groups = 1;
  Tensor<T> gamma;
  Tensor<T> beta;
  double eps = 1e-5;

  static GroupNorm create(ParamStore<T>& store, const std::string& name, std::size_t channels, std::size_t groups,
                          double eps) {
    return {groups, store.ones(name + ".weight", {channels}), store.zeros(name + ".bias", {channels}), eps};
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return group_norm(x, groups, gamma, beta, eps); }
};

}  // namespace swintext
