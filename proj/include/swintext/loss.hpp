#pragma once

// Dice + binary cross-entropy objective and overlap metrics.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "swintext/config.hpp"
#include "swintext/errors.hpp"
#include "swintext/ops.hpp"
#include "swintext/tensor.hpp"

namespace swintext {

inline constexpr double kProbClamp = 1e-7;

namespace detail {

template <class T>
void check_same_shape(const Tensor<T>& probs, const Tensor<T>& target, const char* what) {
  if (probs.shape() != target.shape()) {
    throw ShapeError(std::string(what) + ": prediction " + shape_str(probs.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
}

}  // namespace detail

/// 1 - (2 sum(y p) + eps) / (sum(y) + sum(p) + eps), summed over every pixel
/// of the batch.
template <class T>
Tensor<T> dice_loss(const Tensor<T>& probs, const Tensor<T>& target, double eps = 1e-6) {
  detail::check_same_shape(probs, target, "dice loss");
  const auto inter = sum(mul(probs, target));
  const auto denom = add_scalar(add(sum(probs), sum(target)), static_cast<T>(eps));
  const auto ratio = div(add_scalar(scale(inter, T(2)), static_cast<T>(eps)), denom);
  return add_scalar(scale(ratio, T(-1)), T(1));
}

/// Mean binary cross-entropy over all pixels, probabilities clamped to
/// [1e-7, 1 - 1e-7].
template <class T>
Tensor<T> ce_loss(const Tensor<T>& probs, const Tensor<T>& target) {
  detail::check_same_shape(probs, target, "cross-entropy loss");
  const auto p = clamp(probs, static_cast<T>(kProbClamp), static_cast<T>(1.0 - kProbClamp));
  const auto one_minus_p = add_scalar(scale(p, T(-1)), T(1));
  const auto one_minus_y = add_scalar(scale(target, T(-1)), T(1));
  const auto ll = add(mul(target, log(p)), mul(one_minus_y, log(one_minus_p)));
  return scale(mean(ll), T(-1));
}

template <class T>
struct LossTerms {
  Tensor<T> total;
  Tensor<T> dice;
  Tensor<T> ce;
};

template <class T>
LossTerms<T> hybrid_loss_terms(const Tensor<T>& probs, const Tensor<T>& target, const LossConfig& cfg) {
  cfg.validate();
  LossTerms<T> t;
  t.dice = dice_loss(probs, target, cfg.eps);
  t.ce = ce_loss(probs, target);
  t.total = add(scale(t.dice, static_cast<T>(cfg.lambda_dice)), scale(t.ce, static_cast<T>(cfg.lambda_ce)));
  return t;
}

template <class T>
Tensor<T> hybrid_loss(const Tensor<T>& probs, const Tensor<T>& target, const LossConfig& cfg) {
  return hybrid_loss_terms(probs, target, cfg).total;
}

struct OverlapCounts {
  std::uint64_t tp = 0, fp = 0, fn = 0;

  OverlapCounts& operator+=(const OverlapCounts& o) {
    tp += o.tp;
    fp += o.fp;
    fn += o.fn;
    return *this;
  }

  /// 2TP / (2TP + FP + FN); 1 when both masks are empty.
  double dice() const {
    const auto d = 2 * tp + fp + fn;
    return d == 0 ? 1.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(d);
  }

  /// TP / (TP + FP + FN); 1 when both masks are empty.
  double iou() const {
    const auto d = tp + fp + fn;
    return d == 0 ? 1.0 : static_cast<double>(tp) / static_cast<double>(d);
  }
};

/// Counts on masks thresholded at 0.5 (a value is foreground when >= 0.5).
template <class A, class B>
OverlapCounts overlap_counts(std::span<const A> pred, std::span<const B> truth) {
  if (pred.size() != truth.size()) {
    throw ShapeError("metric inputs differ in size: " + std::to_string(pred.size()) + " vs " +
                     std::to_string(truth.size()));
  }
  OverlapCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = static_cast<double>(pred[i]) >= 0.5;
    const bool t = static_cast<double>(truth[i]) >= 0.5;
    c.tp += p && t;
    c.fp += p && !t;
    c.fn += !p && t;
  }
  return c;
}

template <class A, class B>
OverlapCounts overlap_counts(const std::vector<A>& pred, const std::vector<B>& truth) {
  return overlap_counts(std::span<const A>(pred), std::span<const B>(truth));
}

struct DiceIou {
  double dice = 0.0;
  double iou = 0.0;
};

template <class A, class B>
DiceIou dice_iou_metrics(std::span<const A> pred, std::span<const B> truth) {
  const auto c = overlap_counts(pred, truth);
  return {c.dice(), c.iou()};
}

template <class A, class B>
DiceIou dice_iou_metrics(const std::vector<A>& pred, const std::vector<B>& truth) {
  return dice_iou_metrics(std::span<const A>(pred), std::span<const B>(truth));
}

}  // namespace swintext
