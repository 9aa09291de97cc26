// SPDX-License-Identifier: Apache-2.0
#pragma once

// Loss layers on an n×C matrix of batch scores F[j,y] = f_y(x_j; w).
//
// Both losses are log-likelihoods to be maximized, and both return their
// gradient with respect to every score, so the same backward pass through
// the network serves either one. Only the direction of the normalization
// differs: the discriminative loss normalizes each row over classes, the
// generative loss normalizes each column over the batch, which stands in for
// samples from the reference distribution q(x).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "tiltnet/error.hpp"
#include "tiltnet/tensor.hpp"

namespace tiltnet {

/// Row-major n×C matrix. The tag keeps scores and loss gradients apart.
template <typename Tag>
class BatchMatrix {
 public:
  BatchMatrix() = default;
  BatchMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  BatchMatrix(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_) throw ShapeError("batch matrix data length mismatch");
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  double& operator()(std::size_t j, std::size_t y) { return values_[j * cols_ + y]; }
  double operator()(std::size_t j, std::size_t y) const { return values_[j * cols_ + y]; }
  std::span<const double> row(std::size_t j) const { return {values_.data() + j * cols_, cols_}; }
  std::span<double> data() noexcept { return values_; }
  std::span<const double> data() const noexcept { return values_; }

  friend bool operator==(const BatchMatrix&, const BatchMatrix&) = default;

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> values_;
};

struct ScoreTag {};
struct LossGradTag {};

/// F[j,y] = f_y(x_j; w).
using ScoreMatrix = BatchMatrix<ScoreTag>;
/// G[j,y] = ∂(batch log-likelihood)/∂f_y(x_j).
using LossGrad = BatchMatrix<LossGradTag>;

using LabelVector = std::vector<std::size_t>;

struct LossResult {
  double value = 0.0;
  LossGrad grad;
};

struct ImportanceWeights {
  std::vector<double> weights;
  double ess = 0.0;
};

namespace detail {

inline void validate_scores(const ScoreMatrix& scores) {
  if (scores.rows() < 1) throw ShapeError("score matrix needs at least one row");
  if (!all_finite(scores.data())) throw NumericError("non-finite score in loss layer input");
}

inline void validate_labels(const ScoreMatrix& scores, const LabelVector& labels) {
  if (labels.size() != scores.rows())
    throw ShapeError("label count " + std::to_string(labels.size()) + " does not match batch size " +
                     std::to_string(scores.rows()));
  for (std::size_t y : labels)
    if (y >= scores.cols())
      throw ShapeError("label " + std::to_string(y) + " out of range for " +
                       std::to_string(scores.cols()) + " classes");
}

// log Σ exp(v_k) over a strided sequence, stabilized by the maximum.
template <typename Get>
double logsumexp(std::size_t count, Get get) {
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < count; ++k) hi = std::max(hi, get(k));
  double s = 0.0;
  for (std::size_t k = 0; k < count; ++k) s += std::exp(get(k) - hi);
  return hi + std::log(s);
}

}  // namespace detail

/// Multi-class logistic log-likelihood Σ_j log softmax(F[j,·])[y_j] and its
/// gradient G[j,y] = 1{y = y_j} − softmax(F[j,·])[y].
inline LossResult disc_loss_and_grad(const ScoreMatrix& scores, const LabelVector& labels) {
  detail::validate_scores(scores);
  detail::validate_labels(scores, labels);
  if (scores.cols() < 2) throw ShapeError("discriminative loss needs at least two classes");
  const std::size_t n = scores.rows(), classes = scores.cols();
  LossResult r{0.0, LossGrad(n, classes)};
  for (std::size_t j = 0; j < n; ++j) {
    const double lse = detail::logsumexp(classes, [&](std::size_t y) { return scores(j, y); });
    r.value += scores(j, labels[j]) - lse;
    for (std::size_t y = 0; y < classes; ++y)
      r.grad(j, y) = (y == labels[j] ? 1.0 : 0.0) - std::exp(scores(j, y) - lse);
  }
  op_counts().loss_ops += 3 * n * classes;
  return r;
}

/// 1 / Σ W_j². Requires weights summing to one within 1e-12.
inline double effective_sample_size(std::span<const double> weights) {
  double sum = 0.0, sum_sq = 0.0;
  for (double w : weights) {
    if (w < 0.0 || !std::isfinite(w)) throw NumericError("importance weights must be finite and non-negative");
    sum += w;
    sum_sq += w * w;
  }
  if (weights.empty() || std::abs(sum - 1.0) > 1e-12)
    throw NumericError("importance weights are not normalized (sum " + std::to_string(sum) + ")");
  return 1.0 / sum_sq;
}

/// Normalized importance weights W_j ∝ exp(F[j,y]) over the batch for one
/// class, with the effective sample size attached.
inline ImportanceWeights importance_weights(const ScoreMatrix& scores, std::size_t y) {
  detail::validate_scores(scores);
  if (y >= scores.cols()) throw ShapeError("class " + std::to_string(y) + " out of range");
  const std::size_t n = scores.rows();
  const double lse = detail::logsumexp(n, [&](std::size_t k) { return scores(k, y); });
  ImportanceWeights w;
  w.weights.resize(n);
  for (std::size_t j = 0; j < n; ++j) w.weights[j] = std::exp(scores(j, y) - lse);
  // Renormalize so the sum is one to rounding, as the ESS estimator demands.
  double total = 0.0;
  for (double v : w.weights) total += v;
  for (double& v : w.weights) v /= total;
  w.ess = effective_sample_size(w.weights);
  return w;
}

/// Batch generative log-likelihood with the batch as the sample from q(x):
///   l_G = Σ_i [ F[i,y_i] − log( Σ_k exp(F[k,y_i]) / n ) ]
/// and its gradient, aggregated over the examples i sharing a label:
///   G[j,y] = 1{y_j = y} − n_y · W_y[j],   W_y = softmax over the batch of F[·,y].
/// Columns of classes absent from the batch are zero.
inline LossResult gen_loss_and_grad(const ScoreMatrix& scores, const LabelVector& labels) {
  detail::validate_scores(scores);
  detail::validate_labels(scores, labels);
  const std::size_t n = scores.rows(), classes = scores.cols();
  if (n < 2) throw ShapeError("generative loss needs a batch of at least two examples");

  std::vector<std::size_t> class_count(classes, 0);
  for (std::size_t y : labels) ++class_count[y];

  std::vector<double> column_lse(classes, 0.0);
  LossResult r{0.0, LossGrad(n, classes)};
  const double log_n = std::log(static_cast<double>(n));
  for (std::size_t y = 0; y < classes; ++y) {
    if (class_count[y] == 0) continue;
    const double lse = detail::logsumexp(n, [&](std::size_t k) { return scores(k, y); });
    column_lse[y] = lse;
    const double ny = static_cast<double>(class_count[y]);
    for (std::size_t j = 0; j < n; ++j) r.grad(j, y) = -ny * std::exp(scores(j, y) - lse);
  }
  for (std::size_t i = 0; i < n; ++i) {
    r.grad(i, labels[i]) += 1.0;
    r.value += scores(i, labels[i]) - (column_lse[labels[i]] - log_n);
  }
  op_counts().loss_ops += 3 * n * classes;
  return r;
}

/// Which loss layer feeds the backward pass.
enum class LossKind { discriminative, generative };

inline LossResult loss_and_grad(LossKind kind, const ScoreMatrix& scores, const LabelVector& labels) {
  return kind == LossKind::generative ? gen_loss_and_grad(scores, labels)
                                      : disc_loss_and_grad(scores, labels);
}

/// ESS of every class present in the batch; absent classes are reported as 0.
inline std::vector<double> per_class_ess(const ScoreMatrix& scores, const LabelVector& labels) {
  std::vector<bool> present(scores.cols(), false);
  for (std::size_t y : labels) present.at(y) = true;
  std::vector<double> ess(scores.cols(), 0.0);
  for (std::size_t y = 0; y < scores.cols(); ++y)
    if (present[y]) ess[y] = importance_weights(scores, y).ess;
  return ess;
}

}  // namespace tiltnet
