// SPDX-License-Identifier: Apache-2.0
#pragma once

// Test-side oracles. Deliberately independent of the library's own
// gradient-check helpers so that a bug there cannot hide a bug here.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "tiltnet/loss.hpp"
#include "tiltnet/tensor.hpp"

namespace oracle {

inline tiltnet::Tensor random_tensor(const tiltnet::Shape& shape, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  tiltnet::Tensor t(shape);
  for (double& v : t.data()) v = n(rng);
  return t;
}

/// Central differences of a scalar function of `x`, perturbing in place.
inline std::vector<double> numeric_grad(std::vector<double>& x, const std::function<double()>& f, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = f();
    x[i] = saved - h;
    const double down = f();
    x[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

inline std::vector<double> numeric_grad(tiltnet::Tensor& t, const std::function<double()>& f, double h = 1e-5) {
  std::vector<double> x(t.data().begin(), t.data().end());
  auto g = numeric_grad(
      x,
      [&] {
        std::copy(x.begin(), x.end(), t.data().begin());
        return f();
      },
      h);
  std::copy(x.begin(), x.end(), t.data().begin());
  return g;
}

/// ‖a − b‖ / max(‖a‖, ‖b‖, tiny).
inline double rel_error(std::span<const double> a, std::span<const double> b) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), 1e-300});
}

/// Nested-loop cross-correlation, the textbook definition.
inline tiltnet::Tensor naive_conv(const tiltnet::Tensor& in, const tiltnet::Tensor& k, const tiltnet::Tensor& b,
                                  std::size_t stride, std::size_t pad) {
  const long C = long(in.extent(0)), H = long(in.extent(1)), W = long(in.extent(2));
  const long O = long(k.extent(0)), kh = long(k.extent(2)), kw = long(k.extent(3));
  const long oh = (H + 2 * long(pad) - kh) / long(stride) + 1, ow = (W + 2 * long(pad) - kw) / long(stride) + 1;
  tiltnet::Tensor out({std::size_t(O), std::size_t(oh), std::size_t(ow)});
  for (long o = 0; o < O; ++o)
    for (long y = 0; y < oh; ++y)
      for (long x = 0; x < ow; ++x) {
        double s = b[std::size_t(o)];
        for (long c = 0; c < C; ++c)
          for (long i = 0; i < kh; ++i)
            for (long j = 0; j < kw; ++j) {
              const long r = y * long(stride) + i - long(pad), q = x * long(stride) + j - long(pad);
              if (r < 0 || r >= H || q < 0 || q >= W) continue;
              s += in.at(std::size_t(c), std::size_t(r), std::size_t(q)) *
                   k[std::size_t(((o * C + c) * kh + i) * kw + j)];
            }
        out.at(std::size_t(o), std::size_t(y), std::size_t(x)) = s;
      }
  return out;
}

inline double weighted_sum(const tiltnet::Tensor& t, const tiltnet::Tensor& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += t[i] * w[i];
  return s;
}

inline tiltnet::ScoreMatrix random_scores(std::size_t n, std::size_t c, std::mt19937_64& rng, double scale = 2.0) {
  std::normal_distribution<double> d(0.0, scale);
  tiltnet::ScoreMatrix f(n, c);
  for (double& v : f.data()) v = d(rng);
  return f;
}

inline tiltnet::LabelVector random_labels(std::size_t n, std::size_t c, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> d(0, c - 1);
  tiltnet::LabelVector y(n);
  for (auto& v : y) v = d(rng);
  return y;
}

// Unstabilized long-double evaluations straight from the definitions.
inline long double naive_disc(const tiltnet::ScoreMatrix& f, const tiltnet::LabelVector& y) {
  long double total = 0;
  for (std::size_t j = 0; j < f.rows(); ++j) {
    long double z = 0;
    for (std::size_t c = 0; c < f.cols(); ++c) z += std::exp((long double)f(j, c));
    total += f(j, y[j]) - std::log(z);
  }
  return total;
}

inline long double naive_gen(const tiltnet::ScoreMatrix& f, const tiltnet::LabelVector& y) {
  const std::size_t n = f.rows();
  long double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    long double z = 0;
    for (std::size_t k = 0; k < n; ++k) z += std::exp((long double)f(k, y[i]));
    total += f(i, y[i]) - std::log(z / n);
  }
  return total;
}

// Σ_i ∂ log p_{y_i}(x_i)/∂f_y(x_j) with the three cases written out per i.
inline std::vector<double> triple_loop_gen_grad(const tiltnet::ScoreMatrix& f, const tiltnet::LabelVector& lab) {
  const std::size_t n = f.rows(), c = f.cols();
  std::vector<double> g(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    long double z = 0;
    for (std::size_t k = 0; k < n; ++k) z += std::exp((long double)f(k, lab[i]));
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t y = 0; y < c; ++y) {
        if (y != lab[i]) continue;
        const long double w = std::exp((long double)f(j, y)) / z;
        g[j * c + y] += double(j == i ? 1 - w : -w);
      }
  }
  return g;
}

inline std::vector<double> fd_grad(tiltnet::ScoreMatrix f, const tiltnet::LabelVector& y, tiltnet::LossKind kind) {
  std::vector<double> x(f.data().begin(), f.data().end());
  return oracle::numeric_grad(x, [&] {
    std::copy(x.begin(), x.end(), f.data().begin());
    return tiltnet::loss_and_grad(kind, f, y).value;
  });
}

}  // namespace oracle
