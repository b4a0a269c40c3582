// SPDX-License-Identifier: Apache-2.0
//
// Test-only helpers: random inputs, tiny configs and a central-difference
// gradient checker that never touches the tape's backward path.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "drexperts/model.hpp"
#include "drexperts/tensor.hpp"

namespace drexperts::testing {

inline MatrixXr random_matrix(Index rows, Index cols, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> normal(0.0, sd);
  MatrixXr m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  return m;
}

inline ModelConfig tiny_config(Index n, Index dim) {
  ModelConfig c;
  c.n_tokens = n;
  c.semantic_dim = dim;
  c.prior_dim = dim;
  c.attn_dim = dim;
  c.value_dim = dim;
  c.ffn_hidden = 2 * dim;
  c.wg_hidden = 2 * dim;
  return c;
}

inline EmbeddingSample random_sample(const ModelConfig& c, std::mt19937_64& rng,
                                     const std::string& id = "img") {
  EmbeddingSample s;
  s.image_id = id;
  s.f_tokens = random_matrix(c.n_tokens, c.semantic_dim, rng);
  s.class_token = random_matrix(1, c.semantic_dim, rng);
  s.prior_tokens = random_matrix(c.n_tokens, c.prior_dim, rng);
  s.mos = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  return s;
}

inline PriorVocabulary random_vocabulary(Index prior_dim, std::mt19937_64& rng) {
  return PriorVocabulary(random_matrix(static_cast<Index>(kNumDistortions), prior_dim, rng));
}

/// Redraws every parameter entry so that gradient checks do not sit on the
/// zero-initialised output layers or the default scalars. Weights are
/// U(-0.9, 0.9) / sqrt(fan_in) to keep activations O(1); biases and scalars
/// are U(-0.9, 0.9).
inline void randomize(ModelParams& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.9, 0.9);
  visit_parameters([&](const std::string&, ParamKind kind, MatrixXr& m) {
    const double s = kind == ParamKind::kWeight ? 1.0 / std::sqrt(static_cast<double>(m.rows())) : 1.0;
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = s * u(rng);
  },
                   p.tensors);
}

struct GradCheckResult {
  double worst_relative_error = 0.0;
  std::string worst_parameter;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
};

/// Compares tape gradients of `loss_of(params)` with a fourth-order central
/// difference for every entry of every parameter tensor.
///
/// Relative error is |a - n| / max(|a| + |n|, floor * max(1, |loss|)).
/// Difference roundoff grows like eps * |loss| / h, so entries whose true
/// gradient sits below that resolution are judged on an absolute scale
/// that grows with the loss.
inline GradCheckResult check_gradients(
    ModelParams params, const std::function<Tensor(Tape&, const ParameterSet<Tensor>&,
                                                   const ModelParams&)>& loss_of,
    double h = 1e-4, double floor = 1e-7) {
  Tape tape;
  const auto bound = bind(tape, params);
  const Tensor loss = loss_of(tape, bound, params);
  backward(loss);
  const double scaled_floor = floor * std::max(1.0, std::abs(loss.item()));

  auto eval = [&](const ModelParams& p) {
    Tape t;
    return loss_of(t, bind(t, p), p).item();
  };

  GradCheckResult result;
  ModelParams probe = params;
  visit_parameters(
      [&](const std::string& name, ParamKind, const MatrixXr&, const Tensor& slot,
          MatrixXr& value) {
        if (!slot.valid() || !slot.requires_grad()) return;
        const MatrixXr analytic = slot.grad();
        for (Index i = 0; i < value.size(); ++i) {
          const double saved = value.data()[i];
          auto at = [&](double offset) {
            value.data()[i] = saved + offset;
            return eval(probe);
          };
          const double numeric = (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h);
          value.data()[i] = saved;
          const double a = analytic.data()[i];
          const double err = std::abs(a - numeric) / std::max(std::abs(a) + std::abs(numeric), scaled_floor);
          ++result.checked;
          if (err > result.worst_relative_error) {
            result.worst_relative_error = err;
            result.worst_parameter = name + "[" + std::to_string(i) + "]";
            result.worst_analytic = a;
            result.worst_numeric = numeric;
          }
        }
      },
      params.tensors, bound, probe.tensors);
  return result;
}

}  // namespace drexperts::testing
