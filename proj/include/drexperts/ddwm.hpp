// SPDX-License-Identifier: Apache-2.0
//
// Dynamic distortion weighting: a gate that turns the comprehensive feature
// group [F_group | F | F_bridging] into ten expert weights, which then scale
// the class-token score.

#pragma once

#include <span>

#include "drexperts/params.hpp"
#include "drexperts/tensor.hpp"

namespace drexperts {

/// Which members of the feature group reach the gate. Masked members are
/// replaced by zeros so the gate input width never changes.
struct FeatureMask {
  bool group = true;
  bool semantic = true;
  bool bridging = true;
};

struct FeatureGroup {
  Tensor f_group;     // (1 - lambda) * F_multi
  Tensor f_bridging;  // F - f_group
  Tensor f_com;       // [f_group | F | f_bridging], masked members zeroed
};

FeatureGroup assemble_feature_group(const Tensor& f, const Tensor& f_multi, const Tensor& lambda,
                                    FeatureMask mask = {});

/// Mean-pools f_com over each sample's `tokens` rows and runs the gate MLP.
/// Returns [samples x 10] unconstrained weights in vocabulary order.
Tensor generate_weights(const FeatureGroup& group, const DdwmParams<Tensor>& params, Index tokens);

/// Linear projection of the class tokens [samples x E] to [samples x 1].
Tensor score_token(const Tensor& class_tokens, const DdwmParams<Tensor>& params);

/// Per-sample score = t_score * sum_i w_i, giving [samples x 1].
Tensor compute_score(const Tensor& weights, const Tensor& t_score);

/// Scalar form: sum_i w_i * t_score.
double compute_score(std::span<const double> weights, double t_score);

}  // namespace drexperts
