// SPDX-License-Identifier: Apache-2.0

#include "drexperts/ddwm.hpp"

#include <string>

namespace drexperts {

FeatureGroup assemble_feature_group(const Tensor& f, const Tensor& f_multi, const Tensor& lambda,
                                    FeatureMask mask) {
  if (f.rows() != f_multi.rows() || f.cols() != f_multi.cols()) {
    throw DimensionError("assemble_feature_group: F " + f.shape() + " vs F_multi " +
                         f_multi.shape());
  }
  FeatureGroup group;
  group.f_group = scale(f_multi, one_minus(lambda));
  group.f_bridging = f - group.f_group;

  auto& tape = f.tape();
  const auto member = [&](const Tensor& t, bool keep) {
    return keep ? t : tape.constant(MatrixXr::Zero(t.rows(), t.cols()));
  };
  group.f_com = concat({member(group.f_group, mask.group), member(f, mask.semantic),
                        member(group.f_bridging, mask.bridging)},
                       1);
  return group;
}

Tensor generate_weights(const FeatureGroup& group, const DdwmParams<Tensor>& params,
                        Index tokens) {
  const Tensor pooled = mean_blocks(group.f_com, tokens);
  const Tensor hidden =
      prelu(add_rowwise(matmul(pooled, params.wg_in.weight), params.wg_in.bias),
            params.prelu_slope);
  return add_rowwise(matmul(hidden, params.wg_out.weight), params.wg_out.bias);
}

Tensor score_token(const Tensor& class_tokens, const DdwmParams<Tensor>& params) {
  return add_rowwise(matmul(class_tokens, params.score_head.weight), params.score_head.bias);
}

Tensor compute_score(const Tensor& weights, const Tensor& t_score) {
  if (weights.cols() != static_cast<Index>(kNumDistortions)) {
    throw DimensionError("compute_score: expected " + std::to_string(kNumDistortions) +
                         " weights per sample, got " + weights.shape());
  }
  if (t_score.cols() != 1 || t_score.rows() != weights.rows()) {
    throw DimensionError("compute_score: score token " + t_score.shape() + " vs weights " +
                         weights.shape());
  }
  return hadamard(t_score, row_sums(weights));
}

double compute_score(std::span<const double> weights, double t_score) {
  if (weights.size() != kNumDistortions) {
    throw DimensionError("compute_score: expected " + std::to_string(kNumDistortions) +
                         " weights, got " + std::to_string(weights.size()));
  }
  double score = 0.0;
  for (double w : weights) score += w * t_score;
  return score;
}

}  // namespace drexperts
