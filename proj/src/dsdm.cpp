// SPDX-License-Identifier: Apache-2.0

#include "drexperts/dsdm.hpp"

#include <cmath>
#include <string>

namespace drexperts {

BranchOutput differential_attention(const Tensor& f, const Tensor& f_d, const Tensor& e_dis,
                                    const BranchParams<Tensor>& params, Index tokens) {
  if (f.rows() != f_d.rows() || f.rows() != e_dis.rows()) {
    throw DimensionError("differential_attention: token counts differ " + f.shape() + ", " +
                         f_d.shape() + ", " + e_dis.shape());
  }
  if (f.cols() != f_d.cols()) {
    throw DimensionError("differential_attention: F " + f.shape() + " vs F_D " + f_d.shape());
  }
  const Index attn_dim = params.w_q.cols();
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(attn_dim));

  const Tensor q = matmul(f, params.w_q);
  const Tensor k = matmul(f, params.w_k);
  const Tensor q_d = matmul(f_d, params.w_dq);
  const Tensor k_dis = matmul(e_dis, params.w_dis_k);
  const Tensor v = matmul(concat({f, f_d}, 1), params.w_v);

  AttentionMaps maps;
  maps.raw_prior = softmax_rows(block_scores(q_d, k_dis, tokens, inv_sqrt_d));
  maps.semantic = softmax_rows(block_scores(q, k, tokens, inv_sqrt_d));
  maps.refined = maps.raw_prior - scale(maps.semantic, params.alpha);
  return {block_apply(maps.refined, v, tokens), maps};
}

Tensor fuse_multi_distortion(std::span<const Tensor> branch_outputs,
                             const FfnParams<Tensor>& ffn) {
  if (branch_outputs.size() != kNumDistortions) {
    throw ContractError("fuse_multi_distortion: expected " + std::to_string(kNumDistortions) +
                        " branches, got " + std::to_string(branch_outputs.size()));
  }
  const Tensor joined = concat(branch_outputs, 1);
  const Tensor hidden = gelu(add_rowwise(matmul(joined, ffn.in.weight), ffn.in.bias));
  return add_rowwise(matmul(hidden, ffn.out.weight), ffn.out.bias);
}

}  // namespace drexperts
