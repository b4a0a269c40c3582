// SPDX-License-Identifier: Apache-2.0
//
// Distortion-saliency differential module.
//
// Each branch subtracts an alpha-scaled semantic self-attention map from a
// distortion cross-attention map and applies the difference to values built
// from [F | F_D^i]. Row sums of the combined map equal 1 - alpha. The ten
// branch outputs are fused by a two-layer GELU feed-forward network.
//
// Inputs may stack several samples along rows; `tokens` is the per-sample
// token count N and attention never crosses sample boundaries.

#pragma once

#include <span>
#include <vector>

#include "drexperts/params.hpp"
#include "drexperts/tensor.hpp"

namespace drexperts {

/// Attention maps of one branch, each [rows x N].
struct AttentionMaps {
  Tensor raw_prior;  // softmax(Q_D K_dis^T / sqrt(d))
  Tensor semantic;   // softmax(Q K^T / sqrt(d))
  Tensor refined;    // raw_prior - alpha * semantic
};

struct BranchOutput {
  Tensor features;  // [rows x d_v]
  AttentionMaps maps;
};

/// f [rows x E], f_d [rows x E], e_dis [rows x E_p].
BranchOutput differential_attention(const Tensor& f, const Tensor& f_d, const Tensor& e_dis,
                                    const BranchParams<Tensor>& params, Index tokens);

/// Concatenates the ten branch outputs along columns and applies
/// Linear -> GELU -> Linear, giving [rows x E].
Tensor fuse_multi_distortion(std::span<const Tensor> branch_outputs,
                             const FfnParams<Tensor>& ffn);

}  // namespace drexperts
