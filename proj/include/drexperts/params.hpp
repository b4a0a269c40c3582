// SPDX-License-Identifier: Apache-2.0
//
// Parameter layouts for the quality head. Each struct is templated on the
// storage type: MatrixXr for owned values, Tensor for values bound to a tape.
// visit_parameters() walks several layouts in lockstep, in the fixed order
// used by checkpoints, initialisation and the optimizer.

#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <utility>

namespace drexperts {

inline constexpr std::size_t kNumDistortions = 10;

enum class ParamKind { kWeight, kBias, kAlpha, kLambda, kSlope };

/// y = x W + b, with W [in x out] and b [1 x out].
template <typename T>
struct Linear {
  T weight;
  T bias;
};

/// One differential-attention branch.
template <typename T>
struct BranchParams {
  T w_q;      // [E x d], semantic query
  T w_k;      // [E x d], semantic key
  T w_dq;     // [E x d], distortion query from the prior feature
  T w_dis_k;  // [E_p x d], key from the prior tokens
  T w_v;      // [2E x d_v], value from [F | F_D]
  T alpha;    // [1 x 1]
};

template <typename T>
struct FfnParams {
  Linear<T> in;   // [10 d_v x h]
  Linear<T> out;  // [h x E]
};

template <typename T>
struct DdwmParams {
  T lambda;           // [1 x 1]
  Linear<T> wg_in;    // [3E x h_w]
  T prelu_slope;      // [1 x 1]
  Linear<T> wg_out;   // [h_w x 10]
  Linear<T> score_head;  // [E x 1] on the class token
};

template <typename T>
struct ParameterSet {
  std::array<Linear<T>, kNumDistortions> prior;
  std::array<BranchParams<T>, kNumDistortions> branches;
  FfnParams<T> ffn;
  DdwmParams<T> ddwm;
  /// Regression head used only by some ablation variants; empty otherwise.
  Linear<T> aux_head;
};

namespace detail {

template <typename F, typename... L>
void visit_linear(const std::string& prefix, F& f, L&... l) {
  f(prefix + ".weight", ParamKind::kWeight, l.weight...);
  f(prefix + ".bias", ParamKind::kBias, l.bias...);
}

}  // namespace detail

/// Calls f(name, kind, member_of_each_set...) for every parameter.
template <typename F, typename... P>
void visit_parameters(F&& f, P&... sets) {
  for (std::size_t i = 0; i < kNumDistortions; ++i) {
    detail::visit_linear("prior." + std::to_string(i), f, sets.prior[i]...);
  }
  for (std::size_t i = 0; i < kNumDistortions; ++i) {
    const std::string p = "dsdm." + std::to_string(i);
    f(p + ".w_q", ParamKind::kWeight, sets.branches[i].w_q...);
    f(p + ".w_k", ParamKind::kWeight, sets.branches[i].w_k...);
    f(p + ".w_dq", ParamKind::kWeight, sets.branches[i].w_dq...);
    f(p + ".w_dis_k", ParamKind::kWeight, sets.branches[i].w_dis_k...);
    f(p + ".w_v", ParamKind::kWeight, sets.branches[i].w_v...);
    f(p + ".alpha", ParamKind::kAlpha, sets.branches[i].alpha...);
  }
  detail::visit_linear("ffn.in", f, sets.ffn.in...);
  detail::visit_linear("ffn.out", f, sets.ffn.out...);
  f(std::string("ddwm.lambda"), ParamKind::kLambda, sets.ddwm.lambda...);
  detail::visit_linear("ddwm.wg_in", f, sets.ddwm.wg_in...);
  f(std::string("ddwm.prelu_slope"), ParamKind::kSlope, sets.ddwm.prelu_slope...);
  detail::visit_linear("ddwm.wg_out", f, sets.ddwm.wg_out...);
  detail::visit_linear("ddwm.score_head", f, sets.ddwm.score_head...);
  detail::visit_linear("aux_head", f, sets.aux_head...);
}

}  // namespace drexperts
