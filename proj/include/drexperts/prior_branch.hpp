// SPDX-License-Identifier: Apache-2.0
//
// Distortion-specific prior features: prior image tokens are modulated by a
// distortion text embedding (Hadamard product, broadcast over tokens) and
// projected by a per-type linear layer.

#pragma once

#include <array>
#include <span>
#include <string_view>
#include <vector>

#include "drexperts/params.hpp"
#include "drexperts/tensor.hpp"

namespace drexperts {

inline constexpr std::array<std::string_view, kNumDistortions> kDistortionLabels = {
    "motion-blurry", "hazy",  "jpeg-compressed", "low-light", "noisy",
    "raindrop",      "rainy", "shadowed",        "snowy",     "uncompleted"};

/// Frozen text embeddings of the ten distortion types, one row per label.
class PriorVocabulary {
 public:
  PriorVocabulary() = default;

  /// Rows whose norm is not already 1 (to 1e-12) are rescaled to unit norm;
  /// rows that are already unit length keep their exact bits.
  explicit PriorVocabulary(MatrixXr text_embeddings);

  [[nodiscard]] const MatrixXr& text_embeddings() const { return embeddings_; }
  [[nodiscard]] Index prior_dim() const { return embeddings_.cols(); }
  /// Embedding of type i as a [1 x E_p] row.
  [[nodiscard]] MatrixXr embedding(std::size_t i) const;

  friend bool operator==(const PriorVocabulary& a, const PriorVocabulary& b) {
    return bit_equal(a.embeddings_, b.embeddings_);
  }

 private:
  MatrixXr embeddings_;
};

/// F_D^i = Linear^i(E_dis ⊙ E_T^i) for prior tokens `e_dis` [rows x E_p].
Tensor compute_prior_feature(const Tensor& e_dis, const PriorVocabulary& vocab, std::size_t i,
                             const Linear<Tensor>& linear);

/// All ten prior features, in vocabulary order.
std::vector<Tensor> compute_all_priors(const Tensor& e_dis, const PriorVocabulary& vocab,
                                       std::span<const Linear<Tensor>, kNumDistortions> linears);

}  // namespace drexperts
