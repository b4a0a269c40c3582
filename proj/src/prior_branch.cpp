// SPDX-License-Identifier: Apache-2.0

#include "drexperts/prior_branch.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace drexperts {

PriorVocabulary::PriorVocabulary(MatrixXr text_embeddings) : embeddings_(std::move(text_embeddings)) {
  if (embeddings_.rows() != static_cast<Index>(kNumDistortions)) {
    throw DimensionError("vocabulary needs exactly " + std::to_string(kNumDistortions) +
                         " text embeddings, got " + std::to_string(embeddings_.rows()));
  }
  if (embeddings_.cols() == 0) throw DimensionError("vocabulary embeddings are empty");
  if (!embeddings_.allFinite()) throw NumericError("vocabulary embeddings are not finite");
  for (Index i = 0; i < embeddings_.rows(); ++i) {
    const double norm = embeddings_.row(i).norm();
    if (norm == 0.0) {
      throw NumericError("text embedding for '" + std::string(kDistortionLabels[i]) +
                         "' has zero norm");
    }
    if (std::abs(norm - 1.0) > 1e-12) embeddings_.row(i) /= norm;
  }
}

MatrixXr PriorVocabulary::embedding(std::size_t i) const {
  if (i >= kNumDistortions) throw std::out_of_range("distortion index " + std::to_string(i));
  return embeddings_.row(static_cast<Index>(i));
}

Tensor compute_prior_feature(const Tensor& e_dis, const PriorVocabulary& vocab, std::size_t i,
                             const Linear<Tensor>& linear) {
  if (i >= kNumDistortions) throw std::out_of_range("distortion index " + std::to_string(i));
  if (e_dis.cols() != vocab.prior_dim()) {
    throw DimensionError("prior tokens " + e_dis.shape() + " do not match vocabulary dim " +
                         std::to_string(vocab.prior_dim()));
  }
  auto& tape = e_dis.tape();
  const Tensor text = tape.constant(vocab.embedding(i));
  return add_rowwise(matmul(mul_rowwise(e_dis, text), linear.weight), linear.bias);
}

std::vector<Tensor> compute_all_priors(const Tensor& e_dis, const PriorVocabulary& vocab,
                                       std::span<const Linear<Tensor>, kNumDistortions> linears) {
  std::vector<Tensor> out;
  out.reserve(kNumDistortions);
  for (std::size_t i = 0; i < kNumDistortions; ++i) {
    out.push_back(compute_prior_feature(e_dis, vocab, i, linears[i]));
  }
  return out;
}

}  // namespace drexperts
