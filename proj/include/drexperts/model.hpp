// SPDX-License-Identifier: Apache-2.0
//
// The full quality head: prior branch -> ten differential-attention branches
// -> FFN fusion -> feature group -> expert weights -> score. Also owns
// parameter initialisation and checkpoint files.
//
// Checkpoint layout (.drxc), little-endian:
//
//   "DREXP1"                     6 bytes
//   format version               u32 (currently 1)
//   variant code                 u32
//   N, E, E_p, d, d_v, h, h_w    7 x u64
//   seed                         u64
//   label_min, label_max         2 x f64
//   payload length P             u64, number of f64 values
//   payload                      P x f64, visit_parameters() order,
//                                each tensor row-major

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "drexperts/dataset.hpp"
#include "drexperts/ddwm.hpp"
#include "drexperts/dsdm.hpp"
#include "drexperts/params.hpp"
#include "drexperts/prior_branch.hpp"
#include "drexperts/tensor.hpp"

namespace drexperts {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Model variants. kFull is the complete head; the rest are ablations.
enum class Variant : std::uint32_t {
  kFull = 0,
  kImageEncoderOnly = 1,  // linear head on the class token
  kPriorOnly = 2,         // linear head on pooled prior features, projections frozen
  kDsdmNoDdwm = 3,        // linear head on pooled F_group
  kOnlyDis = 4,
  kOnlySem = 5,
  kOnlyBri = 6,
  kWoDis = 7,
  kWoSem = 8,
  kWoBri = 9,
};

inline constexpr std::array<Variant, 10> kAllVariants = {
    Variant::kFull,    Variant::kImageEncoderOnly, Variant::kPriorOnly, Variant::kDsdmNoDdwm,
    Variant::kOnlyDis, Variant::kOnlySem,          Variant::kOnlyBri,   Variant::kWoDis,
    Variant::kWoSem,   Variant::kWoBri};

std::string_view to_string(Variant v);
std::optional<Variant> parse_variant(std::string_view name);
/// Feature-group mask applied by a variant (all members for non-mask variants).
FeatureMask feature_mask(Variant v);

struct ModelConfig {
  Index n_tokens = 16;
  Index semantic_dim = 64;
  Index prior_dim = 64;
  Index attn_dim = 64;
  Index value_dim = 64;
  Index ffn_hidden = 128;
  Index wg_hidden = 128;
  std::uint64_t seed = 0;
  Variant variant = Variant::kFull;

  /// Throws std::invalid_argument when an extent is not positive.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Affine map between raw MOS and the [0, 1] training target.
struct LabelScale {
  double min = 0.0;
  double max = 1.0;

  [[nodiscard]] double normalize(double mos) const { return (mos - min) / (max - min); }

  friend bool operator==(const LabelScale&, const LabelScale&) = default;
};

struct ModelParams {
  ModelConfig config;
  ParameterSet<MatrixXr> tensors;
  LabelScale label_scale;

  /// Bit-exact comparison of config, scale and every tensor.
  friend bool operator==(const ModelParams& a, const ModelParams& b);
};

/// Zero-filled parameters with the shapes implied by `config`.
ParameterSet<MatrixXr> parameter_shapes(const ModelConfig& config);

/// Initial prediction on the normalized label scale.
inline constexpr double kInitialScore = 0.5;

/// Weights ~ U(-sqrt(3/fan_in), sqrt(3/fan_in)), biases 0, every alpha and
/// lambda 0.5, PReLU slope 0.25. The output layers (wg_out, score_head,
/// aux_head) start with zero weights and biases chosen so every image scores
/// kInitialScore. Deterministic in `seed`.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

std::size_t parameter_count(const ModelParams& params);

/// Whether a parameter is trained under the config's variant.
bool is_trainable(const ModelConfig& config, const std::string& name);

/// Puts every parameter on the tape; frozen ones become constants.
ParameterSet<Tensor> bind(Tape& tape, const ModelParams& params);

/// Samples stacked along rows.
struct BatchInputs {
  Tensor f_tokens;      // [B*N x E]
  Tensor prior_tokens;  // [B*N x E_p]
  Tensor class_tokens;  // [B x E]
  Index tokens = 0;
  Index batch = 0;
};

/// Stacks samples onto the tape as constants. Throws DimensionError when a
/// sample disagrees with the config.
BatchInputs stack_batch(Tape& tape, std::span<const EmbeddingSample* const> samples,
                        const ModelConfig& config);

struct ForwardPass {
  Tensor score;    // [B x 1]
  Tensor weights;  // [B x 10]; invalid for variants without the gate
  Tensor t_score;  // [B x 1]; invalid for variants without the class-token head
  std::vector<BranchOutput> branches;
  std::optional<FeatureGroup> group;
};

ForwardPass forward_batch(const BatchInputs& inputs, const ParameterSet<Tensor>& params,
                          const ModelConfig& config, const PriorVocabulary& vocabulary);

struct Diagnostics {
  std::array<double, kNumDistortions> weights{};
  std::array<double, kNumDistortions> alpha{};
  double lambda = 0.0;
  double t_score = 0.0;
};

struct Prediction {
  double score = 0.0;
  Diagnostics diagnostics;
};

Prediction forward(const EmbeddingSample& sample, const PriorVocabulary& vocabulary,
                   const ModelParams& params);

/// Predictions for `ids` (indices into `samples`), evaluated in batches.
std::vector<Prediction> predict(std::span<const EmbeddingSample> samples,
                                std::span<const std::size_t> ids,
                                const PriorVocabulary& vocabulary, const ModelParams& params,
                                std::size_t batch_size = 64);

/// Attention maps of one branch for one image, each [N x N].
struct BranchAttention {
  std::size_t index = 0;
  double alpha = 0.0;
  double weight = 0.0;
  MatrixXr raw_prior;
  MatrixXr semantic;
  MatrixXr refined;
};

std::vector<BranchAttention> export_attention_maps(const EmbeddingSample& sample,
                                                   const PriorVocabulary& vocabulary,
                                                   const ModelParams& params);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path);
ModelParams load_checkpoint(const std::filesystem::path& path);
/// As above, and throws CheckpointError unless the stored config equals `expected`.
ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

}  // namespace drexperts
