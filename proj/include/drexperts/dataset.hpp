// SPDX-License-Identifier: Apache-2.0
//
// Embedding dataset container (.drxd), train/test split plans and the
// synthetic data generator.
//
// .drxd layout, all integers and reals little-endian:
//
//   offset 0   "DRXD"                      4 bytes
//   offset 4   format version (u32)        currently 1
//   offset 8   header length L (u64)
//   offset 16  JSON header                 L bytes, UTF-8
//   then       vocabulary block            10 x E_p f64, label order
//   then       count records, each record_stride bytes:
//                image id                  id_bytes, NUL padded
//                mos                       f64
//                class token               E f64
//                semantic tokens           N x E f64, row-major
//                prior tokens              N x E_p f64, row-major
//
// JSON header keys: version, count, n_tokens, semantic_dim, prior_dim,
// label_range [min, max], labels, id_bytes, record_stride, metadata.

#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "drexperts/prior_branch.hpp"
#include "drexperts/tensor.hpp"
#include "json.hpp"

namespace drexperts {

inline constexpr std::uint32_t kDatasetFormatVersion = 1;

/// Malformed or inconsistent container contents.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The file system refused a read or write.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EmbeddingSample {
  std::string image_id;
  MatrixXr f_tokens;      // [N x E]
  MatrixXr class_token;   // [1 x E]
  MatrixXr prior_tokens;  // [N x E_p]
  double mos = 0.0;

  friend bool operator==(const EmbeddingSample& a, const EmbeddingSample& b) {
    return a.image_id == b.image_id && bit_equal(a.f_tokens, b.f_tokens) &&
           bit_equal(a.class_token, b.class_token) && bit_equal(a.prior_tokens, b.prior_tokens) &&
           std::memcmp(&a.mos, &b.mos, sizeof(double)) == 0;
  }
};

struct DatasetHeader {
  std::uint32_t version = kDatasetFormatVersion;
  std::size_t count = 0;
  Index n_tokens = 0;
  Index semantic_dim = 0;
  Index prior_dim = 0;
  double label_min = 0.0;
  double label_max = 0.0;

  friend bool operator==(const DatasetHeader&, const DatasetHeader&) = default;
};

struct DatasetContainer {
  DatasetHeader header;
  PriorVocabulary vocabulary;
  std::vector<EmbeddingSample> samples;
  /// Free-form provenance, e.g. generator settings.
  nlohmann::json metadata = nlohmann::json::object();

  friend bool operator==(const DatasetContainer&, const DatasetContainer&) = default;
};

/// Builds a header from samples and vocabulary (count, extents, label range).
DatasetHeader describe(const std::vector<EmbeddingSample>& samples,
                       const PriorVocabulary& vocabulary);

/// Throws FormatError naming the first violated invariant.
void validate(const DatasetContainer& container);

void write_dataset(const DatasetContainer& container, const std::filesystem::path& path);
DatasetContainer read_dataset(const std::filesystem::path& path);

struct SplitPlan {
  std::uint64_t seed = 0;
  std::size_t repeat_index = 0;
  double fraction = 0.8;
  std::vector<std::size_t> train_ids;  // sample indices
  std::vector<std::size_t> test_ids;

  friend bool operator==(const SplitPlan&, const SplitPlan&) = default;
};

/// One independently shuffled split per repeat, seeded by (seed, repeat).
std::vector<SplitPlan> make_splits(std::size_t count, std::uint64_t seed, std::size_t repeats = 10,
                                   double fraction = 0.8);
SplitPlan make_split(std::size_t count, std::uint64_t seed, std::size_t repeat_index,
                     double fraction = 0.8);

nlohmann::json to_json(const SplitPlan& plan);
SplitPlan split_from_json(const nlohmann::json& j);

// Synthetic data ------------------------------------------------------------

inline constexpr std::array<double, kNumDistortions> kDefaultImportance = {10, 8, 7, 6, 6,
                                                                           2,  3, 4, 3, 1};

struct SyntheticConfig {
  std::size_t count = 2000;
  Index n_tokens = 16;
  Index semantic_dim = 64;
  Index prior_dim = 64;
  double noise_sd = 2.0;
  std::uint64_t seed = 0;
  /// Strength of distortion signal leaking into the semantic tokens.
  double leakage = 0.2;
  std::array<double, kNumDistortions> importance = kDefaultImportance;
  /// When set, every image gets this intensity for every distortion.
  std::optional<double> fixed_intensity;
};

struct SyntheticTruth {
  std::uint64_t seed = 0;
  double noise_sd = 0.0;
  double leakage = 0.0;
  std::array<double, kNumDistortions> importance{};
  std::vector<std::string> image_ids;
  std::vector<std::array<double, kNumDistortions>> intensities;
};

struct SyntheticDataset {
  DatasetContainer container;
  SyntheticTruth truth;
};

/// Noise-free label: 100 - sum_i c_i z_i.
double synthetic_mos(std::span<const double, kNumDistortions> importance,
                     std::span<const double, kNumDistortions> intensities);

SyntheticDataset generate_synthetic(const SyntheticConfig& config);

/// Sidecar path for a dataset path: "<path>.truth.json".
std::filesystem::path truth_path(const std::filesystem::path& dataset_path);
void write_truth(const SyntheticTruth& truth, const std::filesystem::path& path);
SyntheticTruth read_truth(const std::filesystem::path& path);

/// Writes `bytes` to a sibling temporary file and renames it into place.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace drexperts
