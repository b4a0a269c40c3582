// SPDX-License-Identifier: Apache-2.0
//
// Training loop, repeated-split evaluation, ablations and data-efficiency
// sweeps.
//
// Training minimises mean Smooth L1 between the predicted score and the MOS
// min-max scaled to [0, 1] over the training split, using Adam with a step
// learning-rate schedule. Metrics are computed on raw predictions against raw
// MOS. Every run is a pure function of its seeds.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "drexperts/dataset.hpp"
#include "drexperts/model.hpp"
#include "json.hpp"

namespace drexperts {

struct TrainConfig {
  std::size_t epochs = 9;
  double base_lr = 2e-4;
  std::size_t lr_decay_every = 3;
  double lr_decay_factor = 10.0;
  std::size_t batch_size = 8;
  std::size_t eval_batch_size = 64;
  /// Seeds split shuffles and minibatch order.
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;

  void validate() const;

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

/// base_lr / decay_factor^floor(epoch / decay_every).
double lr_at(std::size_t epoch, const TrainConfig& cfg);

class NonFiniteLossError : public NumericError {
 public:
  using NumericError::NumericError;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss = 0.0;  // mean training loss over the epoch
  double srcc = 0.0;  // on the test split after the epoch
  double plcc = 0.0;
};

struct TrainResult {
  ModelParams params;
  std::vector<EpochRecord> history;
};

/// Trains on split.train_ids and tracks metrics on split.test_ids. Parameter
/// init and minibatch order are seeded from (seed, split.repeat_index).
TrainResult train(const DatasetContainer& dataset, const SplitPlan& split, const TrainConfig& cfg,
                  const ModelConfig& model_cfg);

struct Evaluation {
  double srcc = 0.0;  // NaN when undefined (e.g. constant predictions)
  double plcc = 0.0;
  std::vector<Prediction> predictions;
};

Evaluation evaluate(const DatasetContainer& dataset, std::span<const std::size_t> ids,
                    const ModelParams& params, std::size_t batch_size = 64);

struct RepeatMetrics {
  std::size_t repeat = 0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
  double srcc = 0.0;
  double plcc = 0.0;
};

struct EvalReport {
  std::string variant = "full";
  double data_fraction = 1.0;
  std::vector<RepeatMetrics> repeats;
  double median_srcc = 0.0;
  double median_plcc = 0.0;
};

/// Trains once per split plan and reports per-repeat metrics and medians.
EvalReport evaluate_repeats(const DatasetContainer& dataset, const TrainConfig& cfg,
                            const ModelConfig& model_cfg, std::size_t repeats = 10);

/// evaluate_repeats with the model variant replaced by `variant`.
EvalReport run_ablation(const DatasetContainer& dataset, Variant variant, const TrainConfig& cfg,
                        const ModelConfig& model_cfg, std::size_t repeats = 10);

/// Keeps round(fraction * |train|) training ids chosen by (seed, repeat),
/// in their original order. fraction == 1 returns the ids unchanged.
std::vector<std::size_t> subsample_training(std::span<const std::size_t> train_ids,
                                            double fraction, std::uint64_t seed,
                                            std::size_t repeat);

/// One report per fraction; test splits are those of evaluate_repeats.
std::vector<EvalReport> run_data_efficiency(const DatasetContainer& dataset,
                                            std::span<const double> fractions,
                                            const TrainConfig& cfg, const ModelConfig& model_cfg,
                                            std::size_t repeats = 10);

nlohmann::json to_json(const EvalReport& report);
nlohmann::json to_json(const TrainConfig& cfg);
nlohmann::json to_json(const ModelConfig& cfg);
/// Reads known keys from `j` over the values already in `cfg`.
void merge_json(const nlohmann::json& j, TrainConfig& cfg);
void merge_json(const nlohmann::json& j, ModelConfig& cfg);

/// Per-repeat rows followed by a "median" row.
std::string report_csv(const EvalReport& report);
/// epoch,lr,loss,srcc,plcc
std::string history_csv(const std::vector<EpochRecord>& history);

/// Worker threads allowed by DREXP_THREADS (default 1).
std::size_t thread_budget();

/// Printf-style %.17g, enough digits to round-trip a double.
std::string format_real(double v);

}  // namespace drexperts
