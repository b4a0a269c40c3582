// SPDX-License-Identifier: Apache-2.0

#include "drexperts/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

#include "drexperts/metrics.hpp"

namespace drexperts {
namespace {

// Stream tags keep the seeds of independent random consumers apart.
constexpr std::uint64_t kInitStream = 0x1A17;
constexpr std::uint64_t kShuffleStream = 0x5AFF;
constexpr std::uint64_t kSubsampleStream = 0x5B5A;

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(index),
                    static_cast<std::uint32_t>(index >> 32)};
  std::array<std::uint32_t, 2> words{};
  seq.generate(words.begin(), words.end());
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

/// Runs task(i) for i in [0, n) on up to thread_budget() threads.
void run_indexed(std::size_t n, const std::function<void(std::size_t)>& task) {
  const std::size_t workers = std::min(thread_budget(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) task(i);
    return;
  }
  std::mutex mu;
  std::size_t next = 0;
  std::exception_ptr failure;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i = 0;
        {
          std::lock_guard lock(mu);
          if (failure || next == n) return;
          i = next++;
        }
        try {
          task(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

struct AdamState {
  ParameterSet<MatrixXr> m;
  ParameterSet<MatrixXr> v;
  std::size_t step = 0;
};

void adam_step(ModelParams& params, const ParameterSet<Tensor>& bound, AdamState& state,
               const TrainConfig& cfg, double lr) {
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  visit_parameters(
      [&](const std::string&, ParamKind, MatrixXr& p, const Tensor& slot, MatrixXr& m,
          MatrixXr& v) {
        if (!slot.valid() || !slot.requires_grad()) return;
        const MatrixXr& g = slot.grad();
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
        const MatrixXr step =
            (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.epsilon) + cfg.weight_decay * p.array();
        p -= lr * step;
      },
      params.tensors, bound, state.m, state.v);
}

EvalReport evaluate_fraction(const DatasetContainer& dataset, double fraction,
                             const TrainConfig& cfg, const ModelConfig& model_cfg,
                             std::size_t repeats) {
  cfg.validate();
  model_cfg.validate();
  if (repeats == 0) throw std::invalid_argument("repeats must be at least 1");
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("data fraction must lie in (0, 1], got " + format_real(fraction));
  }
  const auto plans = make_splits(dataset.samples.size(), cfg.seed, repeats, cfg.train_fraction);
  // Fail before any training when a fraction leaves nothing to train on.
  for (const auto& plan : plans) {
    if (std::llround(fraction * static_cast<double>(plan.train_ids.size())) == 0) {
      throw std::invalid_argument("data fraction " + format_real(fraction) +
                                  " leaves an empty training set");
    }
  }
  EvalReport report;
  report.variant = std::string(to_string(model_cfg.variant));
  report.data_fraction = fraction;
  report.repeats.resize(repeats);
  run_indexed(repeats, [&](std::size_t r) {
    SplitPlan plan = plans[r];
    plan.train_ids = subsample_training(plan.train_ids, fraction, cfg.seed, r);
    const auto result = train(dataset, plan, cfg, model_cfg);
    const auto& last = result.history.back();
    report.repeats[r] = {r, plan.train_ids.size(), plan.test_ids.size(), last.srcc, last.plcc};
  });
  std::vector<double> s;
  std::vector<double> p;
  for (const auto& rep : report.repeats) {
    s.push_back(rep.srcc);
    p.push_back(rep.plcc);
  }
  report.median_srcc = median(s);
  report.median_plcc = median(p);
  return report;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be at least 1");
  if (!(base_lr > 0.0)) throw std::invalid_argument("base_lr must be positive");
  if (lr_decay_every < 1) throw std::invalid_argument("lr_decay_every must be at least 1");
  if (!(lr_decay_factor > 0.0)) throw std::invalid_argument("lr_decay_factor must be positive");
  if (batch_size < 1 || eval_batch_size < 1) throw std::invalid_argument("batch sizes must be positive");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw std::invalid_argument("train_fraction must lie in (0, 1)");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && epsilon > 0.0)) {
    throw std::invalid_argument("invalid optimizer hyperparameters");
  }
}

double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  const auto stage = static_cast<double>(epoch / cfg.lr_decay_every);
  return cfg.base_lr / std::pow(cfg.lr_decay_factor, stage);
}

Evaluation evaluate(const DatasetContainer& dataset, std::span<const std::size_t> ids,
                    const ModelParams& params, std::size_t batch_size) {
  Evaluation out;
  out.predictions = predict(dataset.samples, ids, dataset.vocabulary, params, batch_size);
  std::vector<double> pred;
  std::vector<double> gt;
  pred.reserve(ids.size());
  gt.reserve(ids.size());
  for (std::size_t k = 0; k < ids.size(); ++k) {
    pred.push_back(out.predictions[k].score);
    gt.push_back(dataset.samples[ids[k]].mos);
  }
  try {
    out.srcc = srcc(pred, gt);
    out.plcc = plcc(pred, gt);
  } catch (const UndefinedMetricError&) {
    out.srcc = out.plcc = std::nan("");
  }
  return out;
}

TrainResult train(const DatasetContainer& dataset, const SplitPlan& split, const TrainConfig& cfg,
                  const ModelConfig& model_cfg) {
  cfg.validate();
  model_cfg.validate();
  if (split.train_ids.empty()) throw std::invalid_argument("empty training split");
  if (split.test_ids.empty()) throw std::invalid_argument("empty test split");
  for (const auto* ids : {&split.train_ids, &split.test_ids}) {
    for (std::size_t id : *ids) {
      if (id >= dataset.samples.size()) {
        throw std::out_of_range("split references sample " + std::to_string(id) + " of " +
                                std::to_string(dataset.samples.size()));
      }
    }
  }

  TrainResult result;
  ModelParams& params = result.params;
  params = init_params(model_cfg, derive_seed(model_cfg.seed, kInitStream, split.repeat_index));

  double lo = dataset.samples[split.train_ids.front()].mos;
  double hi = lo;
  for (std::size_t id : split.train_ids) {
    lo = std::min(lo, dataset.samples[id].mos);
    hi = std::max(hi, dataset.samples[id].mos);
  }
  if (!(hi > lo)) throw std::invalid_argument("training labels are constant; cannot scale MOS");
  params.label_scale = {lo, hi};

  AdamState adam;
  adam.m = parameter_shapes(params.config);
  adam.v = parameter_shapes(params.config);

  std::mt19937_64 rng(derive_seed(cfg.seed, kShuffleStream, split.repeat_index));
  std::vector<std::size_t> order = split.train_ids;
  std::vector<const EmbeddingSample*> batch;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at(epoch, cfg);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      batch.clear();
      MatrixXr target(static_cast<Index>(end - start), 1);
      for (std::size_t k = start; k < end; ++k) {
        const auto& s = dataset.samples[order[k]];
        batch.push_back(&s);
        target(static_cast<Index>(k - start), 0) = params.label_scale.normalize(s.mos);
      }
      Tape tape;
      const auto bound = bind(tape, params);
      const auto inputs = stack_batch(tape, batch, params.config);
      const auto pass = forward_batch(inputs, bound, params.config, dataset.vocabulary);
      const Tensor loss = smooth_l1(pass.score, tape.constant(std::move(target)));
      if (!std::isfinite(loss.item())) {
        std::ostringstream msg;
        msg << "non-finite training loss at epoch " << epoch << ", batch " << start / cfg.batch_size
            << " (repeat " << split.repeat_index << ")";
        throw NonFiniteLossError(msg.str());
      }
      backward(loss);
      adam_step(params, bound, adam, cfg, lr);
      loss_sum += loss.item() * static_cast<double>(end - start);
    }
    const auto eval = evaluate(dataset, split.test_ids, params, cfg.eval_batch_size);
    result.history.push_back(
        {epoch, lr, loss_sum / static_cast<double>(order.size()), eval.srcc, eval.plcc});
  }
  return result;
}

EvalReport evaluate_repeats(const DatasetContainer& dataset, const TrainConfig& cfg,
                            const ModelConfig& model_cfg, std::size_t repeats) {
  return evaluate_fraction(dataset, 1.0, cfg, model_cfg, repeats);
}

EvalReport run_ablation(const DatasetContainer& dataset, Variant variant, const TrainConfig& cfg,
                        const ModelConfig& model_cfg, std::size_t repeats) {
  ModelConfig variant_cfg = model_cfg;
  variant_cfg.variant = variant;
  return evaluate_repeats(dataset, cfg, variant_cfg, repeats);
}

std::vector<std::size_t> subsample_training(std::span<const std::size_t> train_ids,
                                            double fraction, std::uint64_t seed,
                                            std::size_t repeat) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw std::invalid_argument("data fraction must lie in (0, 1], got " + format_real(fraction));
  }
  std::vector<std::size_t> ids(train_ids.begin(), train_ids.end());
  if (fraction == 1.0) return ids;
  const auto keep =
      static_cast<std::size_t>(std::llround(fraction * static_cast<double>(ids.size())));
  if (keep == 0) throw std::invalid_argument("data fraction leaves an empty training set");
  std::vector<std::size_t> positions(ids.size());
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  std::mt19937_64 rng(derive_seed(seed, kSubsampleStream, repeat));
  std::shuffle(positions.begin(), positions.end(), rng);
  positions.resize(keep);
  std::sort(positions.begin(), positions.end());
  std::vector<std::size_t> out;
  out.reserve(keep);
  for (std::size_t p : positions) out.push_back(ids[p]);
  return out;
}

std::vector<EvalReport> run_data_efficiency(const DatasetContainer& dataset,
                                            std::span<const double> fractions,
                                            const TrainConfig& cfg, const ModelConfig& model_cfg,
                                            std::size_t repeats) {
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) {
      throw std::invalid_argument("data fraction must lie in (0, 1], got " + format_real(f));
    }
  }
  std::vector<EvalReport> reports;
  reports.reserve(fractions.size());
  for (double f : fractions) reports.push_back(evaluate_fraction(dataset, f, cfg, model_cfg, repeats));
  return reports;
}

// Serialisation ------------------------------------------------------------------

std::string format_real(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report.repeats) {
    rows.push_back({{"repeat", r.repeat},
                    {"train_size", r.train_size},
                    {"test_size", r.test_size},
                    {"srcc", r.srcc},
                    {"plcc", r.plcc}});
  }
  return {{"variant", report.variant},
          {"data_fraction", report.data_fraction},
          {"repeats", rows},
          {"median_srcc", report.median_srcc},
          {"median_plcc", report.median_plcc}};
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"base_lr", c.base_lr},
          {"lr_decay_every", c.lr_decay_every},
          {"lr_decay_factor", c.lr_decay_factor},
          {"batch_size", c.batch_size},
          {"eval_batch_size", c.eval_batch_size},
          {"seed", c.seed},
          {"train_fraction", c.train_fraction},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"epsilon", c.epsilon},
          {"weight_decay", c.weight_decay}};
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"n_tokens", c.n_tokens},     {"semantic_dim", c.semantic_dim},
          {"prior_dim", c.prior_dim},   {"attn_dim", c.attn_dim},
          {"value_dim", c.value_dim},   {"ffn_hidden", c.ffn_hidden},
          {"wg_hidden", c.wg_hidden},   {"seed", c.seed},
          {"variant", to_string(c.variant)}};
}

namespace {

template <typename T>
void take(const nlohmann::json& j, const char* key, T& field) {
  if (j.contains(key)) field = j.at(key).get<T>();
}

}  // namespace

void merge_json(const nlohmann::json& j, TrainConfig& c) {
  const nlohmann::json& src = j.contains("train") ? j.at("train") : j;
  take(src, "epochs", c.epochs);
  take(src, "base_lr", c.base_lr);
  take(src, "lr_decay_every", c.lr_decay_every);
  take(src, "lr_decay_factor", c.lr_decay_factor);
  take(src, "batch_size", c.batch_size);
  take(src, "eval_batch_size", c.eval_batch_size);
  take(src, "seed", c.seed);
  take(src, "train_fraction", c.train_fraction);
  take(src, "beta1", c.beta1);
  take(src, "beta2", c.beta2);
  take(src, "epsilon", c.epsilon);
  take(src, "weight_decay", c.weight_decay);
}

void merge_json(const nlohmann::json& j, ModelConfig& c) {
  const nlohmann::json& src = j.contains("model") ? j.at("model") : j;
  take(src, "n_tokens", c.n_tokens);
  take(src, "semantic_dim", c.semantic_dim);
  take(src, "prior_dim", c.prior_dim);
  take(src, "attn_dim", c.attn_dim);
  take(src, "value_dim", c.value_dim);
  take(src, "ffn_hidden", c.ffn_hidden);
  take(src, "wg_hidden", c.wg_hidden);
  take(src, "seed", c.seed);
  if (src.contains("variant")) {
    const auto name = src.at("variant").get<std::string>();
    const auto v = parse_variant(name);
    if (!v) throw std::invalid_argument("unknown variant '" + name + "'");
    c.variant = *v;
  }
}

std::string report_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "variant,data_fraction,repeat,train_size,test_size,srcc,plcc\n";
  for (const auto& r : report.repeats) {
    out << report.variant << ',' << format_real(report.data_fraction) << ',' << r.repeat << ','
        << r.train_size << ',' << r.test_size << ',' << format_real(r.srcc) << ','
        << format_real(r.plcc) << '\n';
  }
  out << report.variant << ',' << format_real(report.data_fraction) << ",median,,,"
      << format_real(report.median_srcc) << ',' << format_real(report.median_plcc) << '\n';
  return out.str();
}

std::string history_csv(const std::vector<EpochRecord>& history) {
  std::ostringstream out;
  out << "epoch,lr,loss,srcc,plcc\n";
  for (const auto& h : history) {
    out << h.epoch << ',' << format_real(h.lr) << ',' << format_real(h.loss) << ','
        << format_real(h.srcc) << ',' << format_real(h.plcc) << '\n';
  }
  return out.str();
}

std::size_t thread_budget() {
  const char* env = std::getenv("DREXP_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  char* end = nullptr;
  const long n = std::strtol(env, &end, 10);
  if (end == env || *end != '\0' || n < 1) return 1;
  return static_cast<std::size_t>(n);
}

}  // namespace drexperts
