// SPDX-License-Identifier: Apache-2.0
//
// drexp: synthesize embedding datasets, train and evaluate the quality head,
// run ablations and data-efficiency sweeps, export attention maps.
//
// Exit codes: 0 ok, 2 usage or config, 3 I/O or malformed input file,
// 4 numeric failure.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "drexperts/dataset.hpp"
#include "drexperts/model.hpp"
#include "drexperts/train.hpp"
#include "json.hpp"

#ifndef DREXP_VERSION
#define DREXP_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using nlohmann::json;
using namespace drexperts;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitNumeric = 4;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Flags shared by the commands that train.
struct TrainFlags {
  std::string config_path;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<std::size_t> batch_size;
  std::optional<std::uint64_t> seed;
  std::optional<std::uint64_t> model_seed;
  std::optional<std::string> variant;
};

void add_train_flags(CLI::App& cmd, TrainFlags& f, bool with_variant = true) {
  cmd.add_option("--config", f.config_path, "JSON file with \"train\" and \"model\" sections")
      ->check(CLI::ExistingFile);
  cmd.add_option("--epochs", f.epochs, "Training epochs");
  cmd.add_option("--lr", f.lr, "Base learning rate");
  cmd.add_option("--batch-size", f.batch_size, "Minibatch size");
  cmd.add_option("--seed", f.seed, "Split and minibatch seed");
  cmd.add_option("--model-seed", f.model_seed, "Parameter initialisation seed");
  if (with_variant) cmd.add_option("--variant", f.variant, "Model variant");
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct Configs {
  TrainConfig train;
  ModelConfig model;
};

// Config file first, then flags; model extents come from the dataset.
Configs resolve_configs(const TrainFlags& f, const DatasetHeader& header) {
  Configs c;
  json file = json::object();
  if (!f.config_path.empty()) {
    try {
      file = json::parse(read_text(f.config_path));
    } catch (const json::parse_error& e) {
      throw UsageError(f.config_path + ": invalid JSON: " + e.what());
    }
  }
  try {
    merge_json(file, c.train);
    merge_json(file, c.model);
  } catch (const json::exception& e) {
    throw UsageError(f.config_path + ": " + e.what());
  }
  const json& model_section = file.contains("model") ? file.at("model") : file;
  auto take_extent = [&](const char* key, Index& slot, Index from_data) {
    if (model_section.contains(key) && slot != from_data) {
      throw UsageError(std::string("config ") + key + "=" + std::to_string(slot) +
                       " disagrees with the dataset (" + std::to_string(from_data) + ")");
    }
    slot = from_data;
  };
  take_extent("n_tokens", c.model.n_tokens, header.n_tokens);
  take_extent("semantic_dim", c.model.semantic_dim, header.semantic_dim);
  take_extent("prior_dim", c.model.prior_dim, header.prior_dim);

  if (f.epochs) c.train.epochs = *f.epochs;
  if (f.lr) c.train.base_lr = *f.lr;
  if (f.batch_size) c.train.batch_size = *f.batch_size;
  if (f.seed) c.train.seed = *f.seed;
  if (f.model_seed) c.model.seed = *f.model_seed;
  if (f.variant) {
    const auto v = parse_variant(*f.variant);
    if (!v) throw UsageError("unknown variant '" + *f.variant + "'");
    c.model.variant = *v;
  }
  c.train.validate();
  c.model.validate();
  return c;
}

json config_json(const Configs& c) { return {{"train", to_json(c.train)}, {"model", to_json(c.model)}}; }

DatasetContainer load_dataset(const std::string& path) {
  if (!fs::exists(path)) throw IoError("dataset not found: " + path);
  return read_dataset(path);
}

// Refuses to write into an existing non-directory; creates the directory.
void prepare_out_dir(const fs::path& dir) {
  if (fs::exists(dir) && !fs::is_directory(dir)) {
    throw IoError(dir.string() + " exists and is not a directory");
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

class Manifest {
 public:
  Manifest(std::string command, int argc, char** argv)
      : command_(std::move(command)), start_(std::chrono::steady_clock::now()) {
    for (int i = 0; i < argc; ++i) argv_.emplace_back(argv[i]);
  }

  json& config() { return config_; }
  json& seeds() { return seeds_; }
  void input(const std::string& key, const fs::path& p) { inputs_[key] = p.string(); }
  void output(const fs::path& p) { outputs_.push_back(p.string()); }

  void write(const fs::path& path) const {
    const double seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    const json j = {{"command", command_},       {"argv", argv_},     {"tool_version", DREXP_VERSION},
                    {"config", config_},         {"seeds", seeds_},   {"inputs", inputs_},
                    {"outputs", outputs_},       {"duration_seconds", seconds}};
    write_file_atomic(path, j.dump(2) + "\n");
  }

 private:
  std::string command_;
  std::vector<std::string> argv_;
  json config_ = json::object();
  json seeds_ = json::object();
  json inputs_ = json::object();
  json outputs_ = json::array();
  std::chrono::steady_clock::time_point start_;
};

void emit(Manifest& m, const fs::path& path, std::string_view bytes) {
  write_file_atomic(path, bytes);
  m.output(path);
}

std::string fraction_tag(double f) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << f;
  return s.str();
}

std::string summary_csv(const std::vector<EvalReport>& reports) {
  std::ostringstream out;
  out << "variant,data_fraction,median_srcc,median_plcc\n";
  for (const auto& r : reports) {
    out << r.variant << ',' << format_real(r.data_fraction) << ',' << format_real(r.median_srcc)
        << ',' << format_real(r.median_plcc) << '\n';
  }
  return out.str();
}

void print_report(const EvalReport& r) {
  std::cout << r.variant << " fraction=" << r.data_fraction << " repeats=" << r.repeats.size()
            << " median SRCC=" << r.median_srcc << " PLCC=" << r.median_plcc << "\n";
}

// synth -----------------------------------------------------------------------

struct SynthFlags {
  std::size_t count = 2000;
  Index n_tokens = 16;
  Index dim = 64;
  Index prior_dim = 64;
  double noise_sd = 2.0;
  double leakage = 0.2;
  std::optional<std::uint64_t> seed;
  std::string out;
};

int cmd_synth(const SynthFlags& f, Manifest& m) {
  if (!f.seed) throw UsageError("synth requires an explicit --seed");
  SyntheticConfig cfg;
  cfg.count = f.count;
  cfg.n_tokens = f.n_tokens;
  cfg.semantic_dim = f.dim;
  cfg.prior_dim = f.prior_dim;
  cfg.noise_sd = f.noise_sd;
  cfg.leakage = f.leakage;
  cfg.seed = *f.seed;
  if (cfg.count < 1 || cfg.n_tokens < 1 || cfg.semantic_dim < 1 || cfg.prior_dim < 1) {
    throw UsageError("--count, --n-tokens, --dim and --prior-dim must be positive");
  }
  if (!(cfg.noise_sd >= 0.0) || !std::isfinite(cfg.leakage)) {
    throw UsageError("--noise-sd must be non-negative and --leakage finite");
  }
  const fs::path out = f.out;
  if (fs::is_directory(out)) throw UsageError(out.string() + " is a directory");

  const auto data = generate_synthetic(cfg);
  if (out.has_parent_path()) prepare_out_dir(out.parent_path());
  write_dataset(data.container, out);
  m.output(out);
  write_truth(data.truth, truth_path(out));
  m.output(truth_path(out));

  m.config() = {{"count", cfg.count},       {"n_tokens", cfg.n_tokens}, {"semantic_dim", cfg.semantic_dim},
                {"prior_dim", cfg.prior_dim}, {"noise_sd", cfg.noise_sd}, {"leakage", cfg.leakage},
                {"importance", cfg.importance}};
  m.seeds()["data"] = cfg.seed;
  fs::path manifest = out;
  manifest += ".manifest.json";
  m.write(manifest);

  const auto& h = data.container.header;
  std::cout << out.string() << ": count=" << h.count << " N=" << h.n_tokens << " E=" << h.semantic_dim
            << " E_p=" << h.prior_dim << " mos=[" << h.label_min << ", " << h.label_max << "]\n";
  return kExitOk;
}

// train -----------------------------------------------------------------------

int cmd_train(const std::string& data_path, const TrainFlags& tf, std::size_t repeat,
              const fs::path& out, Manifest& m) {
  const auto data = load_dataset(data_path);
  const auto cfg = resolve_configs(tf, data.header);
  const auto split = make_split(data.samples.size(), cfg.train.seed, repeat, cfg.train.train_fraction);
  prepare_out_dir(out);

  const auto result = train(data, split, cfg.train, cfg.model);
  save_checkpoint(result.params, out / "model.drxc");
  m.output(out / "model.drxc");
  emit(m, out / "history.csv", history_csv(result.history));
  emit(m, out / "split.json", to_json(split).dump() + "\n");
  emit(m, out / "config.json", config_json(cfg).dump(2) + "\n");

  m.config() = config_json(cfg);
  m.seeds() = {{"split", cfg.train.seed}, {"repeat", repeat}, {"model", result.params.config.seed}};
  m.input("data", data_path);
  m.write(out / "manifest.json");

  const auto& last = result.history.back();
  std::cout << "epochs=" << result.history.size() << " final loss=" << last.loss
            << " test SRCC=" << last.srcc << " PLCC=" << last.plcc << "\n";
  return kExitOk;
}

// eval ------------------------------------------------------------------------

int cmd_eval_checkpoint(const std::string& data_path, const std::string& checkpoint,
                        const std::string& split_arg, const fs::path& out, Manifest& m) {
  const auto data = load_dataset(data_path);
  if (!fs::exists(checkpoint)) throw IoError("checkpoint not found: " + checkpoint);
  const auto params = load_checkpoint(checkpoint);
  const fs::path split_path =
      split_arg.empty() ? fs::path(checkpoint).parent_path() / "split.json" : fs::path(split_arg);
  SplitPlan split;
  try {
    split = split_from_json(json::parse(read_text(split_path)));
  } catch (const json::exception& e) {
    throw FormatError(split_path.string() + ": malformed split: " + e.what());
  }
  for (auto id : split.test_ids) {
    if (id >= data.samples.size()) {
      throw UsageError("split " + split_path.string() + " references sample " + std::to_string(id) +
                       " but the dataset holds " + std::to_string(data.samples.size()));
    }
  }
  const auto& c = params.config;
  if (c.n_tokens != data.header.n_tokens || c.semantic_dim != data.header.semantic_dim ||
      c.prior_dim != data.header.prior_dim) {
    throw UsageError("checkpoint extents do not match the dataset");
  }
  prepare_out_dir(out);

  const auto ev = evaluate(data, split.test_ids, params);
  std::ostringstream pred;
  pred << "image_id,mos,score,t_score";
  for (const auto& label : kDistortionLabels) pred << ",w_" << label;
  pred << '\n';
  for (std::size_t i = 0; i < split.test_ids.size(); ++i) {
    const auto& s = data.samples[split.test_ids[i]];
    const auto& p = ev.predictions[i];
    pred << s.image_id << ',' << format_real(s.mos) << ',' << format_real(p.score) << ','
         << format_real(p.diagnostics.t_score);
    for (double w : p.diagnostics.weights) pred << ',' << format_real(w);
    pred << '\n';
  }
  emit(m, out / "predictions.csv", pred.str());
  const json metrics = {{"variant", to_string(c.variant)},
                        {"test_size", split.test_ids.size()},
                        {"srcc", ev.srcc},
                        {"plcc", ev.plcc},
                        {"srcc_text", format_real(ev.srcc)},
                        {"plcc_text", format_real(ev.plcc)}};
  emit(m, out / "metrics.json", metrics.dump(2) + "\n");

  m.config() = {{"model", to_json(c)}};
  m.seeds() = {{"split", split.seed}, {"repeat", split.repeat_index}, {"model", c.seed}};
  m.input("data", data_path);
  m.input("checkpoint", checkpoint);
  m.input("split", split_path);
  m.write(out / "manifest.json");
  std::cout << "test SRCC=" << ev.srcc << " PLCC=" << ev.plcc << " (" << split.test_ids.size()
            << " images)\n";
  return kExitOk;
}

void write_report(Manifest& m, const fs::path& out, const std::string& stem, const EvalReport& r) {
  emit(m, out / (stem + ".csv"), report_csv(r));
  emit(m, out / (stem + ".json"), to_json(r).dump(2) + "\n");
}

int cmd_eval_repeats(const std::string& data_path, const TrainFlags& tf, std::size_t repeats,
                     const fs::path& out, Manifest& m) {
  if (repeats < 1) throw UsageError("--repeats must be at least 1");
  const auto data = load_dataset(data_path);
  const auto cfg = resolve_configs(tf, data.header);
  prepare_out_dir(out);
  const auto report = evaluate_repeats(data, cfg.train, cfg.model, repeats);
  write_report(m, out, "report", report);
  m.config() = config_json(cfg);
  m.seeds() = {{"split", cfg.train.seed}, {"model", cfg.model.seed}, {"repeats", repeats}};
  m.input("data", data_path);
  m.write(out / "manifest.json");
  print_report(report);
  return kExitOk;
}

// ablate ----------------------------------------------------------------------

std::vector<Variant> parse_variants(const std::vector<std::string>& names) {
  std::vector<Variant> out;
  for (const auto& n : names) {
    if (n == "all") {
      out.assign(kAllVariants.begin(), kAllVariants.end());
      continue;
    }
    const auto v = parse_variant(n);
    if (!v) throw UsageError("unknown variant '" + n + "'");
    if (std::find(out.begin(), out.end(), *v) == out.end()) out.push_back(*v);
  }
  if (out.empty()) throw UsageError("no variants given");
  return out;
}

int cmd_ablate(const std::string& data_path, const TrainFlags& tf,
               const std::vector<std::string>& variant_names, std::size_t repeats,
               const fs::path& out, Manifest& m) {
  if (repeats < 1) throw UsageError("--repeats must be at least 1");
  const auto variants = parse_variants(variant_names);
  const auto data = load_dataset(data_path);
  const auto cfg = resolve_configs(tf, data.header);
  prepare_out_dir(out);
  std::vector<EvalReport> reports;
  for (auto v : variants) {
    reports.push_back(run_ablation(data, v, cfg.train, cfg.model, repeats));
    write_report(m, out, "report_" + std::string(to_string(v)), reports.back());
    print_report(reports.back());
  }
  emit(m, out / "summary.csv", summary_csv(reports));
  m.config() = config_json(cfg);
  json names = json::array();
  for (auto v : variants) names.push_back(to_string(v));
  m.config()["variants"] = names;
  m.seeds() = {{"split", cfg.train.seed}, {"model", cfg.model.seed}, {"repeats", repeats}};
  m.input("data", data_path);
  m.write(out / "manifest.json");
  return kExitOk;
}

// data-efficiency -------------------------------------------------------------

int cmd_data_efficiency(const std::string& data_path, const TrainFlags& tf,
                        const std::vector<double>& fractions, std::size_t repeats,
                        const fs::path& out, Manifest& m) {
  if (repeats < 1) throw UsageError("--repeats must be at least 1");
  if (fractions.empty()) throw UsageError("--fractions must list at least one value");
  for (double f : fractions) {
    if (!(f > 0.0 && f <= 1.0)) throw UsageError("fraction " + format_real(f) + " outside (0, 1]");
  }
  const auto data = load_dataset(data_path);
  const auto cfg = resolve_configs(tf, data.header);
  prepare_out_dir(out);
  const auto reports = run_data_efficiency(data, fractions, cfg.train, cfg.model, repeats);
  for (const auto& r : reports) {
    write_report(m, out, "report_" + fraction_tag(r.data_fraction), r);
    print_report(r);
  }
  emit(m, out / "summary.csv", summary_csv(reports));
  m.config() = config_json(cfg);
  m.config()["fractions"] = fractions;
  m.seeds() = {{"split", cfg.train.seed}, {"model", cfg.model.seed}, {"repeats", repeats}};
  m.input("data", data_path);
  m.write(out / "manifest.json");
  return kExitOk;
}

// export-attention ------------------------------------------------------------

std::string map_csv(const MatrixXr& a) {
  std::ostringstream out;
  for (Index r = 0; r < a.rows(); ++r) {
    for (Index c = 0; c < a.cols(); ++c) out << (c ? "," : "") << format_real(a(r, c));
    out << '\n';
  }
  return out.str();
}

// Binary 8-bit PGM, values min-max scaled per map; constant maps are black.
std::string map_pgm(const MatrixXr& a) {
  std::string out = "P5\n" + std::to_string(a.cols()) + " " + std::to_string(a.rows()) + "\n255\n";
  const double lo = a.minCoeff();
  const double span = a.maxCoeff() - lo;
  for (Index r = 0; r < a.rows(); ++r) {
    for (Index c = 0; c < a.cols(); ++c) {
      const double t = span > 0.0 ? (a(r, c) - lo) / span : 0.0;
      out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * t))));
    }
  }
  return out;
}

int cmd_export_attention(const std::string& data_path, const std::string& checkpoint,
                         const std::string& image_id, const fs::path& out, Manifest& m) {
  const auto data = load_dataset(data_path);
  if (!fs::exists(checkpoint)) throw IoError("checkpoint not found: " + checkpoint);
  const auto params = load_checkpoint(checkpoint);
  const auto it = std::find_if(data.samples.begin(), data.samples.end(),
                               [&](const EmbeddingSample& s) { return s.image_id == image_id; });
  if (it == data.samples.end()) throw UsageError("image id '" + image_id + "' is not in " + data_path);
  const auto maps = export_attention_maps(*it, data.vocabulary, params);
  prepare_out_dir(out);

  for (const auto& b : maps) {
    const std::string stem = "branch" + std::to_string(b.index) + "_" + std::string(kDistortionLabels[b.index]);
    const std::pair<const char*, const MatrixXr*> kinds[] = {
        {"raw_prior", &b.raw_prior}, {"semantic", &b.semantic}, {"refined", &b.refined}};
    for (const auto& [kind, mat] : kinds) {
      emit(m, out / (stem + "_" + kind + ".csv"), map_csv(*mat));
      emit(m, out / (stem + "_" + kind + ".pgm"), map_pgm(*mat));
    }
  }

  std::vector<std::size_t> order(maps.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(maps[a].weight) > std::abs(maps[b].weight);
  });
  std::vector<std::size_t> rank(maps.size());
  for (std::size_t r = 0; r < order.size(); ++r) rank[order[r]] = r + 1;

  std::ostringstream w;
  w << "index,label,alpha,weight,rank,top3\n";
  for (const auto& b : maps) {
    w << b.index << ',' << kDistortionLabels[b.index] << ',' << format_real(b.alpha) << ','
      << format_real(b.weight) << ',' << rank[b.index] << ',' << (rank[b.index] <= 3 ? 1 : 0) << '\n';
  }
  emit(m, out / "weights.csv", w.str());
  json top = json::array();
  for (std::size_t r = 0; r < std::min<std::size_t>(3, order.size()); ++r) {
    top.push_back({{"index", order[r]}, {"label", std::string(kDistortionLabels[order[r]])}, {"weight", maps[order[r]].weight}});
  }
  emit(m, out / "top3.json", top.dump(2) + "\n");

  m.config() = {{"model", to_json(params.config)}, {"image_id", image_id}};
  m.seeds() = {{"model", params.config.seed}};
  m.input("data", data_path);
  m.input("checkpoint", checkpoint);
  m.write(out / "manifest.json");
  std::cout << "top-3:";
  for (const auto& t : top) std::cout << ' ' << t.at("label").get<std::string>();
  std::cout << "\n";
  return kExitOk;
}

void tune_allocator() {
#ifdef __GLIBC__
  // Keep large tape buffers on the heap instead of fresh mmap pages.
  mallopt(M_MMAP_THRESHOLD, 64 << 20);
  mallopt(M_TRIM_THRESHOLD, 128 << 20);
#endif
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Distortion-aware expert head for blind image quality assessment"};
  app.set_version_flag("--version", DREXP_VERSION);
  app.require_subcommand(1);

  SynthFlags synth;
  auto* c_synth = app.add_subcommand("synth", "Generate a synthetic embedding dataset");
  c_synth->add_option("--count", synth.count, "Number of images")->capture_default_str();
  c_synth->add_option("--n-tokens", synth.n_tokens, "Tokens per image")->capture_default_str();
  c_synth->add_option("--dim", synth.dim, "Semantic embedding width")->capture_default_str();
  c_synth->add_option("--prior-dim", synth.prior_dim, "Prior embedding width")->capture_default_str();
  c_synth->add_option("--noise-sd", synth.noise_sd, "Label noise")->capture_default_str();
  c_synth->add_option("--leakage", synth.leakage, "Distortion signal in semantic tokens")->capture_default_str();
  c_synth->add_option("--seed", synth.seed, "Generator seed (required)");
  c_synth->add_option("--out", synth.out, "Output .drxd path")->required();

  std::string data_path, checkpoint, split_path, image_id, out;
  std::size_t repeat = 0, repeats = 10;
  std::vector<std::string> variants;
  std::vector<double> fractions{0.2, 0.4, 0.6, 1.0};

  TrainFlags train_flags;
  auto* c_train = app.add_subcommand("train", "Train on one split and save a checkpoint");
  c_train->add_option("--data", data_path, "Dataset (.drxd)")->required();
  c_train->add_option("--out", out, "Output directory")->required();
  c_train->add_option("--repeat", repeat, "Split repeat index")->capture_default_str();
  add_train_flags(*c_train, train_flags);

  auto* c_eval = app.add_subcommand(
      "eval", "Evaluate a checkpoint on its test split, or run the repeated-split protocol");
  c_eval->add_option("--data", data_path, "Dataset (.drxd)")->required();
  c_eval->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate");
  c_eval->add_option("--split", split_path, "Split file (default: split.json beside the checkpoint)");
  c_eval->add_option("--repeats", repeats, "Repeats without --checkpoint")->capture_default_str();
  c_eval->add_option("--out", out, "Output directory")->required();
  add_train_flags(*c_eval, train_flags);

  auto* c_ablate = app.add_subcommand("ablate", "Repeated-split evaluation of model variants");
  c_ablate->add_option("--data", data_path, "Dataset (.drxd)")->required();
  c_ablate->add_option("--out", out, "Output directory")->required();
  c_ablate->add_option("--variants,--variant", variants, "Variants, comma separated, or 'all'")
      ->delimiter(',')
      ->required();
  c_ablate->add_option("--repeats", repeats, "Train/test repeats")->capture_default_str();
  add_train_flags(*c_ablate, train_flags, false);

  auto* c_eff = app.add_subcommand("data-efficiency", "Evaluate on subsets of each training split");
  c_eff->add_option("--data", data_path, "Dataset (.drxd)")->required();
  c_eff->add_option("--out", out, "Output directory")->required();
  c_eff->add_option("--fractions", fractions, "Training fractions in (0, 1]")->delimiter(',');
  c_eff->add_option("--repeats", repeats, "Train/test repeats")->capture_default_str();
  add_train_flags(*c_eff, train_flags);

  auto* c_export = app.add_subcommand("export-attention", "Export attention maps and expert weights");
  c_export->add_option("--data", data_path, "Dataset (.drxd)")->required();
  c_export->add_option("--checkpoint", checkpoint, "Checkpoint")->required();
  c_export->add_option("--image-id", image_id, "Image to export")->required();
  c_export->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  const std::string name = app.get_subcommands().front()->get_name();
  Manifest manifest(name, argc, argv);
  try {
    if (*c_synth) return cmd_synth(synth, manifest);
    if (*c_train) return cmd_train(data_path, train_flags, repeat, out, manifest);
    if (*c_eval) {
      if (!checkpoint.empty()) return cmd_eval_checkpoint(data_path, checkpoint, split_path, out, manifest);
      return cmd_eval_repeats(data_path, train_flags, repeats, out, manifest);
    }
    if (*c_ablate) return cmd_ablate(data_path, train_flags, variants, repeats, out, manifest);
    if (*c_eff) return cmd_data_efficiency(data_path, train_flags, fractions, repeats, out, manifest);
    if (*c_export) return cmd_export_attention(data_path, checkpoint, image_id, out, manifest);
  } catch (const UsageError& e) {
    std::cerr << "drexp " << name << ": " << e.what() << "\n";
    return kExitUsage;
  } catch (const NumericError& e) {
    std::cerr << "drexp " << name << ": numeric failure: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const IoError& e) {
    std::cerr << "drexp " << name << ": " << e.what() << "\n";
    return kExitIo;
  } catch (const FormatError& e) {
    std::cerr << "drexp " << name << ": " << e.what() << "\n";
    return kExitIo;
  } catch (const CheckpointError& e) {
    std::cerr << "drexp " << name << ": " << e.what() << "\n";
    return kExitIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "drexp " << name << ": " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    // Remaining failures are invalid configurations or mismatched inputs.
    std::cerr << "drexp " << name << ": " << e.what() << "\n";
    return kExitUsage;
  }
  return kExitUsage;
}
