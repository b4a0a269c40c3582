// SPDX-License-Identifier: Apache-2.0

#include "drexperts/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <iomanip>
#include <sstream>

namespace drexperts {
namespace {

constexpr char kMagic[4] = {'D', 'R', 'X', 'D'};
constexpr std::size_t kPreambleBytes = 16;

// Little-endian encoding ------------------------------------------------------

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_reals(std::string& out, const double* data, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    out.append(reinterpret_cast<const char*>(data), n * sizeof(double));
  } else {
    for (std::size_t i = 0; i < n; ++i) put_u64(out, std::bit_cast<std::uint64_t>(data[i]));
  }
}

std::uint64_t get_u64(const char* p, int bytes = 8) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  }
  return v;
}

void get_reals(const char* p, double* out, std::size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out, p, n * sizeof(double));
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = std::bit_cast<double>(get_u64(p + 8 * i));
  }
}

std::size_t id_bytes_for(const std::vector<EmbeddingSample>& samples) {
  std::size_t longest = 1;
  for (const auto& s : samples) longest = std::max(longest, s.image_id.size());
  return (longest + 7) / 8 * 8;
}

std::size_t record_stride(std::size_t id_bytes, Index n, Index e, Index e_p) {
  return id_bytes + sizeof(double) * static_cast<std::size_t>(1 + e + n * e + n * e_p);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read failed for " + path.string());
  return bytes;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  std::array<std::uint32_t, 2> words{};
  seq.generate(words.begin(), words.end());
  return (static_cast<std::uint64_t>(words[0]) << 32) | words[1];
}

}  // namespace

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    out.flush();
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

DatasetHeader describe(const std::vector<EmbeddingSample>& samples,
                       const PriorVocabulary& vocabulary) {
  DatasetHeader h;
  h.count = samples.size();
  h.prior_dim = vocabulary.prior_dim();
  if (!samples.empty()) {
    h.n_tokens = samples.front().f_tokens.rows();
    h.semantic_dim = samples.front().f_tokens.cols();
    const auto [lo, hi] = std::minmax_element(
        samples.begin(), samples.end(),
        [](const EmbeddingSample& a, const EmbeddingSample& b) { return a.mos < b.mos; });
    h.label_min = lo->mos;
    h.label_max = hi->mos;
  }
  return h;
}

void validate(const DatasetContainer& c) {
  const auto& h = c.header;
  if (h.version != kDatasetFormatVersion) {
    throw FormatError("unsupported dataset version " + std::to_string(h.version));
  }
  if (h.count != c.samples.size()) {
    throw FormatError("header count " + std::to_string(h.count) + " but " +
                      std::to_string(c.samples.size()) + " records");
  }
  if (h.n_tokens <= 0 || h.semantic_dim <= 0 || h.prior_dim <= 0) {
    throw FormatError("header extents must be positive");
  }
  if (c.vocabulary.text_embeddings().rows() != static_cast<Index>(kNumDistortions)) {
    throw FormatError("vocabulary must hold exactly 10 entries");
  }
  if (c.vocabulary.prior_dim() != h.prior_dim) {
    throw FormatError("vocabulary dim " + std::to_string(c.vocabulary.prior_dim()) +
                      " differs from header prior_dim " + std::to_string(h.prior_dim));
  }
  for (std::size_t i = 0; i < c.samples.size(); ++i) {
    const auto& s = c.samples[i];
    const std::string where = "record " + std::to_string(i) + " ('" + s.image_id + "')";
    if (s.image_id.empty() || s.image_id.find('\0') != std::string::npos) {
      throw FormatError(where + ": image id must be non-empty without NUL bytes");
    }
    if (s.f_tokens.rows() != h.n_tokens || s.f_tokens.cols() != h.semantic_dim ||
        s.class_token.rows() != 1 || s.class_token.cols() != h.semantic_dim ||
        s.prior_tokens.rows() != h.n_tokens || s.prior_tokens.cols() != h.prior_dim) {
      throw FormatError(where + ": extents do not match the header");
    }
    if (!std::isfinite(s.mos)) throw FormatError(where + ": mos is not finite");
    if (!s.f_tokens.allFinite() || !s.class_token.allFinite() || !s.prior_tokens.allFinite()) {
      throw FormatError(where + ": non-finite embedding values");
    }
    if (s.mos < h.label_min || s.mos > h.label_max) {
      throw FormatError(where + ": mos outside the header label range");
    }
  }
}

void write_dataset(const DatasetContainer& c, const std::filesystem::path& path) {
  validate(c);
  const auto& h = c.header;
  const std::size_t id_bytes = id_bytes_for(c.samples);
  const std::size_t stride = record_stride(id_bytes, h.n_tokens, h.semantic_dim, h.prior_dim);

  nlohmann::json header = {
      {"version", h.version},
      {"count", h.count},
      {"n_tokens", h.n_tokens},
      {"semantic_dim", h.semantic_dim},
      {"prior_dim", h.prior_dim},
      {"label_range", {h.label_min, h.label_max}},
      {"labels", kDistortionLabels},
      {"id_bytes", id_bytes},
      {"record_stride", stride},
      {"metadata", c.metadata},
  };
  const std::string header_text = header.dump();

  std::string out;
  out.reserve(kPreambleBytes + header_text.size() + c.samples.size() * stride +
              c.vocabulary.text_embeddings().size() * sizeof(double));
  out.append(kMagic, sizeof(kMagic));
  put_u32(out, kDatasetFormatVersion);
  put_u64(out, header_text.size());
  out += header_text;
  const auto& vocab = c.vocabulary.text_embeddings();
  put_reals(out, vocab.data(), static_cast<std::size_t>(vocab.size()));
  for (const auto& s : c.samples) {
    std::string id = s.image_id;
    id.resize(id_bytes, '\0');
    out += id;
    put_reals(out, &s.mos, 1);
    put_reals(out, s.class_token.data(), static_cast<std::size_t>(s.class_token.size()));
    put_reals(out, s.f_tokens.data(), static_cast<std::size_t>(s.f_tokens.size()));
    put_reals(out, s.prior_tokens.data(), static_cast<std::size_t>(s.prior_tokens.size()));
  }
  write_file_atomic(path, out);
}

DatasetContainer read_dataset(const std::filesystem::path& path) {
  const std::string bytes = read_file(path);
  const std::string name = path.string();
  if (bytes.size() < kPreambleBytes) {
    throw FormatError(name + ": truncated, expected at least " + std::to_string(kPreambleBytes) +
                      " bytes, got " + std::to_string(bytes.size()));
  }
  if (std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError(name + ": bad magic, not a .drxd container");
  }
  const auto version = static_cast<std::uint32_t>(get_u64(bytes.data() + 4, 4));
  if (version != kDatasetFormatVersion) {
    throw FormatError(name + ": unsupported version " + std::to_string(version));
  }
  const std::uint64_t header_len = get_u64(bytes.data() + 8);
  if (header_len > bytes.size() - kPreambleBytes) {
    throw FormatError(name + ": truncated header, expected " + std::to_string(header_len) +
                      " header bytes at offset 16, file has " + std::to_string(bytes.size()));
  }

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + kPreambleBytes,
                                   bytes.begin() + static_cast<std::ptrdiff_t>(kPreambleBytes + header_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(name + ": unreadable JSON header: " + e.what());
  }

  DatasetContainer c;
  std::size_t id_bytes = 0;
  std::size_t declared_stride = 0;
  try {
    c.header.version = header.at("version").get<std::uint32_t>();
    c.header.count = header.at("count").get<std::size_t>();
    c.header.n_tokens = header.at("n_tokens").get<Index>();
    c.header.semantic_dim = header.at("semantic_dim").get<Index>();
    c.header.prior_dim = header.at("prior_dim").get<Index>();
    c.header.label_min = header.at("label_range").at(0).get<double>();
    c.header.label_max = header.at("label_range").at(1).get<double>();
    id_bytes = header.at("id_bytes").get<std::size_t>();
    declared_stride = header.at("record_stride").get<std::size_t>();
    if (header.contains("metadata")) c.metadata = header.at("metadata");
    const auto labels = header.at("labels").get<std::vector<std::string>>();
    if (labels.size() != kNumDistortions ||
        !std::equal(labels.begin(), labels.end(), kDistortionLabels.begin())) {
      throw FormatError(name + ": vocabulary labels differ from the canonical ten");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(name + ": malformed header field: " + e.what());
  }
  const auto& h = c.header;
  if (h.version != version) throw FormatError(name + ": header version disagrees with preamble");
  if (h.n_tokens <= 0 || h.semantic_dim <= 0 || h.prior_dim <= 0 || id_bytes == 0) {
    throw FormatError(name + ": header extents must be positive");
  }

  const std::size_t vocab_offset = kPreambleBytes + header_len;
  const std::size_t vocab_bytes =
      kNumDistortions * static_cast<std::size_t>(h.prior_dim) * sizeof(double);
  const std::size_t records_offset = vocab_offset + vocab_bytes;
  const std::size_t stride = record_stride(id_bytes, h.n_tokens, h.semantic_dim, h.prior_dim);
  if (stride != declared_stride) {
    std::ostringstream msg;
    msg << name << ": header extents N=" << h.n_tokens << ", E=" << h.semantic_dim
        << ", E_p=" << h.prior_dim << " imply a record stride of " << stride
        << " bytes but record_stride is " << declared_stride << " (records start at offset "
        << records_offset << ")";
    throw FormatError(msg.str());
  }
  const std::size_t expected = records_offset + h.count * stride;
  if (bytes.size() != expected) {
    std::ostringstream msg;
    msg << name << ": corrupt or truncated, expected " << expected << " bytes (" << h.count
        << " records of " << stride << " bytes from offset " << records_offset << "), got "
        << bytes.size();
    throw FormatError(msg.str());
  }

  MatrixXr vocab(static_cast<Index>(kNumDistortions), h.prior_dim);
  get_reals(bytes.data() + vocab_offset, vocab.data(), static_cast<std::size_t>(vocab.size()));
  try {
    c.vocabulary = PriorVocabulary(std::move(vocab));
  } catch (const std::exception& e) {
    throw FormatError(name + ": invalid vocabulary block: " + e.what());
  }

  c.samples.resize(h.count);
  const char* p = bytes.data() + records_offset;
  for (auto& s : c.samples) {
    const char* id_end = static_cast<const char*>(std::memchr(p, '\0', id_bytes));
    s.image_id.assign(p, id_end ? static_cast<std::size_t>(id_end - p) : id_bytes);
    p += id_bytes;
    get_reals(p, &s.mos, 1);
    p += sizeof(double);
    s.class_token.resize(1, h.semantic_dim);
    get_reals(p, s.class_token.data(), static_cast<std::size_t>(s.class_token.size()));
    p += sizeof(double) * static_cast<std::size_t>(s.class_token.size());
    s.f_tokens.resize(h.n_tokens, h.semantic_dim);
    get_reals(p, s.f_tokens.data(), static_cast<std::size_t>(s.f_tokens.size()));
    p += sizeof(double) * static_cast<std::size_t>(s.f_tokens.size());
    s.prior_tokens.resize(h.n_tokens, h.prior_dim);
    get_reals(p, s.prior_tokens.data(), static_cast<std::size_t>(s.prior_tokens.size()));
    p += sizeof(double) * static_cast<std::size_t>(s.prior_tokens.size());
  }
  validate(c);
  return c;
}

// Splits ------------------------------------------------------------------------

SplitPlan make_split(std::size_t count, std::uint64_t seed, std::size_t repeat_index,
                     double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw std::invalid_argument("split fraction must lie in (0, 1), got " +
                                std::to_string(fraction));
  }
  if (count < 5) throw std::invalid_argument("need at least 5 samples to split");
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(seed, repeat_index));
  std::shuffle(order.begin(), order.end(), rng);

  const auto n_train = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(count)));
  SplitPlan plan;
  plan.seed = seed;
  plan.repeat_index = repeat_index;
  plan.fraction = fraction;
  plan.train_ids.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  plan.test_ids.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  return plan;
}

std::vector<SplitPlan> make_splits(std::size_t count, std::uint64_t seed, std::size_t repeats,
                                   double fraction) {
  std::vector<SplitPlan> plans;
  plans.reserve(repeats);
  for (std::size_t r = 0; r < repeats; ++r) plans.push_back(make_split(count, seed, r, fraction));
  return plans;
}

nlohmann::json to_json(const SplitPlan& plan) {
  return {{"seed", plan.seed},
          {"repeat_index", plan.repeat_index},
          {"fraction", plan.fraction},
          {"train_ids", plan.train_ids},
          {"test_ids", plan.test_ids}};
}

SplitPlan split_from_json(const nlohmann::json& j) {
  SplitPlan plan;
  plan.seed = j.at("seed").get<std::uint64_t>();
  plan.repeat_index = j.at("repeat_index").get<std::size_t>();
  plan.fraction = j.at("fraction").get<double>();
  plan.train_ids = j.at("train_ids").get<std::vector<std::size_t>>();
  plan.test_ids = j.at("test_ids").get<std::vector<std::size_t>>();
  return plan;
}

// Synthetic data --------------------------------------------------------------------

double synthetic_mos(std::span<const double, kNumDistortions> importance,
                     std::span<const double, kNumDistortions> intensities) {
  double mos = 100.0;
  for (std::size_t i = 0; i < kNumDistortions; ++i) mos -= importance[i] * intensities[i];
  return mos;
}

namespace {

// Scales of the synthetic embedding components, relative to a unit-norm
// vector of the embedding width.
constexpr double kClassMeanScale = 1.0;   // dataset-wide class-token offset
constexpr double kContentScale = 1.0;     // per-image semantic content
constexpr double kTokenScale = 0.5;       // per-token semantic variation
constexpr double kPriorNoiseScale = 0.4;  // per-token noise in prior tokens

MatrixXr unit_rows(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixXr m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
  for (Index r = 0; r < rows; ++r) m.row(r).normalize();
  return m;
}

// Unit rows with disjoint supports of width cols / rows and random signs.
// Falls back to dense unit rows when there are fewer columns than rows.
MatrixXr block_signatures(Index rows, Index cols, std::mt19937_64& rng) {
  const Index width = cols / rows;
  if (width == 0) return unit_rows(rows, cols, rng);
  std::bernoulli_distribution sign(0.5);
  const double mag = 1.0 / std::sqrt(static_cast<double>(width));
  MatrixXr m = MatrixXr::Zero(rows, cols);
  for (Index r = 0; r < rows; ++r) {
    for (Index j = 0; j < width; ++j) m(r, r * width + j) = sign(rng) ? mag : -mag;
  }
  return m;
}

}  // namespace

SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.count < 1) throw std::invalid_argument("synthetic count must be at least 1");
  if (cfg.n_tokens <= 0 || cfg.semantic_dim <= 0 || cfg.prior_dim <= 0) {
    throw std::invalid_argument("synthetic extents must be positive");
  }
  if (!(cfg.noise_sd >= 0.0)) throw std::invalid_argument("noise_sd must be non-negative");

  const Index n = cfg.n_tokens;
  const Index e = cfg.semantic_dim;
  const Index e_p = cfg.prior_dim;
  std::mt19937_64 rng(mix_seed(cfg.seed, 0x5157));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  // Per-dataset structure: distortion signatures in prior space (also used
  // as the text embeddings), leakage directions in semantic space and a
  // common class-token offset.
  const MatrixXr signatures = block_signatures(static_cast<Index>(kNumDistortions), e_p, rng);
  const double unit_e = 1.0 / std::sqrt(static_cast<double>(e));
  const double unit_p = 1.0 / std::sqrt(static_cast<double>(e_p));
  const MatrixXr leak_dirs = unit_rows(static_cast<Index>(kNumDistortions), e, rng);
  MatrixXr class_mean(1, e);
  for (Index i = 0; i < e; ++i) class_mean(0, i) = kClassMeanScale * unit_e * normal(rng);

  SyntheticDataset out;
  auto& truth = out.truth;
  truth.seed = cfg.seed;
  truth.noise_sd = cfg.noise_sd;
  truth.leakage = cfg.leakage;
  truth.importance = cfg.importance;

  auto& samples = out.container.samples;
  samples.reserve(cfg.count);
  const int id_width = std::max<int>(6, static_cast<int>(std::to_string(cfg.count).size()));
  for (std::size_t k = 0; k < cfg.count; ++k) {
    std::array<double, kNumDistortions> z{};
    for (auto& zi : z) zi = cfg.fixed_intensity ? *cfg.fixed_intensity : uniform(rng);

    Eigen::RowVectorXd prior_signal = Eigen::RowVectorXd::Zero(e_p);
    Eigen::RowVectorXd leak = Eigen::RowVectorXd::Zero(e);
    for (std::size_t i = 0; i < kNumDistortions; ++i) {
      prior_signal += z[i] * signatures.row(static_cast<Index>(i));
      leak += z[i] * leak_dirs.row(static_cast<Index>(i));
    }
    leak *= cfg.leakage;

    Eigen::RowVectorXd content(e);
    for (Index i = 0; i < e; ++i) content(i) = kContentScale * unit_e * normal(rng);

    EmbeddingSample s;
    std::ostringstream id;
    id << "synth_" << std::setfill('0') << std::setw(id_width) << k;
    s.image_id = id.str();
    s.f_tokens.resize(n, e);
    for (Index t = 0; t < n; ++t) {
      for (Index i = 0; i < e; ++i) s.f_tokens(t, i) = content(i) + kTokenScale * unit_e * normal(rng) + leak(i);
    }
    s.class_token = class_mean + s.f_tokens.colwise().mean();
    s.prior_tokens.resize(n, e_p);
    for (Index t = 0; t < n; ++t) {
      for (Index i = 0; i < e_p; ++i) {
        s.prior_tokens(t, i) = kPriorNoiseScale * unit_p * normal(rng) + prior_signal(i);
      }
    }
    s.mos = synthetic_mos(cfg.importance, z) + cfg.noise_sd * normal(rng);

    truth.image_ids.push_back(s.image_id);
    truth.intensities.push_back(z);
    samples.push_back(std::move(s));
  }

  out.container.vocabulary = PriorVocabulary(signatures);
  out.container.header = describe(samples, out.container.vocabulary);
  out.container.metadata = {{"source", "synthetic"},
                            {"seed", cfg.seed},
                            {"noise_sd", cfg.noise_sd},
                            {"leakage", cfg.leakage},
                            {"importance", cfg.importance}};
  return out;
}

std::filesystem::path truth_path(const std::filesystem::path& dataset_path) {
  std::filesystem::path p = dataset_path;
  p += ".truth.json";
  return p;
}

void write_truth(const SyntheticTruth& truth, const std::filesystem::path& path) {
  nlohmann::json samples = nlohmann::json::array();
  for (std::size_t i = 0; i < truth.image_ids.size(); ++i) {
    samples.push_back({{"image_id", truth.image_ids[i]}, {"intensities", truth.intensities[i]}});
  }
  const nlohmann::json j = {{"seed", truth.seed},
                            {"noise_sd", truth.noise_sd},
                            {"leakage", truth.leakage},
                            {"labels", kDistortionLabels},
                            {"importance", truth.importance},
                            {"samples", samples}};
  write_file_atomic(path, j.dump(1) + "\n");
}

SyntheticTruth read_truth(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  SyntheticTruth t;
  try {
    const auto j = nlohmann::json::parse(text);
    t.seed = j.at("seed").get<std::uint64_t>();
    t.noise_sd = j.at("noise_sd").get<double>();
    t.leakage = j.at("leakage").get<double>();
    t.importance = j.at("importance").get<std::array<double, kNumDistortions>>();
    for (const auto& s : j.at("samples")) {
      t.image_ids.push_back(s.at("image_id").get<std::string>());
      t.intensities.push_back(s.at("intensities").get<std::array<double, kNumDistortions>>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed truth sidecar: " + e.what());
  }
  return t;
}

}  // namespace drexperts
