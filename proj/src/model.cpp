// SPDX-License-Identifier: Apache-2.0

#include "drexperts/model.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

namespace drexperts {
namespace {

constexpr char kCheckpointMagic[6] = {'D', 'R', 'E', 'X', 'P', '1'};
constexpr std::size_t kCheckpointHeaderBytes = 6 + 4 + 4 + 8 * 8 + 8 * 2 + 8;

constexpr std::array<std::string_view, 10> kVariantNames = {
    "full",    "image-encoder-only", "prior-only", "dsdm-no-ddwm", "only-dis",
    "only-sem", "only-bri",          "wo-dis",     "wo-sem",       "wo-bri"};

MatrixXr zeros(Index rows, Index cols) { return MatrixXr::Zero(rows, cols); }

Linear<MatrixXr> linear_shape(Index in, Index out) { return {zeros(in, out), zeros(1, out)}; }

}  // namespace

std::string_view to_string(Variant v) { return kVariantNames.at(static_cast<std::size_t>(v)); }

std::optional<Variant> parse_variant(std::string_view name) {
  for (std::size_t i = 0; i < kVariantNames.size(); ++i) {
    if (kVariantNames[i] == name) return static_cast<Variant>(i);
  }
  return std::nullopt;
}

FeatureMask feature_mask(Variant v) {
  switch (v) {
    case Variant::kOnlyDis: return {true, false, false};
    case Variant::kOnlySem: return {false, true, false};
    case Variant::kOnlyBri: return {false, false, true};
    case Variant::kWoDis: return {false, true, true};
    case Variant::kWoSem: return {true, false, true};
    case Variant::kWoBri: return {true, true, false};
    default: return {};
  }
}

void ModelConfig::validate() const {
  if (n_tokens <= 0 || semantic_dim <= 0 || prior_dim <= 0 || attn_dim <= 0 || value_dim <= 0 ||
      ffn_hidden <= 0 || wg_hidden <= 0) {
    throw std::invalid_argument("model extents must all be positive");
  }
  if (static_cast<std::size_t>(variant) >= kVariantNames.size()) {
    throw std::invalid_argument("unknown model variant code " +
                                std::to_string(static_cast<std::uint32_t>(variant)));
  }
}

bool operator==(const ModelParams& a, const ModelParams& b) {
  if (!(a.config == b.config) || !(a.label_scale == b.label_scale)) return false;
  bool same = true;
  visit_parameters(
      [&same](const std::string&, ParamKind, const MatrixXr& x, const MatrixXr& y) {
        same = same && bit_equal(x, y);
      },
      a.tensors, b.tensors);
  return same;
}

ParameterSet<MatrixXr> parameter_shapes(const ModelConfig& c) {
  c.validate();
  ParameterSet<MatrixXr> p;
  for (auto& lin : p.prior) lin = linear_shape(c.prior_dim, c.semantic_dim);
  for (auto& b : p.branches) {
    b.w_q = zeros(c.semantic_dim, c.attn_dim);
    b.w_k = zeros(c.semantic_dim, c.attn_dim);
    b.w_dq = zeros(c.semantic_dim, c.attn_dim);
    b.w_dis_k = zeros(c.prior_dim, c.attn_dim);
    b.w_v = zeros(2 * c.semantic_dim, c.value_dim);
    b.alpha = zeros(1, 1);
  }
  p.ffn.in = linear_shape(static_cast<Index>(kNumDistortions) * c.value_dim, c.ffn_hidden);
  p.ffn.out = linear_shape(c.ffn_hidden, c.semantic_dim);
  p.ddwm.lambda = zeros(1, 1);
  p.ddwm.wg_in = linear_shape(3 * c.semantic_dim, c.wg_hidden);
  p.ddwm.prelu_slope = zeros(1, 1);
  p.ddwm.wg_out = linear_shape(c.wg_hidden, static_cast<Index>(kNumDistortions));
  p.ddwm.score_head = linear_shape(c.semantic_dim, 1);
  switch (c.variant) {
    case Variant::kPriorOnly:
      p.aux_head = linear_shape(static_cast<Index>(kNumDistortions) * c.semantic_dim, 1);
      break;
    case Variant::kDsdmNoDdwm:
      p.aux_head = linear_shape(c.semantic_dim, 1);
      break;
    default:
      p.aux_head = {zeros(0, 0), zeros(0, 0)};
  }
  return p;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams out;
  out.config = config;
  out.config.seed = seed;
  out.tensors = parameter_shapes(config);
  std::mt19937_64 rng(seed);
  visit_parameters(
      [&rng](const std::string&, ParamKind kind, MatrixXr& m) {
        switch (kind) {
          case ParamKind::kWeight: {
            if (m.size() == 0) return;
            const double bound = std::sqrt(3.0 / static_cast<double>(m.rows()));
            std::uniform_real_distribution<double> dist(-bound, bound);
            for (Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
            return;
          }
          case ParamKind::kBias: m.setZero(); return;
          case ParamKind::kAlpha:
          case ParamKind::kLambda: m.setConstant(0.5); return;
          case ParamKind::kSlope: m.setConstant(0.25); return;
        }
      },
      out.tensors);

  // Output layers start flat at the midpoint of the normalized label range.
  auto& t = out.tensors;
  t.ddwm.wg_out.weight.setZero();
  t.ddwm.score_head.weight.setZero();
  t.aux_head.weight.setZero();
  t.aux_head.bias.setConstant(kInitialScore);
  if (config.variant == Variant::kImageEncoderOnly) {
    t.ddwm.score_head.bias.setConstant(kInitialScore);
  } else {
    t.ddwm.score_head.bias.setConstant(1.0);
    t.ddwm.wg_out.bias.setConstant(kInitialScore / static_cast<double>(kNumDistortions));
  }
  return out;
}

std::size_t parameter_count(const ModelParams& params) {
  std::size_t n = 0;
  visit_parameters([&n](const std::string&, ParamKind, const MatrixXr& m) {
    n += static_cast<std::size_t>(m.size());
  },
                   params.tensors);
  return n;
}

bool is_trainable(const ModelConfig& config, const std::string& name) {
  // The prior-only ablation keeps the per-type projections at their
  // initial values and fits only its regression head.
  if (config.variant == Variant::kPriorOnly) return name.rfind("prior.", 0) != 0;
  return true;
}

ParameterSet<Tensor> bind(Tape& tape, const ModelParams& params) {
  ParameterSet<Tensor> bound;
  visit_parameters(
      [&](const std::string& name, ParamKind, const MatrixXr& value, Tensor& slot) {
        if (value.size() == 0) return;
        slot = is_trainable(params.config, name) ? tape.parameter(value) : tape.constant(value);
      },
      params.tensors, bound);
  return bound;
}

BatchInputs stack_batch(Tape& tape, std::span<const EmbeddingSample* const> samples,
                        const ModelConfig& c) {
  if (samples.empty()) throw ContractError("stack_batch: empty batch");
  const auto b = static_cast<Index>(samples.size());
  const Index n = c.n_tokens;
  MatrixXr f(b * n, c.semantic_dim);
  MatrixXr prior(b * n, c.prior_dim);
  MatrixXr cls(b, c.semantic_dim);
  for (Index i = 0; i < b; ++i) {
    const EmbeddingSample& s = *samples[static_cast<std::size_t>(i)];
    if (s.f_tokens.rows() != n || s.f_tokens.cols() != c.semantic_dim ||
        s.prior_tokens.rows() != n || s.prior_tokens.cols() != c.prior_dim ||
        s.class_token.rows() != 1 || s.class_token.cols() != c.semantic_dim) {
      std::ostringstream msg;
      msg << "sample '" << s.image_id << "' has F " << detail::shape_string(s.f_tokens.rows(), s.f_tokens.cols())
          << ", prior " << detail::shape_string(s.prior_tokens.rows(), s.prior_tokens.cols())
          << ", class " << detail::shape_string(s.class_token.rows(), s.class_token.cols())
          << "; model expects N=" << n << ", E=" << c.semantic_dim << ", E_p=" << c.prior_dim;
      throw DimensionError(msg.str());
    }
    f.middleRows(i * n, n) = s.f_tokens;
    prior.middleRows(i * n, n) = s.prior_tokens;
    cls.row(i) = s.class_token.row(0);
  }
  return {tape.constant(std::move(f)), tape.constant(std::move(prior)),
          tape.constant(std::move(cls)), n, b};
}

ForwardPass forward_batch(const BatchInputs& in, const ParameterSet<Tensor>& p,
                          const ModelConfig& c, const PriorVocabulary& vocabulary) {
  ForwardPass out;
  const Index n = in.tokens;

  if (c.variant == Variant::kImageEncoderOnly) {
    out.t_score = score_token(in.class_tokens, p.ddwm);
    out.score = out.t_score;
    return out;
  }

  const auto priors = compute_all_priors(in.prior_tokens, vocabulary, p.prior);
  if (c.variant == Variant::kPriorOnly) {
    std::vector<Tensor> pooled;
    pooled.reserve(priors.size());
    for (const auto& f_d : priors) pooled.push_back(mean_blocks(f_d, n));
    out.score = add_rowwise(matmul(concat(pooled, 1), p.aux_head.weight), p.aux_head.bias);
    return out;
  }

  std::vector<Tensor> features;
  features.reserve(kNumDistortions);
  out.branches.reserve(kNumDistortions);
  for (std::size_t i = 0; i < kNumDistortions; ++i) {
    out.branches.push_back(
        differential_attention(in.f_tokens, priors[i], in.prior_tokens, p.branches[i], n));
    features.push_back(out.branches.back().features);
  }
  const Tensor f_multi = fuse_multi_distortion(features, p.ffn);
  out.group = assemble_feature_group(in.f_tokens, f_multi, p.ddwm.lambda, feature_mask(c.variant));

  if (c.variant == Variant::kDsdmNoDdwm) {
    out.score = add_rowwise(matmul(mean_blocks(out.group->f_group, n), p.aux_head.weight),
                            p.aux_head.bias);
    return out;
  }

  out.weights = generate_weights(*out.group, p.ddwm, n);
  out.t_score = score_token(in.class_tokens, p.ddwm);
  out.score = compute_score(out.weights, out.t_score);
  return out;
}

namespace {

Diagnostics diagnostics_for(const ForwardPass& pass, Index row, const ModelParams& params) {
  Diagnostics d;
  for (std::size_t i = 0; i < kNumDistortions; ++i) {
    d.alpha[i] = params.tensors.branches[i].alpha(0, 0);
    if (pass.weights.valid()) d.weights[i] = pass.weights.value()(row, static_cast<Index>(i));
  }
  d.lambda = params.tensors.ddwm.lambda(0, 0);
  if (pass.t_score.valid()) d.t_score = pass.t_score.value()(row, 0);
  return d;
}

}  // namespace

Prediction forward(const EmbeddingSample& sample, const PriorVocabulary& vocabulary,
                   const ModelParams& params) {
  Tape tape;
  const auto bound = bind(tape, params);
  const EmbeddingSample* one[] = {&sample};
  const auto inputs = stack_batch(tape, one, params.config);
  const auto pass = forward_batch(inputs, bound, params.config, vocabulary);
  return {pass.score.value()(0, 0), diagnostics_for(pass, 0, params)};
}

std::vector<Prediction> predict(std::span<const EmbeddingSample> samples,
                                std::span<const std::size_t> ids,
                                const PriorVocabulary& vocabulary, const ModelParams& params,
                                std::size_t batch_size) {
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  std::vector<Prediction> out;
  out.reserve(ids.size());
  std::vector<const EmbeddingSample*> batch;
  for (std::size_t start = 0; start < ids.size(); start += batch_size) {
    const std::size_t end = std::min(ids.size(), start + batch_size);
    batch.clear();
    for (std::size_t k = start; k < end; ++k) batch.push_back(&samples[ids[k]]);
    Tape tape;
    const auto bound = bind(tape, params);
    const auto inputs = stack_batch(tape, batch, params.config);
    const auto pass = forward_batch(inputs, bound, params.config, vocabulary);
    for (Index r = 0; r < static_cast<Index>(batch.size()); ++r) {
      out.push_back({pass.score.value()(r, 0), diagnostics_for(pass, r, params)});
    }
  }
  return out;
}

std::vector<BranchAttention> export_attention_maps(const EmbeddingSample& sample,
                                                   const PriorVocabulary& vocabulary,
                                                   const ModelParams& params) {
  Tape tape;
  const auto bound = bind(tape, params);
  const EmbeddingSample* one[] = {&sample};
  const auto inputs = stack_batch(tape, one, params.config);
  const auto pass = forward_batch(inputs, bound, params.config, vocabulary);
  if (pass.branches.empty()) {
    throw ContractError("variant '" + std::string(to_string(params.config.variant)) +
                        "' has no attention branches");
  }
  std::vector<BranchAttention> maps;
  maps.reserve(kNumDistortions);
  for (std::size_t i = 0; i < kNumDistortions; ++i) {
    const auto& b = pass.branches[i];
    BranchAttention a;
    a.index = i;
    a.alpha = params.tensors.branches[i].alpha(0, 0);
    a.weight = pass.weights.valid() ? pass.weights.value()(0, static_cast<Index>(i)) : 0.0;
    a.raw_prior = b.maps.raw_prior.value();
    a.semantic = b.maps.semantic.value();
    a.refined = b.maps.refined.value();
    maps.push_back(std::move(a));
  }
  return maps;
}

// Checkpoints --------------------------------------------------------------------

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_f64(std::string& out, double v) { put_u64(out, std::bit_cast<std::uint64_t>(v)); }

std::uint64_t get_u(const char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = 0; i < bytes; ++i) {
    v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  }
  return v;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::filesystem::path& path) {
  const auto& c = params.config;
  c.validate();
  std::string out;
  out.append(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(c.variant));
  for (Index v : {c.n_tokens, c.semantic_dim, c.prior_dim, c.attn_dim, c.value_dim, c.ffn_hidden,
                  c.wg_hidden}) {
    put_u64(out, static_cast<std::uint64_t>(v));
  }
  put_u64(out, c.seed);
  put_f64(out, params.label_scale.min);
  put_f64(out, params.label_scale.max);
  put_u64(out, parameter_count(params));
  const auto expected = parameter_shapes(c);
  visit_parameters(
      [&out](const std::string& name, ParamKind, const MatrixXr& m, const MatrixXr& shape) {
        if (m.rows() != shape.rows() || m.cols() != shape.cols()) {
          throw CheckpointError("parameter " + name + " has shape " +
                                detail::shape_string(m.rows(), m.cols()) + ", config implies " +
                                detail::shape_string(shape.rows(), shape.cols()));
        }
        for (Index i = 0; i < m.size(); ++i) put_f64(out, m.data()[i]);
      },
      params.tensors, expected);
  write_file_atomic(path, out);
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string name = path.string();
  if (bytes.size() < kCheckpointHeaderBytes) {
    throw CheckpointError(name + ": truncated checkpoint header (" + std::to_string(bytes.size()) +
                          " of " + std::to_string(kCheckpointHeaderBytes) + " bytes)");
  }
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw CheckpointError(name + ": bad magic, not a checkpoint");
  }
  const char* p = bytes.data() + sizeof(kCheckpointMagic);
  const auto version = static_cast<std::uint32_t>(get_u(p, 4));
  if (version != kCheckpointVersion) {
    throw CheckpointError(name + ": checkpoint version " + std::to_string(version) +
                          ", expected " + std::to_string(kCheckpointVersion));
  }
  ModelParams params;
  auto& c = params.config;
  c.variant = static_cast<Variant>(get_u(p + 4, 4));
  p += 8;
  for (Index* field : {&c.n_tokens, &c.semantic_dim, &c.prior_dim, &c.attn_dim, &c.value_dim,
                       &c.ffn_hidden, &c.wg_hidden}) {
    *field = static_cast<Index>(get_u(p, 8));
    p += 8;
  }
  c.seed = get_u(p, 8);
  params.label_scale.min = std::bit_cast<double>(get_u(p + 8, 8));
  params.label_scale.max = std::bit_cast<double>(get_u(p + 16, 8));
  const std::uint64_t count = get_u(p + 24, 8);
  p += 32;
  try {
    params.tensors = parameter_shapes(c);
  } catch (const std::invalid_argument& e) {
    throw CheckpointError(name + ": invalid config header: " + e.what());
  }
  if (count != parameter_count(params)) {
    throw CheckpointError(name + ": payload declares " + std::to_string(count) +
                          " values, config implies " + std::to_string(parameter_count(params)));
  }
  const std::size_t expected_size = kCheckpointHeaderBytes + count * sizeof(double);
  if (bytes.size() != expected_size) {
    throw CheckpointError(name + ": truncated or oversized payload, expected " +
                          std::to_string(expected_size) + " bytes, got " +
                          std::to_string(bytes.size()));
  }
  visit_parameters(
      [&p](const std::string&, ParamKind, MatrixXr& m) {
        for (Index i = 0; i < m.size(); ++i) {
          m.data()[i] = std::bit_cast<double>(get_u(p, 8));
          p += 8;
        }
      },
      params.tensors);
  return params;
}

ModelParams load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected) {
  ModelParams params = load_checkpoint(path);
  auto stored = params.config;
  auto wanted = expected;
  // The seed records provenance only; shapes and variant must agree.
  stored.seed = wanted.seed = 0;
  if (!(stored == wanted)) {
    throw CheckpointError(path.string() + ": checkpoint config does not match the requested model");
  }
  return params;
}

}  // namespace drexperts
