// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "drexperts/dsdm.hpp"
#include "support.hpp"

using namespace drexperts;
using drexperts::testing::random_matrix;

namespace {

struct BranchValues {
  MatrixXr w_q, w_k, w_dq, w_dis_k, w_v;
  double alpha = 0.5;
};

BranchValues random_branch(Index e, Index e_p, Index d, Index d_v, std::mt19937_64& rng) {
  return {random_matrix(e, d, rng), random_matrix(e, d, rng), random_matrix(e, d, rng),
          random_matrix(e_p, d, rng), random_matrix(2 * e, d_v, rng),
          std::uniform_real_distribution<double>(-1.5, 1.5)(rng)};
}

BranchParams<Tensor> bind_branch(Tape& tape, const BranchValues& b) {
  return {tape.parameter(b.w_q),     tape.parameter(b.w_k), tape.parameter(b.w_dq),
          tape.parameter(b.w_dis_k), tape.parameter(b.w_v),
          tape.parameter(MatrixXr::Constant(1, 1, b.alpha))};
}

MatrixXr softmax_ref(const MatrixXr& s) {
  MatrixXr out(s.rows(), s.cols());
  for (Index r = 0; r < s.rows(); ++r) {
    double total = 0.0;
    for (Index c = 0; c < s.cols(); ++c) total += std::exp(s(r, c));
    for (Index c = 0; c < s.cols(); ++c) out(r, c) = std::exp(s(r, c)) / total;
  }
  return out;
}

double gelu_ref(double x) {
  const double c = std::sqrt(2.0 / std::acos(-1.0));
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

}  // namespace

TEST_CASE("differential attention laws over random draws") {
  std::mt19937_64 rng(11);
  const Index n = 5, e = 4, e_p = 3, d = 4, d_v = 3;
  for (int draw = 0; draw < 100; ++draw) {
    const auto b = random_branch(e, e_p, d, d_v, rng);
    const MatrixXr f = random_matrix(n, e, rng), f_d = random_matrix(n, e, rng),
                   e_dis = random_matrix(n, e_p, rng);
    Tape tape;
    const auto out = differential_attention(tape.constant(f), tape.constant(f_d),
                                            tape.constant(e_dis), bind_branch(tape, b), n);
    const MatrixXr& refined = out.maps.refined.value();
    CHECK((refined.rowwise().sum().array() - (1.0 - b.alpha)).abs().maxCoeff() < 1e-10);
    CHECK((out.maps.raw_prior.value().rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-12);
    CHECK((refined + b.alpha * out.maps.semantic.value() - out.maps.raw_prior.value())
              .cwiseAbs()
              .maxCoeff() < 1e-10);
  }
}

TEST_CASE("alpha zero is plain cross-attention") {
  std::mt19937_64 rng(12);
  const Index n = 4, e = 3, e_p = 5, d = 2, d_v = 3;
  auto b = random_branch(e, e_p, d, d_v, rng);
  b.alpha = 0.0;
  const MatrixXr f = random_matrix(n, e, rng), f_d = random_matrix(n, e, rng),
                 e_dis = random_matrix(n, e_p, rng);
  Tape tape;
  const auto out = differential_attention(tape.constant(f), tape.constant(f_d),
                                          tape.constant(e_dis), bind_branch(tape, b), n);
  const double s = 1.0 / std::sqrt(static_cast<double>(d));
  const MatrixXr attn = softmax_ref(s * (f_d * b.w_dq) * (e_dis * b.w_dis_k).transpose());
  MatrixXr cat(n, 2 * e);
  cat << f, f_d;
  const MatrixXr expected = attn * (cat * b.w_v);
  CHECK((out.features.value() - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("identical maps with alpha one cancel exactly") {
  std::mt19937_64 rng(13);
  const Index n = 4, e = 3, d = 3, d_v = 2;
  auto b = random_branch(e, e, d, d_v, rng);
  b.alpha = 1.0;
  b.w_dq = b.w_q;
  b.w_dis_k = b.w_k;
  const MatrixXr f = random_matrix(n, e, rng);
  Tape tape;
  // F_D = F and E_dis = F make Q_D = Q and K_dis = K.
  const auto tf = tape.constant(f);
  const auto out = differential_attention(tf, tf, tf, bind_branch(tape, b), n);
  CHECK(out.maps.refined.value().isZero(0.0));
  CHECK(out.features.value().isZero(0.0));
}

TEST_CASE("hand-computed branch") {
  // N = 2, E = E_p = d = d_v = 1.
  BranchValues b;
  b.w_q = MatrixXr::Constant(1, 1, 0.3);
  b.w_k = MatrixXr::Constant(1, 1, 0.4);
  b.w_dq = MatrixXr::Constant(1, 1, 1.0);
  b.w_dis_k = MatrixXr::Constant(1, 1, 0.5);
  b.w_v = MatrixXr(2, 1);
  b.w_v << 1.0, 2.0;
  b.alpha = 0.25;
  MatrixXr f(2, 1), f_d(2, 1), e_dis(2, 1);
  f << 1.0, 2.0;
  f_d << 0.5, -1.0;
  e_dis << 1.0, -1.0;

  const double q[2] = {0.3, 0.6}, k[2] = {0.4, 0.8};
  const double qd[2] = {0.5, -1.0}, kd[2] = {0.5, -0.5};
  const double v[2] = {1.0 + 2.0 * 0.5, 2.0 + 2.0 * -1.0};
  double expected[2];
  for (int t = 0; t < 2; ++t) {
    const double r0 = std::exp(qd[t] * kd[0]), r1 = std::exp(qd[t] * kd[1]);
    const double s0 = std::exp(q[t] * k[0]), s1 = std::exp(q[t] * k[1]);
    const double m0 = r0 / (r0 + r1) - 0.25 * s0 / (s0 + s1);
    const double m1 = r1 / (r0 + r1) - 0.25 * s1 / (s0 + s1);
    expected[t] = m0 * v[0] + m1 * v[1];
  }

  Tape tape;
  const auto out = differential_attention(tape.constant(f), tape.constant(f_d),
                                          tape.constant(e_dis), bind_branch(tape, b), 2);
  CHECK(std::abs(out.features.value()(0, 0) - expected[0]) < 1e-12);
  CHECK(std::abs(out.features.value()(1, 0) - expected[1]) < 1e-12);
}

TEST_CASE("attention stays within each sample") {
  std::mt19937_64 rng(14);
  const Index n = 3, e = 2, d = 2, d_v = 2;
  const auto b = random_branch(e, e, d, d_v, rng);
  const MatrixXr f = random_matrix(2 * n, e, rng), f_d = random_matrix(2 * n, e, rng),
                 e_dis = random_matrix(2 * n, e, rng);
  Tape tape;
  const auto params = bind_branch(tape, b);
  const auto both = differential_attention(tape.constant(f), tape.constant(f_d),
                                           tape.constant(e_dis), params, n);
  const auto second = differential_attention(tape.constant(f.bottomRows(n)),
                                             tape.constant(f_d.bottomRows(n)),
                                             tape.constant(e_dis.bottomRows(n)), params, n);
  CHECK((both.features.value().bottomRows(n) - second.features.value()).cwiseAbs().maxCoeff() <
        1e-14);
}

TEST_CASE("token-count mismatch") {
  std::mt19937_64 rng(15);
  const auto b = random_branch(2, 2, 2, 2, rng);
  Tape tape;
  CHECK_THROWS_AS(differential_attention(tape.constant(MatrixXr::Zero(3, 2)),
                                         tape.constant(MatrixXr::Zero(2, 2)),
                                         tape.constant(MatrixXr::Zero(3, 2)), bind_branch(tape, b), 3),
                  DimensionError);
}

TEST_CASE("fuse_multi_distortion") {
  SUBCASE("zero in, zero out") {
    Tape tape;
    std::vector<Tensor> branches(10, tape.constant(MatrixXr::Zero(3, 2)));
    std::mt19937_64 rng(16);
    const FfnParams<Tensor> ffn{{tape.parameter(random_matrix(20, 5, rng)), tape.parameter(MatrixXr::Zero(1, 5))},
                                {tape.parameter(random_matrix(5, 4, rng)), tape.parameter(MatrixXr::Zero(1, 4))}};
    const auto out = fuse_multi_distortion(branches, ffn);
    CHECK(out.rows() == 3);
    CHECK(out.cols() == 4);
    CHECK(out.value().isZero(0.0));
  }
  SUBCASE("hand-computed N=1, d_v=1, h=2, E=1") {
    Tape tape;
    std::vector<Tensor> branches;
    MatrixXr w1(10, 2);
    for (Index i = 0; i < 10; ++i) {
      branches.push_back(tape.constant(MatrixXr::Constant(1, 1, 0.1 * static_cast<double>(i) - 0.3)));
      w1(i, 0) = 0.05 * static_cast<double>(i + 1);
      w1(i, 1) = -0.07 * static_cast<double>(10 - i);
    }
    MatrixXr b1(1, 2), w2(2, 1), b2(1, 1);
    b1 << 0.2, -0.1;
    w2 << 1.5, -0.5;
    b2 << 0.3;
    const FfnParams<Tensor> ffn{{tape.parameter(w1), tape.parameter(b1)},
                                {tape.parameter(w2), tape.parameter(b2)}};
    double hidden[2] = {b1(0, 0), b1(0, 1)};
    for (int i = 0; i < 10; ++i) {
      const double x = 0.1 * i - 0.3;
      hidden[0] += x * w1(i, 0);
      hidden[1] += x * w1(i, 1);
    }
    const double expected = gelu_ref(hidden[0]) * 1.5 + gelu_ref(hidden[1]) * -0.5 + 0.3;
    CHECK(std::abs(fuse_multi_distortion(branches, ffn).item() - expected) < 1e-12);
  }
  SUBCASE("wrong branch count") {
    Tape tape;
    std::vector<Tensor> branches(9, tape.constant(MatrixXr::Zero(1, 1)));
    const FfnParams<Tensor> ffn{{tape.parameter(MatrixXr::Zero(9, 1)), tape.parameter(MatrixXr::Zero(1, 1))},
                                {tape.parameter(MatrixXr::Zero(1, 1)), tape.parameter(MatrixXr::Zero(1, 1))}};
    CHECK_THROWS_AS(fuse_multi_distortion(branches, ffn), ContractError);
  }
}
