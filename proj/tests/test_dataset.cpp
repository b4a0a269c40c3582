// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <set>
#include <string>

#include <unistd.h>

#include "doctest.h"
#include "drexperts/dataset.hpp"
#include "support.hpp"

using namespace drexperts;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("drexp_dataset_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

SyntheticConfig small_config(std::uint64_t seed = 7) {
  SyntheticConfig cfg;
  cfg.count = 30;
  cfg.n_tokens = 3;
  cfg.semantic_dim = 5;
  cfg.prior_dim = 20;
  cfg.seed = seed;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << bytes;
}

std::string format_error(const fs::path& p) {
  try {
    read_dataset(p);
  } catch (const FormatError& e) {
    return e.what();
  }
  return {};
}

}  // namespace

TEST_CASE("container round-trips bit-exactly") {
  TempDir dir;
  const auto data = generate_synthetic(small_config());
  const fs::path p = dir.path / "set.drxd";
  write_dataset(data.container, p);
  const auto back = read_dataset(p);
  CHECK(back == data.container);
  CHECK(back.header.count == 30);
  CHECK(back.metadata.at("source") == "synthetic");

  const fs::path again = dir.path / "again.drxd";
  write_dataset(back, again);
  CHECK(slurp(p) == slurp(again));
}

TEST_CASE("awkward values survive the round trip") {
  TempDir dir;
  auto data = generate_synthetic(small_config(8)).container;
  data.samples[0].f_tokens(0, 0) = -0.0;
  data.samples[1].f_tokens(1, 2) = std::numeric_limits<double>::denorm_min();
  data.samples[2].prior_tokens(2, 3) = std::numeric_limits<double>::max();
  data.samples[3].image_id = "a much longer image identifier.png";
  data.header = describe(data.samples, data.vocabulary);
  write_dataset(data, dir.path / "x.drxd");
  const auto back = read_dataset(dir.path / "x.drxd");
  CHECK(back == data);
  CHECK(std::signbit(back.samples[0].f_tokens(0, 0)));
}

TEST_CASE("corrupt containers are rejected") {
  TempDir dir;
  const auto data = generate_synthetic(small_config());
  const fs::path p = dir.path / "set.drxd";
  write_dataset(data.container, p);
  const std::string bytes = slurp(p);

  SUBCASE("truncated") {
    const fs::path t = dir.path / "short.drxd";
    spit(t, bytes.substr(0, bytes.size() - 3));
    const auto msg = format_error(t);
    CHECK(msg.find("truncated") != std::string::npos);
    CHECK(msg.find("offset") != std::string::npos);
    spit(t, bytes.substr(0, 7));
    CHECK(format_error(t).find("truncated") != std::string::npos);
  }
  SUBCASE("bad magic") {
    std::string b = bytes;
    b[0] = 'X';
    spit(dir.path / "m.drxd", b);
    CHECK(format_error(dir.path / "m.drxd").find("magic") != std::string::npos);
  }
  SUBCASE("unsupported version") {
    std::string b = bytes;
    b[4] = 9;
    spit(dir.path / "v.drxd", b);
    CHECK(format_error(dir.path / "v.drxd").find("version") != std::string::npos);
  }
  SUBCASE("stride disagreement names the offset") {
    std::string b = bytes;
    const auto stride_at = b.find("\"record_stride\":");
    REQUIRE(stride_at != std::string::npos);
    auto digit = stride_at + std::string("\"record_stride\":").size();
    b[digit] = b[digit] == '1' ? '2' : '1';
    spit(dir.path / "s.drxd", b);
    const auto msg = format_error(dir.path / "s.drxd");
    CHECK(msg.find("record_stride") != std::string::npos);
    CHECK(msg.find("offset") != std::string::npos);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(read_dataset(dir.path / "absent.drxd"), IoError);
  }
}

TEST_CASE("invalid containers are not written") {
  TempDir dir;
  auto data = generate_synthetic(small_config()).container;
  const fs::path p = dir.path / "bad.drxd";

  auto nan_token = data;
  nan_token.samples[4].f_tokens(0, 1) = std::nan("");
  CHECK_THROWS_AS(write_dataset(nan_token, p), FormatError);
  CHECK_FALSE(fs::exists(p));

  auto bad_shape = data;
  bad_shape.samples[2].prior_tokens = MatrixXr::Zero(3, 19);
  CHECK_THROWS_AS(write_dataset(bad_shape, p), FormatError);

  auto bad_count = data;
  bad_count.header.count = 31;
  CHECK_THROWS_AS(write_dataset(bad_count, p), FormatError);

  auto empty_id = data;
  empty_id.samples[0].image_id.clear();
  CHECK_THROWS_AS(write_dataset(empty_id, p), FormatError);

  auto out_of_range = data;
  out_of_range.samples[0].mos = data.header.label_max + 1.0;
  CHECK_THROWS_AS(write_dataset(out_of_range, p), FormatError);
  CHECK_FALSE(fs::exists(p));
}

TEST_CASE("split plans") {
  for (std::size_t count : {5u, 10u, 37u, 1000u}) {
    for (std::size_t r = 0; r < 4; ++r) {
      const auto plan = make_split(count, 99, r, 0.8);
      CHECK(plan.train_ids.size() + plan.test_ids.size() == count);
      std::set<std::size_t> all(plan.train_ids.begin(), plan.train_ids.end());
      all.insert(plan.test_ids.begin(), plan.test_ids.end());
      CHECK(all.size() == count);
      CHECK(*all.rbegin() == count - 1);
      CHECK_FALSE(plan.train_ids.empty());
      CHECK_FALSE(plan.test_ids.empty());
      CHECK(make_split(count, 99, r, 0.8) == plan);
      CHECK(split_from_json(to_json(plan)) == plan);
    }
  }
  for (const auto& plan : make_splits(10, 3, 10, 0.8)) {
    CHECK(plan.train_ids.size() == 8);
    CHECK(plan.test_ids.size() == 2);
  }
  CHECK(make_split(100, 1, 0) != make_split(100, 1, 1));
  CHECK(make_split(100, 1, 0) != make_split(100, 2, 0));
  CHECK_THROWS_AS(make_split(10, 0, 0, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(make_split(10, 0, 0, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(make_split(4, 0, 0), std::invalid_argument);
}

TEST_CASE("ten repeats cover most ids") {
  // P(id tested at least once) = 1 - 0.8^10.
  const double expected = 1.0 - std::pow(0.8, 10);
  double total = 0.0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::set<std::size_t> seen;
    for (const auto& plan : make_splits(1000, seed, 10, 0.8)) seen.insert(plan.test_ids.begin(), plan.test_ids.end());
    total += static_cast<double>(seen.size()) / 1000.0;
  }
  CHECK(std::abs(total / 100.0 - expected) < 0.005);
}

TEST_CASE("synthetic labels") {
  SUBCASE("clean images score 100") {
    auto cfg = small_config();
    cfg.noise_sd = 0.0;
    cfg.fixed_intensity = 0.0;
    for (const auto& s : generate_synthetic(cfg).container.samples) CHECK(s.mos == 100.0);
  }
  SUBCASE("fully distorted images score 100 - sum(c)") {
    auto cfg = small_config();
    cfg.noise_sd = 0.0;
    cfg.fixed_intensity = 1.0;
    const auto data = generate_synthetic(cfg);
    double sum_c = 0.0;
    for (double c : data.truth.importance) sum_c += c;
    CHECK(sum_c == 50.0);
    for (const auto& s : data.container.samples) CHECK(std::abs(s.mos - (100.0 - sum_c)) < 1e-12);
  }
  SUBCASE("monotone in each intensity") {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
      std::array<double, kNumDistortions> z{};
      for (auto& x : z) x = u(rng);
      const double base = synthetic_mos(kDefaultImportance, z);
      for (std::size_t i = 0; i < kNumDistortions; ++i) {
        auto up = z;
        up[i] += 0.1;
        CHECK(synthetic_mos(kDefaultImportance, up) < base);
      }
    }
  }
  SUBCASE("least squares recovers the importance vector") {
    TempDir dir;
    auto cfg = small_config(11);
    cfg.count = 200;
    cfg.noise_sd = 0.0;
    const auto data = generate_synthetic(cfg);
    const fs::path p = dir.path / "ls.drxd";
    write_dataset(data.container, p);
    write_truth(data.truth, truth_path(p));
    const auto container = read_dataset(p);
    const auto truth = read_truth(truth_path(p));
    REQUIRE(truth.intensities.size() == 200);

    MatrixXr design(200, 11);
    Eigen::VectorXd mos(200);
    for (Index r = 0; r < 200; ++r) {
      const auto idx = static_cast<std::size_t>(r);
      CHECK(truth.image_ids[idx] == container.samples[idx].image_id);
      design(r, 0) = 1.0;
      for (Index i = 0; i < 10; ++i) design(r, i + 1) = truth.intensities[idx][static_cast<std::size_t>(i)];
      mos(r) = container.samples[idx].mos;
    }
    const Eigen::VectorXd beta = design.colPivHouseholderQr().solve(mos);
    CHECK(std::abs(beta(0) - 100.0) < 1e-9);
    for (Index i = 0; i < 10; ++i) {
      CHECK(std::abs(beta(i + 1) + truth.importance[static_cast<std::size_t>(i)]) < 1e-9);
    }
  }
}

TEST_CASE("synthetic generator") {
  const auto a = generate_synthetic(small_config(3));
  const auto b = generate_synthetic(small_config(3));
  const auto c = generate_synthetic(small_config(4));
  CHECK(a.container == b.container);
  CHECK_FALSE(a.container == c.container);
  CHECK(a.truth.intensities == b.truth.intensities);
  for (const auto& z : a.truth.intensities) {
    for (double x : z) CHECK((x >= 0.0 && x <= 1.0));
  }
  const auto& s = a.container.samples[0];
  CHECK(s.f_tokens.rows() == 3);
  CHECK(s.f_tokens.cols() == 5);
  CHECK(s.class_token.cols() == 5);
  CHECK(s.prior_tokens.cols() == 20);

  TempDir dir;
  const fs::path p = dir.path / "truth.json";
  write_truth(a.truth, p);
  const auto back = read_truth(p);
  CHECK(back.seed == a.truth.seed);
  CHECK(back.importance == a.truth.importance);
  CHECK(back.image_ids == a.truth.image_ids);
  CHECK(back.intensities == a.truth.intensities);
  CHECK(truth_path("x/set.drxd") == fs::path("x/set.drxd.truth.json"));

  auto bad = small_config();
  bad.count = 0;
  CHECK_THROWS_AS(generate_synthetic(bad), std::invalid_argument);
}
