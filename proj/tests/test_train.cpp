// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstdlib>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "drexperts/metrics.hpp"
#include "drexperts/train.hpp"
#include "support.hpp"

using namespace drexperts;
using drexperts::testing::tiny_config;

namespace {

DatasetContainer small_dataset(std::size_t count = 60, std::uint64_t seed = 3) {
  SyntheticConfig cfg;
  cfg.count = count;
  cfg.n_tokens = 3;
  cfg.semantic_dim = 4;
  cfg.prior_dim = 10;
  cfg.seed = seed;
  return generate_synthetic(cfg).container;
}

ModelConfig small_model() {
  auto m = tiny_config(3, 4);
  m.prior_dim = 10;
  return m;
}

TrainConfig quick(std::size_t epochs = 2) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 8;
  t.base_lr = 1e-3;
  return t;
}

std::size_t count_lines(const std::string& s) {
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

}  // namespace

TEST_CASE("learning-rate schedule") {
  const TrainConfig cfg;
  CHECK(cfg.epochs == 9);
  CHECK(lr_at(0, cfg) == doctest::Approx(2e-4).epsilon(1e-15));
  CHECK(lr_at(3, cfg) == doctest::Approx(2e-5).epsilon(1e-15));
  CHECK(lr_at(6, cfg) == doctest::Approx(2e-6).epsilon(1e-15));
  for (std::size_t e = 0; e < 100; ++e) {
    const double expected = 2e-4 / std::pow(10.0, static_cast<double>(e / 3));
    CHECK(std::abs(lr_at(e, cfg) - expected) <= 1e-15 * expected);
    if (e % 3 != 0) CHECK(lr_at(e, cfg) == lr_at(e - 1, cfg));
  }
}

TEST_CASE("config validation") {
  auto bad = quick();
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = quick();
  bad.epochs = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = quick();
  bad.base_lr = -1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK_NOTHROW(quick().validate());
}

TEST_CASE("training is deterministic and records history") {
  const auto data = small_dataset();
  const auto split = make_split(data.samples.size(), 1, 0);
  const auto a = train(data, split, quick(3), small_model());
  const auto b = train(data, split, quick(3), small_model());
  CHECK(a.params == b.params);
  REQUIRE(a.history.size() == 3);
  for (std::size_t e = 0; e < 3; ++e) {
    CHECK(a.history[e].epoch == e);
    CHECK(a.history[e].lr == lr_at(e, quick(3)));
    CHECK(std::isfinite(a.history[e].loss));
    CHECK(std::memcmp(&a.history[e].srcc, &b.history[e].srcc, sizeof(double)) == 0);
  }
  CHECK(a.params.label_scale.min < a.params.label_scale.max);
  CHECK_FALSE(a.params == init_params(small_model(), a.params.config.seed));

  auto other = quick(3);
  other.seed = 99;
  CHECK_FALSE(train(data, split, other, small_model()).params == a.params);
}

TEST_CASE("label scale comes from the training split") {
  const auto data = small_dataset();
  const auto split = make_split(data.samples.size(), 2, 0);
  double lo = 1e300, hi = -1e300;
  for (auto id : split.train_ids) {
    lo = std::min(lo, data.samples[id].mos);
    hi = std::max(hi, data.samples[id].mos);
  }
  const auto r = train(data, split, quick(1), small_model());
  CHECK(r.params.label_scale.min == lo);
  CHECK(r.params.label_scale.max == hi);
}

TEST_CASE("full-batch training") {
  const auto data = small_dataset(40);
  const auto split = make_split(data.samples.size(), 1, 0);
  auto cfg = quick(2);
  cfg.batch_size = 1000;
  const auto r = train(data, split, cfg, small_model());
  CHECK(r.history.size() == 2);
  CHECK(std::isfinite(r.history.back().loss));
}

TEST_CASE("evaluate matches metrics on predictions") {
  const auto data = small_dataset();
  const auto split = make_split(data.samples.size(), 4, 0);
  const auto r = train(data, split, quick(2), small_model());
  const auto ev = evaluate(data, split.test_ids, r.params);
  REQUIRE(ev.predictions.size() == split.test_ids.size());
  std::vector<double> pred, gt;
  for (std::size_t i = 0; i < split.test_ids.size(); ++i) {
    pred.push_back(ev.predictions[i].score);
    gt.push_back(data.samples[split.test_ids[i]].mos);
  }
  CHECK(ev.srcc == srcc(pred, gt));
  CHECK(ev.plcc == plcc(pred, gt));
  CHECK(ev.srcc == r.history.back().srcc);
}

TEST_CASE("repeated evaluation and ablation") {
  const auto data = small_dataset();
  const auto one = evaluate_repeats(data, quick(1), small_model(), 1);
  REQUIRE(one.repeats.size() == 1);
  CHECK(one.median_srcc == one.repeats[0].srcc);
  CHECK(one.repeats[0].train_size == 48);
  CHECK(one.repeats[0].test_size == 12);

  const auto three = evaluate_repeats(data, quick(1), small_model(), 3);
  REQUIRE(three.repeats.size() == 3);
  CHECK(three.median_srcc ==
        median({three.repeats[0].srcc, three.repeats[1].srcc, three.repeats[2].srcc}));

  const auto full = run_ablation(data, Variant::kFull, quick(1), small_model(), 3);
  CHECK(full.variant == "full");
  CHECK(full.median_srcc == three.median_srcc);
  CHECK(full.median_plcc == three.median_plcc);

  const auto enc = run_ablation(data, Variant::kImageEncoderOnly, quick(1), small_model(), 2);
  CHECK(enc.variant == "image-encoder-only");
  CHECK(enc.repeats.size() == 2);
}

TEST_CASE("thread budget does not change results") {
  const auto data = small_dataset();
  ::setenv("DREXP_THREADS", "1", 1);
  const auto serial = evaluate_repeats(data, quick(1), small_model(), 3);
  ::setenv("DREXP_THREADS", "3", 1);
  CHECK(thread_budget() == 3);
  const auto parallel = evaluate_repeats(data, quick(1), small_model(), 3);
  ::setenv("DREXP_THREADS", "zero", 1);
  CHECK(thread_budget() == 1);
  ::unsetenv("DREXP_THREADS");
  CHECK(report_csv(serial) == report_csv(parallel));
}

TEST_CASE("training subsets") {
  std::vector<std::size_t> ids(800);
  std::iota(ids.begin(), ids.end(), std::size_t{1000});
  const auto sub = subsample_training(ids, 0.2, 5, 0);
  CHECK(sub.size() == 160);
  CHECK(std::is_sorted(sub.begin(), sub.end()));
  CHECK(std::set<std::size_t>(sub.begin(), sub.end()).size() == 160);
  for (auto id : sub) CHECK((id >= 1000 && id < 1800));
  CHECK(subsample_training(ids, 0.2, 5, 0) == sub);
  CHECK(subsample_training(ids, 0.2, 5, 1) != sub);
  CHECK(subsample_training(ids, 1.0, 5, 0) == ids);
  CHECK_THROWS_AS(subsample_training(ids, 0.0, 5, 0), std::invalid_argument);
  CHECK_THROWS_AS(subsample_training(ids, 1.5, 5, 0), std::invalid_argument);

  const auto data = small_dataset();
  const std::vector<double> fractions{0.5, 1.0};
  const auto reports = run_data_efficiency(data, fractions, quick(1), small_model(), 2);
  REQUIRE(reports.size() == 2);
  CHECK(reports[0].data_fraction == 0.5);
  CHECK(reports[0].repeats[0].train_size == 24);
  CHECK(reports[0].repeats[0].test_size == 12);
  const auto base = evaluate_repeats(data, quick(1), small_model(), 2);
  CHECK(report_csv(reports[1]) == report_csv(base));
}

TEST_CASE("serialisation of configs and reports") {
  TrainConfig t;
  t.epochs = 4;
  t.base_lr = 3e-4;
  t.seed = 17;
  TrainConfig back;
  merge_json(to_json(t), back);
  CHECK(back == t);

  TrainConfig partial;
  merge_json(nlohmann::json{{"epochs", 2}}, partial);
  CHECK(partial.epochs == 2);
  CHECK(partial.base_lr == TrainConfig{}.base_lr);

  ModelConfig m = small_model();
  m.variant = Variant::kWoSem;
  ModelConfig mback;
  merge_json(to_json(m), mback);
  CHECK(mback == m);
  CHECK_THROWS(merge_json(nlohmann::json{{"variant", "bogus"}}, mback));

  EvalReport r;
  r.variant = "only-dis";
  r.data_fraction = 0.4;
  r.repeats = {{0, 8, 2, 0.5, 0.25}, {1, 8, 2, 0.75, 0.125}};
  r.median_srcc = 0.625;
  r.median_plcc = 0.1875;
  const auto csv = report_csv(r);
  CHECK(count_lines(csv) == 4);
  CHECK(csv.rfind("variant,data_fraction,repeat,train_size,test_size,srcc,plcc\n", 0) == 0);
  CHECK(csv.find("only-dis,0.40000000000000002,median,,,0.625,0.1875\n") != std::string::npos);
  const auto j = to_json(r);
  CHECK(j.at("median_srcc") == 0.625);
  CHECK(j.at("repeats").size() == 2);

  const std::vector<EpochRecord> h{{0, 2e-4, 0.5, 0.1, 0.2}};
  CHECK(history_csv(h) == "epoch,lr,loss,srcc,plcc\n0,0.00020000000000000001,0.5,0.10000000000000001,0.20000000000000001\n");
  CHECK(format_real(0.1) == "0.10000000000000001");
  CHECK(std::stod(format_real(1.0 / 3.0)) == 1.0 / 3.0);
}
