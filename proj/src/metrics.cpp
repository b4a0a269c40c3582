// SPDX-License-Identifier: Apache-2.0

#include "drexperts/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace drexperts {

std::vector<double> average_ranks(std::span<const double> values) {
  const std::size_t n = values.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i + 1;
    while (j < n && values[order[j]] == values[order[i]]) ++j;
    // positions i..j-1 (0-based) share the mean 1-based rank
    const double rank = 0.5 * static_cast<double>(i + j + 1);
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = rank;
    i = j;
  }
  return ranks;
}

double plcc(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size()) {
    throw std::invalid_argument("correlation inputs differ in length: " +
                                std::to_string(pred.size()) + " vs " + std::to_string(gt.size()));
  }
  const std::size_t n = pred.size();
  if (n < 2) throw UndefinedMetricError("correlation needs at least 2 points");
  const double mp = std::accumulate(pred.begin(), pred.end(), 0.0) / static_cast<double>(n);
  const double mg = std::accumulate(gt.begin(), gt.end(), 0.0) / static_cast<double>(n);
  double cov = 0.0;
  double vp = 0.0;
  double vg = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dp = pred[i] - mp;
    const double dg = gt[i] - mg;
    cov += dp * dg;
    vp += dp * dp;
    vg += dg * dg;
  }
  if (vp == 0.0 || vg == 0.0) throw UndefinedMetricError("correlation of a constant sequence");
  return cov / std::sqrt(vp * vg);
}

double srcc(std::span<const double> pred, std::span<const double> gt) {
  if (pred.size() != gt.size()) {
    throw std::invalid_argument("correlation inputs differ in length: " +
                                std::to_string(pred.size()) + " vs " + std::to_string(gt.size()));
  }
  const auto rp = average_ranks(pred);
  const auto rg = average_ranks(gt);
  return plcc(rp, rg);
}

double median(std::vector<double> values) {
  if (values.empty()) throw std::invalid_argument("median of an empty sequence");
  if (std::any_of(values.begin(), values.end(), [](double v) { return std::isnan(v); })) {
    return std::nan("");
  }
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

}  // namespace drexperts
