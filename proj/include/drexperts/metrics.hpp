// SPDX-License-Identifier: Apache-2.0
//
// Correlation metrics for quality prediction.

#pragma once

#include <span>
#include <stdexcept>
#include <vector>

namespace drexperts {

/// Raised when a correlation is undefined (too few points, zero variance).
class UndefinedMetricError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

/// 1-based ranks; tied values share the average of their positions.
std::vector<double> average_ranks(std::span<const double> values);

/// Pearson linear correlation, no logistic remapping.
double plcc(std::span<const double> pred, std::span<const double> gt);

/// Spearman rank correlation: Pearson correlation of average ranks.
double srcc(std::span<const double> pred, std::span<const double> gt);

/// Order-statistic median; the mean of the two middle values for even sizes.
/// NaN if any value is NaN.
double median(std::vector<double> values);

}  // namespace drexperts
