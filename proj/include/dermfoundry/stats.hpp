#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dermfoundry/tensor.hpp"

namespace dermfoundry::stats {

// ---------------------------------------------------------------------------
// Classification metrics. Predictions are argmax with ties broken toward the
// lowest class id; AUROC uses rank statistics with midranks for ties and is
// macro one-vs-rest for multiclass.
// ---------------------------------------------------------------------------
struct ClassificationMetrics {
  double w_f1 = 0.0;
  std::optional<double> auroc;
  std::string auroc_reason;  // set when auroc is null
  double aupr = 0.0;
  double bacc = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
};

ClassificationMetrics classification_metrics(const std::vector<int>& y_true,
                                             const nn::Mat& y_prob);

double auroc_binary(const std::vector<int>& y_true,
                    const std::vector<double>& scores);
double average_precision(const std::vector<int>& y_true,
                         const std::vector<double>& scores);

// ---------------------------------------------------------------------------
// Segmentation overlap. Both masks empty scores 1.0 by convention.
// ---------------------------------------------------------------------------
struct SegMetrics {
  double dsc = 0.0;
  double jac = 0.0;
};
SegMetrics seg_metrics(const std::vector<std::uint8_t>& pred,
                       const std::vector<std::uint8_t>& truth);

// ---------------------------------------------------------------------------
// Resampling statistics.
// ---------------------------------------------------------------------------
struct BootstrapResult {
  double point = 0.0;
  double lo = 0.0;
  double hi = 0.0;
};

// Percentile bootstrap over sample indices. `statistic` receives the index
// multiset of one replicate. When `groups` is given (same length as the
// sample), whole groups are resampled together. Replicate seeds derive from
// (seed, replicate), so results are independent of evaluation order.
BootstrapResult bootstrap_ci(
    std::size_t n_samples,
    const std::function<double(const std::vector<std::size_t>&)>& statistic,
    int n_resamples, double level, std::uint64_t seed,
    const std::vector<std::string>* groups = nullptr);

// Convenience wrapper over a plain value vector.
BootstrapResult bootstrap_ci_mean(const std::vector<double>& samples,
                                  int n_resamples, double level,
                                  std::uint64_t seed);

// Paired two-sided permutation test: per-sample label swaps, p computed as
// (1 + #{|T_perm| >= |T_obs|}) / (n + 1).
double permutation_test(
    const std::vector<double>& a, const std::vector<double>& b,
    const std::function<double(const std::vector<double>&,
                               const std::vector<double>&)>& statistic,
    int n_permutations, std::uint64_t seed);

// Mean-difference statistic used by default in model comparisons.
double mean_difference(const std::vector<double>& a,
                       const std::vector<double>& b);

struct TTestResult {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;
  bool degenerate = false;  // zero-variance paired differences
};
TTestResult ttest_welch(const std::vector<double>& a,
                        const std::vector<double>& b);
TTestResult ttest_paired(const std::vector<double>& a,
                         const std::vector<double>& b);

double bonferroni(double p, int m);

// ---------------------------------------------------------------------------
// Shared numeric helpers.
// ---------------------------------------------------------------------------
// Quantile with linear interpolation between order statistics (position
// q * (n - 1) on the sorted sample).
double quantile_linear(std::vector<double> values, double q);
double chi_squared_sf(double x, double df);   // P(X >= x)
double students_t_sf2(double t, double df);   // two-sided p
double normal_sf2(double z);                  // two-sided p

struct MetricReport {
  std::string metric;
  double point = 0.0;
  double ci_low = 0.0;
  double ci_high = 0.0;
  int n_resamples = 0;
  std::vector<std::pair<std::string, double>> comparison_p;
};

}  // namespace dermfoundry::stats
