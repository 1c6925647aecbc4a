#include "dermfoundry/stats.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>

#include "dermfoundry/rng.hpp"

namespace dermfoundry::stats {

namespace {

int argmax_lowest_tie(const nn::Mat& probs, int row) {
  int best = 0;
  for (int c = 1; c < probs.cols; ++c)
    if (probs(row, c) > probs(row, best)) best = c;
  return best;
}

// midranks of scores (average rank for ties), 1-based
std::vector<double> midranks(const std::vector<double>& scores) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<double> ranks(n);
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double r = 0.5 * (i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double auroc_binary(const std::vector<int>& y_true,
                    const std::vector<double>& scores) {
  if (y_true.size() != scores.size())
    throw ValidationError("auroc: length mismatch");
  std::size_t n_pos = 0;
  for (int y : y_true) n_pos += y != 0;
  const std::size_t n_neg = y_true.size() - n_pos;
  if (n_pos == 0 || n_neg == 0)
    throw ValidationError("auroc: needs both classes present");
  const auto ranks = midranks(scores);
  double rank_sum_pos = 0.0;
  for (std::size_t i = 0; i < y_true.size(); ++i)
    if (y_true[i] != 0) rank_sum_pos += ranks[i];
  const double u = rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0;
  return u / (static_cast<double>(n_pos) * n_neg);
}

double average_precision(const std::vector<int>& y_true,
                         const std::vector<double>& scores) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  std::size_t n_pos = 0;
  for (int y : y_true) n_pos += y != 0;
  if (n_pos == 0) return 0.0;
  double ap = 0.0, tp = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (y_true[order[i]] != 0) {
      tp += 1.0;
      const double precision = tp / (i + 1.0);
      const double recall = tp / n_pos;
      ap += (recall - prev_recall) * precision;
      prev_recall = recall;
    }
  }
  return ap;
}

ClassificationMetrics classification_metrics(const std::vector<int>& y_true,
                                             const nn::Mat& y_prob) {
  if (y_true.size() != static_cast<std::size_t>(y_prob.rows))
    throw ValidationError("classification_metrics: row count mismatch");
  const int C = y_prob.cols;
  const std::size_t n = y_true.size();
  if (C < 2) throw ValidationError("classification_metrics: need >= 2 columns");

  std::vector<long> support(C, 0), tp(C, 0), fp(C, 0), fn(C, 0), tn(C, 0);
  for (std::size_t i = 0; i < n; ++i) {
    if (y_true[i] < 0 || y_true[i] >= C)
      throw ValidationError("classification_metrics: label out of range");
    ++support[y_true[i]];
    const int pred = argmax_lowest_tie(y_prob, static_cast<int>(i));
    for (int c = 0; c < C; ++c) {
      const bool is_c = y_true[i] == c, pred_c = pred == c;
      if (is_c && pred_c) ++tp[c];
      else if (!is_c && pred_c) ++fp[c];
      else if (is_c && !pred_c) ++fn[c];
      else ++tn[c];
    }
  }

  ClassificationMetrics out;
  double wf1 = 0.0, bacc = 0.0, sens = 0.0, spec = 0.0;
  int present = 0;
  for (int c = 0; c < C; ++c) {
    if (support[c] == 0) continue;
    ++present;
    const double prec = tp[c] + fp[c] > 0 ? double(tp[c]) / (tp[c] + fp[c]) : 0.0;
    const double rec = double(tp[c]) / (tp[c] + fn[c]);
    const double f1 = prec + rec > 0 ? 2.0 * prec * rec / (prec + rec) : 0.0;
    wf1 += f1 * support[c] / static_cast<double>(n);
    bacc += rec;
    sens += rec;
    spec += tn[c] + fp[c] > 0 ? double(tn[c]) / (tn[c] + fp[c]) : 0.0;
  }
  out.w_f1 = wf1;
  out.bacc = bacc / present;
  out.sensitivity = sens / present;
  out.specificity = spec / present;

  if (present < 2) {
    out.auroc.reset();
    out.auroc_reason = "y_true contains a single class";
    out.aupr = 0.0;
    return out;
  }

  if (C == 2) {
    std::vector<double> s1(n);
    for (std::size_t i = 0; i < n; ++i) s1[i] = y_prob(static_cast<int>(i), 1);
    out.auroc = auroc_binary(y_true, s1);
    out.aupr = average_precision(y_true, s1);
    // binary convention: sensitivity is recall of class 1, specificity of class 0
    out.sensitivity = tp[1] + fn[1] > 0 ? double(tp[1]) / (tp[1] + fn[1]) : 0.0;
    out.specificity = tp[0] + fn[0] > 0 ? double(tp[0]) / (tp[0] + fn[0]) : 0.0;
  } else {
    double macro_auc = 0.0, macro_ap = 0.0;
    int counted = 0;
    for (int c = 0; c < C; ++c) {
      if (support[c] == 0 || support[c] == static_cast<long>(n)) continue;
      std::vector<int> yc(n);
      std::vector<double> sc(n);
      for (std::size_t i = 0; i < n; ++i) {
        yc[i] = y_true[i] == c ? 1 : 0;
        sc[i] = y_prob(static_cast<int>(i), c);
      }
      macro_auc += auroc_binary(yc, sc);
      macro_ap += average_precision(yc, sc);
      ++counted;
    }
    out.auroc = macro_auc / counted;
    out.aupr = macro_ap / counted;
  }
  return out;
}

SegMetrics seg_metrics(const std::vector<std::uint8_t>& pred,
                       const std::vector<std::uint8_t>& truth) {
  if (pred.size() != truth.size())
    throw ShapeError("seg_metrics: mask size mismatch");
  long inter = 0, a = 0, b = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, t = truth[i] != 0;
    inter += p && t;
    a += p;
    b += t;
  }
  SegMetrics m;
  if (a + b == 0) {
    m.dsc = 1.0;
    m.jac = 1.0;
    return m;
  }
  m.dsc = 2.0 * inter / static_cast<double>(a + b);
  m.jac = static_cast<double>(inter) / static_cast<double>(a + b - inter);
  return m;
}

double quantile_linear(std::vector<double> values, double q) {
  if (values.empty()) throw ValidationError("quantile of empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * (values.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = static_cast<std::size_t>(std::ceil(pos));
  if (lo == hi) return values[lo];
  const double frac = pos - lo;
  return values[lo] * (1.0 - frac) + values[hi] * frac;
}

BootstrapResult bootstrap_ci(
    std::size_t n_samples,
    const std::function<double(const std::vector<std::size_t>&)>& statistic,
    int n_resamples, double level, std::uint64_t seed,
    const std::vector<std::string>* groups) {
  if (n_samples < 2) throw ValidationError("bootstrap needs >= 2 samples");
  if (groups && groups->size() != n_samples)
    throw ValidationError("bootstrap grouping length mismatch");

  std::vector<std::size_t> identity(n_samples);
  std::iota(identity.begin(), identity.end(), 0);
  BootstrapResult out;
  out.point = statistic(identity);

  // group name -> member indices (first-appearance order)
  std::vector<std::vector<std::size_t>> group_members;
  if (groups) {
    std::map<std::string, std::size_t> idx;
    for (std::size_t i = 0; i < n_samples; ++i) {
      auto [it, inserted] = idx.try_emplace((*groups)[i], group_members.size());
      if (inserted) group_members.emplace_back();
      group_members[it->second].push_back(i);
    }
  }

  std::vector<double> replicate_stats(n_resamples);
#pragma omp parallel for schedule(static)
  for (int r = 0; r < n_resamples; ++r) {
    Rng rng(derive_seed(seed, "bootstrap", static_cast<std::uint64_t>(r)));
    std::vector<std::size_t> pick;
    pick.reserve(n_samples);
    if (groups) {
      const std::size_t g = group_members.size();
      for (std::size_t i = 0; i < g; ++i) {
        const auto& members = group_members[rng.index(g)];
        pick.insert(pick.end(), members.begin(), members.end());
      }
    } else {
      for (std::size_t i = 0; i < n_samples; ++i)
        pick.push_back(rng.index(n_samples));
    }
    replicate_stats[r] = statistic(pick);
  }

  const double alpha = 1.0 - level;
  out.lo = quantile_linear(replicate_stats, alpha / 2.0);
  out.hi = quantile_linear(replicate_stats, 1.0 - alpha / 2.0);
  return out;
}

BootstrapResult bootstrap_ci_mean(const std::vector<double>& samples,
                                  int n_resamples, double level,
                                  std::uint64_t seed) {
  return bootstrap_ci(
      samples.size(),
      [&](const std::vector<std::size_t>& idx) {
        double s = 0.0;
        for (auto i : idx) s += samples[i];
        return s / idx.size();
      },
      n_resamples, level, seed);
}

double mean_difference(const std::vector<double>& a,
                       const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] - b[i];
  return s / a.size();
}

double permutation_test(
    const std::vector<double>& a, const std::vector<double>& b,
    const std::function<double(const std::vector<double>&,
                               const std::vector<double>&)>& statistic,
    int n_permutations, std::uint64_t seed) {
  if (a.size() != b.size())
    throw ValidationError("permutation_test: paired vectors differ in length");
  if (a.empty()) throw ValidationError("permutation_test: empty input");

  const double observed = std::fabs(statistic(a, b));
  std::vector<int> exceed(n_permutations, 0);
#pragma omp parallel for schedule(static)
  for (int r = 0; r < n_permutations; ++r) {
    Rng rng(derive_seed(seed, "permutation", static_cast<std::uint64_t>(r)));
    std::vector<double> pa = a, pb = b;
    for (std::size_t i = 0; i < pa.size(); ++i)
      if (rng.bernoulli(0.5)) std::swap(pa[i], pb[i]);
    if (std::fabs(statistic(pa, pb)) >= observed) exceed[r] = 1;
  }
  long count = 0;
  for (int e : exceed) count += e;
  return (1.0 + count) / (n_permutations + 1.0);
}

TTestResult ttest_welch(const std::vector<double>& a,
                        const std::vector<double>& b) {
  if (a.size() < 2 || b.size() < 2)
    throw ValidationError("t-test needs >= 2 samples per group");
  const auto mean_var = [](const std::vector<double>& v) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= v.size();
    double s2 = 0.0;
    for (double x : v) s2 += (x - m) * (x - m);
    s2 /= (v.size() - 1);
    return std::pair<double, double>(m, s2);
  };
  const auto [ma, va] = mean_var(a);
  const auto [mb, vb] = mean_var(b);
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());
  const double se2 = va / na + vb / nb;
  TTestResult res;
  if (se2 == 0.0) {
    res.degenerate = true;
    res.p = ma == mb ? 1.0 : 0.0;
    res.t = ma == mb ? 0.0 : std::numeric_limits<double>::infinity();
    return res;
  }
  res.t = (ma - mb) / std::sqrt(se2);
  res.df = se2 * se2 /
           (va * va / (na * na * (na - 1)) + vb * vb / (nb * nb * (nb - 1)));
  res.p = students_t_sf2(res.t, res.df);
  return res;
}

TTestResult ttest_paired(const std::vector<double>& a,
                         const std::vector<double>& b) {
  if (a.size() != b.size()) throw ValidationError("paired t-test length mismatch");
  if (a.size() < 2) throw ValidationError("t-test needs >= 2 pairs");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  double m = 0.0;
  for (double x : d) m += x;
  m /= d.size();
  double s2 = 0.0;
  for (double x : d) s2 += (x - m) * (x - m);
  s2 /= (d.size() - 1);

  TTestResult res;
  if (s2 == 0.0) {
    // all differences identical: no sampling variance left to test against;
    // p collapses to 0 unless the common difference is itself 0
    res.degenerate = true;
    res.p = m == 0.0 ? 1.0 : 0.0;
    res.t = m == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return res;
  }
  res.df = static_cast<double>(d.size() - 1);
  res.t = m / std::sqrt(s2 / d.size());
  res.p = students_t_sf2(res.t, res.df);
  return res;
}

double bonferroni(double p, int m) { return std::min(1.0, p * m); }

double chi_squared_sf(double x, double df) {
  if (x <= 0.0) return 1.0;
  boost::math::chi_squared dist(df);
  return boost::math::cdf(boost::math::complement(dist, x));
}

double students_t_sf2(double t, double df) {
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(t)));
}

double normal_sf2(double z) {
  boost::math::normal dist;
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(z)));
}

}  // namespace dermfoundry::stats
