#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dermfoundry/rng.hpp"
#include "dermfoundry/stats.hpp"

using namespace dermfoundry;
using namespace dermfoundry::stats;
using dermfoundry::nn::Mat;

namespace {

Mat prob_rows(const std::vector<std::vector<double>>& rows) {
  Mat m(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
  for (std::size_t r = 0; r < rows.size(); ++r)
    for (std::size_t c = 0; c < rows[r].size(); ++c)
      m(static_cast<int>(r), static_cast<int>(c)) = rows[r][c];
  return m;
}

}  // namespace

TEST_CASE("perfect predictions score 1.0 on every metric") {
  const std::vector<int> y = {0, 1, 0, 1, 1, 0};
  Mat p(6, 2);
  for (int i = 0; i < 6; ++i) {
    p(i, y[i]) = 0.95;
    p(i, 1 - y[i]) = 0.05;
  }
  const auto m = classification_metrics(y, p);
  CHECK(m.w_f1 == doctest::Approx(1.0));
  CHECK(m.auroc.value() == doctest::Approx(1.0));
  CHECK(m.aupr == doctest::Approx(1.0));
  CHECK(m.bacc == doctest::Approx(1.0));
  CHECK(m.sensitivity == doctest::Approx(1.0));
  CHECK(m.specificity == doctest::Approx(1.0));
}

TEST_CASE("binary auroc ordering: correct 1.0, reversed 0.0") {
  CHECK(auroc_binary({0, 1}, {0.1, 0.9}) == doctest::Approx(1.0));
  CHECK(auroc_binary({0, 1}, {0.9, 0.1}) == doctest::Approx(0.0));
}

TEST_CASE("3-class weighted F1 matches hand computation") {
  // y_true = 0,0,0,1,1,2; preds 0,1,0,1,2,2
  // class0: P=1, R=2/3, F1=0.8; class1: P=0.5, R=0.5, F1=0.5;
  // class2: P=0.5, R=1, F1=2/3 -> W_F1 = (3*0.8 + 2*0.5 + 1*(2/3)) / 6
  const std::vector<int> y = {0, 0, 0, 1, 1, 2};
  const Mat p = prob_rows({{0.8, 0.1, 0.1},
                           {0.2, 0.7, 0.1},
                           {0.6, 0.3, 0.1},
                           {0.1, 0.8, 0.1},
                           {0.1, 0.2, 0.7},
                           {0.0, 0.3, 0.7}});
  const auto m = classification_metrics(y, p);
  CHECK(m.w_f1 == doctest::Approx((3 * 0.8 + 2 * 0.5 + 2.0 / 3.0) / 6.0).epsilon(1e-12));
}

TEST_CASE("single-class y_true yields null auroc with reason") {
  const std::vector<int> y = {1, 1, 1};
  const Mat p = prob_rows({{0.4, 0.6}, {0.3, 0.7}, {0.2, 0.8}});
  const auto m = classification_metrics(y, p);
  CHECK_FALSE(m.auroc.has_value());
  CHECK_FALSE(m.auroc_reason.empty());
}

TEST_CASE("auroc invariant under strictly monotone score transforms") {
  Rng rng(100);
  for (int rep = 0; rep < 20; ++rep) {
    std::vector<int> y(50);
    std::vector<double> s(50);
    int pos = 0;
    for (int i = 0; i < 50; ++i) {
      y[i] = rng.bernoulli(0.4) ? 1 : 0;
      pos += y[i];
      s[i] = rng.normal();
    }
    if (pos == 0 || pos == 50) continue;
    std::vector<double> t(50);
    for (int i = 0; i < 50; ++i) t[i] = std::exp(2.0 * s[i]) + 3.0;
    CHECK(auroc_binary(y, s) == doctest::Approx(auroc_binary(y, t)).epsilon(1e-12));
  }
}

TEST_CASE("W_F1 equals macro F1 on balanced data") {
  const std::vector<int> y = {0, 0, 1, 1, 2, 2};
  const Mat p = prob_rows({{0.9, 0.05, 0.05},
                           {0.1, 0.8, 0.1},
                           {0.1, 0.8, 0.1},
                           {0.7, 0.2, 0.1},
                           {0.1, 0.1, 0.8},
                           {0.1, 0.1, 0.8}});
  const auto m = classification_metrics(y, p);
  // per-class F1s, unweighted mean (balanced classes make weights uniform)
  // class0: tp1 fp1 fn1 -> P=.5 R=.5 F1=.5 ; class1: tp1 fp1 fn1 -> .5 ;
  // class2: tp2 fp0 fn0 -> 1.0
  CHECK(m.w_f1 == doctest::Approx((0.5 + 0.5 + 1.0) / 3.0).epsilon(1e-12));
}

TEST_CASE("seg metrics: identity, disjoint, half-overlap, both-empty") {
  const std::vector<std::uint8_t> a = {1, 1, 0, 0}, b = {1, 1, 0, 0};
  auto m = seg_metrics(a, b);
  CHECK(m.dsc == doctest::Approx(1.0));
  CHECK(m.jac == doctest::Approx(1.0));

  const std::vector<std::uint8_t> c = {1, 1, 0, 0}, d = {0, 0, 1, 1};
  m = seg_metrics(c, d);
  CHECK(m.dsc == doctest::Approx(0.0));
  CHECK(m.jac == doctest::Approx(0.0));

  // equal-area masks whose intersection is half the union: DSC 2/3, JAC 1/2
  const std::vector<std::uint8_t> e = {1, 1, 1, 0}, f = {0, 1, 1, 1};
  m = seg_metrics(e, f);
  CHECK(m.dsc == doctest::Approx(2.0 / 3.0));
  CHECK(m.jac == doctest::Approx(0.5));

  const std::vector<std::uint8_t> z4(4, 0);
  m = seg_metrics(z4, z4);
  CHECK(m.dsc == doctest::Approx(1.0));
  CHECK(m.jac == doctest::Approx(1.0));

  CHECK_THROWS_AS(seg_metrics({1, 0}, {1, 0, 1}), ShapeError);
}

TEST_CASE("DSC = 2J/(1+J) identity on random mask pairs") {
  Rng rng(7);
  for (int rep = 0; rep < 100; ++rep) {
    std::vector<std::uint8_t> a(64), b(64);
    for (int i = 0; i < 64; ++i) {
      a[i] = rng.bernoulli(0.4);
      b[i] = rng.bernoulli(0.4);
    }
    const auto m = seg_metrics(a, b);
    CHECK(std::fabs(m.dsc - 2.0 * m.jac / (1.0 + m.jac)) < 1e-12);
  }
}

TEST_CASE("bootstrap: constant sample gives zero-width interval") {
  const auto r = bootstrap_ci_mean({5, 5, 5, 5}, 200, 0.95, 1);
  CHECK(r.point == doctest::Approx(5.0));
  CHECK(r.lo == doctest::Approx(5.0));
  CHECK(r.hi == doctest::Approx(5.0));
}

TEST_CASE("bootstrap percentile bounds match exhaustive 3-sample enumeration") {
  const std::vector<double> sample = {0.0, 0.3, 0.9};
  // oracle: enumerate all 27 equally likely resamples, exact inverse-CDF
  std::vector<double> means;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k)
        means.push_back((sample[i] + sample[j] + sample[k]) / 3.0);
  std::sort(means.begin(), means.end());
  auto exact_q = [&](double q) {
    const std::size_t idx =
        std::min<std::size_t>(26, static_cast<std::size_t>(std::ceil(q * 27.0)) - 1);
    return means[idx];
  };
  const double lo_exact = exact_q(0.025);
  const double hi_exact = exact_q(0.975);

  const auto r = bootstrap_ci_mean(sample, 100000, 0.95, 99);
  CHECK(std::fabs(r.lo - lo_exact) < 0.02);
  CHECK(std::fabs(r.hi - hi_exact) < 0.02);
}

TEST_CASE("bootstrap interval width scales with sample dispersion") {
  Rng rng(3);
  std::vector<double> base(40);
  for (auto& v : base) v = rng.normal();
  double mean = std::accumulate(base.begin(), base.end(), 0.0) / base.size();
  std::vector<double> wide(40);
  for (int i = 0; i < 40; ++i) wide[i] = mean + 2.0 * (base[i] - mean);

  const auto a = bootstrap_ci_mean(base, 2000, 0.95, 5);
  const auto b = bootstrap_ci_mean(wide, 2000, 0.95, 5);
  const double ratio = (b.hi - b.lo) / (a.hi - a.lo);
  CHECK(ratio > 1.7);
  CHECK(ratio < 2.3);
}

TEST_CASE("bootstrap determinism: same seed, same interval") {
  const std::vector<double> s = {1, 2, 3, 4, 5, 6, 7};
  const auto a = bootstrap_ci_mean(s, 500, 0.95, 42);
  const auto b = bootstrap_ci_mean(s, 500, 0.95, 42);
  CHECK(a.lo == b.lo);
  CHECK(a.hi == b.hi);
  CHECK_THROWS_AS(bootstrap_ci_mean({1.0}, 10, 0.95, 1), ValidationError);
}

TEST_CASE("grouped bootstrap resamples whole groups") {
  // two groups with wildly different values; any replicate mean must be a
  // group-mean mixture, never a within-group blend of one sample each
  const std::vector<double> v = {0, 0, 0, 100, 100, 100};
  const std::vector<std::string> g = {"a", "a", "a", "b", "b", "b"};
  const auto r = bootstrap_ci(
      6,
      [&](const std::vector<std::size_t>& idx) {
        double s = 0;
        for (auto i : idx) s += v[i];
        return s / idx.size();
      },
      300, 0.95, 7, &g);
  CHECK(r.point == doctest::Approx(50.0));
  CHECK((r.lo == doctest::Approx(0.0) || r.lo == doctest::Approx(50.0)));
  CHECK((r.hi == doctest::Approx(100.0) || r.hi == doctest::Approx(50.0)));
}

TEST_CASE("permutation test: identical pairs give p = 1") {
  const std::vector<double> a = {1, 2, 3, 4, 5};
  CHECK(permutation_test(a, a, mean_difference, 1000, 3) == doctest::Approx(1.0));
}

TEST_CASE("permutation p matches exhaustive sign enumeration within 0.01") {
  Rng rng(8);
  std::vector<double> a(10), b(10);
  for (int i = 0; i < 10; ++i) {
    a[i] = rng.normal() + 0.8;
    b[i] = rng.normal();
  }
  // oracle: all 2^10 sign assignments of the paired differences
  std::vector<double> d(10);
  for (int i = 0; i < 10; ++i) d[i] = a[i] - b[i];
  const double obs = std::fabs(std::accumulate(d.begin(), d.end(), 0.0) / 10.0);
  int count = 0;
  for (int mask = 0; mask < 1024; ++mask) {
    double s = 0.0;
    for (int i = 0; i < 10; ++i) s += (mask >> i) & 1 ? -d[i] : d[i];
    if (std::fabs(s / 10.0) >= obs - 1e-15) ++count;
  }
  const double exact = count / 1024.0;

  const double sampled = permutation_test(a, b, mean_difference, 100000, 21);
  CHECK(std::fabs(sampled - exact) < 0.01);
}

TEST_CASE("permutation test false-positive rate is calibrated under H0") {
  int fp = 0;
  const int n_sims = 500;
  for (int sim = 0; sim < n_sims; ++sim) {
    Rng rng(derive_seed(1000, "nullsim", sim));
    std::vector<double> a(20), b(20);
    for (int i = 0; i < 20; ++i) {
      a[i] = rng.normal();
      b[i] = rng.normal();
    }
    const double p = permutation_test(a, b, mean_difference, 1000,
                                      derive_seed(2000, "permseed", sim));
    if (p <= 0.05) ++fp;
  }
  const double rate = static_cast<double>(fp) / n_sims;
  CHECK(rate >= 0.03);
  CHECK(rate <= 0.08);
}

TEST_CASE("welch t-test matches frozen reference values") {
  const std::vector<double> a = {1, 2, 3, 4, 5};
  const std::vector<double> b = {2, 4, 6, 8, 10};
  const auto r = ttest_welch(a, b);
  CHECK(r.t == doctest::Approx(-1.8973665961).epsilon(1e-8));
  CHECK(r.p == doctest::Approx(0.1075311949).epsilon(1e-3));
}

TEST_CASE("paired t-test matches frozen reference values") {
  const std::vector<double> a = {1.0, 2, 3, 4, 5};
  const std::vector<double> b = {1.5, 2.2, 3.9, 3.8, 5.5};
  const auto r = ttest_paired(a, b);
  CHECK(r.t == doctest::Approx(-2.0792674896).epsilon(1e-8));
  CHECK(r.p == doctest::Approx(0.1061108623).epsilon(1e-3));
}

TEST_CASE("t-test degenerate branches") {
  const std::vector<double> a = {1, 2, 3, 4};
  std::vector<double> b = a;
  for (auto& v : b) v += 2.0;  // constant shift: zero-variance differences
  const auto r = ttest_paired(a, b);
  CHECK(r.degenerate);
  CHECK(r.p == doctest::Approx(0.0));

  const auto same = ttest_paired(a, a);
  CHECK(same.degenerate);
  CHECK(same.p == doctest::Approx(1.0));

  const auto identical_groups = ttest_welch(a, a);
  CHECK(identical_groups.p == doctest::Approx(1.0));
  CHECK(identical_groups.t == doctest::Approx(0.0));

  CHECK_THROWS_AS(ttest_welch({1.0}, {1.0, 2.0}), ValidationError);
}

TEST_CASE("bonferroni clamps at 1") {
  CHECK(bonferroni(0.01, 3) == doctest::Approx(0.03));
  CHECK(bonferroni(0.5, 4) == doctest::Approx(1.0));
}

TEST_CASE("quantile convention: linear interpolation between order stats") {
  // {1,1,1,1,1,1,1,9}: Q3 at position 0.75*7 = 5.25 -> 1.0
  const std::vector<double> d = {1, 1, 1, 1, 1, 1, 1, 9};
  CHECK(quantile_linear(d, 0.75) == doctest::Approx(1.0));
  CHECK(quantile_linear(d, 0.25) == doctest::Approx(1.0));
  CHECK(quantile_linear({1, 2, 3, 4}, 0.5) == doctest::Approx(2.5));
}
