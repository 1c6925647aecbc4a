#include "dermfoundry/survival.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include "dermfoundry/stats.hpp"

namespace dermfoundry::survival {

void validate_records(const std::vector<SurvivalRecord>& records) {
  if (records.empty()) throw ValidationError("survival: empty record list");
  for (const auto& r : records) {
    if (!(r.time > 0.0))
      throw ValidationError("survival: time must be > 0 (patient " +
                            r.patient_id + ")");
    if (!std::isfinite(r.score))
      throw ValidationError("survival: non-finite score (patient " +
                            r.patient_id + ")");
  }
}

std::vector<KmStep> km_estimate(const std::vector<SurvivalRecord>& records) {
  validate_records(records);
  std::vector<const SurvivalRecord*> sorted;
  for (const auto& r : records) sorted.push_back(&r);
  std::sort(sorted.begin(), sorted.end(),
            [](const auto* a, const auto* b) { return a->time < b->time; });

  std::vector<KmStep> curve;
  double survival = 1.0;
  const std::size_t n = sorted.size();
  std::size_t i = 0;
  while (i < n) {
    const double t = sorted[i]->time;
    int events = 0;
    std::size_t j = i;
    while (j < n && sorted[j]->time == t) {
      events += sorted[j]->event;
      ++j;
    }
    const int at_risk = static_cast<int>(n - i);
    if (events > 0) {
      survival *= 1.0 - static_cast<double>(events) / at_risk;
      curve.push_back({t, survival, at_risk, events});
    }
    i = j;
  }
  return curve;
}

double km_survival_at(const std::vector<KmStep>& curve, double t) {
  double s = 1.0;
  for (const auto& step : curve) {
    if (step.time > t) break;
    s = step.survival;
  }
  return s;
}

LogrankResult logrank_test(const std::vector<SurvivalRecord>& group_a,
                           const std::vector<SurvivalRecord>& group_b) {
  if (group_a.empty() || group_b.empty())
    throw ValidationError("logrank_test: both groups must be non-empty");
  validate_records(group_a);
  validate_records(group_b);

  struct Obs {
    double time;
    bool event;
    bool in_a;
  };
  std::vector<Obs> all;
  for (const auto& r : group_a) all.push_back({r.time, r.event, true});
  for (const auto& r : group_b) all.push_back({r.time, r.event, false});
  std::sort(all.begin(), all.end(),
            [](const Obs& x, const Obs& y) { return x.time < y.time; });

  double observed_a = 0.0, expected_a = 0.0, variance = 0.0;
  const std::size_t n = all.size();
  std::size_t i = 0;
  while (i < n) {
    const double t = all[i].time;
    long deaths = 0, deaths_a = 0;
    std::size_t j = i;
    while (j < n && all[j].time == t) {
      deaths += all[j].event;
      deaths_a += all[j].event && all[j].in_a;
      ++j;
    }
    if (deaths > 0) {
      long at_risk = static_cast<long>(n - i), at_risk_a = 0;
      for (std::size_t k = i; k < n; ++k) at_risk_a += all[k].in_a;
      observed_a += deaths_a;
      expected_a += static_cast<double>(deaths) * at_risk_a / at_risk;
      if (at_risk > 1)
        variance += static_cast<double>(deaths) *
                    (static_cast<double>(at_risk_a) / at_risk) *
                    (1.0 - static_cast<double>(at_risk_a) / at_risk) *
                    (at_risk - deaths) / (at_risk - 1);
    }
    i = j;
  }

  LogrankResult out;
  const double num = observed_a - expected_a;
  if (variance > 0.0) {
    out.chi2 = num * num / variance;
    out.p = stats::chi_squared_sf(out.chi2, 1.0);
  }
  return out;
}

std::pair<std::vector<SurvivalRecord>, std::vector<SurvivalRecord>>
stratify_median(const std::vector<SurvivalRecord>& records) {
  if (records.size() < 2)
    throw ValidationError("stratify_median: need at least 2 records");
  std::vector<double> scores;
  for (const auto& r : records) scores.push_back(r.score);
  const double median = stats::quantile_linear(scores, 0.5);

  std::pair<std::vector<SurvivalRecord>, std::vector<SurvivalRecord>> out;
  for (const auto& r : records)
    (r.score <= median ? out.first : out.second).push_back(r);
  return out;
}

// ---------------------------------------------------------------------------
// Cox
// ---------------------------------------------------------------------------

namespace {

struct CoxData {
  std::vector<double> time;
  std::vector<char> event;
  // covariate matrix, n x p row-major
  std::vector<double> x;
  int n = 0, p = 0;
  double at(int i, int j) const { return x[static_cast<std::size_t>(i) * p + j]; }
};

CoxData build_cox_data(const std::vector<SurvivalRecord>& records,
                       const std::vector<std::string>& names) {
  CoxData d;
  d.n = static_cast<int>(records.size());
  d.p = static_cast<int>(names.size());
  d.x.resize(static_cast<std::size_t>(d.n) * d.p);
  for (int i = 0; i < d.n; ++i) {
    d.time.push_back(records[i].time);
    d.event.push_back(records[i].event);
    for (int j = 0; j < d.p; ++j) {
      const auto it = records[i].covariates.find(names[j]);
      if (it == records[i].covariates.end())
        throw ValidationError("cox: patient " + records[i].patient_id +
                              " missing covariate '" + names[j] + "'");
      d.x[static_cast<std::size_t>(i) * d.p + j] = it->second;
    }
  }
  return d;
}

double breslow_loglik(const CoxData& d, const std::vector<double>& beta) {
  // order decreasing by time so the risk-set sum accumulates incrementally
  std::vector<int> order(d.n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return d.time[a] > d.time[b]; });

  double ll = 0.0, risk_sum = 0.0;
  std::size_t k = 0;
  while (k < order.size()) {
    const double t = d.time[order[k]];
    std::size_t j = k;
    while (j < order.size() && d.time[order[j]] == t) {
      double eta = 0.0;
      for (int c = 0; c < d.p; ++c) eta += d.at(order[j], c) * beta[c];
      risk_sum += std::exp(eta);
      ++j;
    }
    for (std::size_t m = k; m < j; ++m) {
      if (!d.event[order[m]]) continue;
      double eta = 0.0;
      for (int c = 0; c < d.p; ++c) eta += d.at(order[m], c) * beta[c];
      ll += eta - std::log(risk_sum);
    }
    k = j;
  }
  return ll;
}

// gradient and negative Hessian (information matrix)
void breslow_derivatives(const CoxData& d, const std::vector<double>& beta,
                         std::vector<double>& grad, std::vector<double>& info) {
  const int p = d.p;
  grad.assign(p, 0.0);
  info.assign(static_cast<std::size_t>(p) * p, 0.0);

  std::vector<int> order(d.n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return d.time[a] > d.time[b]; });

  double s0 = 0.0;
  std::vector<double> s1(p, 0.0);
  std::vector<double> s2(static_cast<std::size_t>(p) * p, 0.0);

  std::size_t k = 0;
  while (k < order.size()) {
    const double t = d.time[order[k]];
    std::size_t j = k;
    while (j < order.size() && d.time[order[j]] == t) {
      const int i = order[j];
      double eta = 0.0;
      for (int c = 0; c < p; ++c) eta += d.at(i, c) * beta[c];
      const double w = std::exp(eta);
      s0 += w;
      for (int a = 0; a < p; ++a) {
        s1[a] += w * d.at(i, a);
        for (int b = 0; b < p; ++b)
          s2[static_cast<std::size_t>(a) * p + b] += w * d.at(i, a) * d.at(i, b);
      }
      ++j;
    }
    for (std::size_t m = k; m < j; ++m) {
      const int i = order[m];
      if (!d.event[i]) continue;
      for (int a = 0; a < p; ++a) {
        const double mean_a = s1[a] / s0;
        grad[a] += d.at(i, a) - mean_a;
        for (int b = 0; b < p; ++b)
          info[static_cast<std::size_t>(a) * p + b] +=
              s2[static_cast<std::size_t>(a) * p + b] / s0 -
              mean_a * (s1[b] / s0);
      }
    }
    k = j;
  }
}

// Gauss-Jordan inverse of a small symmetric positive-definite matrix
bool invert_small(std::vector<double> a, int p, std::vector<double>& inv) {
  inv.assign(static_cast<std::size_t>(p) * p, 0.0);
  for (int i = 0; i < p; ++i) inv[static_cast<std::size_t>(i) * p + i] = 1.0;
  for (int col = 0; col < p; ++col) {
    int pivot = col;
    for (int r = col + 1; r < p; ++r)
      if (std::fabs(a[static_cast<std::size_t>(r) * p + col]) >
          std::fabs(a[static_cast<std::size_t>(pivot) * p + col]))
        pivot = r;
    const double pv = a[static_cast<std::size_t>(pivot) * p + col];
    if (std::fabs(pv) < 1e-12) return false;
    for (int c = 0; c < p; ++c) {
      std::swap(a[static_cast<std::size_t>(col) * p + c],
                a[static_cast<std::size_t>(pivot) * p + c]);
      std::swap(inv[static_cast<std::size_t>(col) * p + c],
                inv[static_cast<std::size_t>(pivot) * p + c]);
    }
    const double scale = 1.0 / a[static_cast<std::size_t>(col) * p + col];
    for (int c = 0; c < p; ++c) {
      a[static_cast<std::size_t>(col) * p + c] *= scale;
      inv[static_cast<std::size_t>(col) * p + c] *= scale;
    }
    for (int r = 0; r < p; ++r) {
      if (r == col) continue;
      const double f = a[static_cast<std::size_t>(r) * p + col];
      if (f == 0.0) continue;
      for (int c = 0; c < p; ++c) {
        a[static_cast<std::size_t>(r) * p + c] -=
            f * a[static_cast<std::size_t>(col) * p + c];
        inv[static_cast<std::size_t>(r) * p + c] -=
            f * inv[static_cast<std::size_t>(col) * p + c];
      }
    }
  }
  return true;
}

}  // namespace

double cox_partial_loglik(const std::vector<SurvivalRecord>& records,
                          const std::vector<std::string>& covariate_names,
                          const std::vector<double>& coefs) {
  if (coefs.size() != covariate_names.size())
    throw ValidationError("cox_partial_loglik: coefficient count mismatch");
  return breslow_loglik(build_cox_data(records, covariate_names), coefs);
}

CoxResult cox_fit(const std::vector<SurvivalRecord>& records,
                  const std::vector<std::string>& covariate_names,
                  int max_iterations, double tolerance) {
  validate_records(records);
  if (covariate_names.empty())
    throw ValidationError("cox_fit: no covariates given");
  const CoxData full = build_cox_data(records, covariate_names);

  // zero-variance covariates cannot be estimated; fix their coefficient at 0
  std::vector<bool> active(full.p, true);
  for (int j = 0; j < full.p; ++j) {
    const double first = full.at(0, j);
    bool varies = false;
    for (int i = 1; i < full.n; ++i) varies = varies || full.at(i, j) != first;
    active[j] = varies;
  }
  std::vector<std::string> active_names;
  std::vector<int> active_idx;
  for (int j = 0; j < full.p; ++j)
    if (active[j]) {
      active_names.push_back(covariate_names[j]);
      active_idx.push_back(j);
    }

  CoxResult result;
  std::vector<double> beta(active_names.size(), 0.0);
  std::vector<double> inv_info;
  if (!active_names.empty()) {
    const CoxData d = build_cox_data(records, active_names);
    double ll = breslow_loglik(d, beta);
    std::vector<double> grad, info;
    int iter = 0;
    for (; iter < max_iterations; ++iter) {
      breslow_derivatives(d, beta, grad, info);
      double gmax = 0.0;
      for (double g : grad) gmax = std::max(gmax, std::fabs(g));
      if (gmax < tolerance) {
        result.converged = true;
        break;
      }
      std::vector<double> inv;
      if (!invert_small(info, d.p, inv))
        throw std::runtime_error(
            "cox_fit: singular information matrix (collinear covariates?)");
      std::vector<double> delta(d.p, 0.0);
      for (int a = 0; a < d.p; ++a)
        for (int b = 0; b < d.p; ++b)
          delta[a] += inv[static_cast<std::size_t>(a) * d.p + b] * grad[b];

      // step-halving keeps the likelihood non-decreasing
      double step = 1.0;
      std::vector<double> trial(d.p);
      double ll_new = ll;
      for (int h = 0; h < 30; ++h) {
        for (int a = 0; a < d.p; ++a) trial[a] = beta[a] + step * delta[a];
        ll_new = breslow_loglik(d, trial);
        if (ll_new >= ll - 1e-12) break;
        step *= 0.5;
      }
      beta = trial;
      ll = ll_new;
    }
    if (!result.converged && iter >= max_iterations)
      throw std::runtime_error("cox_fit: no convergence in " +
                               std::to_string(max_iterations) + " iterations");
    result.iterations = iter;
    result.log_likelihood = ll;
    breslow_derivatives(d, beta, grad, info);
    if (!invert_small(info, d.p, inv_info))
      throw std::runtime_error("cox_fit: singular information at the optimum");
  }

  // assemble full term list (inactive covariates flagged, HR 1)
  std::size_t a = 0;
  for (int j = 0; j < full.p; ++j) {
    CoxTerm term;
    term.name = covariate_names[j];
    if (!active[j]) {
      term.flagged = true;
      term.flag_reason = "zero-variance covariate";
    } else {
      const double coef = beta[a];
      const double se =
          std::sqrt(std::max(0.0, inv_info[a * active_names.size() + a]));
      term.coef = coef;
      term.hazard_ratio = std::exp(coef);
      term.ci_low = std::exp(coef - 1.96 * se);
      term.ci_high = std::exp(coef + 1.96 * se);
      term.p = se > 0.0 ? stats::normal_sf2(coef / se) : 1.0;
      if (std::fabs(coef) > 30.0) {
        term.flagged = true;
        term.flag_reason = "possible complete separation";
      }
      ++a;
    }
    result.terms.push_back(std::move(term));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Time-dependent AUC
// ---------------------------------------------------------------------------

std::vector<TaucPoint> time_dependent_auc(
    const std::vector<SurvivalRecord>& records,
    const std::vector<double>& horizons, bool ipcw) {
  validate_records(records);

  // censoring-distribution KM: events are the censorings
  std::vector<SurvivalRecord> flipped = records;
  for (auto& r : flipped) r.event = !r.event;
  const auto censor_curve = km_estimate(flipped);
  // left limit G(t-): survival just before t
  auto g_left = [&](double t) {
    double s = 1.0;
    for (const auto& step : censor_curve) {
      if (step.time >= t) break;
      s = step.survival;
    }
    return s;
  };
  auto g_at = [&](double t) { return km_survival_at(censor_curve, t); };

  std::vector<TaucPoint> out;
  for (const double tau : horizons) {
    TaucPoint pt;
    pt.horizon = tau;

    std::vector<std::size_t> cases, controls;
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (records[i].event && records[i].time <= tau) cases.push_back(i);
      else if (records[i].time > tau) controls.push_back(i);
    }
    if (cases.empty()) {
      pt.reason = "no cases by the horizon";
      out.push_back(pt);
      continue;
    }
    if (controls.empty()) {
      pt.reason = "no controls past the horizon";
      out.push_back(pt);
      continue;
    }

    double num = 0.0, case_w_sum = 0.0, ctrl_w_sum = 0.0;
    std::vector<double> case_w(cases.size()), ctrl_w(controls.size());
    for (std::size_t a = 0; a < cases.size(); ++a) {
      const double g = ipcw ? g_left(records[cases[a]].time) : 1.0;
      case_w[a] = g > 0.0 ? 1.0 / g : 0.0;
      case_w_sum += case_w[a];
    }
    for (std::size_t b = 0; b < controls.size(); ++b) {
      const double g = ipcw ? g_at(tau) : 1.0;
      ctrl_w[b] = g > 0.0 ? 1.0 / g : 0.0;
      ctrl_w_sum += ctrl_w[b];
    }
    if (case_w_sum <= 0.0 || ctrl_w_sum <= 0.0) {
      pt.reason = "degenerate censoring weights";
      out.push_back(pt);
      continue;
    }
    for (std::size_t a = 0; a < cases.size(); ++a)
      for (std::size_t b = 0; b < controls.size(); ++b) {
        const double sa = records[cases[a]].score;
        const double sb = records[controls[b]].score;
        const double concordant = sa > sb ? 1.0 : (sa == sb ? 0.5 : 0.0);
        num += case_w[a] * ctrl_w[b] * concordant;
      }
    pt.auc = num / (case_w_sum * ctrl_w_sum);
    out.push_back(pt);
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

SurvivalDataset load_survival_csv(const std::string& path) {
  const CsvTable t = read_csv(path);
  const int cpid = t.require_column("patient_id");
  const int ctime = t.require_column("time_months");
  const int cevent = t.require_column("event");
  const int cscore = t.require_column("score");

  std::vector<int> cov_cols;
  std::vector<std::string> cov_names;
  for (std::size_t i = 0; i < t.header.size(); ++i) {
    const auto& h = t.header[i];
    if (h != "patient_id" && h != "time_months" && h != "event" && h != "score") {
      cov_cols.push_back(static_cast<int>(i));
      cov_names.push_back(h);
    }
  }

  auto parse_num = [](const std::string& s, double& v) {
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    return res.ec == std::errc() && res.ptr == s.data() + s.size();
  };

  // first pass: decide numeric vs categorical per covariate column
  std::vector<bool> numeric(cov_cols.size(), true);
  for (const auto& row : t.rows)
    for (std::size_t j = 0; j < cov_cols.size(); ++j) {
      double v;
      if (!row[cov_cols[j]].empty() && !parse_num(row[cov_cols[j]], v))
        numeric[j] = false;
    }

  // categorical levels with the most frequent level as reference
  std::vector<std::vector<std::string>> levels(cov_cols.size());
  for (std::size_t j = 0; j < cov_cols.size(); ++j) {
    if (numeric[j]) continue;
    std::map<std::string, long> counts;
    for (const auto& row : t.rows) ++counts[row[cov_cols[j]]];
    std::string reference;
    long best = -1;
    for (const auto& [level, c] : counts)
      if (c > best) {
        best = c;
        reference = level;
      }
    for (const auto& [level, c] : counts)
      if (level != reference) levels[j].push_back(level);
    std::sort(levels[j].begin(), levels[j].end());
  }

  SurvivalDataset out;
  for (std::size_t j = 0; j < cov_cols.size(); ++j) {
    if (numeric[j]) {
      out.covariate_names.push_back(cov_names[j]);
    } else {
      for (const auto& level : levels[j])
        out.covariate_names.push_back(cov_names[j] + "=" + level);
    }
  }

  for (const auto& row : t.rows) {
    SurvivalRecord r;
    r.patient_id = row[cpid];
    double tval;
    if (!parse_num(row[ctime], tval))
      throw ValidationError("non-numeric time_months: '" + row[ctime] + "'");
    r.time = tval;
    if (row[cevent] == "1" || row[cevent] == "true") r.event = true;
    else if (row[cevent] == "0" || row[cevent] == "false") r.event = false;
    else throw ValidationError("non-boolean event: '" + row[cevent] + "'");
    double sval;
    if (!parse_num(row[cscore], sval))
      throw ValidationError("non-numeric score: '" + row[cscore] + "'");
    r.score = sval;

    for (std::size_t j = 0; j < cov_cols.size(); ++j) {
      if (numeric[j]) {
        double v = 0.0;
        if (!row[cov_cols[j]].empty()) parse_num(row[cov_cols[j]], v);
        r.covariates[cov_names[j]] = v;
      } else {
        for (const auto& level : levels[j])
          r.covariates[cov_names[j] + "=" + level] =
              row[cov_cols[j]] == level ? 1.0 : 0.0;
      }
    }
    out.records.push_back(std::move(r));
  }
  validate_records(out.records);
  return out;
}

}  // namespace dermfoundry::survival
