#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "dermfoundry/core.hpp"

namespace dermfoundry::survival {

struct SurvivalRecord {
  std::string patient_id;
  double time = 0.0;  // months, > 0
  bool event = false;
  double score = 0.0;
  std::map<std::string, double> covariates;
};

void validate_records(const std::vector<SurvivalRecord>& records);

// ---------------------------------------------------------------------------
// Kaplan-Meier product-limit estimator. Steps occur at event times only;
// censoring removes subjects from the risk set without a step.
// ---------------------------------------------------------------------------
struct KmStep {
  double time = 0.0;
  double survival = 1.0;
  int at_risk = 0;
  int events = 0;
};

std::vector<KmStep> km_estimate(const std::vector<SurvivalRecord>& records);
// S(t) from the curve; right-continuous; S(t) = 1 before the first event.
double km_survival_at(const std::vector<KmStep>& curve, double t);

struct LogrankResult {
  double chi2 = 0.0;
  double p = 1.0;
};
LogrankResult logrank_test(const std::vector<SurvivalRecord>& group_a,
                           const std::vector<SurvivalRecord>& group_b);

// Median split on the score; ties at the median go to the low group.
std::pair<std::vector<SurvivalRecord>, std::vector<SurvivalRecord>>
stratify_median(const std::vector<SurvivalRecord>& records);

// ---------------------------------------------------------------------------
// Cox proportional hazards (Breslow tie handling), Newton-Raphson to
// gradient max-norm < tol. Zero-variance covariates and suspected complete
// separation are flagged, not fatal.
// ---------------------------------------------------------------------------
struct CoxTerm {
  std::string name;
  double coef = 0.0;
  double hazard_ratio = 1.0;
  double ci_low = 1.0;
  double ci_high = 1.0;
  double p = 1.0;
  bool flagged = false;
  std::string flag_reason;
};

struct CoxResult {
  std::vector<CoxTerm> terms;
  double log_likelihood = 0.0;
  int iterations = 0;
  bool converged = false;
};

CoxResult cox_fit(const std::vector<SurvivalRecord>& records,
                  const std::vector<std::string>& covariate_names,
                  int max_iterations = 100, double tolerance = 1e-8);

// Breslow partial log-likelihood at a given coefficient vector; public so
// that oracle tests can grid-search it independently of the Newton path.
double cox_partial_loglik(const std::vector<SurvivalRecord>& records,
                          const std::vector<std::string>& covariate_names,
                          const std::vector<double>& coefs);

// ---------------------------------------------------------------------------
// Time-dependent AUC, cumulative-cases / dynamic-controls with optional
// inverse-probability-of-censoring weights from the censoring-distribution
// Kaplan-Meier estimator.
// ---------------------------------------------------------------------------
struct TaucPoint {
  double horizon = 0.0;
  std::optional<double> auc;
  std::string reason;  // set when auc is null
};

std::vector<TaucPoint> time_dependent_auc(
    const std::vector<SurvivalRecord>& records,
    const std::vector<double>& horizons = {36.0, 60.0, 84.0},
    bool ipcw = true);

// ---------------------------------------------------------------------------
// CSV interface: patient_id,time_months,event,score plus covariate columns;
// non-numeric covariates are one-hot encoded against the most frequent level.
// ---------------------------------------------------------------------------
struct SurvivalDataset {
  std::vector<SurvivalRecord> records;
  std::vector<std::string> covariate_names;
};

SurvivalDataset load_survival_csv(const std::string& path);

}  // namespace dermfoundry::survival
