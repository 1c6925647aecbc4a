#include "dermfoundry/tbp.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numeric>

#include "dermfoundry/stats.hpp"

namespace dermfoundry::tbp {

const std::array<const char*, 32> kMeasurementNames = {
    "A",           "Aext",        "B",           "Bext",
    "C",           "Cext",        "H",           "Hext",
    "L",           "Lext",        "areaMM2",     "area_perim_ratio",
    "color_std_mean", "deltaA",   "deltaB",      "deltaL",
    "deltaLB",     "deltaLBnorm", "dnn_lesion_confidence", "eccentricity",
    "location_simple", "majorAxisMM", "minorAxisMM", "nevi_confidence",
    "norm_border", "norm_color",  "perimeterMM", "radial_color_std_max",
    "stdL",        "stdLExt",     "symm_2axis",  "symm_2axis_angle"};

std::optional<double> LesionRecord::measurement(const std::string& name) const {
  const auto it = measurements.find(name);
  if (it == measurements.end())
    throw SchemaError("unknown measurement: " + name);
  return it->second;
}

void validate_record(const LesionRecord& r) {
  if (r.lesion_id.empty()) throw ValidationError("lesion_id must be non-empty");
  for (const char* name : kMeasurementNames)
    if (!r.measurements.count(name))
      throw SchemaError("lesion " + r.lesion_id +
                        " missing measurement key: " + name);
}

std::vector<LesionRecord> load_lesions_csv(const std::string& path) {
  const CsvTable t = read_csv(path);
  const int cid = t.require_column("lesion_id");
  const int cpat = t.require_column("patient_id");
  const int ctile = t.column("tile_ref");
  const int coob = t.column("out_of_bounds_fraction");
  const int crisk = t.column("label_risk");
  const int cmal = t.column("label_malignant");
  std::array<int, 32> mcols;
  for (std::size_t i = 0; i < kMeasurementNames.size(); ++i)
    mcols[i] = t.require_column(kMeasurementNames[i]);

  auto parse_opt = [](const std::string& s) -> std::optional<double> {
    if (s.empty() || s == "null" || s == "NA") return std::nullopt;
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
      throw ValidationError("non-numeric measurement value: '" + s + "'");
    return v;
  };
  auto parse_bool = [](const std::string& s) -> std::optional<bool> {
    if (s.empty()) return std::nullopt;
    if (s == "1" || s == "true") return true;
    if (s == "0" || s == "false") return false;
    throw ValidationError("non-boolean label value: '" + s + "'");
  };

  std::vector<LesionRecord> out;
  std::set<std::string> seen;
  for (const auto& row : t.rows) {
    LesionRecord r;
    r.lesion_id = row[cid];
    if (!seen.insert(r.lesion_id).second)
      throw ValidationError("duplicate lesion_id: " + r.lesion_id);
    r.patient_id = row[cpat];
    if (ctile >= 0) r.tile_ref = row[ctile];
    for (std::size_t i = 0; i < kMeasurementNames.size(); ++i)
      r.measurements[kMeasurementNames[i]] = parse_opt(row[mcols[i]]);
    if (coob >= 0) r.out_of_bounds_fraction = parse_opt(row[coob]);
    if (crisk >= 0) r.label_risk = parse_bool(row[crisk]);
    if (cmal >= 0) r.label_malignant = parse_bool(row[cmal]);
    validate_record(r);
    out.push_back(std::move(r));
  }
  return out;
}

FilterResult filter_lesions(const std::vector<LesionRecord>& records) {
  FilterResult out;
  for (const auto& r : records) {
    validate_record(r);
    const auto major = r.measurement("majorAxisMM");
    const auto delta = r.measurement("deltaLBnorm");
    const auto dnn = r.measurement("dnn_lesion_confidence");
    const auto nevi = r.measurement("nevi_confidence");
    const auto& oob = r.out_of_bounds_fraction;

    std::string reason;
    if (!major || !delta || !dnn || !nevi || !oob)
      reason = "null in a filtered field";
    else if (*major < 2.0)
      reason = "majorAxisMM < 2";
    else if (*delta < 4.5)
      reason = "deltaLBnorm < 4.5";
    else if (*oob > 0.25)
      reason = "out_of_bounds_fraction > 0.25";
    else if (*dnn < 50.0)
      reason = "dnn_lesion_confidence < 50";
    else if (!(*nevi > 80.0))
      reason = "nevi_confidence <= 80";

    if (reason.empty())
      out.kept.push_back(r);
    else
      out.dropped.emplace_back(r.lesion_id, reason);
  }
  return out;
}

double tukey_upper_threshold(const std::vector<double>& values) {
  std::vector<double> v = values;
  const double q1 = stats::quantile_linear(v, 0.25);
  const double q3 = stats::quantile_linear(v, 0.75);
  return q3 + 1.5 * (q3 - q1);
}

UdResult ud_outliers(const std::vector<std::string>& lesion_ids,
                     const std::vector<std::string>& patient_ids,
                     const nn::Mat& features) {
  if (lesion_ids.size() != patient_ids.size() ||
      lesion_ids.size() != static_cast<std::size_t>(features.rows))
    throw ValidationError("ud_outliers: input length mismatch");

  std::map<std::string, std::vector<std::size_t>> by_patient;
  for (std::size_t i = 0; i < patient_ids.size(); ++i)
    by_patient[patient_ids[i]].push_back(i);

  UdResult out;
  for (const auto& [patient, rows] : by_patient) {
    if (rows.size() < 4) {
      out.skipped_patients.insert(patient);
      continue;
    }
    std::vector<double> mean(features.cols, 0.0);
    for (auto r : rows)
      for (int c = 0; c < features.cols; ++c)
        mean[c] += features(static_cast<int>(r), c);
    for (auto& m : mean) m /= static_cast<double>(rows.size());

    std::vector<double> dist(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
      double s = 0.0;
      for (int c = 0; c < features.cols; ++c) {
        const double d = features(static_cast<int>(rows[k]), c) - mean[c];
        s += d * d;
      }
      dist[k] = std::sqrt(s);
    }
    const double thr = tukey_upper_threshold(dist);
    for (std::size_t k = 0; k < rows.size(); ++k)
      if (dist[k] > thr) out.positives.insert(lesion_ids[rows[k]]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Extra trees
// ---------------------------------------------------------------------------

namespace {

struct SplitCandidate {
  int feature = -1;
  double threshold = 0.0;
  double gini = std::numeric_limits<double>::infinity();
};

double gini_impurity(const std::vector<long>& counts, long total) {
  if (total == 0) return 0.0;
  double g = 1.0;
  for (long c : counts) {
    const double p = static_cast<double>(c) / total;
    g -= p * p;
  }
  return g;
}

}  // namespace

void ExtraTreesClassifier::fit(const nn::Mat& x, const std::vector<int>& y,
                               int num_classes, const ExtraTreesConfig& cfg,
                               std::uint64_t seed) {
  if (x.rows != static_cast<int>(y.size()))
    throw ValidationError("extra trees: feature/label length mismatch");
  if (x.rows == 0) throw ValidationError("extra trees: empty training set");
  {
    std::set<int> classes(y.begin(), y.end());
    if (classes.size() < 2)
      throw ValidationError("extra trees: training labels are single-class");
  }
  num_classes_ = num_classes;
  trees_.assign(cfg.n_trees, {});

  const int n_features = x.cols;
  const int k = cfg.max_features > 0
                    ? std::min(cfg.max_features, n_features)
                    : std::max(1, static_cast<int>(std::lround(
                                      std::sqrt(static_cast<double>(n_features)))));

#pragma omp parallel for schedule(dynamic)
  for (int t = 0; t < cfg.n_trees; ++t) {
    Rng rng(derive_seed(seed, "extratree", static_cast<std::uint64_t>(t)));
    auto& nodes = trees_[t];

    // iterative build: (node index, sample indices, depth)
    struct Work {
      int node;
      std::vector<int> samples;
      int depth;
    };
    std::vector<Work> stack;
    nodes.emplace_back();
    {
      std::vector<int> all(x.rows);
      std::iota(all.begin(), all.end(), 0);
      stack.push_back({0, std::move(all), 0});
    }

    while (!stack.empty()) {
      Work w = std::move(stack.back());
      stack.pop_back();

      std::vector<long> counts(num_classes, 0);
      for (int i : w.samples) ++counts[y[i]];
      const long total = static_cast<long>(w.samples.size());
      const bool pure = std::count_if(counts.begin(), counts.end(),
                                      [](long c) { return c > 0; }) <= 1;
      const bool depth_capped = cfg.max_depth >= 0 && w.depth >= cfg.max_depth;
      if (pure || depth_capped ||
          total < static_cast<long>(cfg.min_samples_split)) {
        auto& leaf = nodes[w.node];
        leaf.class_fraction.resize(num_classes);
        for (int c = 0; c < num_classes; ++c)
          leaf.class_fraction[c] = static_cast<double>(counts[c]) / total;
        continue;
      }

      // candidate features without replacement, one-or-more random cuts each
      std::vector<int> feats(n_features);
      std::iota(feats.begin(), feats.end(), 0);
      rng.shuffle(feats);
      feats.resize(k);

      SplitCandidate best;
      for (int f : feats) {
        double lo = x(w.samples[0], f), hi = lo;
        for (int i : w.samples) {
          lo = std::min(lo, x(i, f));
          hi = std::max(hi, x(i, f));
        }
        if (lo == hi) continue;
        for (int cut = 0; cut < std::max(1, cfg.cuts_per_feature); ++cut) {
          const double thr = rng.uniform(lo, hi);
          std::vector<long> lc(num_classes, 0), rc(num_classes, 0);
          long ln = 0, rn = 0;
          for (int i : w.samples) {
            if (x(i, f) <= thr) {
              ++lc[y[i]];
              ++ln;
            } else {
              ++rc[y[i]];
              ++rn;
            }
          }
          if (ln == 0 || rn == 0) continue;
          const double g = (ln * gini_impurity(lc, ln) + rn * gini_impurity(rc, rn)) /
                           total;
          if (g < best.gini) best = {f, thr, g};
        }
      }

      if (best.feature < 0) {  // all candidates constant: make a leaf
        auto& leaf = nodes[w.node];
        leaf.class_fraction.resize(num_classes);
        for (int c = 0; c < num_classes; ++c)
          leaf.class_fraction[c] = static_cast<double>(counts[c]) / total;
        continue;
      }

      std::vector<int> left, right;
      for (int i : w.samples)
        (x(i, best.feature) <= best.threshold ? left : right).push_back(i);

      const int li = static_cast<int>(nodes.size());
      nodes.emplace_back();
      const int ri = static_cast<int>(nodes.size());
      nodes.emplace_back();
      nodes[w.node].feature = best.feature;
      nodes[w.node].threshold = best.threshold;
      nodes[w.node].left = li;
      nodes[w.node].right = ri;
      stack.push_back({li, std::move(left), w.depth + 1});
      stack.push_back({ri, std::move(right), w.depth + 1});
    }
  }
}

nn::Mat ExtraTreesClassifier::predict_proba(const nn::Mat& x) const {
  if (trees_.empty()) throw ValidationError("extra trees: model not fitted");
  nn::Mat out(x.rows, num_classes_);
  for (int i = 0; i < x.rows; ++i) {
    for (const auto& nodes : trees_) {
      int n = 0;
      while (nodes[n].feature >= 0)
        n = x(i, nodes[n].feature) <= nodes[n].threshold ? nodes[n].left
                                                         : nodes[n].right;
      for (int c = 0; c < num_classes_; ++c)
        out(i, c) += nodes[n].class_fraction[c];
    }
    for (int c = 0; c < num_classes_; ++c)
      out(i, c) /= static_cast<double>(trees_.size());
  }
  return out;
}

MetadataModel fit_metadata_model(const std::vector<LesionRecord>& train,
                                 const ExtraTreesConfig& cfg, std::uint64_t seed) {
  MetadataModel model;
  for (const char* name : kMeasurementNames) model.feature_names.push_back(name);

  nn::Mat x(static_cast<int>(train.size()), 32);
  std::vector<int> y;
  for (std::size_t i = 0; i < train.size(); ++i) {
    validate_record(train[i]);
    if (!train[i].label_malignant)
      throw ValidationError("metadata model: lesion " + train[i].lesion_id +
                            " lacks a pathology label");
    y.push_back(*train[i].label_malignant ? 1 : 0);
    for (int f = 0; f < 32; ++f) {
      const auto v = train[i].measurements.at(model.feature_names[f]);
      if (!v)
        throw ValidationError("metadata model: lesion " + train[i].lesion_id +
                              " has null measurement '" +
                              model.feature_names[f] + "' (not imputed)");
      x(static_cast<int>(i), f) = *v;
    }
  }
  model.trees.fit(x, y, 2, cfg, seed);
  return model;
}

std::vector<double> predict_metadata(const MetadataModel& model,
                                     const std::vector<LesionRecord>& records) {
  nn::Mat x(static_cast<int>(records.size()), 32);
  for (std::size_t i = 0; i < records.size(); ++i) {
    validate_record(records[i]);
    for (int f = 0; f < 32; ++f) {
      const auto v = records[i].measurements.at(model.feature_names[f]);
      if (!v)
        throw ValidationError("metadata model: lesion " + records[i].lesion_id +
                              " has null measurement '" +
                              model.feature_names[f] + "' (not imputed)");
      x(static_cast<int>(i), f) = *v;
    }
  }
  const nn::Mat probs = model.trees.predict_proba(x);
  std::vector<double> out(records.size());
  for (std::size_t i = 0; i < records.size(); ++i)
    out[i] = probs(static_cast<int>(i), 1);
  return out;
}

// ---------------------------------------------------------------------------
// Combination + report
// ---------------------------------------------------------------------------

namespace {

bool lookup(const std::map<std::string, bool>& m, const std::string& id) {
  const auto it = m.find(id);
  if (it == m.end())
    throw ValidationError("module output missing lesion id: " + id);
  return it->second;
}

}  // namespace

std::vector<ScreeningDecision> combine(const std::vector<std::string>& lesion_ids,
                                       const ModuleOutputs& outputs) {
  for (const auto& mod : {&outputs.risk, &outputs.ud, &outputs.ml})
    if (*mod && (*mod)->size() != lesion_ids.size())
      throw ValidationError("module output size differs from lesion id list");

  std::vector<ScreeningDecision> out;
  out.reserve(lesion_ids.size());
  for (const auto& id : lesion_ids) {
    ScreeningDecision d;
    d.lesion_id = id;
    d.risk_positive = outputs.risk ? lookup(*outputs.risk, id) : false;
    d.ud_positive = outputs.ud ? lookup(*outputs.ud, id) : false;
    d.ml_positive = outputs.ml ? lookup(*outputs.ml, id) : false;
    d.suspicious = d.risk_positive || d.ud_positive || d.ml_positive;
    out.push_back(std::move(d));
  }
  return out;
}

ScreenReport screen_report(const std::vector<ScreeningDecision>& decisions,
                           const std::vector<LesionRecord>& records) {
  std::map<std::string, const LesionRecord*> by_id;
  for (const auto& r : records) by_id[r.lesion_id] = &r;

  ScreenReport rep;
  rep.lesion_count = static_cast<long>(decisions.size());

  long mal_total = 0, mal_flagged = 0, risk_total = 0, risk_flagged = 0;
  long flagged_mal = 0, flagged_risk_any = 0;
  std::map<std::string, std::pair<bool, bool>> patient;  // (has malignant, detected)

  for (const auto& d : decisions) {
    rep.flagged_count += d.suspicious;
    const auto it = by_id.find(d.lesion_id);
    if (it == by_id.end())
      throw ValidationError("decision for unknown lesion id: " + d.lesion_id);
    const LesionRecord& r = *it->second;
    if (r.label_malignant) {
      if (*r.label_malignant) {
        ++mal_total;
        mal_flagged += d.suspicious;
        auto& p = patient[r.patient_id];
        p.first = true;
        p.second = p.second || d.suspicious;
      }
      if (d.suspicious) flagged_mal += *r.label_malignant;
    }
    if (r.label_risk) {
      if (*r.label_risk) {
        ++risk_total;
        risk_flagged += d.suspicious;
      }
      if (d.suspicious) flagged_risk_any += *r.label_risk;
    }
  }

  rep.malignant_total = mal_total;
  rep.malignant_detected = mal_flagged;
  if (mal_total > 0)
    rep.malignant_sensitivity = static_cast<double>(mal_flagged) / mal_total;
  if (rep.flagged_count > 0 && mal_total > 0)
    rep.malignant_precision =
        static_cast<double>(flagged_mal) / rep.flagged_count;
  if (risk_total > 0)
    rep.risk_sensitivity = static_cast<double>(risk_flagged) / risk_total;
  if (rep.flagged_count > 0 && risk_total > 0)
    rep.risk_precision =
        static_cast<double>(flagged_risk_any) / rep.flagged_count;

  for (const auto& [pid, st] : patient) {
    if (st.first) {
      ++rep.patients_with_malignancy;
      rep.patients_detected += st.second;
    }
  }
  return rep;
}

}  // namespace dermfoundry::tbp
