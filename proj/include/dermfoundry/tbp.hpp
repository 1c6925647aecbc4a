#pragma once

#include <array>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "dermfoundry/core.hpp"
#include "dermfoundry/rng.hpp"
#include "dermfoundry/tensor.hpp"

namespace dermfoundry::tbp {

// The 32 per-lesion measurements exported by the TBP system, in canonical
// column order.
extern const std::array<const char*, 32> kMeasurementNames;

struct LesionRecord {
  std::string lesion_id;
  std::string patient_id;
  std::string tile_ref;
  std::map<std::string, std::optional<double>> measurements;  // exactly the 32 keys
  std::optional<double> out_of_bounds_fraction;  // filter-only field
  std::optional<bool> label_risk;       // dermoscopy-examined
  std::optional<bool> label_malignant;  // pathology

  std::optional<double> measurement(const std::string& name) const;
};

void validate_record(const LesionRecord& r);  // all 32 keys present
std::vector<LesionRecord> load_lesions_csv(const std::string& path);

// ---------------------------------------------------------------------------
// Lesion filtering: majorAxisMM >= 2, deltaLBnorm >= 4.5,
// out_of_bounds_fraction <= 0.25, dnn_lesion_confidence >= 50,
// nevi_confidence > 80. Rows with a null in a filtered field are dropped
// with the reason logged.
// ---------------------------------------------------------------------------
struct FilterResult {
  std::vector<LesionRecord> kept;
  std::vector<std::pair<std::string, std::string>> dropped;  // (lesion_id, reason)
};
FilterResult filter_lesions(const std::vector<LesionRecord>& records);

// ---------------------------------------------------------------------------
// Ugly-duckling outliers: per patient, distance of each lesion's feature
// vector from the patient mean; positives exceed Q3 + 1.5*IQR (upper tail,
// linear-interpolation quartiles). Patients with fewer than 4 lesions yield
// no positives and are flagged.
// ---------------------------------------------------------------------------
struct UdResult {
  std::set<std::string> positives;          // lesion ids
  std::set<std::string> skipped_patients;   // < 4 lesions
};
UdResult ud_outliers(const std::vector<std::string>& lesion_ids,
                     const std::vector<std::string>& patient_ids,
                     const nn::Mat& features);

double tukey_upper_threshold(const std::vector<double>& values);

// ---------------------------------------------------------------------------
// Extremely randomized trees for the metadata (ML) module.
// ---------------------------------------------------------------------------
struct ExtraTreesConfig {
  int n_trees = 200;
  int max_depth = -1;         // unlimited
  int min_samples_split = 2;
  int max_features = -1;      // -1: sqrt(n_features)
  int cuts_per_feature = 1;   // random threshold draws per candidate feature
};

class ExtraTreesClassifier {
 public:
  void fit(const nn::Mat& x, const std::vector<int>& y, int num_classes,
           const ExtraTreesConfig& cfg, std::uint64_t seed);
  nn::Mat predict_proba(const nn::Mat& x) const;  // n x C
  bool fitted() const { return !trees_.empty(); }
  int num_classes() const { return num_classes_; }

 private:
  struct TreeNode {
    int feature = -1;
    double threshold = 0.0;
    int left = -1, right = -1;
    std::vector<double> class_fraction;  // leaf distribution
  };
  std::vector<std::vector<TreeNode>> trees_;
  int num_classes_ = 0;
};

// Fits the extra-trees model on the 32 measurements against pathology labels.
struct MetadataModel {
  ExtraTreesClassifier trees;
  std::vector<std::string> feature_names;
};
MetadataModel fit_metadata_model(const std::vector<LesionRecord>& train,
                                 const ExtraTreesConfig& cfg, std::uint64_t seed);
std::vector<double> predict_metadata(const MetadataModel& model,
                                     const std::vector<LesionRecord>& records);

// ---------------------------------------------------------------------------
// OR-combination and screening evaluation.
// ---------------------------------------------------------------------------
struct ScreeningDecision {
  std::string lesion_id;
  bool risk_positive = false;
  bool ud_positive = false;
  bool ml_positive = false;
  bool suspicious = false;  // OR of the available modules
};

struct ModuleOutputs {
  // absent optional = module not part of this arm (e.g. image-only)
  std::optional<std::map<std::string, bool>> risk;
  std::optional<std::map<std::string, bool>> ud;
  std::optional<std::map<std::string, bool>> ml;
};

std::vector<ScreeningDecision> combine(const std::vector<std::string>& lesion_ids,
                                       const ModuleOutputs& outputs);

struct ScreenReport {
  long flagged_count = 0;
  long lesion_count = 0;
  std::optional<double> malignant_sensitivity;
  std::optional<double> malignant_precision;
  long malignant_detected = 0;
  long malignant_total = 0;
  std::optional<double> risk_sensitivity;
  std::optional<double> risk_precision;
  // patient level: a patient with >= 1 malignant lesion counts as detected
  // when >= 1 of their malignant lesions is flagged
  long patients_with_malignancy = 0;
  long patients_detected = 0;
};

ScreenReport screen_report(const std::vector<ScreeningDecision>& decisions,
                           const std::vector<LesionRecord>& records);

}  // namespace dermfoundry::tbp
