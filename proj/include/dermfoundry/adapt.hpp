#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dermfoundry/core.hpp"
#include "dermfoundry/nn.hpp"
#include "dermfoundry/rng.hpp"
#include "dermfoundry/stats.hpp"

namespace dermfoundry::adapt {

// ---------------------------------------------------------------------------
// Backbone: the encoder as seen by every downstream task. Features are the
// mean over patch tokens.
// ---------------------------------------------------------------------------
class Backbone {
 public:
  Backbone(const nn::VitConfig& cfg, std::uint64_t seed);

  // Rebuilds the architecture from the checkpoint sidecar and loads the
  // student weights.
  static std::unique_ptr<Backbone> from_checkpoint(const std::string& dir);

  nn::ParamStore& params() { return store_; }
  const nn::VitEncoder& encoder() const { return *encoder_; }
  const nn::VitConfig& config() const { return cfg_; }

  nn::Var forward_tokens(const ImageGrid& img, const nn::BlockRuntime& rt,
                         std::vector<nn::Var>* taps = nullptr) const;
  nn::Var forward_pooled(const ImageGrid& img, const nn::BlockRuntime& rt) const;

  StateDict state_dict() const { return store_.state_dict(); }
  void load_state_dict(const StateDict& sd) { store_.load_state_dict(sd); }
  Sidecar arch_sidecar() const;

 private:
  nn::VitConfig cfg_;
  nn::ParamStore store_;
  std::unique_ptr<nn::VitEncoder> encoder_;
};

struct FeatureMatrix {
  nn::Mat features;  // n x M
  std::vector<int> labels;
  std::vector<std::string> ids;
};

// Frozen deterministic feature extraction; row order matches input order,
// images processed in parallel.
FeatureMatrix extract_features(const Backbone& backbone,
                               const std::vector<ImageGrid>& images,
                               const std::vector<int>& labels,
                               const std::vector<std::string>& ids);

// ---------------------------------------------------------------------------
// Linear probe: multinomial logistic regression, L-BFGS, l2 penalty
// lambda = M * C / 100 unless overridden.
// ---------------------------------------------------------------------------
struct ProbeModel {
  nn::Mat weights;           // C x M
  std::vector<double> bias;  // C
  double lambda = 0.0;
  int iterations = 0;
  double final_grad_norm = 0.0;
};

double default_probe_lambda(int feature_dim, int num_classes);

ProbeModel linear_probe_fit(const FeatureMatrix& train, int num_classes,
                            double lambda_override = -1.0,
                            int max_iterations = 1000,
                            double grad_tolerance = 1e-5);

// Rows sum to 1; argmax ties resolve to the lowest class id downstream.
nn::Mat linear_probe_predict(const ProbeModel& model, const nn::Mat& features);

// ---------------------------------------------------------------------------
// Fine-tuning.
// ---------------------------------------------------------------------------
struct FinetuneConfig {
  int batch_size = 256;
  int epochs = 50;
  int warmup_epochs = 10;
  double learning_rate = 5e-4;
  double layer_decay = 0.75;
  double weight_decay = 0.05;
  double drop_path = 0.2;
  double reprob = 0.25;
  double mixup = 0.8;   // beta parameter; 0 disables
  double cutmix = 1.0;  // beta parameter; 0 disables

  static FinetuneConfig from_config(const Config& c);
  static std::vector<std::string> allowed_keys();
};

struct FinetuneEpochRow {
  int epoch = 0;
  double train_loss = 0.0;
  double val_metric = 0.0;
  double lr = 0.0;
};

struct FinetuneResult {
  StateDict best_state;        // backbone + head at the best val epoch
  Sidecar sidecar;             // metrics: best_val_metric / best_epoch
  std::vector<FinetuneEpochRow> epochs;
  double best_val_metric = 0.0;
};

// Trains backbone + linear head with mixup/cutmix/erasing augmentation and
// layer-decayed AdamW; the checkpoint with the best validation metric is
// returned (binary: AUROC, multiclass: weighted F1).
FinetuneResult finetune(Backbone& backbone, const std::vector<ImageGrid>& images,
                        const std::vector<int>& labels,
                        const std::vector<Split>& groups, int num_classes,
                        const FinetuneConfig& cfg, std::uint64_t seed);

// Per-sample soft-label mixing used by finetune; exposed for tests.
struct MixedBatch {
  std::vector<ImageGrid> images;
  nn::Mat soft_targets;
};
MixedBatch mix_batch(const std::vector<ImageGrid>& images,
                     const std::vector<int>& labels, int num_classes,
                     double mixup_alpha, double cutmix_alpha, double reprob,
                     Rng& rng);

// ---------------------------------------------------------------------------
// Out-of-fold prediction: stratified k-fold keyed on patient_id when present
// so a patient never straddles folds.
// ---------------------------------------------------------------------------
struct OofRow {
  std::string id;
  int true_label = -1;
  std::vector<double> probs;
  int fold = -1;
};

// Returns fold id per sample. `unit_key` groups samples that must share a
// fold (patient id, falling back to the sample id); `stratify` is the
// per-unit stratification value. Throws when k exceeds the smallest stratum.
std::vector<int> assign_folds(const std::vector<std::string>& unit_key,
                              const std::vector<std::string>& stratify, int k,
                              std::uint64_t seed);

std::vector<OofRow> out_of_fold_predict(const FeatureMatrix& features,
                                        const std::vector<std::string>& unit_key,
                                        const std::vector<std::string>& stratify,
                                        int num_classes, int k,
                                        std::uint64_t seed,
                                        double lambda_override = -1.0);

void write_predictions_csv(const std::string& path,
                           const std::vector<OofRow>& rows, int num_classes);

}  // namespace dermfoundry::adapt
