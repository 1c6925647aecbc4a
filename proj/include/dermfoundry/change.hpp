#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "dermfoundry/adapt.hpp"
#include "dermfoundry/core.hpp"

namespace dermfoundry::change {

struct PairExample {
  ImageGrid img_t0, img_t1;
  bool changed = false;
  std::optional<bool> malignant_change;
  bool preprocessed = true;  // false flags the raw "Default" ablation arm
};

void validate_pair(const PairExample& p);  // size match, label implication

// same: d^2 ; different: max(0, margin - d)^2, with d the Euclidean distance
double contrastive_loss(const std::vector<double>& a,
                        const std::vector<double>& b, bool same, double margin);
nn::Var contrastive_loss_var(const nn::Var& a, const nn::Var& b, bool same,
                             double margin);

struct ChangeConfig {
  double margin = 1.0;
  double contrastive_weight = 1.0;
  double ce_weight = 1.0;
  std::string head_mode = "symmetric";  // "symmetric" ([f0+f1;|f0-f1|]) or "concat"
  int head_hidden = 128;
  int epochs = 10;
  int batch_size = 16;
  double learning_rate = 5e-4;
  double weight_decay = 0.05;
  int warmup_epochs = 1;
  double drop_path = 0.0;

  static ChangeConfig from_config(const Config& c);
  static std::vector<std::string> allowed_keys();
};

// Shared-weight encoder on both images, combined features through a 2-layer
// head with a softmax pair output.
class ChangeModel {
 public:
  ChangeModel(std::shared_ptr<adapt::Backbone> backbone, const ChangeConfig& cfg,
              std::uint64_t seed);

  struct Detection {
    double prob_change = 0.0;
    std::vector<double> head_input;  // combined feature fed to the head
    std::vector<double> f0, f1;      // pooled embeddings (pre-combination)
    bool raw_pair_flagged = false;
  };
  Detection detect(const PairExample& pair) const;

  // training-graph path; returns (embed0, embed1, logits 1x2)
  struct ForwardVars {
    nn::Var emb0, emb1, logits;
  };
  ForwardVars forward_var(const PairExample& pair, const nn::BlockRuntime& rt) const;

  adapt::Backbone& backbone() { return *backbone_; }
  const ChangeConfig& config() const { return cfg_; }
  std::vector<nn::Var> trainable_params() const;
  StateDict state_dict() const;
  void load_state_dict(const StateDict& sd);

 private:
  std::shared_ptr<adapt::Backbone> backbone_;
  ChangeConfig cfg_;
  nn::ParamStore head_store_;
  nn::Var w1_, b1_, w2_, b2_;
};

struct ChangeEpochRow {
  int epoch = 0;
  double train_loss = 0.0;
  double val_auroc = 0.0;
};

struct ChangeTrainResult {
  StateDict best_state;
  double best_val_auroc = 0.0;
  int best_epoch = -1;
  std::vector<ChangeEpochRow> epochs;
};

// Joint contrastive + cross-entropy optimization (1:1 weights by default);
// the best-validation-AUROC state is retained. Throws on a single-class
// training set.
ChangeTrainResult train_change(ChangeModel& model,
                               const std::vector<PairExample>& pairs,
                               const std::vector<Split>& groups,
                               std::uint64_t seed);

struct ArmMetrics {
  std::string arm;
  double auroc = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
  double bacc = 0.0;
};

ArmMetrics evaluate_change(const ChangeModel& model,
                           const std::vector<PairExample>& pairs,
                           const std::string& arm_name);

}  // namespace dermfoundry::change
