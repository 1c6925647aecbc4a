#pragma once

#include <string>
#include <vector>

#include "dermfoundry/core.hpp"
#include "dermfoundry/rng.hpp"
#include "dermfoundry/nn.hpp"

namespace dermfoundry::mil {

struct SlideBag {
  std::string slide_id;
  std::string case_id;
  nn::Mat instance_features;  // n_tiles x D
  int label = 0;
};

void validate_bag(const SlideBag& bag);

// ---------------------------------------------------------------------------
// Tile contract: non-overlapping tiles over tissue, resized to 224 and
// ImageNet-normalized. Tissue is a luminance mask; a tile is kept when at
// least `min_tissue_fraction` of its pixels are tissue.
// ---------------------------------------------------------------------------
struct TileContractConfig {
  int tile_side = 256;
  double magnification = 20.0;  // recorded with the coordinates
  int resize_side = 224;
  double tissue_luminance_max = 0.85;  // pixel is tissue below this luminance
  double min_tissue_fraction = 0.25;
};

struct Tile {
  int grid_x = 0;
  int grid_y = 0;
  ImageGrid resized;                // [0,1] RGB, resize_side square
  std::vector<double> normalized;   // CHW after ImageNet mean/std
};

struct TileSet {
  std::vector<Tile> tiles;
  double magnification = 20.0;
  std::vector<std::pair<int, int>> coordinates() const;
};

TileSet tile_contract(const ImageGrid& slide, const TileContractConfig& cfg = {});

extern const double kImagenetMean[3];
extern const double kImagenetStd[3];
std::vector<double> normalize_imagenet(const ImageGrid& img);

// ---------------------------------------------------------------------------
// Two-tier gated ABMIL: input FC D->512 (dropout 0.10 on inputs), gated
// attention tanh(V h) * sigmoid(U h) with 384 hidden units (dropout 0.25),
// softmax over instances, attention-weighted sum, linear classifier.
// ---------------------------------------------------------------------------
struct AbmilConfig {
  int embed_dim = 512;
  int attn_hidden = 384;
  double dropout_input = 0.10;
  double dropout_attn = 0.25;
};

class AbmilModel {
 public:
  AbmilModel(int in_dim, int num_classes, std::uint64_t seed,
             const AbmilConfig& cfg = {});

  struct Forward {
    std::vector<double> logits;
    std::vector<double> attention;  // sums to 1
  };
  // Inference path. Reductions over instances run in a canonical order, so
  // the result is exactly invariant to instance permutation.
  Forward forward(const nn::Mat& bag) const;

  // Training path (autodiff, dropout active when rng provided).
  nn::Var forward_var(const nn::Mat& bag, Rng* dropout_rng) const;

  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& params() const { return store_; }
  int num_classes() const { return num_classes_; }

 private:
  AbmilConfig cfg_;
  int num_classes_ = 0;
  nn::ParamStore store_;
  nn::Var fc_w_, fc_b_;      // D -> embed
  nn::Var att_v_w_, att_v_b_;  // embed -> hidden (tanh)
  nn::Var att_u_w_, att_u_b_;  // embed -> hidden (sigmoid)
  nn::Var att_w_;              // hidden -> 1
  nn::Var cls_w_, cls_b_;      // embed -> classes
};

struct MilTrainConfig {
  int folds = 5;
  int epochs = 20;
  int early_stop_patience = 5;
  int batch_size = 1;  // bags are processed one at a time
  double learning_rate = 1e-4;
  double weight_decay = 1e-5;
  double val_fraction = 0.2;  // carved from the training folds

  static MilTrainConfig from_config(const Config& c);
  static std::vector<std::string> allowed_keys();
};

struct MilFoldMetrics {
  int fold = 0;
  double auroc = 0.0;
  double w_f1 = 0.0;
  int stopped_epoch = 0;
  int best_epoch = 0;
};

struct MilOofPrediction {
  std::string slide_id;
  int true_label = 0;
  std::vector<double> probs;
  int fold = 0;
};

struct MilCvResult {
  std::vector<MilFoldMetrics> fold_metrics;
  std::vector<MilOofPrediction> oof;
  double mean_auroc = 0.0;
};

// Folds stratified jointly by case and label (every slide of a case shares a
// fold); early stopping on validation loss with the configured patience.
std::vector<int> assign_case_folds(const std::vector<SlideBag>& bags, int k,
                                   std::uint64_t seed);

MilCvResult train_mil_cv(const std::vector<SlideBag>& bags,
                         const MilTrainConfig& cfg, std::uint64_t seed);

}  // namespace dermfoundry::mil
