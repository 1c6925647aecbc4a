#pragma once

#include <memory>
#include <vector>

#include "dermfoundry/adapt.hpp"
#include "dermfoundry/core.hpp"

namespace dermfoundry::seg {

struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> mask;

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w), mask(static_cast<std::size_t>(h) * w, 0) {}
  std::uint8_t& at(int y, int x) { return mask[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return mask[static_cast<std::size_t>(y) * width + x]; }
  long foreground() const;
};

BinaryMask mask_from_image(const ImageGrid& img, double threshold = 0.5);
ImageGrid mask_to_image(const BinaryMask& m);

struct SegConfig {
  int epochs = 100;
  int batch_size = 16;
  double learning_rate = 5e-4;
  double weight_decay = 0.01;
  double threshold = 0.5;
  int decoder_dim = 64;
  double color_jitter = 0.2;
  double max_rotation_deg = 30.0;
  bool hflip = true;

  static SegConfig from_config(const Config& c);
  static std::vector<std::string> allowed_keys();
};

// Encoder plus a lightweight multi-scale head: four evenly spaced encoder
// depths are projected, fused by summation and mapped to per-pixel logits
// within each patch block.
class SegModel {
 public:
  SegModel(std::shared_ptr<adapt::Backbone> backbone, int decoder_dim,
           std::uint64_t seed);

  nn::Var forward_logits(const ImageGrid& img, const nn::BlockRuntime& rt) const;
  // H x W foreground probabilities (eval mode).
  nn::Mat probability_map(const ImageGrid& img) const;
  // strict > threshold
  BinaryMask predict(const ImageGrid& img, double threshold = 0.5) const;

  adapt::Backbone& backbone() { return *backbone_; }
  std::vector<nn::Var> trainable_params() const;
  StateDict state_dict() const;
  void load_state_dict(const StateDict& sd);

  static const std::vector<int>& tap_depths(int encoder_depth,
                                            std::vector<int>& out);

 private:
  std::shared_ptr<adapt::Backbone> backbone_;
  nn::ParamStore head_store_;
  std::vector<int> taps_;
  std::vector<nn::Var> tap_w_, tap_b_;
  nn::Var out_w_, out_b_;
};

struct SegEpochRow {
  int epoch = 0;
  double train_loss = 0.0;
  double val_dsc = 0.0;
  double lr = 0.0;
};

struct SegTrainResult {
  StateDict best_state;
  double best_val_dsc = 0.0;
  int best_epoch = -1;
  std::vector<SegEpochRow> epochs;
};

// AdamW + cosine decay; color jitter / rotation / flip applied jointly to
// image and mask; the best-validation-DSC state is retained.
SegTrainResult train_seg(SegModel& model, const std::vector<ImageGrid>& images,
                         const std::vector<BinaryMask>& masks,
                         const std::vector<Split>& groups, const SegConfig& cfg,
                         std::uint64_t seed);

// Paired augmentation used in training; exposed for the pairing invariant.
std::pair<ImageGrid, BinaryMask> augment_pair(const ImageGrid& img,
                                              const BinaryMask& mask,
                                              const SegConfig& cfg, Rng& rng);

}  // namespace dermfoundry::seg
