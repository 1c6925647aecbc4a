#include "dermfoundry/seg.hpp"

#include <algorithm>
#include <cmath>

#include "dermfoundry/image_ops.hpp"
#include "dermfoundry/kernels.hpp"

namespace dermfoundry::seg {

using nn::Mat;
using nn::Var;

long BinaryMask::foreground() const {
  long n = 0;
  for (auto v : mask) n += v != 0;
  return n;
}

BinaryMask mask_from_image(const ImageGrid& img, double threshold) {
  BinaryMask m(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      m.at(y, x) = img.at(0, y, x) > threshold ? 1 : 0;
  return m;
}

ImageGrid mask_to_image(const BinaryMask& m) {
  ImageGrid img(1, m.height, m.width);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) img.at(0, y, x) = m.at(y, x) ? 1.0 : 0.0;
  return img;
}

std::vector<std::string> SegConfig::allowed_keys() {
  return {"epochs",     "batch_size",  "learning_rate", "weight_decay",
          "threshold",  "decoder_dim", "color_jitter",  "max_rotation_deg",
          "hflip",
          // run-level keys handled by the CLI
          "data",       "out",         "seed",          "checkpoint",
          "task",       "encoder_dim", "encoder_depth", "encoder_heads",
          "image_side", "patch_side"};
}

SegConfig SegConfig::from_config(const Config& c) {
  c.validate_keys(allowed_keys());
  SegConfig s;
  s.epochs = c.integer("epochs", s.epochs);
  s.batch_size = c.integer("batch_size", s.batch_size);
  s.learning_rate = c.number("learning_rate", s.learning_rate);
  s.weight_decay = c.number("weight_decay", s.weight_decay);
  s.threshold = c.number("threshold", s.threshold);
  s.decoder_dim = c.integer("decoder_dim", s.decoder_dim);
  s.color_jitter = c.number("color_jitter", s.color_jitter);
  s.max_rotation_deg = c.number("max_rotation_deg", s.max_rotation_deg);
  s.hflip = c.boolean("hflip", s.hflip);
  return s;
}

const std::vector<int>& SegModel::tap_depths(int encoder_depth,
                                             std::vector<int>& out) {
  // four levels evenly spaced over {embedding, block 1, ..., block depth}
  out.clear();
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<int>(
        std::lround(static_cast<double>(i) * encoder_depth / 3.0)));
  return out;
}

SegModel::SegModel(std::shared_ptr<adapt::Backbone> backbone, int decoder_dim,
                   std::uint64_t seed)
    : backbone_(std::move(backbone)) {
  tap_depths(backbone_->config().depth, taps_);
  Rng init(derive_seed(seed, "seg_head_init"));
  const int dim = backbone_->config().dim;
  for (std::size_t i = 0; i < taps_.size(); ++i) {
    tap_w_.push_back(head_store_.add("seg_head.tap" + std::to_string(i) + ".w",
                                     nn::random_normal(dim, decoder_dim, 0.02, init)));
    tap_b_.push_back(head_store_.add("seg_head.tap" + std::to_string(i) + ".b",
                                     Mat(1, decoder_dim)));
  }
  const int ps = backbone_->config().patch_side;
  out_w_ = head_store_.add("seg_head.out.w",
                           nn::random_normal(decoder_dim, ps * ps, 0.02, init));
  out_b_ = head_store_.add("seg_head.out.b", Mat(1, ps * ps));
}

Var SegModel::forward_logits(const ImageGrid& img, const nn::BlockRuntime& rt) const {
  std::vector<Var> tap_outputs;
  backbone_->forward_tokens(img, rt, &tap_outputs);
  Var fused;
  for (std::size_t i = 0; i < taps_.size(); ++i) {
    const Var proj = nn::linear(tap_outputs[taps_[i]], tap_w_[i], tap_b_[i]);
    fused = i == 0 ? proj : nn::add(fused, proj);
  }
  return nn::linear(nn::gelu(fused), out_w_, out_b_);  // P x patch_side^2
}

Mat SegModel::probability_map(const ImageGrid& img) const {
  nn::BlockRuntime rt;  // eval
  const Var logits = forward_logits(img, rt);
  const int side = backbone_->config().image_side;
  const int ps = backbone_->config().patch_side;
  const int grid = side / ps;
  Mat prob(side, side);
  for (int p = 0; p < logits->value.rows; ++p) {
    const int py = p / grid, px = p % grid;
    for (int j = 0; j < ps * ps; ++j) {
      const int y = py * ps + j / ps, x = px * ps + j % ps;
      prob(y, x) = 1.0 / (1.0 + std::exp(-logits->value(p, j)));
    }
  }
  return prob;
}

BinaryMask SegModel::predict(const ImageGrid& img, double threshold) const {
  const Mat prob = probability_map(img);
  BinaryMask m(prob.rows, prob.cols);
  for (int y = 0; y < prob.rows; ++y)
    for (int x = 0; x < prob.cols; ++x)
      m.at(y, x) = prob(y, x) > threshold ? 1 : 0;
  return m;
}

std::vector<Var> SegModel::trainable_params() const {
  std::vector<Var> all = backbone_->params().params();
  for (const auto& p : head_store_.params()) all.push_back(p);
  return all;
}

StateDict SegModel::state_dict() const {
  StateDict sd = backbone_->state_dict();
  for (const auto& a : head_store_.state_dict()) sd.push_back(a);
  return sd;
}

void SegModel::load_state_dict(const StateDict& sd) {
  backbone_->load_state_dict(sd);
  head_store_.load_state_dict(sd);
}

std::pair<ImageGrid, BinaryMask> augment_pair(const ImageGrid& img,
                                              const BinaryMask& mask,
                                              const SegConfig& cfg, Rng& rng) {
  ImageGrid out_img = img;
  ImageGrid mask_img = mask_to_image(mask);
  if (cfg.max_rotation_deg > 0.0) {
    const double deg = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg);
    out_img = imageops::rotate(out_img, deg, /*nearest=*/false);
    mask_img = imageops::rotate(mask_img, deg, /*nearest=*/true);
  }
  if (cfg.hflip && rng.bernoulli(0.5)) {
    out_img = imageops::hflip(out_img);
    mask_img = imageops::hflip(mask_img);
  }
  if (cfg.color_jitter > 0.0)
    out_img = imageops::color_jitter(out_img, rng, cfg.color_jitter);
  return {out_img, mask_from_image(mask_img)};
}

namespace {

Mat mask_to_patch_targets(const BinaryMask& mask, int patch_side) {
  const int grid = mask.height / patch_side;
  Mat t(grid * grid, patch_side * patch_side);
  for (int p = 0; p < t.rows; ++p) {
    const int py = p / grid, px = p % grid;
    for (int j = 0; j < patch_side * patch_side; ++j) {
      const int y = py * patch_side + j / patch_side;
      const int x = px * patch_side + j % patch_side;
      t(p, j) = mask.at(y, x) ? 1.0 : 0.0;
    }
  }
  return t;
}

}  // namespace

SegTrainResult train_seg(SegModel& model, const std::vector<ImageGrid>& images,
                         const std::vector<BinaryMask>& masks,
                         const std::vector<Split>& groups, const SegConfig& cfg,
                         std::uint64_t seed) {
  if (images.size() != masks.size() || images.size() != groups.size())
    throw ValidationError("train_seg: images/masks/groups length mismatch");
  for (std::size_t i = 0; i < images.size(); ++i)
    if (images[i].height != masks[i].height || images[i].width != masks[i].width)
      throw ValidationError("train_seg: image/mask shape mismatch at row " +
                            std::to_string(i));

  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i] == Split::kTrain) train_idx.push_back(i);
    else if (groups[i] == Split::kVal) val_idx.push_back(i);
  }
  if (train_idx.empty() || val_idx.empty())
    throw ValidationError("train_seg: needs non-empty train and val splits");
  bool any_fg = false, any_bg = false;
  for (auto i : train_idx) {
    const long fg = masks[i].foreground();
    any_fg = any_fg || fg > 0;
    any_bg = any_bg || fg < static_cast<long>(masks[i].mask.size());
  }
  if (!any_fg || !any_bg)
    throw ValidationError("train_seg: training targets contain a single class");

  nn::AdamW opt(model.trainable_params(), cfg.learning_rate, cfg.weight_decay);
  Rng aug_rng(derive_seed(seed, "seg_aug"));
  Rng batch_rng(derive_seed(seed, "seg_batches"));

  const int side = model.backbone().config().image_side;
  const int ps = model.backbone().config().patch_side;
  const int bsz = std::min<int>(cfg.batch_size, static_cast<int>(train_idx.size()));
  const long steps_per_epoch = (static_cast<long>(train_idx.size()) + bsz - 1) / bsz;
  const long total_steps = steps_per_epoch * cfg.epochs;

  auto eval_val_dsc = [&]() {
    double acc = 0.0;
    for (auto i : val_idx) {
      const BinaryMask pred = model.predict(
          imageops::resize_bilinear(images[i], side, side), cfg.threshold);
      BinaryMask truth = masks[i];
      if (truth.height != side)
        truth = mask_from_image(
            imageops::resize_bilinear(mask_to_image(masks[i]), side, side));
      acc += stats::seg_metrics(pred.mask, truth.mask).dsc;
    }
    return acc / val_idx.size();
  };

  SegTrainResult result;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = train_idx;
    batch_rng.shuffle(order);
    double epoch_loss = 0.0;
    long batches = 0;
    double lr = cfg.learning_rate;
    for (std::size_t ofs = 0; ofs < order.size(); ofs += bsz) {
      const std::size_t end = std::min(order.size(), ofs + bsz);
      lr = nn::warmup_cosine_lr(cfg.learning_rate, 0, total_steps, step);
      opt.set_lr(lr);

      std::vector<Var> losses;
      nn::BlockRuntime rt;
      rt.training = true;
      for (std::size_t i = ofs; i < end; ++i) {
        auto [img, mask] = augment_pair(images[order[i]], masks[order[i]], cfg,
                                        aug_rng);
        if (img.height != side || img.width != side) {
          img = imageops::resize_bilinear(img, side, side);
          mask = mask_from_image(
              imageops::resize_bilinear(mask_to_image(mask), side, side));
        }
        const Var logits = model.forward_logits(img, rt);
        losses.push_back(
            nn::bce_with_logits(logits, mask_to_patch_targets(mask, ps)));
      }
      const Var loss = nn::scale(nn::add_n(losses), 1.0 / losses.size());

      for (auto& p : model.trainable_params()) {
        p->ensure_grad();
        std::fill(p->grad.data.begin(), p->grad.data.end(), 0.0);
      }
      nn::backward(loss);
      opt.step();
      epoch_loss += loss->value(0, 0);
      ++batches;
      ++step;
    }

    const double val_dsc = eval_val_dsc();
    result.epochs.push_back({epoch, epoch_loss / std::max(1L, batches), val_dsc, lr});
    if (val_dsc > result.best_val_dsc || result.best_epoch < 0) {
      result.best_val_dsc = val_dsc;
      result.best_epoch = epoch;
      result.best_state = model.state_dict();
    }
  }
  return result;
}

}  // namespace dermfoundry::seg
