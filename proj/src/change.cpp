#include "dermfoundry/change.hpp"

#include <algorithm>
#include <cmath>

#include "dermfoundry/kernels.hpp"

namespace dermfoundry::change {

using nn::Mat;
using nn::Var;

void validate_pair(const PairExample& p) {
  if (p.img_t0.height != p.img_t1.height || p.img_t0.width != p.img_t1.width ||
      p.img_t0.channels != p.img_t1.channels)
    throw ValidationError("pair images must share dimensions");
  if (p.malignant_change && *p.malignant_change && !p.changed)
    throw ValidationError("malignant_change implies changed");
}

double contrastive_loss(const std::vector<double>& a,
                        const std::vector<double>& b, bool same, double margin) {
  if (a.size() != b.size())
    throw ShapeError("contrastive_loss: embedding dimension mismatch");
  double d2 = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    d2 += d * d;
  }
  if (same) return d2;
  const double d = std::sqrt(d2);
  const double hinge = std::max(0.0, margin - d);
  return hinge * hinge;
}

Var contrastive_loss_var(const Var& a, const Var& b, bool same, double margin) {
  const Var diff = nn::sub(a, b);
  const Var d2 = nn::sum_all(nn::mul(diff, diff));
  if (same) return d2;
  const Var d = nn::sqrt_(d2, 1e-12);
  const Var hinge = nn::relu(nn::add_scalar(nn::scale(d, -1.0), margin));
  return nn::mul(hinge, hinge);
}

std::vector<std::string> ChangeConfig::allowed_keys() {
  return {"margin",     "contrastive_weight", "ce_weight",    "head_mode",
          "head_hidden", "epochs",            "batch_size",   "learning_rate",
          "weight_decay", "warmup_epochs",    "drop_path",
          // run-level keys handled by the CLI
          "data",        "out",               "seed",         "checkpoint",
          "task",        "encoder_dim",       "encoder_depth", "encoder_heads",
          "image_side",  "patch_side",        "preproc"};
}

ChangeConfig ChangeConfig::from_config(const Config& c) {
  c.validate_keys(allowed_keys());
  ChangeConfig f;
  f.margin = c.number("margin", f.margin);
  f.contrastive_weight = c.number("contrastive_weight", f.contrastive_weight);
  f.ce_weight = c.number("ce_weight", f.ce_weight);
  f.head_mode = c.str("head_mode", f.head_mode);
  f.head_hidden = c.integer("head_hidden", f.head_hidden);
  f.epochs = c.integer("epochs", f.epochs);
  f.batch_size = c.integer("batch_size", f.batch_size);
  f.learning_rate = c.number("learning_rate", f.learning_rate);
  f.weight_decay = c.number("weight_decay", f.weight_decay);
  f.warmup_epochs = c.integer("warmup_epochs", f.warmup_epochs);
  f.drop_path = c.number("drop_path", f.drop_path);
  if (f.head_mode != "symmetric" && f.head_mode != "concat")
    throw ConfigError("head_mode must be 'symmetric' or 'concat'");
  return f;
}

ChangeModel::ChangeModel(std::shared_ptr<adapt::Backbone> backbone,
                         const ChangeConfig& cfg, std::uint64_t seed)
    : backbone_(std::move(backbone)), cfg_(cfg) {
  Rng init(derive_seed(seed, "change_head_init"));
  const int in_dim = 2 * backbone_->config().dim;  // both head modes use 2D
  w1_ = head_store_.add("change_head.w1",
                        nn::random_normal(in_dim, cfg_.head_hidden, 0.02, init));
  b1_ = head_store_.add("change_head.b1", Mat(1, cfg_.head_hidden));
  w2_ = head_store_.add("change_head.w2",
                        nn::random_normal(cfg_.head_hidden, 2, 0.02, init));
  b2_ = head_store_.add("change_head.b2", Mat(1, 2));
}

ChangeModel::ForwardVars ChangeModel::forward_var(const PairExample& pair,
                                                  const nn::BlockRuntime& rt) const {
  // the two passes share every encoder parameter (weight sharing by identity)
  const Var f0 = backbone_->forward_pooled(pair.img_t0, rt);
  const Var f1 = backbone_->forward_pooled(pair.img_t1, rt);
  const Var e0 = nn::l2_normalize_rows(f0);
  const Var e1 = nn::l2_normalize_rows(f1);

  Var combined;
  if (cfg_.head_mode == "symmetric") {
    combined = nn::concat_cols({nn::add(f0, f1), nn::abs_(nn::sub(f0, f1))});
  } else {
    combined = nn::concat_cols({f0, f1});
  }
  const Var hidden = nn::gelu(nn::linear(combined, w1_, b1_));
  const Var logits = nn::linear(hidden, w2_, b2_);
  return {e0, e1, logits};
}

ChangeModel::Detection ChangeModel::detect(const PairExample& pair) const {
  validate_pair(pair);
  nn::BlockRuntime rt;  // eval
  const auto fwd = forward_var(pair, rt);

  Detection out;
  out.raw_pair_flagged = !pair.preprocessed;
  Mat probs(1, 2);
  kernels::row_softmax(fwd.logits->value.ptr(), probs.ptr(), 1, 2);
  out.prob_change = probs(0, 1);

  const Var f0 = backbone_->forward_pooled(pair.img_t0, rt);
  const Var f1 = backbone_->forward_pooled(pair.img_t1, rt);
  out.f0.assign(f0->value.data.begin(), f0->value.data.end());
  out.f1.assign(f1->value.data.begin(), f1->value.data.end());
  if (cfg_.head_mode == "symmetric") {
    for (std::size_t i = 0; i < out.f0.size(); ++i)
      out.head_input.push_back(out.f0[i] + out.f1[i]);
    for (std::size_t i = 0; i < out.f0.size(); ++i)
      out.head_input.push_back(std::fabs(out.f0[i] - out.f1[i]));
  } else {
    out.head_input = out.f0;
    out.head_input.insert(out.head_input.end(), out.f1.begin(), out.f1.end());
  }
  return out;
}

std::vector<Var> ChangeModel::trainable_params() const {
  std::vector<Var> all = backbone_->params().params();
  for (const auto& p : head_store_.params()) all.push_back(p);
  return all;
}

StateDict ChangeModel::state_dict() const {
  StateDict sd = backbone_->state_dict();
  for (const auto& a : head_store_.state_dict()) sd.push_back(a);
  return sd;
}

void ChangeModel::load_state_dict(const StateDict& sd) {
  backbone_->load_state_dict(sd);
  head_store_.load_state_dict(sd);
}

ChangeTrainResult train_change(ChangeModel& model,
                               const std::vector<PairExample>& pairs,
                               const std::vector<Split>& groups,
                               std::uint64_t seed) {
  if (pairs.size() != groups.size())
    throw ValidationError("train_change: pairs/groups length mismatch");
  for (const auto& p : pairs) validate_pair(p);

  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i] == Split::kTrain) train_idx.push_back(i);
    else if (groups[i] == Split::kVal) val_idx.push_back(i);
  }
  if (train_idx.empty() || val_idx.empty())
    throw ValidationError("train_change: needs non-empty train and val splits");
  bool any_changed = false, any_stable = false;
  for (auto i : train_idx) {
    any_changed = any_changed || pairs[i].changed;
    any_stable = any_stable || !pairs[i].changed;
  }
  if (!any_changed || !any_stable)
    throw ValidationError("train_change: training set has a single class");

  const ChangeConfig& cfg = model.config();
  nn::AdamW opt(model.trainable_params(), cfg.learning_rate, cfg.weight_decay);
  Rng batch_rng(derive_seed(seed, "change_batches"));
  Rng path_rng(derive_seed(seed, "change_droppath"));

  const int bsz = std::min<int>(cfg.batch_size, static_cast<int>(train_idx.size()));
  const long steps_per_epoch = (static_cast<long>(train_idx.size()) + bsz - 1) / bsz;
  const long total_steps = steps_per_epoch * cfg.epochs;
  const long warmup_steps = steps_per_epoch * cfg.warmup_epochs;

  auto eval_val_auroc = [&]() {
    std::vector<int> y;
    std::vector<double> s;
    for (auto i : val_idx) {
      y.push_back(pairs[i].changed ? 1 : 0);
      s.push_back(model.detect(pairs[i]).prob_change);
    }
    return stats::auroc_binary(y, s);
  };

  ChangeTrainResult result;
  long step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = train_idx;
    batch_rng.shuffle(order);
    double epoch_loss = 0.0;
    long batches = 0;
    for (std::size_t ofs = 0; ofs < order.size(); ofs += bsz) {
      const std::size_t end = std::min(order.size(), ofs + bsz);
      opt.set_lr(nn::warmup_cosine_lr(cfg.learning_rate, warmup_steps,
                                      total_steps, step));
      nn::BlockRuntime rt;
      rt.training = true;
      rt.drop_path = cfg.drop_path;
      rt.rng = &path_rng;

      std::vector<Var> losses;
      for (std::size_t i = ofs; i < end; ++i) {
        const PairExample& p = pairs[order[i]];
        const auto fwd = model.forward_var(p, rt);
        const Var con = contrastive_loss_var(fwd.emb0, fwd.emb1,
                                             /*same=*/!p.changed, cfg.margin);
        Mat target(1, 2);
        target(0, p.changed ? 1 : 0) = 1.0;
        const Var ce = nn::cross_entropy_logits(fwd.logits, target);
        losses.push_back(nn::add(nn::scale(con, cfg.contrastive_weight),
                                 nn::scale(ce, cfg.ce_weight)));
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

    const double val_auroc = eval_val_auroc();
    result.epochs.push_back({epoch, epoch_loss / std::max(1L, batches), val_auroc});
    if (val_auroc > result.best_val_auroc || result.best_epoch < 0) {
      result.best_val_auroc = val_auroc;
      result.best_epoch = epoch;
      result.best_state = model.state_dict();
    }
  }
  return result;
}

ArmMetrics evaluate_change(const ChangeModel& model,
                           const std::vector<PairExample>& pairs,
                           const std::string& arm_name) {
  std::vector<int> y;
  Mat probs(static_cast<int>(pairs.size()), 2);
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    y.push_back(pairs[i].changed ? 1 : 0);
    const double p = model.detect(pairs[i]).prob_change;
    probs(static_cast<int>(i), 1) = p;
    probs(static_cast<int>(i), 0) = 1.0 - p;
  }
  const auto m = stats::classification_metrics(y, probs);
  ArmMetrics out;
  out.arm = arm_name;
  out.auroc = m.auroc.value_or(0.0);
  out.sensitivity = m.sensitivity;
  out.specificity = m.specificity;
  out.bacc = m.bacc;
  return out;
}

}  // namespace dermfoundry::change
