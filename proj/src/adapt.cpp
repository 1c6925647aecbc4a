#include "dermfoundry/adapt.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "dermfoundry/image_ops.hpp"
#include "dermfoundry/kernels.hpp"

namespace dermfoundry::adapt {

using nn::Mat;
using nn::Var;

Backbone::Backbone(const nn::VitConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  Rng init(derive_seed(seed, "backbone_init"));
  encoder_ = std::make_unique<nn::VitEncoder>(cfg_, store_, "student", init);
}

std::unique_ptr<Backbone> Backbone::from_checkpoint(const std::string& dir) {
  auto [state, side] = load_checkpoint(dir);
  const auto need = [&](const char* key) {
    auto it = side.arch.find(key);
    if (it == side.arch.end())
      throw ShapeError(std::string("checkpoint sidecar missing arch key: ") + key);
    return std::stoi(it->second);
  };
  nn::VitConfig cfg;
  cfg.image_side = need("image_side");
  cfg.patch_side = need("patch_side");
  cfg.dim = need("encoder_dim");
  cfg.depth = need("encoder_depth");
  cfg.heads = need("encoder_heads");
  auto backbone = std::make_unique<Backbone>(cfg, 0);
  backbone->store_.load_state_dict(state);
  return backbone;
}

Sidecar Backbone::arch_sidecar() const {
  Sidecar side;
  side.arch["image_side"] = std::to_string(cfg_.image_side);
  side.arch["patch_side"] = std::to_string(cfg_.patch_side);
  side.arch["encoder_dim"] = std::to_string(cfg_.dim);
  side.arch["encoder_depth"] = std::to_string(cfg_.depth);
  side.arch["encoder_heads"] = std::to_string(cfg_.heads);
  return side;
}

Var Backbone::forward_tokens(const ImageGrid& img, const nn::BlockRuntime& rt,
                             std::vector<nn::Var>* taps) const {
  ImageGrid sized = img;
  if (img.height != cfg_.image_side || img.width != cfg_.image_side)
    sized = imageops::resize_bilinear(img, cfg_.image_side, cfg_.image_side);
  if (sized.channels != cfg_.channels) {
    if (sized.channels == 1 && cfg_.channels == 3) {
      ImageGrid rgb(3, sized.height, sized.width);
      for (int y = 0; y < sized.height; ++y)
        for (int x = 0; x < sized.width; ++x)
          for (int c = 0; c < 3; ++c) rgb.at(c, y, x) = sized.at(0, y, x);
      sized = rgb;
    } else {
      throw ShapeError("backbone: channel mismatch");
    }
  }
  const Mat patches = imageops::patchify(sized, cfg_.patch_side);
  nn::BlockRuntime local = rt;
  local.heads = cfg_.heads;
  return encoder_->forward(patches, {}, local, taps);
}

Var Backbone::forward_pooled(const ImageGrid& img, const nn::BlockRuntime& rt) const {
  return nn::mean_over_rows(forward_tokens(img, rt));
}

FeatureMatrix extract_features(const Backbone& backbone,
                               const std::vector<ImageGrid>& images,
                               const std::vector<int>& labels,
                               const std::vector<std::string>& ids) {
  FeatureMatrix out;
  out.labels = labels;
  out.ids = ids;
  out.features = Mat(static_cast<int>(images.size()), backbone.config().dim);
  nn::BlockRuntime rt;  // eval mode
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Var pooled = backbone.forward_pooled(images[i], rt);
    std::copy_n(pooled->value.ptr(), backbone.config().dim,
                &out.features.data[i * backbone.config().dim]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear probe (L-BFGS on the l2-penalized multinomial logistic loss)
// ---------------------------------------------------------------------------

double default_probe_lambda(int feature_dim, int num_classes) {
  return static_cast<double>(feature_dim) * num_classes / 100.0;
}

namespace {

// objective: sum_i CE_i + (lambda/2) ||W||^2, bias unpenalized.
// Parameters packed as [W (C x M), b (C)].
struct ProbeObjective {
  const Mat& x;  // n x M
  const std::vector<int>& y;
  int C;
  double lambda;

  int dim() const { return C * x.cols + C; }

  double eval(const std::vector<double>& theta, std::vector<double>& grad) const {
    const int n = x.rows, M = x.cols;
    const double* w = theta.data();
    const double* b = theta.data() + static_cast<std::size_t>(C) * M;

    Mat logits(n, C);
    kernels::matmul_nt(x.ptr(), w, logits.ptr(), n, M, C);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < C; ++c) logits(i, c) += b[c];

    Mat probs(n, C);
    kernels::row_softmax(logits.ptr(), probs.ptr(), n, C);

    double loss = 0.0;
    for (int i = 0; i < n; ++i)
      loss -= std::log(std::max(probs(i, y[i]), 1e-300));

    Mat delta = probs;  // P - Y
    for (int i = 0; i < n; ++i) delta(i, y[i]) -= 1.0;

    grad.assign(theta.size(), 0.0);
    // dW = (P - Y)^T X + lambda W
    kernels::matmul_tn(delta.ptr(), x.ptr(), grad.data(), C, n, M);
    for (int c = 0; c < C; ++c)
      for (int m = 0; m < M; ++m) {
        grad[static_cast<std::size_t>(c) * M + m] += lambda * w[static_cast<std::size_t>(c) * M + m];
      }
    double* gb = grad.data() + static_cast<std::size_t>(C) * M;
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < C; ++c) gb[c] += delta(i, c);

    double wsq = 0.0;
    for (int c = 0; c < C; ++c)
      for (int m = 0; m < M; ++m) {
        const double v = w[static_cast<std::size_t>(c) * M + m];
        wsq += v * v;
      }
    return loss + 0.5 * lambda * wsq;
  }
};

double vec_norm(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double vec_dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

ProbeModel linear_probe_fit(const FeatureMatrix& train, int num_classes,
                            double lambda_override, int max_iterations,
                            double grad_tolerance) {
  const int n = train.features.rows, M = train.features.cols;
  if (n < num_classes)
    throw ValidationError("linear_probe_fit: need at least one sample per class");
  std::set<int> seen(train.labels.begin(), train.labels.end());
  for (int c = 0; c < num_classes; ++c)
    if (!seen.count(c))
      throw ValidationError("linear_probe_fit: class " + std::to_string(c) +
                            " absent from training data");

  ProbeModel model;
  model.lambda = lambda_override >= 0.0 ? lambda_override
                                        : default_probe_lambda(M, num_classes);

  ProbeObjective obj{train.features, train.labels, num_classes, model.lambda};
  std::vector<double> theta(obj.dim(), 0.0), grad;
  double f = obj.eval(theta, grad);

  // L-BFGS two-loop recursion, history 10, backtracking Armijo line search
  const int history = 10;
  std::vector<std::vector<double>> s_hist, y_hist;
  std::vector<double> rho_hist;

  int iter = 0;
  for (; iter < max_iterations && vec_norm(grad) >= grad_tolerance; ++iter) {
    std::vector<double> q = grad;
    std::vector<double> alpha(s_hist.size());
    for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
      alpha[i] = rho_hist[i] * vec_dot(s_hist[i], q);
      for (std::size_t j = 0; j < q.size(); ++j) q[j] -= alpha[i] * y_hist[i][j];
    }
    double gamma = 1.0;
    if (!s_hist.empty()) {
      const auto& s = s_hist.back();
      const auto& yv = y_hist.back();
      gamma = vec_dot(s, yv) / std::max(vec_dot(yv, yv), 1e-300);
    }
    for (auto& v : q) v *= gamma;
    for (std::size_t i = 0; i < s_hist.size(); ++i) {
      const double beta = rho_hist[i] * vec_dot(y_hist[i], q);
      for (std::size_t j = 0; j < q.size(); ++j)
        q[j] += s_hist[i][j] * (alpha[i] - beta);
    }
    // q is now the ascent-scaled direction; descend along -q
    const double dir_dot_grad = -vec_dot(q, grad);
    if (dir_dot_grad >= 0.0) {
      // not a descent direction; reset to steepest descent
      q = grad;
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
    }

    double step = 1.0;
    std::vector<double> theta_new(theta.size()), grad_new;
    double f_new = f;
    bool accepted = false;
    for (int ls = 0; ls < 40; ++ls) {
      for (std::size_t j = 0; j < theta.size(); ++j)
        theta_new[j] = theta[j] - step * q[j];
      f_new = obj.eval(theta_new, grad_new);
      if (f_new <= f - 1e-4 * step * vec_dot(q, grad) * -1.0 ||
          f_new < f - 1e-16 * std::fabs(f)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) break;  // line search stalled at numerical precision

    std::vector<double> s(theta.size()), yv(theta.size());
    for (std::size_t j = 0; j < theta.size(); ++j) {
      s[j] = theta_new[j] - theta[j];
      yv[j] = grad_new[j] - grad[j];
    }
    const double sy = vec_dot(s, yv);
    if (sy > 1e-12) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(yv));
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > history) {
        s_hist.erase(s_hist.begin());
        y_hist.erase(y_hist.begin());
        rho_hist.erase(rho_hist.begin());
      }
    }
    theta = std::move(theta_new);
    grad = std::move(grad_new);
    f = f_new;
  }

  model.weights = Mat(num_classes, M);
  std::copy_n(theta.data(), static_cast<std::size_t>(num_classes) * M,
              model.weights.ptr());
  model.bias.assign(theta.begin() + static_cast<std::ptrdiff_t>(num_classes) * M,
                    theta.end());
  model.iterations = iter;
  model.final_grad_norm = vec_norm(grad);
  return model;
}

Mat linear_probe_predict(const ProbeModel& model, const Mat& features) {
  if (features.cols != model.weights.cols)
    throw ShapeError("linear_probe_predict: feature dimension mismatch (" +
                     std::to_string(features.cols) + " vs " +
                     std::to_string(model.weights.cols) + ")");
  const int n = features.rows, C = model.weights.rows;
  Mat logits(n, C);
  kernels::matmul_nt(features.ptr(), model.weights.ptr(), logits.ptr(), n,
                     features.cols, C);
  for (int i = 0; i < n; ++i)
    for (int c = 0; c < C; ++c) logits(i, c) += model.bias[c];
  Mat probs(n, C);
  kernels::row_softmax(logits.ptr(), probs.ptr(), n, C);
  return probs;
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

std::vector<std::string> FinetuneConfig::allowed_keys() {
  return {"batch_size", "epochs",       "warmup_epochs", "learning_rate",
          "layer_decay", "weight_decay", "drop_path",     "reprob",
          "mixup",       "cutmix",
          // run-level keys handled by the CLI
          "data",        "out",          "seed",          "checkpoint",
          "task",        "encoder_dim",  "encoder_depth", "encoder_heads",
          "image_side",  "patch_side"};
}

FinetuneConfig FinetuneConfig::from_config(const Config& c) {
  c.validate_keys(allowed_keys());
  FinetuneConfig f;
  f.batch_size = c.integer("batch_size", f.batch_size);
  f.epochs = c.integer("epochs", f.epochs);
  f.warmup_epochs = c.integer("warmup_epochs", f.warmup_epochs);
  f.learning_rate = c.number("learning_rate", f.learning_rate);
  f.layer_decay = c.number("layer_decay", f.layer_decay);
  f.weight_decay = c.number("weight_decay", f.weight_decay);
  f.drop_path = c.number("drop_path", f.drop_path);
  f.reprob = c.number("reprob", f.reprob);
  f.mixup = c.number("mixup", f.mixup);
  f.cutmix = c.number("cutmix", f.cutmix);
  return f;
}

namespace {

// Marsaglia-Tsang gamma sampler (shape a > 0, scale 1)
double sample_gamma(double a, Rng& rng) {
  if (a < 1.0) {
    const double u = std::max(rng.uniform(), 1e-300);
    return sample_gamma(a + 1.0, rng) * std::pow(u, 1.0 / a);
  }
  const double d = a - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  while (true) {
    double x, v;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.uniform();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (u > 0.0 && std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v)))
      return d * v;
  }
}

double sample_beta(double a, Rng& rng) {
  const double x = sample_gamma(a, rng);
  const double y = sample_gamma(a, rng);
  return x / (x + y);
}

// param name -> layer-decay multiplier index
double param_lr_mult(const std::string& name, double decay, int depth) {
  const auto mults = nn::layer_lr_multipliers(decay, depth);
  if (name.rfind("student.block", 0) == 0) {
    const std::size_t end = name.find('.', 14);
    const int idx = std::stoi(name.substr(13, end - 13));
    return mults[idx];
  }
  if (name.rfind("student.patch_embed", 0) == 0 ||
      name.rfind("student.pos_embed", 0) == 0)
    return std::pow(decay, depth);
  return 1.0;  // final norm and head train at full rate
}

}  // namespace

MixedBatch mix_batch(const std::vector<ImageGrid>& images,
                     const std::vector<int>& labels, int num_classes,
                     double mixup_alpha, double cutmix_alpha, double reprob,
                     Rng& rng) {
  const int n = static_cast<int>(images.size());
  MixedBatch out;
  out.images = images;
  out.soft_targets = Mat(n, num_classes);
  for (int i = 0; i < n; ++i) out.soft_targets(i, labels[i]) = 1.0;

  const bool use_mix = mixup_alpha > 0.0 || cutmix_alpha > 0.0;
  if (use_mix && n > 1) {
    std::vector<int> partner(n);
    std::iota(partner.begin(), partner.end(), 0);
    rng.shuffle(partner);
    const bool do_cutmix =
        cutmix_alpha > 0.0 && (mixup_alpha <= 0.0 || rng.bernoulli(0.5));
    const double alpha = do_cutmix ? cutmix_alpha : mixup_alpha;
    const double lam = sample_beta(alpha, rng);

    for (int i = 0; i < n; ++i) {
      const int j = partner[i];
      ImageGrid& a = out.images[i];
      const ImageGrid& b = images[j];
      double effective_lam = lam;
      if (do_cutmix) {
        // rectangular patch of area (1 - lam) pasted from the partner
        const double ratio = std::sqrt(1.0 - lam);
        const int ch = std::max(1, static_cast<int>(a.height * ratio));
        const int cw = std::max(1, static_cast<int>(a.width * ratio));
        const int y0 = static_cast<int>(rng.index(a.height - ch + 1));
        const int x0 = static_cast<int>(rng.index(a.width - cw + 1));
        for (int c = 0; c < a.channels; ++c)
          for (int y = y0; y < y0 + ch; ++y)
            for (int x = x0; x < x0 + cw; ++x) a.at(c, y, x) = b.at(c, y, x);
        effective_lam =
            1.0 - static_cast<double>(ch) * cw / (a.height * a.width);
      } else {
        for (std::size_t p = 0; p < a.pixels.size(); ++p)
          a.pixels[p] = lam * a.pixels[p] + (1.0 - lam) * b.pixels[p];
      }
      for (int c = 0; c < num_classes; ++c) out.soft_targets(i, c) = 0.0;
      out.soft_targets(i, labels[i]) += effective_lam;
      out.soft_targets(i, labels[j]) += 1.0 - effective_lam;
    }
  }
  if (reprob > 0.0)
    for (auto& img : out.images) img = imageops::random_erase(img, rng, reprob);
  return out;
}

FinetuneResult finetune(Backbone& backbone, const std::vector<ImageGrid>& images,
                        const std::vector<int>& labels,
                        const std::vector<Split>& groups, int num_classes,
                        const FinetuneConfig& cfg, std::uint64_t seed) {
  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < groups.size(); ++i) {
    if (groups[i] == Split::kTrain) train_idx.push_back(i);
    else if (groups[i] == Split::kVal) val_idx.push_back(i);
  }
  if (val_idx.empty())
    throw ValidationError("finetune: validation split is empty");
  if (train_idx.empty())
    throw ValidationError("finetune: training split is empty");

  // head on top of pooled tokens
  nn::ParamStore head_store;
  Rng hrng(derive_seed(seed, "finetune_head"));
  const Var head_w = head_store.add(
      "head.w", nn::random_normal(backbone.config().dim, num_classes, 0.02, hrng));
  const Var head_b = head_store.add("head.b", Mat(1, num_classes));

  std::vector<Var> all_params = backbone.params().params();
  all_params.push_back(head_w);
  all_params.push_back(head_b);
  nn::AdamW opt(all_params, cfg.learning_rate, cfg.weight_decay);
  for (const auto& p : backbone.params().params())
    opt.set_lr_mult(p, param_lr_mult(p->name, cfg.layer_decay,
                                     backbone.config().depth));

  Rng aug_rng(derive_seed(seed, "finetune_aug"));
  Rng batch_rng(derive_seed(seed, "finetune_batches"));
  Rng path_rng(derive_seed(seed, "finetune_droppath"));

  const int bsz = std::min<int>(cfg.batch_size, static_cast<int>(train_idx.size()));
  const long steps_per_epoch =
      (static_cast<long>(train_idx.size()) + bsz - 1) / bsz;
  const long total_steps = steps_per_epoch * cfg.epochs;
  const long warmup_steps = steps_per_epoch * cfg.warmup_epochs;

  auto eval_val = [&]() {
    std::vector<int> y;
    Mat probs(static_cast<int>(val_idx.size()), num_classes);
    nn::BlockRuntime rt;  // eval
    for (std::size_t vi = 0; vi < val_idx.size(); ++vi) {
      const Var pooled = backbone.forward_pooled(images[val_idx[vi]], rt);
      const Var logits = nn::linear(pooled, head_w, head_b);
      Mat p(1, num_classes);
      kernels::row_softmax(logits->value.ptr(), p.ptr(), 1, num_classes);
      for (int c = 0; c < num_classes; ++c)
        probs(static_cast<int>(vi), c) = p(0, c);
      y.push_back(labels[val_idx[vi]]);
    }
    const auto m = stats::classification_metrics(y, probs);
    // binary tasks select on AUROC, multiclass on weighted F1
    if (num_classes == 2 && m.auroc) return *m.auroc;
    return m.w_f1;
  };

  FinetuneResult result;
  long step = 0;
  double best = -1.0;
  int best_epoch = -1;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = train_idx;
    batch_rng.shuffle(order);
    double epoch_loss = 0.0;
    long batches = 0;
    double lr = 0.0;
    for (std::size_t ofs = 0; ofs < order.size(); ofs += bsz) {
      const std::size_t end = std::min(order.size(), ofs + bsz);
      std::vector<ImageGrid> bimgs;
      std::vector<int> blabels;
      for (std::size_t i = ofs; i < end; ++i) {
        bimgs.push_back(images[order[i]]);
        blabels.push_back(labels[order[i]]);
      }
      const MixedBatch mixed = mix_batch(bimgs, blabels, num_classes, cfg.mixup,
                                         cfg.cutmix, cfg.reprob, aug_rng);
      lr = nn::warmup_cosine_lr(cfg.learning_rate, warmup_steps, total_steps, step);
      opt.set_lr(lr);

      nn::BlockRuntime rt;
      rt.training = true;
      rt.drop_path = cfg.drop_path;
      rt.rng = &path_rng;
      std::vector<Var> pooled_rows;
      for (const auto& img : mixed.images)
        pooled_rows.push_back(backbone.forward_pooled(img, rt));
      const Var logits =
          nn::linear(nn::concat_rows(pooled_rows), head_w, head_b);
      const Var loss = nn::cross_entropy_logits(logits, mixed.soft_targets);

      backbone.params().zero_grad();
      head_store.zero_grad();
      nn::backward(loss);
      opt.step();
      epoch_loss += loss->value(0, 0);
      ++batches;
      ++step;
    }

    const double val_metric = eval_val();
    result.epochs.push_back({epoch, epoch_loss / std::max(1L, batches),
                             val_metric, lr});
    if (val_metric > best) {
      best = val_metric;
      best_epoch = epoch;
      result.best_state = backbone.state_dict();
      for (const auto& a : head_store.state_dict()) result.best_state.push_back(a);
    }
  }

  result.best_val_metric = best;
  result.sidecar = backbone.arch_sidecar();
  result.sidecar.epoch = best_epoch;
  result.sidecar.metrics["best_val_metric"] = best;
  result.sidecar.metrics["num_classes"] = num_classes;
  result.sidecar.arch["head"] = "linear";
  return result;
}

// ---------------------------------------------------------------------------
// Out-of-fold prediction
// ---------------------------------------------------------------------------

std::vector<int> assign_folds(const std::vector<std::string>& unit_key,
                              const std::vector<std::string>& stratify, int k,
                              std::uint64_t seed) {
  if (unit_key.size() != stratify.size())
    throw ValidationError("assign_folds: length mismatch");
  if (k < 2) throw ValidationError("assign_folds: k must be >= 2");

  // unit -> stratum (first occurrence wins; units must not mix strata)
  std::map<std::string, std::string> unit_stratum;
  for (std::size_t i = 0; i < unit_key.size(); ++i)
    unit_stratum.try_emplace(unit_key[i], stratify[i]);

  std::map<std::string, std::vector<std::string>> strata;  // sorted keys
  for (const auto& [unit, st] : unit_stratum) strata[st].push_back(unit);

  std::map<std::string, int> unit_fold;
  for (auto& [st, units] : strata) {
    if (static_cast<int>(units.size()) < k)
      throw ValidationError("assign_folds: k=" + std::to_string(k) +
                            " exceeds stratum '" + st + "' size " +
                            std::to_string(units.size()));
    std::sort(units.begin(), units.end());  // id-keyed, input-order independent
    Rng rng(derive_seed(seed, "folds:" + st));
    rng.shuffle(units);
    for (std::size_t i = 0; i < units.size(); ++i)
      unit_fold[units[i]] = static_cast<int>(i % k);
  }

  std::vector<int> folds(unit_key.size());
  for (std::size_t i = 0; i < unit_key.size(); ++i)
    folds[i] = unit_fold.at(unit_key[i]);
  return folds;
}

std::vector<OofRow> out_of_fold_predict(const FeatureMatrix& features,
                                        const std::vector<std::string>& unit_key,
                                        const std::vector<std::string>& stratify,
                                        int num_classes, int k,
                                        std::uint64_t seed,
                                        double lambda_override) {
  const auto folds = assign_folds(unit_key, stratify, k, seed);
  std::vector<OofRow> rows(features.features.rows);

  for (int fold = 0; fold < k; ++fold) {
    std::vector<int> train_rows, test_rows;
    for (int i = 0; i < features.features.rows; ++i)
      (folds[i] == fold ? test_rows : train_rows).push_back(i);

    FeatureMatrix train;
    train.features = Mat(static_cast<int>(train_rows.size()), features.features.cols);
    for (std::size_t i = 0; i < train_rows.size(); ++i) {
      std::copy_n(&features.features.data[static_cast<std::size_t>(train_rows[i]) *
                                          features.features.cols],
                  features.features.cols,
                  &train.features.data[i * features.features.cols]);
      train.labels.push_back(features.labels[train_rows[i]]);
    }
    const ProbeModel model =
        linear_probe_fit(train, num_classes, lambda_override);

    Mat test(static_cast<int>(test_rows.size()), features.features.cols);
    for (std::size_t i = 0; i < test_rows.size(); ++i)
      std::copy_n(&features.features.data[static_cast<std::size_t>(test_rows[i]) *
                                          features.features.cols],
                  features.features.cols, &test.data[i * features.features.cols]);
    const Mat probs = linear_probe_predict(model, test);

    for (std::size_t i = 0; i < test_rows.size(); ++i) {
      OofRow& r = rows[test_rows[i]];
      r.id = features.ids[test_rows[i]];
      r.true_label = features.labels[test_rows[i]];
      r.fold = fold;
      r.probs.resize(num_classes);
      for (int c = 0; c < num_classes; ++c)
        r.probs[c] = probs(static_cast<int>(i), c);
    }
  }
  return rows;
}

void write_predictions_csv(const std::string& path,
                           const std::vector<OofRow>& rows, int num_classes) {
  CsvTable t;
  t.header = {"id", "true_label"};
  for (int c = 0; c < num_classes; ++c)
    t.header.push_back("prob_" + std::to_string(c));
  t.header.push_back("fold");
  for (const auto& r : rows) {
    std::vector<std::string> row = {r.id, std::to_string(r.true_label)};
    for (double p : r.probs) row.push_back(format_double(p));
    row.push_back(std::to_string(r.fold));
    t.rows.push_back(std::move(row));
  }
  write_csv(path, t);
}

}  // namespace dermfoundry::adapt
