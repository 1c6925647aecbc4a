#include "dermfoundry/mil.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include "dermfoundry/image_ops.hpp"
#include "dermfoundry/kernels.hpp"
#include "dermfoundry/stats.hpp"

namespace dermfoundry::mil {

using nn::Mat;
using nn::Var;

void validate_bag(const SlideBag& bag) {
  if (bag.instance_features.rows < 1)
    throw ValidationError("bag " + bag.slide_id + " is empty");
  for (double v : bag.instance_features.data)
    if (!std::isfinite(v))
      throw ValidationError("bag " + bag.slide_id + " has non-finite features");
}

const double kImagenetMean[3] = {0.485, 0.456, 0.406};
const double kImagenetStd[3] = {0.229, 0.224, 0.225};

std::vector<double> normalize_imagenet(const ImageGrid& img) {
  if (img.channels != 3)
    throw ShapeError("normalize_imagenet expects a 3-channel image");
  std::vector<double> out(img.pixels.size());
  const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i)
      out[c * plane + i] =
          (img.pixels[c * plane + i] - kImagenetMean[c]) / kImagenetStd[c];
  return out;
}

std::vector<std::pair<int, int>> TileSet::coordinates() const {
  std::vector<std::pair<int, int>> out;
  out.reserve(tiles.size());
  for (const auto& t : tiles) out.emplace_back(t.grid_x, t.grid_y);
  return out;
}

TileSet tile_contract(const ImageGrid& slide, const TileContractConfig& cfg) {
  if (slide.channels != 3)
    throw ShapeError("tile_contract expects a 3-channel slide raster");
  TileSet out;
  out.magnification = cfg.magnification;

  const int nx = slide.width / cfg.tile_side;
  const int ny = slide.height / cfg.tile_side;
  for (int gy = 0; gy < ny; ++gy)
    for (int gx = 0; gx < nx; ++gx) {
      long tissue = 0;
      for (int y = 0; y < cfg.tile_side; ++y)
        for (int x = 0; x < cfg.tile_side; ++x) {
          const int yy = gy * cfg.tile_side + y, xx = gx * cfg.tile_side + x;
          const double lum = 0.299 * slide.at(0, yy, xx) +
                             0.587 * slide.at(1, yy, xx) +
                             0.114 * slide.at(2, yy, xx);
          tissue += lum < cfg.tissue_luminance_max;
        }
      const double frac = static_cast<double>(tissue) /
                          (static_cast<double>(cfg.tile_side) * cfg.tile_side);
      if (frac < cfg.min_tissue_fraction) continue;

      Tile t;
      t.grid_x = gx;
      t.grid_y = gy;
      t.resized = imageops::resize_bilinear(
          imageops::crop(slide, gy * cfg.tile_side, gx * cfg.tile_side,
                         cfg.tile_side, cfg.tile_side),
          cfg.resize_side, cfg.resize_side);
      t.normalized = normalize_imagenet(t.resized);
      out.tiles.push_back(std::move(t));
    }

  if (out.tiles.empty())
    throw ValidationError("tile_contract: no tissue detected in slide");
  return out;
}

// ---------------------------------------------------------------------------
// ABMIL
// ---------------------------------------------------------------------------

AbmilModel::AbmilModel(int in_dim, int num_classes, std::uint64_t seed,
                       const AbmilConfig& cfg)
    : cfg_(cfg), num_classes_(num_classes) {
  Rng init(derive_seed(seed, "abmil_init"));
  fc_w_ = store_.add("abmil.fc.w",
                     nn::random_normal(in_dim, cfg.embed_dim, 0.02, init));
  fc_b_ = store_.add("abmil.fc.b", Mat(1, cfg.embed_dim));
  att_v_w_ = store_.add("abmil.att_v.w",
                        nn::random_normal(cfg.embed_dim, cfg.attn_hidden, 0.02, init));
  att_v_b_ = store_.add("abmil.att_v.b", Mat(1, cfg.attn_hidden));
  att_u_w_ = store_.add("abmil.att_u.w",
                        nn::random_normal(cfg.embed_dim, cfg.attn_hidden, 0.02, init));
  att_u_b_ = store_.add("abmil.att_u.b", Mat(1, cfg.attn_hidden));
  att_w_ = store_.add("abmil.att.w",
                      nn::random_normal(cfg.attn_hidden, 1, 0.02, init));
  cls_w_ = store_.add("abmil.cls.w",
                      nn::random_normal(cfg.embed_dim, num_classes, 0.02, init));
  cls_b_ = store_.add("abmil.cls.b", Mat(1, num_classes));
}

namespace {

// Sorting before summation gives one canonical addition order per value
// multiset, making instance-permuted bags sum to bitwise-equal results.
double canonical_sum(std::vector<double>& values) {
  std::sort(values.begin(), values.end());
  double s = 0.0;
  for (double v : values) s += v;
  return s;
}

}  // namespace

AbmilModel::Forward AbmilModel::forward(const Mat& bag) const {
  const int n = bag.rows;
  if (n < 1) throw ValidationError("abmil: empty bag");
  if (bag.cols != fc_w_->value.rows)
    throw ShapeError("abmil: feature dimension mismatch");

  const int E = cfg_.embed_dim, H = cfg_.attn_hidden;
  // per-instance pipeline (row independent)
  Mat h(n, E);
  kernels::matmul(bag.ptr(), fc_w_->value.ptr(), h.ptr(), n, bag.cols, E);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < E; ++j) {
      h(i, j) += fc_b_->value(0, j);
      h(i, j) = std::max(0.0, h(i, j));  // ReLU embedding
    }

  std::vector<double> score(n);
  for (int i = 0; i < n; ++i) {
    double s = 0.0;
    for (int k = 0; k < H; ++k) {
      double v = att_v_b_->value(0, k), u = att_u_b_->value(0, k);
      for (int j = 0; j < E; ++j) {
        v += h(i, j) * att_v_w_->value(j, k);
        u += h(i, j) * att_u_w_->value(j, k);
      }
      s += att_w_->value(k, 0) * std::tanh(v) * (1.0 / (1.0 + std::exp(-u)));
    }
    score[i] = s;
  }

  const double mx = *std::max_element(score.begin(), score.end());
  std::vector<double> expv(n);
  for (int i = 0; i < n; ++i) expv[i] = std::exp(score[i] - mx);
  std::vector<double> expv_sorted = expv;
  const double z = canonical_sum(expv_sorted);

  Forward out;
  out.attention.resize(n);
  for (int i = 0; i < n; ++i) out.attention[i] = expv[i] / z;

  std::vector<double> slide(E);
  std::vector<double> addends(n);
  for (int j = 0; j < E; ++j) {
    for (int i = 0; i < n; ++i) addends[i] = out.attention[i] * h(i, j);
    std::vector<double> tmp = addends;
    slide[j] = canonical_sum(tmp);
  }

  out.logits.resize(num_classes_);
  for (int c = 0; c < num_classes_; ++c) {
    double s = cls_b_->value(0, c);
    for (int j = 0; j < E; ++j) s += slide[j] * cls_w_->value(j, c);
    out.logits[c] = s;
  }
  return out;
}

Var AbmilModel::forward_var(const Mat& bag, Rng* dropout_rng) const {
  const bool training = dropout_rng != nullptr;
  Var x = nn::constant(bag);
  if (training)
    x = nn::dropout(x, cfg_.dropout_input, *dropout_rng, true);
  Var h = nn::relu(nn::linear(x, fc_w_, fc_b_));

  Var v = nn::tanh_(nn::linear(h, att_v_w_, att_v_b_));
  Var u = nn::sigmoid_(nn::linear(h, att_u_w_, att_u_b_));
  if (training) {
    v = nn::dropout(v, cfg_.dropout_attn, *dropout_rng, true);
    u = nn::dropout(u, cfg_.dropout_attn, *dropout_rng, true);
  }
  Var gated = nn::mul(v, u);
  Var scores = nn::matmul(gated, att_w_);  // n x 1

  // softmax over instances: transpose the score column to a row
  const int n = bag.rows;
  std::vector<Var> elems;
  elems.reserve(n);
  for (int i = 0; i < n; ++i) elems.push_back(nn::gather_rows(scores, {i}));
  const Var score_row = nn::concat_cols(elems);     // 1 x n
  const Var attn_row = nn::row_softmax(score_row);  // 1 x n
  const Var slide = nn::matmul(attn_row, h);        // 1 x E
  return nn::linear(slide, cls_w_, cls_b_);         // 1 x C
}

// ---------------------------------------------------------------------------
// Cross-validated training
// ---------------------------------------------------------------------------

std::vector<std::string> MilTrainConfig::allowed_keys() {
  return {"folds",      "epochs", "early_stop_patience", "batch_size",
          "learning_rate", "weight_decay", "val_fraction",
          // run-level keys handled by the CLI
          "data", "out", "seed", "task", "embed_dim", "attn_hidden"};
}

MilTrainConfig MilTrainConfig::from_config(const Config& c) {
  c.validate_keys(allowed_keys());
  MilTrainConfig m;
  m.folds = c.integer("folds", m.folds);
  m.epochs = c.integer("epochs", m.epochs);
  m.early_stop_patience = c.integer("early_stop_patience", m.early_stop_patience);
  m.batch_size = c.integer("batch_size", m.batch_size);
  m.learning_rate = c.number("learning_rate", m.learning_rate);
  m.weight_decay = c.number("weight_decay", m.weight_decay);
  m.val_fraction = c.number("val_fraction", m.val_fraction);
  return m;
}

std::vector<int> assign_case_folds(const std::vector<SlideBag>& bags, int k,
                                   std::uint64_t seed) {
  // case -> label (a case's slides must agree; first slide's label is used
  // for stratification, mixed cases stratify by their first label)
  std::map<std::string, int> case_label;
  for (const auto& b : bags) case_label.try_emplace(b.case_id, b.label);

  std::map<int, std::vector<std::string>> strata;
  for (const auto& [cid, label] : case_label) strata[label].push_back(cid);

  std::map<std::string, int> case_fold;
  for (auto& [label, cases] : strata) {
    if (static_cast<int>(cases.size()) < k)
      throw ValidationError("mil folds: label stratum " + std::to_string(label) +
                            " has fewer cases than folds");
    std::sort(cases.begin(), cases.end());
    Rng rng(derive_seed(seed, "milfolds", static_cast<std::uint64_t>(label)));
    rng.shuffle(cases);
    for (std::size_t i = 0; i < cases.size(); ++i)
      case_fold[cases[i]] = static_cast<int>(i % k);
  }

  std::vector<int> folds(bags.size());
  for (std::size_t i = 0; i < bags.size(); ++i)
    folds[i] = case_fold.at(bags[i].case_id);
  return folds;
}

MilCvResult train_mil_cv(const std::vector<SlideBag>& bags,
                         const MilTrainConfig& cfg, std::uint64_t seed) {
  if (bags.empty()) throw ValidationError("train_mil_cv: no bags");
  for (const auto& b : bags) validate_bag(b);
  int num_classes = 0;
  for (const auto& b : bags) num_classes = std::max(num_classes, b.label + 1);
  const int in_dim = bags[0].instance_features.cols;

  const auto folds = assign_case_folds(bags, cfg.folds, seed);
  MilCvResult result;
  result.oof.resize(bags.size());

  for (int fold = 0; fold < cfg.folds; ++fold) {
    std::vector<std::size_t> holdout, pool;
    for (std::size_t i = 0; i < bags.size(); ++i)
      (folds[i] == fold ? holdout : pool).push_back(i);

    // carve a validation subset out of the training pool, case-aware
    std::set<std::string> pool_cases;
    for (auto i : pool) pool_cases.insert(bags[i].case_id);
    std::vector<std::string> case_list(pool_cases.begin(), pool_cases.end());
    Rng vrng(derive_seed(seed, "milval", static_cast<std::uint64_t>(fold)));
    vrng.shuffle(case_list);
    const std::size_t n_val_cases = std::max<std::size_t>(
        1, static_cast<std::size_t>(case_list.size() * cfg.val_fraction));
    std::set<std::string> val_cases(case_list.begin(),
                                    case_list.begin() + n_val_cases);

    std::vector<std::size_t> train_idx, val_idx;
    for (auto i : pool)
      (val_cases.count(bags[i].case_id) ? val_idx : train_idx).push_back(i);
    if (train_idx.empty() || val_idx.empty())
      throw ValidationError("train_mil_cv: fold " + std::to_string(fold) +
                            " has an empty train or val subset");

    AbmilModel model(in_dim, num_classes,
                     derive_seed(seed, "milmodel", static_cast<std::uint64_t>(fold)));
    nn::AdamW opt(model.params().params(), cfg.learning_rate, cfg.weight_decay);
    Rng shuffle_rng(derive_seed(seed, "milshuffle", static_cast<std::uint64_t>(fold)));
    Rng drop_rng(derive_seed(seed, "mildrop", static_cast<std::uint64_t>(fold)));

    auto val_loss = [&]() {
      double acc = 0.0;
      for (auto i : val_idx) {
        const Var logits = model.forward_var(bags[i].instance_features, nullptr);
        Mat target(1, num_classes);
        target(0, bags[i].label) = 1.0;
        acc += nn::cross_entropy_logits(logits, target)->value(0, 0);
      }
      return acc / val_idx.size();
    };

    const long total_steps = static_cast<long>(cfg.epochs) * train_idx.size();
    long step = 0;
    double best_loss = std::numeric_limits<double>::infinity();
    StateDict best_state = model.params().state_dict();
    int best_epoch = 0, stopped_epoch = 0;
    int since_best = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      std::vector<std::size_t> order = train_idx;
      shuffle_rng.shuffle(order);
      for (auto i : order) {
        opt.set_lr(nn::warmup_cosine_lr(cfg.learning_rate, 0, total_steps, step));
        const Var logits = model.forward_var(bags[i].instance_features, &drop_rng);
        Mat target(1, num_classes);
        target(0, bags[i].label) = 1.0;
        const Var loss = nn::cross_entropy_logits(logits, target);
        model.params().zero_grad();
        nn::backward(loss);
        opt.step();
        ++step;
      }
      const double vl = val_loss();
      stopped_epoch = epoch;
      if (vl < best_loss) {
        best_loss = vl;
        best_epoch = epoch;
        best_state = model.params().state_dict();
        since_best = 0;
      } else if (++since_best >= cfg.early_stop_patience) {
        break;
      }
    }
    model.params().load_state_dict(best_state);

    // held-out predictions
    std::vector<int> y;
    Mat probs(static_cast<int>(holdout.size()), num_classes);
    for (std::size_t hi = 0; hi < holdout.size(); ++hi) {
      const auto f = model.forward(bags[holdout[hi]].instance_features);
      Mat p(1, num_classes);
      std::copy(f.logits.begin(), f.logits.end(), p.ptr());
      Mat sm(1, num_classes);
      kernels::row_softmax(p.ptr(), sm.ptr(), 1, num_classes);
      MilOofPrediction& pred = result.oof[holdout[hi]];
      pred.slide_id = bags[holdout[hi]].slide_id;
      pred.true_label = bags[holdout[hi]].label;
      pred.fold = fold;
      pred.probs.assign(sm.data.begin(), sm.data.end());
      for (int c = 0; c < num_classes; ++c)
        probs(static_cast<int>(hi), c) = sm(0, c);
      y.push_back(bags[holdout[hi]].label);
    }
    const auto m = stats::classification_metrics(y, probs);
    MilFoldMetrics fm;
    fm.fold = fold;
    fm.auroc = m.auroc.value_or(0.5);
    fm.w_f1 = m.w_f1;
    fm.best_epoch = best_epoch;
    fm.stopped_epoch = stopped_epoch;
    result.fold_metrics.push_back(fm);
  }

  double mean = 0.0;
  for (const auto& f : result.fold_metrics) mean += f.auroc;
  result.mean_auroc = mean / result.fold_metrics.size();
  return result;
}

}  // namespace dermfoundry::mil
