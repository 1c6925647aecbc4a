#include "dermfoundry/pretrain.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace dermfoundry::pretrain {

using nn::Mat;
using nn::Var;

int PatchGridSpec::grid_side() const {
  if (patch_side <= 0 || image_side % patch_side != 0)
    throw ConfigError("image_side must be divisible by patch_side");
  return image_side / patch_side;
}

int PatchGridSpec::teacher_patch_side() const {
  const int g = grid_side();
  if (teacher_image_side % g != 0)
    throw ConfigError(
        "teacher_image_side must produce the same patch grid as the student "
        "(got " + std::to_string(teacher_image_side) + " for grid " +
        std::to_string(g) + ")");
  return teacher_image_side / g;
}

int PatchMask::count_masked() const {
  int n = 0;
  for (auto m : masked) n += m != 0;
  return n;
}

std::vector<int> PatchMask::masked_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < masked.size(); ++i)
    if (masked[i]) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> PatchMask::visible_indices() const {
  std::vector<int> out;
  for (std::size_t i = 0; i < masked.size(); ++i)
    if (!masked[i]) out.push_back(static_cast<int>(i));
  return out;
}

PatchMask generate_block_mask(const PatchGridSpec& spec, int target_count,
                              Rng& rng, int min_block) {
  const int g = spec.grid_side();
  const int total = g * g;
  if (target_count < 0 || target_count > total)
    throw ValidationError("mask target_count out of range [0, " +
                          std::to_string(total) + "]");

  PatchMask mask;
  mask.grid_side = g;
  mask.masked.assign(total, 0);

  int remaining = target_count;
  int stalled = 0;
  while (remaining > 0) {
    const int lo = std::min(min_block, remaining);
    const int hi = std::max(lo, remaining);
    const int area = lo + static_cast<int>(rng.index(hi - lo + 1));
    const double aspect = std::exp(rng.uniform(std::log(0.3), std::log(1.0 / 0.3)));
    const int bh = std::clamp(static_cast<int>(std::lround(std::sqrt(area * aspect))), 1, g);
    const int bw = std::clamp(static_cast<int>(std::lround(std::sqrt(area / aspect))), 1, g);

    // Placement may overhang the grid (clipped back to a rectangle) so every
    // position has the same per-block coverage probability; tiny clipped
    // slivers below the minimum are resampled.
    int y0 = 0, y1 = 0, x0 = 0, x1 = 0;
    for (int attempt = 0; attempt < 16; ++attempt) {
      const int top = 1 - bh + static_cast<int>(rng.index(g + bh - 1));
      const int left = 1 - bw + static_cast<int>(rng.index(g + bw - 1));
      y0 = std::max(top, 0);
      y1 = std::min(top + bh, g);
      x0 = std::max(left, 0);
      x1 = std::min(left + bw, g);
      if ((y1 - y0) * (x1 - x0) >= std::min(min_block, remaining)) break;
    }

    int newly = 0;
    for (int y = y0; y < y1 && remaining > newly; ++y)
      for (int x = x0; x < x1 && remaining > newly; ++x) {
        auto& cell = mask.masked[static_cast<std::size_t>(y) * g + x];
        if (!cell) {
          cell = 1;
          ++newly;  // trim: stop once the exact count is reached
        }
      }
    remaining -= newly;
    if (newly == 0 && ++stalled > 64) {
      // saturated region; finish deterministically in scan order
      for (int i = 0; i < total && remaining > 0; ++i)
        if (!mask.masked[i]) {
          mask.masked[i] = 1;
          --remaining;
        }
    }
  }
  return mask;
}

double alignment_loss(const LatentGrid& predicted, const LatentGrid& target) {
  const Mat& p = predicted.embeddings;
  const Mat& t = target.embeddings;
  if (p.rows != t.rows)
    throw ShapeError("alignment_loss: row count mismatch (" +
                     std::to_string(p.rows) + " vs " + std::to_string(t.rows) + ")");
  if (p.rows == 0) return 0.0;
  if (p.cols != t.cols)
    throw ShapeError("alignment_loss: dimension mismatch (" +
                     std::to_string(p.cols) + " vs " + std::to_string(t.cols) + ")");

  double acc = 0.0;
  for (int r = 0; r < p.rows; ++r) {
    double np = 0.0, nt = 0.0;
    for (int c = 0; c < p.cols; ++c) {
      np += p(r, c) * p(r, c);
      nt += t(r, c) * t(r, c);
    }
    np = std::sqrt(np + 1e-12);
    nt = std::sqrt(nt + 1e-12);
    for (int c = 0; c < p.cols; ++c) {
      const double d = p(r, c) / np - t(r, c) / nt;
      acc += d * d;
    }
  }
  return acc / p.rows;
}

Var alignment_loss_var(const Var& predicted, const Mat& target) {
  if (predicted->value.rows != target.rows)
    throw ShapeError("alignment_loss: row count mismatch");
  if (predicted->value.rows == 0) return nn::constant(Mat(1, 1, 0.0));
  const Var pn = nn::l2_normalize_rows(predicted);
  Mat tn = target;
  for (int r = 0; r < tn.rows; ++r) {
    double n = 0.0;
    for (int c = 0; c < tn.cols; ++c) n += tn(r, c) * tn(r, c);
    n = std::sqrt(n + 1e-12);
    for (int c = 0; c < tn.cols; ++c) tn(r, c) /= n;
  }
  const Var d = nn::sub(pn, nn::constant(std::move(tn)));
  return nn::scale(nn::sum_all(nn::mul(d, d)), 1.0 / predicted->value.rows);
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

std::vector<std::string> PretrainConfig::allowed_keys() {
  return {"teacher_model", "first_input_size", "second_input_size",
          "second_interpolation", "number_of_output_dimensions",
          "crop_min_size", "crop_max_size", "patch_size", "vocabulary_size",
          "batch_size", "learning_rate", "warmup_epochs", "total_epochs",
          "gradient_clipping_max_norm", "layer_scale_init_value",
          "color_jitter", "drop_path", "mask_generator",
          "number_of_mask_patches", "decoder_layer_scale_init_value",
          "regressor_depth", "decoder_depth", "decoder_embed_dimension",
          "decoder_number_of_heads", "align_loss_weight",
          "latent_alignment_loss_weight", "encoder_depth", "encoder_dim",
          "encoder_heads", "teacher_depth", "weight_decay", "mask_min_block",
          "teacher_checkpoint",
          // run-level keys handled by the CLI
          "data", "out", "seed", "epochs", "steps_per_epoch", "task"};
}

PretrainConfig PretrainConfig::from_config(const Config& c) {
  c.validate_keys(allowed_keys());
  PretrainConfig p;
  p.teacher_model = c.str("teacher_model", p.teacher_model);
  p.first_input_size = c.integer("first_input_size", p.first_input_size);
  p.second_input_size = c.integer("second_input_size", p.second_input_size);
  p.second_interpolation = c.str("second_interpolation", p.second_interpolation);
  p.number_of_output_dimensions =
      c.integer("number_of_output_dimensions", p.number_of_output_dimensions);
  p.crop_min_size = c.number("crop_min_size", p.crop_min_size);
  p.crop_max_size = c.number("crop_max_size", p.crop_max_size);
  p.patch_size = c.integer("patch_size", p.patch_size);
  p.vocabulary_size = c.integer("vocabulary_size", p.vocabulary_size);
  p.batch_size = c.integer("batch_size", p.batch_size);
  p.learning_rate = c.number("learning_rate", p.learning_rate);
  p.warmup_epochs = c.integer("warmup_epochs", p.warmup_epochs);
  p.total_epochs = c.integer("total_epochs", p.total_epochs);
  p.gradient_clipping_max_norm =
      c.number("gradient_clipping_max_norm", p.gradient_clipping_max_norm);
  p.layer_scale_init_value =
      c.number("layer_scale_init_value", p.layer_scale_init_value);
  p.color_jitter = c.number("color_jitter", p.color_jitter);
  p.drop_path = c.number("drop_path", p.drop_path);
  p.mask_generator = c.str("mask_generator", p.mask_generator);
  p.number_of_mask_patches =
      c.integer("number_of_mask_patches", p.number_of_mask_patches);
  p.decoder_layer_scale_init_value = c.number("decoder_layer_scale_init_value",
                                              p.decoder_layer_scale_init_value);
  p.regressor_depth = c.integer("regressor_depth", p.regressor_depth);
  p.decoder_depth = c.integer("decoder_depth", p.decoder_depth);
  p.decoder_embed_dimension =
      c.integer("decoder_embed_dimension", p.decoder_embed_dimension);
  p.decoder_number_of_heads =
      c.integer("decoder_number_of_heads", p.decoder_number_of_heads);
  p.align_loss_weight = c.number("align_loss_weight", p.align_loss_weight);
  p.latent_alignment_loss_weight = c.number("latent_alignment_loss_weight",
                                            p.latent_alignment_loss_weight);
  p.encoder_depth = c.integer("encoder_depth", p.encoder_depth);
  p.encoder_dim = c.integer("encoder_dim", p.encoder_dim);
  p.encoder_heads = c.integer("encoder_heads", p.encoder_heads);
  p.teacher_depth = c.integer("teacher_depth", p.teacher_depth);
  p.weight_decay = c.number("weight_decay", p.weight_decay);
  p.mask_min_block = c.number("mask_min_block", p.mask_min_block);
  p.teacher_checkpoint = c.str("teacher_checkpoint", p.teacher_checkpoint);
  p.validate();
  return p;
}

void PretrainConfig::validate() const {
  if (mask_generator != "block")
    throw ConfigError("mask_generator: only 'block' is supported");
  if (decoder_depth != 0)
    throw ConfigError(
        "decoder_depth must be 0: this architecture is encoder-regressor "
        "without a separate decoder");
  if (decoder_embed_dimension != encoder_dim)
    throw ConfigError(
        "decoder_embed_dimension must equal encoder_dim (regressor shares the "
        "student token width)");
  if (second_interpolation != "bicubic" && second_interpolation != "bilinear")
    throw ConfigError("second_interpolation must be 'bicubic' or 'bilinear'");
  if (teacher_model != "random" && teacher_model != "clip")
    throw ConfigError("teacher_model must be 'random' or 'clip'");
  if (teacher_model == "clip" && teacher_checkpoint.empty())
    throw ConfigError(
        "teacher weights unavailable: teacher_model='clip' requires "
        "teacher_checkpoint=<dir>; set teacher_model='random' for the frozen "
        "random fixture teacher");
  grid_spec().teacher_patch_side();
  const int patches = grid_spec().patch_count();
  if (number_of_mask_patches < 0 || number_of_mask_patches > patches)
    throw ConfigError("number_of_mask_patches out of range for the patch grid");
}

PatchGridSpec PretrainConfig::grid_spec() const {
  PatchGridSpec s;
  s.image_side = first_input_size;
  s.patch_side = patch_size;
  s.teacher_image_side = second_input_size;
  return s;
}

nn::VitConfig PretrainConfig::student_vit() const {
  nn::VitConfig v;
  v.image_side = first_input_size;
  v.patch_side = patch_size;
  v.channels = 3;
  v.dim = encoder_dim;
  v.depth = encoder_depth;
  v.heads = encoder_heads;
  v.layer_scale_init = layer_scale_init_value;
  v.drop_path = drop_path;
  return v;
}

nn::VitConfig PretrainConfig::teacher_vit() const {
  nn::VitConfig v;
  v.image_side = second_input_size;
  v.patch_side = grid_spec().teacher_patch_side();
  v.channels = 3;
  v.dim = number_of_output_dimensions;
  v.depth = teacher_depth;
  v.heads = std::max(1, number_of_output_dimensions / 16);
  v.layer_scale_init = 1.0;
  v.drop_path = 0.0;
  return v;
}

PretrainConfig fixture_config() {
  PretrainConfig p;
  p.first_input_size = 64;
  p.patch_size = 8;
  p.second_input_size = 56;  // same 8x8 grid at teacher scale
  p.number_of_output_dimensions = 48;
  p.encoder_dim = 64;
  p.encoder_depth = 2;
  p.encoder_heads = 4;
  p.regressor_depth = 1;
  p.decoder_embed_dimension = 64;
  p.decoder_number_of_heads = 4;
  p.teacher_depth = 1;
  p.number_of_mask_patches = 32;
  p.batch_size = 8;
  p.drop_path = 0.0;
  p.teacher_model = "random";
  return p;
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

PretrainModel::PretrainModel(const PretrainConfig& cfg, std::uint64_t seed)
    : cfg_(cfg) {
  cfg_.validate();
  Rng init(derive_seed(seed, "pretrain_init"));
  student_ = std::make_unique<nn::VitEncoder>(cfg_.student_vit(), store_,
                                              "student", init);

  mask_token_ = store_.add("regressor.mask_token",
                           nn::random_normal(1, cfg_.encoder_dim, 0.02, init));
  for (int i = 0; i < cfg_.regressor_depth; ++i)
    regressor_blocks_.push_back(nn::make_block(
        store_, "regressor.block" + std::to_string(i), cfg_.encoder_dim, 4.0,
        cfg_.decoder_layer_scale_init_value, /*cross=*/true, init));
  regressor_ln_.gamma = store_.add("regressor.final_ln.gamma",
                                   Mat(1, cfg_.encoder_dim, 1.0));
  regressor_ln_.beta = store_.add("regressor.final_ln.beta", Mat(1, cfg_.encoder_dim));

  bridge_w_ = store_.add(
      "bridge.w", nn::random_normal(cfg_.encoder_dim,
                                    cfg_.number_of_output_dimensions, 0.02, init));
  bridge_b_ = store_.add("bridge.b", Mat(1, cfg_.number_of_output_dimensions));

  Rng teacher_init(derive_seed(seed, "teacher_init"));
  teacher_ = std::make_unique<nn::VitEncoder>(cfg_.teacher_vit(), teacher_store_,
                                              "teacher", teacher_init);
  if (cfg_.teacher_model == "clip") {
    auto [state, side] = load_checkpoint(cfg_.teacher_checkpoint);
    teacher_store_.load_state_dict(state);
  }
  teacher_store_.freeze();
}

LatentGrid PretrainModel::teacher_targets(const ImageGrid& image) const {
  ImageGrid resized =
      cfg_.second_interpolation == "bilinear"
          ? imageops::resize_bilinear(image, cfg_.second_input_size,
                                      cfg_.second_input_size)
          : imageops::resize_bicubic(image, cfg_.second_input_size,
                                     cfg_.second_input_size);
  const Mat patches =
      imageops::patchify(resized, cfg_.grid_spec().teacher_patch_side());
  nn::BlockRuntime rt;
  rt.heads = teacher_->config().heads;
  const Var out = teacher_->forward(patches, {}, rt);
  LatentGrid g;
  g.embeddings = out->value;
  g.owner = LatentGrid::Owner::kTeacher;
  return g;
}

Var PretrainModel::encode_visible_var(const Mat& patches, const PatchMask& mask,
                                      const nn::BlockRuntime& rt) const {
  const auto visible = mask.visible_indices();
  if (visible.empty())
    throw ValidationError("encode_visible: mask leaves no visible tokens");
  return student_->forward(patches, visible, rt);
}

LatentGrid PretrainModel::encode_visible(const ImageGrid& image,
                                         const PatchMask& mask) const {
  const Mat patches = imageops::patchify(image, cfg_.patch_size);
  nn::BlockRuntime rt;
  rt.heads = cfg_.encoder_heads;
  LatentGrid g;
  g.embeddings = encode_visible_var(patches, mask, rt)->value;
  g.owner = LatentGrid::Owner::kStudent;
  return g;
}

Var PretrainModel::regress_masked_var(const Var& visible, const PatchMask& mask,
                                      const nn::BlockRuntime& rt) const {
  const auto masked = mask.masked_indices();
  if (masked.empty()) return nn::constant(Mat(0, cfg_.encoder_dim));

  // one query per masked position: learned token + that position's encoding
  std::vector<Var> rows(masked.size(), mask_token_);
  Var queries = nn::add(nn::concat_rows(rows),
                        nn::gather_rows(student_->pos_embed(), masked));

  nn::BlockRuntime reg_rt = rt;
  reg_rt.heads = cfg_.decoder_number_of_heads;
  for (const auto& blk : regressor_blocks_) {
    // keys/values: visible tokens plus the previous layer's query states
    const Var kv = nn::concat_rows({visible, queries});
    queries = nn::transformer_block(queries, &kv, blk, reg_rt);
  }
  return nn::layer_norm(queries, regressor_ln_);
}

LatentGrid PretrainModel::regress_masked(const LatentGrid& visible,
                                         const PatchMask& mask) const {
  nn::BlockRuntime rt;
  rt.heads = cfg_.decoder_number_of_heads;
  LatentGrid g;
  g.embeddings =
      regress_masked_var(nn::constant(visible.embeddings), mask, rt)->value;
  g.owner = LatentGrid::Owner::kRegressor;
  return g;
}

Var PretrainModel::project_var(const Var& x) const {
  return nn::linear(x, bridge_w_, bridge_b_);
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

PretrainTrainer::PretrainTrainer(PretrainModel& model, std::uint64_t seed,
                                 long total_steps, long warmup_steps)
    : model_(model),
      opt_(model.params().params(), model.config().learning_rate,
           model.config().weight_decay),
      aug_rng_(derive_seed(seed, "pretrain_aug")),
      mask_rng_(derive_seed(seed, "pretrain_mask")),
      path_rng_(derive_seed(seed, "pretrain_droppath")),
      total_steps_(total_steps),
      warmup_steps_(warmup_steps) {}

PretrainBatchLoss PretrainTrainer::step(const std::vector<ImageGrid>& batch) {
  if (batch.empty()) throw ValidationError("pretrain_step: empty batch");
  const PretrainConfig& cfg = model_.config();
  const double lr = nn::warmup_cosine_lr(cfg.learning_rate, warmup_steps_,
                                     total_steps_, step_);
  opt_.set_lr(lr);

  nn::BlockRuntime rt;
  rt.heads = cfg.encoder_heads;
  rt.drop_path = cfg.drop_path;
  rt.training = true;
  rt.rng = &path_rng_;

  std::vector<Var> masked_terms, visible_terms;
  for (const ImageGrid& raw : batch) {
    ImageGrid img = imageops::random_resized_crop(
        raw, cfg.first_input_size, aug_rng_, cfg.crop_min_size, cfg.crop_max_size);
    if (aug_rng_.bernoulli(0.5)) img = imageops::hflip(img);
    if (cfg.color_jitter > 0.0)
      img = imageops::color_jitter(img, aug_rng_, cfg.color_jitter);

    const PatchMask mask = generate_block_mask(
        cfg.grid_spec(), cfg.number_of_mask_patches, mask_rng_,
        static_cast<int>(cfg.mask_min_block));

    const LatentGrid targets = model_.teacher_targets(img);
    const auto midx = mask.masked_indices();
    const auto vidx = mask.visible_indices();
    Mat t_masked(static_cast<int>(midx.size()), targets.embeddings.cols);
    for (std::size_t i = 0; i < midx.size(); ++i)
      std::copy_n(&targets.embeddings.data[static_cast<std::size_t>(midx[i]) *
                                           targets.embeddings.cols],
                  targets.embeddings.cols,
                  &t_masked.data[i * targets.embeddings.cols]);
    Mat t_visible(static_cast<int>(vidx.size()), targets.embeddings.cols);
    for (std::size_t i = 0; i < vidx.size(); ++i)
      std::copy_n(&targets.embeddings.data[static_cast<std::size_t>(vidx[i]) *
                                           targets.embeddings.cols],
                  targets.embeddings.cols,
                  &t_visible.data[i * targets.embeddings.cols]);

    const Mat patches = imageops::patchify(img, cfg.patch_size);
    const Var vis_tokens = model_.encode_visible_var(patches, mask, rt);
    const Var pred = model_.regress_masked_var(vis_tokens, mask, rt);

    masked_terms.push_back(
        alignment_loss_var(model_.project_var(pred), t_masked));
    visible_terms.push_back(
        alignment_loss_var(model_.project_var(vis_tokens), t_visible));
  }

  const double inv_b = 1.0 / static_cast<double>(batch.size());
  const Var masked_loss = nn::scale(nn::add_n(masked_terms), inv_b);
  const Var visible_loss = nn::scale(nn::add_n(visible_terms), inv_b);
  const Var total = nn::add(nn::scale(masked_loss, cfg.latent_alignment_loss_weight),
                            nn::scale(visible_loss, cfg.align_loss_weight));

  PretrainBatchLoss out;
  out.masked_align = masked_loss->value(0, 0);
  out.visible_align = visible_loss->value(0, 0);
  out.total = total->value(0, 0);
  out.lr = lr;
  if (!std::isfinite(out.total))
    throw std::runtime_error(
        "pretrain_step: non-finite loss at step " + std::to_string(step_) +
        " (masked=" + format_double(out.masked_align) +
        ", visible=" + format_double(out.visible_align) + ")");

  model_.params().zero_grad();
  nn::backward(total);
  model_.params().clip_grad_norm(cfg.gradient_clipping_max_norm);
  opt_.step();
  ++step_;
  return out;
}

void train_from_manifest(const PretrainConfig& cfg, const Manifest& manifest,
                         const std::string& manifest_dir,
                         const std::string& out_dir, std::uint64_t seed,
                         int epochs, int steps_per_epoch) {
  std::vector<ImageGrid> images;
  for (const auto& row : manifest.rows)
    images.push_back(load_image(resolve_data_path(row.image_ref, manifest_dir)));
  if (images.empty()) throw ValidationError("pretrain: empty manifest");

  PretrainModel model(cfg, seed);
  const long total_steps = static_cast<long>(epochs) * steps_per_epoch;
  const long warmup_steps =
      cfg.total_epochs > 0
          ? std::min<long>(total_steps,
                           static_cast<long>(static_cast<double>(cfg.warmup_epochs) /
                                             cfg.total_epochs * total_steps))
          : 0;
  PretrainTrainer trainer(model, seed, total_steps, warmup_steps);

  ensure_dir(out_dir);
  std::ofstream csv(out_dir + "/pretrain_loss.csv");
  csv << "step,masked_align,visible_align,total,lr\n";

  Rng batch_rng(derive_seed(seed, "pretrain_batches"));
  const int bsz = std::min<int>(cfg.batch_size, static_cast<int>(images.size()));
  for (int e = 0; e < epochs; ++e) {
    for (int s = 0; s < steps_per_epoch; ++s) {
      std::vector<ImageGrid> batch;
      for (int b = 0; b < bsz; ++b)
        batch.push_back(images[batch_rng.index(images.size())]);
      const auto loss = trainer.step(batch);
      csv << trainer.step_index() - 1 << ',' << format_double(loss.masked_align)
          << ',' << format_double(loss.visible_align) << ','
          << format_double(loss.total) << ',' << format_double(loss.lr) << '\n';
    }
  }
  csv.close();

  Sidecar side;
  side.epoch = epochs;
  side.arch["module"] = "pretrain";
  side.arch["encoder_dim"] = std::to_string(cfg.encoder_dim);
  side.arch["encoder_depth"] = std::to_string(cfg.encoder_depth);
  side.arch["image_side"] = std::to_string(cfg.first_input_size);
  side.arch["patch_side"] = std::to_string(cfg.patch_size);
  save_checkpoint(model.state_dict(), side, out_dir + "/checkpoint");
}

}  // namespace dermfoundry::pretrain
