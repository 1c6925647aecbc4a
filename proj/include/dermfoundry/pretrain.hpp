#pragma once

#include <optional>
#include <string>
#include <vector>

#include "dermfoundry/core.hpp"
#include "dermfoundry/image_ops.hpp"
#include "dermfoundry/nn.hpp"
#include "dermfoundry/rng.hpp"
#include "dermfoundry/tensor.hpp"

namespace dermfoundry::pretrain {

// ---------------------------------------------------------------------------
// Patch grid geometry. Student and teacher run at different input sizes but
// must agree on the patch grid so per-patch targets line up.
// ---------------------------------------------------------------------------
struct PatchGridSpec {
  int image_side = 224;
  int patch_side = 16;
  int teacher_image_side = 196;

  int grid_side() const;
  int patch_count() const { return grid_side() * grid_side(); }
  int teacher_patch_side() const;  // teacher_image_side / grid_side, validated
};

struct PatchMask {
  int grid_side = 0;
  std::vector<std::uint8_t> masked;  // grid_side^2 entries

  int count_masked() const;
  std::vector<int> masked_indices() const;
  std::vector<int> visible_indices() const;
};

// Block masking: rectangles with aspect ratio in [0.3, 1/0.3] and area >=
// min_block are stamped until the requested count is reached; the last block
// is trimmed so the count is hit exactly.
PatchMask generate_block_mask(const PatchGridSpec& spec, int target_count,
                              Rng& rng, int min_block = 4);

struct LatentGrid {
  enum class Owner { kStudent, kRegressor, kTeacher };
  nn::Mat embeddings;  // one row per patch in the subset it describes
  Owner owner = Owner::kStudent;
};

// Mean over rows of the squared error between l2-normalized rows. Requires
// equal shapes; empty grids contribute 0.
double alignment_loss(const LatentGrid& predicted, const LatentGrid& target);
nn::Var alignment_loss_var(const nn::Var& predicted, const nn::Mat& target);

struct PretrainBatchLoss {
  double masked_align = 0.0;
  double visible_align = 0.0;
  double total = 0.0;
  double lr = 0.0;
};

// ---------------------------------------------------------------------------
// Configuration. Keys mirror the pretraining hyperparameter table
// (snake_case); the trailing group are artifact-scale extras.
// ---------------------------------------------------------------------------
struct PretrainConfig {
  std::string teacher_model = "random";  // "random" or "clip" (needs checkpoint)
  int first_input_size = 224;
  int second_input_size = 196;
  std::string second_interpolation = "bicubic";
  int number_of_output_dimensions = 768;
  double crop_min_size = 0.4;
  double crop_max_size = 1.0;
  int patch_size = 16;
  int vocabulary_size = 8000;  // accepted for table parity; no role here
  int batch_size = 480;
  double learning_rate = 1.5e-3;
  int warmup_epochs = 20;
  int total_epochs = 500;
  double gradient_clipping_max_norm = 3.0;
  double layer_scale_init_value = 1e-5;
  double color_jitter = 0.4;
  double drop_path = 0.2;
  std::string mask_generator = "block";
  int number_of_mask_patches = 118;
  double decoder_layer_scale_init_value = 1e-5;
  int regressor_depth = 4;
  int decoder_depth = 0;  // encoder-regressor architecture has no decoder
  int decoder_embed_dimension = 1024;
  int decoder_number_of_heads = 16;
  double align_loss_weight = 0.0;             // visible term
  double latent_alignment_loss_weight = 1.0;  // masked term

  // artifact extras
  int encoder_depth = 24;
  int encoder_dim = 1024;
  int encoder_heads = 16;
  int teacher_depth = 2;
  double weight_decay = 0.05;
  double mask_min_block = 4;
  std::string teacher_checkpoint;

  static PretrainConfig from_config(const Config& c);
  static std::vector<std::string> allowed_keys();
  PatchGridSpec grid_spec() const;
  nn::VitConfig student_vit() const;
  nn::VitConfig teacher_vit() const;
  void validate() const;
};

// Desk-scale fixture configuration used throughout the test suite: 2-block
// encoder, 1-block regressor, dim 64, 8x8 grid.
PretrainConfig fixture_config();

// ---------------------------------------------------------------------------
// Model: student encoder over visible patches, cross-attention regressor
// with learnable mask queries, frozen teacher, student->teacher projection.
// ---------------------------------------------------------------------------
class PretrainModel {
 public:
  PretrainModel(const PretrainConfig& cfg, std::uint64_t seed);

  const PretrainConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return store_; }
  const nn::ParamStore& teacher_params() const { return teacher_store_; }

  // Frozen per-patch targets for the (resized) unmasked image. Deterministic;
  // gradients never flow into the teacher.
  LatentGrid teacher_targets(const ImageGrid& image) const;

  // Student tokens for visible patches only; masked pixels cannot influence
  // the output. Throws when the mask leaves no visible patch.
  LatentGrid encode_visible(const ImageGrid& image, const PatchMask& mask) const;
  nn::Var encode_visible_var(const nn::Mat& patches, const PatchMask& mask,
                             const nn::BlockRuntime& rt) const;

  // Predicted latents for masked positions from visible tokens; empty mask
  // yields an empty grid.
  LatentGrid regress_masked(const LatentGrid& visible, const PatchMask& mask) const;
  nn::Var regress_masked_var(const nn::Var& visible, const PatchMask& mask,
                             const nn::BlockRuntime& rt) const;

  // Projection into teacher dimension applied before both alignment losses.
  nn::Var project_var(const nn::Var& x) const;

  StateDict state_dict() const { return store_.state_dict(); }
  void load_state_dict(const StateDict& sd) { store_.load_state_dict(sd); }
  StateDict teacher_state_dict() const { return teacher_store_.state_dict(); }

  const nn::VitEncoder& student() const { return *student_; }

 private:
  PretrainConfig cfg_;
  nn::ParamStore store_;          // student + regressor + bridge
  nn::ParamStore teacher_store_;  // frozen
  std::unique_ptr<nn::VitEncoder> student_;
  std::unique_ptr<nn::VitEncoder> teacher_;
  nn::Var mask_token_;
  std::vector<nn::BlockParams> regressor_blocks_;
  nn::LayerNormParams regressor_ln_;
  nn::Var bridge_w_, bridge_b_;
};

// ---------------------------------------------------------------------------
// Trainer: augmentation, masking, losses, one AdamW update per step.
// ---------------------------------------------------------------------------
class PretrainTrainer {
 public:
  PretrainTrainer(PretrainModel& model, std::uint64_t seed, long total_steps,
                  long warmup_steps);

  // Applies one optimizer update and returns both loss terms. Throws
  // std::runtime_error with a diagnostic snapshot when the loss goes
  // non-finite.
  PretrainBatchLoss step(const std::vector<ImageGrid>& batch);

  long step_index() const { return step_; }

 private:
  PretrainModel& model_;
  nn::AdamW opt_;
  Rng aug_rng_, mask_rng_, path_rng_;
  long total_steps_, warmup_steps_;
  long step_ = 0;
};

// Full training loop over a manifest; emits per-step loss CSV
// (step,masked_align,visible_align,total,lr) and saves the last-epoch
// checkpoint into out_dir.
void train_from_manifest(const PretrainConfig& cfg, const Manifest& manifest,
                         const std::string& manifest_dir,
                         const std::string& out_dir, std::uint64_t seed,
                         int epochs, int steps_per_epoch);

}  // namespace dermfoundry::pretrain
