#pragma once

#include <string>
#include <vector>

#include "dermfoundry/tensor.hpp"

namespace dermfoundry::nn {

// Multi-head attention over row-token matrices. Query tokens attend to the
// kv tokens; self-attention passes the same Var twice.
struct AttentionParams {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};
Var multi_head_attention(const Var& q_tokens, const Var& kv_tokens,
                         const AttentionParams& p, int heads);

struct LayerNormParams {
  Var gamma, beta;
};
Var layer_norm(const Var& x, const LayerNormParams& p);

struct MlpParams {
  Var w1, b1, w2, b2;
};
Var mlp_gelu(const Var& x, const MlpParams& p);

Var linear(const Var& x, const Var& w, const Var& b);

// Pre-norm transformer block with layer scale and stochastic depth. When
// `kv` is null the block self-attends; otherwise queries are `x` and keys /
// values come from `kv` (cross-attention).
struct BlockParams {
  LayerNormParams ln1, ln2;
  LayerNormParams ln_kv;  // used by cross-attention blocks only
  AttentionParams attn;
  MlpParams mlp;
  Var ls1, ls2;  // layer scale row vectors
};

struct BlockRuntime {
  int heads = 8;
  double drop_path = 0.0;
  bool training = false;
  Rng* rng = nullptr;
};

Var transformer_block(const Var& x, const Var* kv, const BlockParams& p,
                      const BlockRuntime& rt);

BlockParams make_block(ParamStore& store, const std::string& prefix, int dim,
                       double mlp_ratio, double layer_scale_init, bool cross,
                       Rng& rng);

// ---------------------------------------------------------------------------
// ViT-style patch encoder. Processes an arbitrary subset of patch tokens so
// masked-patch pixels can never influence the output.
// ---------------------------------------------------------------------------
struct VitConfig {
  int image_side = 224;
  int patch_side = 16;
  int channels = 3;
  int dim = 1024;
  int depth = 24;
  int heads = 16;
  double mlp_ratio = 4.0;
  double layer_scale_init = 1e-5;
  double drop_path = 0.0;

  int grid_side() const;  // image_side / patch_side, validated
  int patch_count() const { return grid_side() * grid_side(); }
  int patch_dim() const { return channels * patch_side * patch_side; }
};

class VitEncoder {
 public:
  // Registers parameters under `prefix` in `store`; `rng` drives init.
  VitEncoder(const VitConfig& cfg, ParamStore& store, const std::string& prefix,
             Rng& rng);

  // `patches` is patch_count x patch_dim (see image_ops::patchify). `idx`
  // selects which patch tokens enter; empty means all. Optional `taps`
  // receives the embedding level followed by each block's output
  // (depth + 1 entries) for multi-scale heads.
  Var forward(const Mat& patches, const std::vector<int>& idx,
              const BlockRuntime& rt, std::vector<Var>* taps = nullptr) const;

  const VitConfig& config() const { return cfg_; }
  const Var& pos_embed() const { return pos_embed_; }

 private:
  VitConfig cfg_;
  Var patch_w_, patch_b_, pos_embed_;
  std::vector<BlockParams> blocks_;
  LayerNormParams final_ln_;
};

// Per-layer learning-rate multipliers for layer decay: blocks shallow->deep
// get decay^(n-1) ... decay^0.
std::vector<double> layer_lr_multipliers(double decay, int n_layers);

}  // namespace dermfoundry::nn
