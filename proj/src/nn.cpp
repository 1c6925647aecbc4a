#include "dermfoundry/nn.hpp"

#include <cmath>

namespace dermfoundry::nn {

Var linear(const Var& x, const Var& w, const Var& b) {
  return add_rowvec(matmul(x, w), b);
}

Var layer_norm(const Var& x, const LayerNormParams& p) {
  return add_rowvec(mul_rowvec(layer_norm_rows(x), p.gamma), p.beta);
}

Var mlp_gelu(const Var& x, const MlpParams& p) {
  return linear(gelu(linear(x, p.w1, p.b1)), p.w2, p.b2);
}

Var multi_head_attention(const Var& q_tokens, const Var& kv_tokens,
                         const AttentionParams& p, int heads) {
  const int dim = p.wq->value.cols;
  if (dim % heads != 0)
    throw ShapeError("attention: dim not divisible by head count");
  const int dh = dim / heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  const Var q = linear(q_tokens, p.wq, p.bq);
  const Var k = linear(kv_tokens, p.wk, p.bk);
  const Var v = linear(kv_tokens, p.wv, p.bv);

  std::vector<Var> head_outs;
  head_outs.reserve(heads);
  for (int h = 0; h < heads; ++h) {
    const Var qh = slice_cols(q, h * dh, dh);
    const Var kh = slice_cols(k, h * dh, dh);
    const Var vh = slice_cols(v, h * dh, dh);
    const Var attn = row_softmax(scale(matmul_nt(qh, kh), att_scale));
    head_outs.push_back(matmul(attn, vh));
  }
  return linear(concat_cols(head_outs), p.wo, p.bo);
}

namespace {

// Stochastic depth on a residual branch: per-forward drop with rescaling.
Var drop_path(const Var& branch, const BlockRuntime& rt) {
  if (!rt.training || rt.drop_path <= 0.0 || rt.rng == nullptr) return branch;
  if (rt.rng->uniform() < rt.drop_path) return scale(branch, 0.0);
  return scale(branch, 1.0 / (1.0 - rt.drop_path));
}

}  // namespace

Var transformer_block(const Var& x, const Var* kv, const BlockParams& p,
                      const BlockRuntime& rt) {
  const Var qn = layer_norm(x, p.ln1);
  const Var kvn = kv ? layer_norm(*kv, p.ln_kv) : qn;
  Var attn_out = multi_head_attention(qn, kvn, p.attn, rt.heads);
  attn_out = drop_path(mul_rowvec(attn_out, p.ls1), rt);
  Var h = add(x, attn_out);

  Var mlp_out = mlp_gelu(layer_norm(h, p.ln2), p.mlp);
  mlp_out = drop_path(mul_rowvec(mlp_out, p.ls2), rt);
  return add(h, mlp_out);
}

int VitConfig::grid_side() const {
  if (patch_side <= 0 || image_side % patch_side != 0)
    throw ConfigError("image_side must be divisible by patch_side");
  return image_side / patch_side;
}

namespace {

AttentionParams make_attention(ParamStore& store, const std::string& prefix,
                               int dim, Rng& rng) {
  const double std = 0.02;
  AttentionParams p;
  p.wq = store.add(prefix + ".wq", random_normal(dim, dim, std, rng));
  p.bq = store.add(prefix + ".bq", Mat(1, dim));
  p.wk = store.add(prefix + ".wk", random_normal(dim, dim, std, rng));
  p.bk = store.add(prefix + ".bk", Mat(1, dim));
  p.wv = store.add(prefix + ".wv", random_normal(dim, dim, std, rng));
  p.bv = store.add(prefix + ".bv", Mat(1, dim));
  p.wo = store.add(prefix + ".wo", random_normal(dim, dim, std, rng));
  p.bo = store.add(prefix + ".bo", Mat(1, dim));
  return p;
}

LayerNormParams make_layer_norm(ParamStore& store, const std::string& prefix,
                                int dim) {
  LayerNormParams p;
  p.gamma = store.add(prefix + ".gamma", Mat(1, dim, 1.0));
  p.beta = store.add(prefix + ".beta", Mat(1, dim));
  return p;
}

}  // namespace

BlockParams make_block(ParamStore& store, const std::string& prefix, int dim,
                       double mlp_ratio, double layer_scale_init, bool cross,
                       Rng& rng) {
  BlockParams p;
  p.ln1 = make_layer_norm(store, prefix + ".ln1", dim);
  p.ln2 = make_layer_norm(store, prefix + ".ln2", dim);
  if (cross) p.ln_kv = make_layer_norm(store, prefix + ".ln_kv", dim);
  p.attn = make_attention(store, prefix + ".attn", dim, rng);
  const int hidden = static_cast<int>(dim * mlp_ratio);
  p.mlp.w1 = store.add(prefix + ".mlp.w1", random_normal(dim, hidden, 0.02, rng));
  p.mlp.b1 = store.add(prefix + ".mlp.b1", Mat(1, hidden));
  p.mlp.w2 = store.add(prefix + ".mlp.w2", random_normal(hidden, dim, 0.02, rng));
  p.mlp.b2 = store.add(prefix + ".mlp.b2", Mat(1, dim));
  p.ls1 = store.add(prefix + ".ls1", Mat(1, dim, layer_scale_init));
  p.ls2 = store.add(prefix + ".ls2", Mat(1, dim, layer_scale_init));
  return p;
}

VitEncoder::VitEncoder(const VitConfig& cfg, ParamStore& store,
                       const std::string& prefix, Rng& rng)
    : cfg_(cfg) {
  cfg_.grid_side();  // validate divisibility
  patch_w_ = store.add(prefix + ".patch_embed.w",
                       random_normal(cfg.patch_dim(), cfg.dim, 0.02, rng));
  patch_b_ = store.add(prefix + ".patch_embed.b", Mat(1, cfg.dim));
  pos_embed_ = store.add(prefix + ".pos_embed",
                         random_normal(cfg_.patch_count(), cfg.dim, 0.02, rng));
  for (int i = 0; i < cfg.depth; ++i)
    blocks_.push_back(make_block(store, prefix + ".block" + std::to_string(i),
                                 cfg.dim, cfg.mlp_ratio, cfg.layer_scale_init,
                                 /*cross=*/false, rng));
  final_ln_ = make_layer_norm(store, prefix + ".final_ln", cfg.dim);
}

Var VitEncoder::forward(const Mat& patches, const std::vector<int>& idx,
                        const BlockRuntime& rt, std::vector<Var>* taps) const {
  if (patches.cols != cfg_.patch_dim())
    throw ShapeError("encoder input patch_dim mismatch: expected " +
                     std::to_string(cfg_.patch_dim()) + ", got " +
                     std::to_string(patches.cols));
  if (patches.rows != cfg_.patch_count())
    throw ShapeError("encoder input patch count mismatch");

  std::vector<int> sel = idx;
  if (sel.empty())
    for (int i = 0; i < cfg_.patch_count(); ++i) sel.push_back(i);

  // Only selected patch rows enter the graph; masked pixels stay outside.
  Mat sub(static_cast<int>(sel.size()), patches.cols);
  for (std::size_t i = 0; i < sel.size(); ++i) {
    if (sel[i] < 0 || sel[i] >= patches.rows)
      throw ShapeError("patch index out of range");
    std::copy_n(&patches.data[static_cast<std::size_t>(sel[i]) * patches.cols],
                patches.cols, &sub.data[i * patches.cols]);
  }

  Var x = linear(constant(std::move(sub)), patch_w_, patch_b_);
  x = add(x, gather_rows(pos_embed_, sel));

  BlockRuntime block_rt = rt;
  if (taps) taps->push_back(x);  // depth 0: patch embedding level
  for (const auto& blk : blocks_) {
    x = transformer_block(x, nullptr, blk, block_rt);
    if (taps) taps->push_back(x);
  }
  return layer_norm(x, final_ln_);
}

std::vector<double> layer_lr_multipliers(double decay, int n_layers) {
  std::vector<double> mult(n_layers);
  for (int i = 0; i < n_layers; ++i)
    mult[i] = std::pow(decay, n_layers - 1 - i);
  return mult;
}

}  // namespace dermfoundry::nn
