#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "dermfoundry/pretrain.hpp"
#include "testutil.hpp"

using namespace dermfoundry;
using namespace dermfoundry::pretrain;
using dermfoundry::nn::Mat;
using dermfoundry::nn::Var;

namespace {

PatchGridSpec spec_14x14() {
  PatchGridSpec s;
  s.image_side = 224;
  s.patch_side = 16;
  s.teacher_image_side = 196;
  return s;
}

// fixture with a 14x14 grid but desk-scale widths, for the paper-count tests
PretrainConfig fixture_14_config() {
  PretrainConfig p = fixture_config();
  p.first_input_size = 224;
  p.patch_size = 16;
  p.second_input_size = 196;
  return p;
}

// 4-connected component sizes of a mask (independent oracle for the
// block-structure check)
int largest_component(const PatchMask& m) {
  const int g = m.grid_side;
  std::vector<int> seen(m.masked.size(), 0);
  int best = 0;
  for (int start = 0; start < g * g; ++start) {
    if (!m.masked[start] || seen[start]) continue;
    int size = 0;
    std::vector<int> stack = {start};
    seen[start] = 1;
    while (!stack.empty()) {
      const int cur = stack.back();
      stack.pop_back();
      ++size;
      const int y = cur / g, x = cur % g;
      const int nbrs[4][2] = {{y - 1, x}, {y + 1, x}, {y, x - 1}, {y, x + 1}};
      for (const auto& nb : nbrs) {
        if (nb[0] < 0 || nb[0] >= g || nb[1] < 0 || nb[1] >= g) continue;
        const int idx = nb[0] * g + nb[1];
        if (m.masked[idx] && !seen[idx]) {
          seen[idx] = 1;
          stack.push_back(idx);
        }
      }
    }
    best = std::max(best, size);
  }
  return best;
}

}  // namespace

TEST_CASE("block mask hits the requested count exactly (118 on 14x14)") {
  Rng rng(1);
  const auto m = generate_block_mask(spec_14x14(), 118, rng);
  CHECK(m.count_masked() == 118);
  CHECK(m.masked_indices().size() == 118);
  CHECK(m.visible_indices().size() == 78);
}

TEST_CASE("block mask: target 0 leaves everything visible") {
  Rng rng(2);
  const auto m = generate_block_mask(spec_14x14(), 0, rng);
  CHECK(m.count_masked() == 0);
  CHECK(m.visible_indices().size() == 196);
}

TEST_CASE("block mask: exact count property over all valid counts") {
  PatchGridSpec small;
  small.image_side = 32;
  small.patch_side = 8;  // 4x4 grid
  small.teacher_image_side = 28;
  Rng rng(3);
  for (int target = 0; target <= 16; ++target)
    for (int rep = 0; rep < 25; ++rep)
      CHECK(generate_block_mask(small, target, rng).count_masked() == target);

  Rng rng2(4);
  for (int rep = 0; rep < 200; ++rep) {
    const int target = static_cast<int>(rng2.index(197));
    CHECK(generate_block_mask(spec_14x14(), target, rng2).count_masked() == target);
  }
  CHECK_THROWS_AS(generate_block_mask(spec_14x14(), 197, rng2), ValidationError);
  CHECK_THROWS_AS(generate_block_mask(spec_14x14(), -1, rng2), ValidationError);
}

TEST_CASE("block mask Monte-Carlo: block structure and marginal coverage") {
  Rng rng(5);
  const int draws = 1000;
  std::vector<int> position_hits(196, 0);
  for (int d = 0; d < draws; ++d) {
    const auto m = generate_block_mask(spec_14x14(), 98, rng);
    REQUIRE(m.count_masked() == 98);
    CHECK(largest_component(m) >= 4);
    for (int i = 0; i < 196; ++i) position_hits[i] += m.masked[i];
  }
  for (int i = 0; i < 196; ++i) {
    const double freq = static_cast<double>(position_hits[i]) / draws;
    CHECK(freq >= 0.3);
    CHECK(freq <= 0.7);
  }
}

TEST_CASE("teacher targets are frozen-deterministic and content-sensitive") {
  const PretrainConfig cfg = fixture_14_config();
  PretrainModel model(cfg, 11);
  Rng rng(6);
  const ImageGrid img = testutil::textured_image(224, rng);
  const auto a = model.teacher_targets(img);
  const auto b = model.teacher_targets(img);
  CHECK(a.embeddings.data == b.embeddings.data);  // bitwise
  CHECK(a.embeddings.rows == 196);
  CHECK(a.embeddings.cols == cfg.number_of_output_dimensions);

  const ImageGrid zeros(3, 224, 224, 0.0);
  const ImageGrid ones(3, 224, 224, 1.0);
  const auto tz = model.teacher_targets(zeros);
  const auto to = model.teacher_targets(ones);
  double diff = 0.0;
  for (long i = 0; i < tz.embeddings.size(); ++i)
    diff += std::fabs(tz.embeddings.data[i] - to.embeddings.data[i]);
  CHECK(diff > 1e-3);  // non-constant map
}

TEST_CASE("teacher target partition matches the 78/118 split") {
  const PretrainConfig cfg = fixture_14_config();
  PretrainModel model(cfg, 12);
  Rng rng(7);
  const ImageGrid img = testutil::textured_image(224, rng);
  const auto targets = model.teacher_targets(img);
  const auto mask = generate_block_mask(spec_14x14(), 118, rng);
  CHECK(mask.masked_indices().size() == 118);
  CHECK(mask.visible_indices().size() == 78);
  CHECK(targets.embeddings.rows ==
        static_cast<int>(mask.masked_indices().size() +
                         mask.visible_indices().size()));
}

TEST_CASE("teacher configured for clip weights without a checkpoint errors") {
  PretrainConfig cfg = fixture_config();
  cfg.teacher_model = "clip";
  cfg.teacher_checkpoint = "";
  try {
    cfg.validate();
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("random") != std::string::npos);
  }
}

TEST_CASE("encode_visible: row count and the visibility firewall") {
  const PretrainConfig cfg = fixture_14_config();
  PretrainModel model(cfg, 13);
  Rng rng(8);
  ImageGrid img = testutil::textured_image(224, rng);
  const auto mask = generate_block_mask(spec_14x14(), 118, rng);

  const auto tokens = model.encode_visible(img, mask);
  CHECK(tokens.embeddings.rows == 78);
  CHECK(tokens.embeddings.cols == cfg.encoder_dim);

  // substitute every masked patch's pixels with noise
  ImageGrid tampered = img;
  Rng noise(9);
  const int ps = cfg.patch_size;
  const int grid = cfg.first_input_size / ps;
  for (int idx : mask.masked_indices()) {
    const int py = idx / grid, px = idx % grid;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < ps; ++y)
        for (int x = 0; x < ps; ++x)
          tampered.at(c, py * ps + y, px * ps + x) = noise.uniform();
  }
  const auto tokens2 = model.encode_visible(tampered, mask);
  CHECK(tokens.embeddings.data == tokens2.embeddings.data);  // elementwise bitwise

  PatchMask all_masked = mask;
  std::fill(all_masked.masked.begin(), all_masked.masked.end(), 1);
  CHECK_THROWS_AS(model.encode_visible(img, all_masked), ValidationError);
}

TEST_CASE("regress_masked: row counts, empty mask, kv permutation invariance") {
  const PretrainConfig cfg = fixture_14_config();
  PretrainModel model(cfg, 14);
  Rng rng(10);
  const ImageGrid img = testutil::textured_image(224, rng);
  const auto mask = generate_block_mask(spec_14x14(), 118, rng);
  const auto visible = model.encode_visible(img, mask);
  const auto pred = model.regress_masked(visible, mask);
  CHECK(pred.embeddings.rows == 118);
  CHECK(pred.embeddings.cols == cfg.encoder_dim);

  PatchMask empty = mask;
  std::fill(empty.masked.begin(), empty.masked.end(), 0);
  const auto none = model.regress_masked(visible, empty);
  CHECK(none.embeddings.rows == 0);
  LatentGrid empty_target;
  empty_target.embeddings = nn::Mat(0, cfg.number_of_output_dimensions);
  LatentGrid projected;
  projected.embeddings = nn::Mat(0, cfg.number_of_output_dimensions);
  CHECK(alignment_loss(projected, empty_target) == 0.0);

  // permuting visible-token rows (position encodings ride along) leaves the
  // cross-attention output unchanged
  LatentGrid shuffled = visible;
  std::vector<int> perm(visible.embeddings.rows);
  std::iota(perm.begin(), perm.end(), 0);
  Rng prng(11);
  prng.shuffle(perm);
  for (int r = 0; r < visible.embeddings.rows; ++r)
    for (int c = 0; c < visible.embeddings.cols; ++c)
      shuffled.embeddings(r, c) = visible.embeddings(perm[r], c);
  const auto pred2 = model.regress_masked(shuffled, mask);
  double max_diff = 0.0;
  for (long i = 0; i < pred.embeddings.size(); ++i)
    max_diff = std::max(max_diff, std::fabs(pred.embeddings.data[i] -
                                            pred2.embeddings.data[i]));
  CHECK(max_diff < 1e-9);
}

TEST_CASE("alignment_loss: identity zero, orthogonal rows 2.0, scale invariance") {
  LatentGrid a, b;
  a.embeddings = Mat(3, 4);
  b.embeddings = Mat(3, 4);
  for (int r = 0; r < 3; ++r) {
    a.embeddings(r, r) = 1.0;
    b.embeddings(r, r) = 1.0;
  }
  CHECK(alignment_loss(a, b) == doctest::Approx(0.0));

  // orthogonal unit rows: per-row squared distance is exactly 2
  LatentGrid c = b;
  for (int r = 0; r < 3; ++r) {
    c.embeddings(r, r) = 0.0;
    c.embeddings(r, 3) = 1.0;
  }
  CHECK(alignment_loss(a, c) == doctest::Approx(2.0).epsilon(1e-9));

  // doubling an unnormalized prediction row changes nothing
  LatentGrid scaled = a;
  for (int col = 0; col < 4; ++col) scaled.embeddings(1, col) *= 2.0;
  CHECK(alignment_loss(scaled, c) == doctest::Approx(alignment_loss(a, c)));

  LatentGrid wrong;
  wrong.embeddings = Mat(2, 4);
  CHECK_THROWS_AS(alignment_loss(a, wrong), ShapeError);
}

TEST_CASE("encoder-only gradient check against finite differences") {
  nn::VitConfig vcfg;
  vcfg.image_side = 64;
  vcfg.patch_side = 8;
  vcfg.dim = 64;
  vcfg.depth = 2;
  vcfg.heads = 4;
  vcfg.layer_scale_init = 0.1;
  nn::ParamStore store;
  Rng init(15);
  nn::VitEncoder encoder(vcfg, store, "enc", init);

  Rng imgr(16);
  const ImageGrid img = testutil::textured_image(64, imgr);
  const Mat patches = imageops::patchify(img, 8);
  std::vector<int> visible;
  for (int i = 0; i < 64; i += 2) visible.push_back(i);

  nn::BlockRuntime rt;
  rt.heads = 4;
  auto forward = [&]() {
    const Var tokens = encoder.forward(patches, visible, rt);
    return nn::mean_all(nn::mul(tokens, tokens));
  };
  Rng pick(17);
  CHECK(testutil::finite_diff_max_rel_err(store, forward, 20, pick) < 2e-3);

  // single well-conditioned weight at the tighter tolerance: the largest
  // gradient entry of the patch embedding
  store.zero_grad();
  nn::backward(forward());
  const Var pw = store.find("enc.patch_embed.w");
  long best = 0;
  for (long e = 0; e < pw->value.size(); ++e)
    if (std::fabs(pw->grad.data[e]) > std::fabs(pw->grad.data[best])) best = e;
  const double analytic = pw->grad.data[best];
  const double orig = pw->value.data[best];
  const double h = 1e-5 * std::max(1.0, std::fabs(orig));
  pw->value.data[best] = orig + h;
  const double lp = forward()->value(0, 0);
  pw->value.data[best] = orig - h;
  const double lm = forward()->value(0, 0);
  pw->value.data[best] = orig;
  const double fd = (lp - lm) / (2.0 * h);
  CHECK(std::fabs(fd - analytic) / std::max(std::fabs(fd), std::fabs(analytic)) <
        1e-4);
}

TEST_CASE("full pretrain loss gradient check on 20 random parameters") {
  const PretrainConfig cfg = fixture_config();
  PretrainModel model(cfg, 18);
  Rng imgr(19);
  const ImageGrid img = testutil::textured_image(64, imgr);
  const Mat patches = imageops::patchify(img, cfg.patch_size);
  Rng mrng(20);
  const auto mask = generate_block_mask(cfg.grid_spec(), 20, mrng);
  const auto targets = model.teacher_targets(img);

  const auto midx = mask.masked_indices();
  const auto vidx = mask.visible_indices();
  Mat t_masked(static_cast<int>(midx.size()), targets.embeddings.cols);
  for (std::size_t i = 0; i < midx.size(); ++i)
    for (int c = 0; c < targets.embeddings.cols; ++c)
      t_masked(static_cast<int>(i), c) = targets.embeddings(midx[i], c);
  Mat t_visible(static_cast<int>(vidx.size()), targets.embeddings.cols);
  for (std::size_t i = 0; i < vidx.size(); ++i)
    for (int c = 0; c < targets.embeddings.cols; ++c)
      t_visible(static_cast<int>(i), c) = targets.embeddings(vidx[i], c);

  nn::BlockRuntime rt;
  rt.heads = cfg.encoder_heads;
  auto forward = [&]() {
    const Var vis = model.encode_visible_var(patches, mask, rt);
    const Var pred = model.regress_masked_var(vis, mask, rt);
    const Var masked_term =
        alignment_loss_var(model.project_var(pred), t_masked);
    const Var visible_term =
        alignment_loss_var(model.project_var(vis), t_visible);
    return nn::add(masked_term, nn::scale(visible_term, 0.5));
  };
  Rng pick(21);
  CHECK(testutil::finite_diff_max_rel_err(model.params(), forward, 20, pick) < 1e-3);
}

TEST_CASE("pretrain smoke: masked alignment drops >= 30% over 50 steps") {
  seed_all(0);
  PretrainConfig cfg = fixture_config();
  cfg.learning_rate = 3e-3;
  PretrainModel model(cfg, 0);

  const StateDict teacher_before = model.teacher_state_dict();

  Rng imgr(22);
  std::vector<ImageGrid> corpus;
  for (int i = 0; i < 64; ++i) corpus.push_back(testutil::textured_image(64, imgr));

  PretrainTrainer trainer(model, 0, 50, 5);
  Rng batch_rng(23);
  std::vector<double> masked_losses;
  for (int step = 0; step < 50; ++step) {
    std::vector<ImageGrid> batch;
    for (int b = 0; b < 8; ++b) batch.push_back(corpus[batch_rng.index(corpus.size())]);
    const auto loss = trainer.step(batch);
    CHECK(std::isfinite(loss.total));
    // table weights: visible term weighted 0 -> total equals the masked term
    CHECK(loss.total == loss.masked_align);
    masked_losses.push_back(loss.masked_align);
  }
  const double early =
      std::accumulate(masked_losses.begin(), masked_losses.begin() + 5, 0.0) / 5.0;
  const double late =
      std::accumulate(masked_losses.end() - 5, masked_losses.end(), 0.0) / 5.0;
  CHECK(late <= 0.7 * early);

  // teacher frozenness across all updates
  const StateDict teacher_after = model.teacher_state_dict();
  REQUIRE(teacher_before.size() == teacher_after.size());
  for (std::size_t i = 0; i < teacher_before.size(); ++i)
    CHECK(teacher_before[i].data == teacher_after[i].data);  // bitwise
}

TEST_CASE("pretrain step with zero learning rate leaves parameters unchanged") {
  PretrainConfig cfg = fixture_config();
  cfg.learning_rate = 0.0;
  cfg.warmup_epochs = 0;
  PretrainModel model(cfg, 30);
  const StateDict before = model.state_dict();

  Rng imgr(31);
  std::vector<ImageGrid> batch;
  for (int i = 0; i < 4; ++i) batch.push_back(testutil::textured_image(64, imgr));
  PretrainTrainer trainer(model, 30, 10, 0);
  trainer.step(batch);

  const StateDict after = model.state_dict();
  for (std::size_t i = 0; i < before.size(); ++i)
    CHECK(before[i].data == after[i].data);
}

TEST_CASE("identical seed and config give identical loss trajectories") {
  auto run = [&](std::uint64_t seed) {
    PretrainConfig cfg = fixture_config();
    PretrainModel model(cfg, seed);
    PretrainTrainer trainer(model, seed, 5, 0);
    Rng imgr(seed + 100);
    std::vector<double> losses;
    for (int step = 0; step < 5; ++step) {
      std::vector<ImageGrid> batch;
      for (int b = 0; b < 4; ++b) batch.push_back(testutil::textured_image(64, imgr));
      losses.push_back(trainer.step(batch).total);
    }
    return losses;
  };
  CHECK(run(7) == run(7));
  CHECK(run(7) != run(8));
}
