#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dermfoundry/image_ops.hpp"
#include "dermfoundry/seg.hpp"
#include "dermfoundry/stats.hpp"
#include "testutil.hpp"

using namespace dermfoundry;
using namespace dermfoundry::seg;

namespace {

nn::VitConfig seg_vit() {
  nn::VitConfig v;
  v.image_side = 32;
  v.patch_side = 4;
  v.dim = 32;
  v.depth = 2;
  v.heads = 4;
  v.layer_scale_init = 0.1;
  return v;
}

// bright disk on dark noise plus its ground-truth mask
std::pair<ImageGrid, BinaryMask> disk_example(Rng& rng) {
  ImageGrid img(3, 32, 32);
  for (auto& v : img.pixels) v = rng.uniform(0.15, 0.4);
  const double cx = rng.uniform(10, 22), cy = rng.uniform(10, 22);
  const double r = rng.uniform(6, 11);
  BinaryMask mask(32, 32);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x)
      if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) {
        mask.at(y, x) = 1;
        img.at(0, y, x) = rng.uniform(0.85, 0.95);
        img.at(1, y, x) = rng.uniform(0.55, 0.65);
        img.at(2, y, x) = rng.uniform(0.5, 0.6);
      }
  return {img, mask};
}

}  // namespace

TEST_CASE("mask image round trip") {
  Rng rng(1);
  BinaryMask m(8, 8);
  for (auto& v : m.mask) v = rng.bernoulli(0.4);
  const BinaryMask back = mask_from_image(mask_to_image(m));
  CHECK(back.mask == m.mask);
}

TEST_CASE("paired augmentation transforms image and mask identically") {
  Rng rng(2);
  auto [img, mask] = disk_example(rng);
  SegConfig cfg;
  cfg.max_rotation_deg = 0.0;
  cfg.color_jitter = 0.0;
  // with rotation and jitter off the only stage left is the coin-flip hflip
  bool saw_flip = false, saw_identity = false;
  for (int rep = 0; rep < 12; ++rep) {
    Rng arng(100 + rep);
    const auto [aimg, amask] = augment_pair(img, mask, cfg, arng);
    const ImageGrid flipped = imageops::hflip(img);
    if (aimg.pixels == img.pixels) {
      saw_identity = true;
      CHECK(amask.mask == mask.mask);
    } else {
      CHECK(aimg.pixels == flipped.pixels);
      saw_flip = true;
      const BinaryMask mflip = mask_from_image(imageops::hflip(mask_to_image(mask)));
      CHECK(amask.mask == mflip.mask);
    }
  }
  CHECK(saw_flip);
  CHECK(saw_identity);
}

TEST_CASE("rotation keeps masks binary and paired") {
  Rng rng(3);
  auto [img, mask] = disk_example(rng);
  SegConfig cfg;
  cfg.color_jitter = 0.0;
  Rng arng(4);
  const auto [aimg, amask] = augment_pair(img, mask, cfg, arng);
  CHECK(aimg.height == img.height);
  CHECK(amask.height == mask.height);
  for (auto v : amask.mask) CHECK((v == 0 || v == 1));
}

TEST_CASE("threshold limits: 0 is all-foreground, 1 is all-background") {
  auto backbone = std::make_shared<adapt::Backbone>(seg_vit(), 5);
  SegModel model(backbone, 32, 6);
  Rng rng(7);
  const ImageGrid img = testutil::textured_image(32, rng);

  const BinaryMask all_fg = model.predict(img, 0.0);
  CHECK(all_fg.foreground() == 32 * 32);
  const BinaryMask all_bg = model.predict(img, 1.0);
  CHECK(all_bg.foreground() == 0);
}

TEST_CASE("tap depths are evenly spaced over the encoder") {
  std::vector<int> taps;
  SegModel::tap_depths(24, taps);
  CHECK(taps == std::vector<int>{0, 8, 16, 24});
  SegModel::tap_depths(2, taps);
  CHECK(taps == std::vector<int>{0, 1, 1, 2});
}

TEST_CASE("train_seg validates shapes and class presence") {
  auto backbone = std::make_shared<adapt::Backbone>(seg_vit(), 8);
  SegModel model(backbone, 32, 9);
  Rng rng(10);
  auto [img, mask] = disk_example(rng);
  BinaryMask wrong(16, 16);
  SegConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(train_seg(model, {img}, {wrong}, {Split::kTrain}, cfg, 1),
                  ValidationError);

  BinaryMask empty(32, 32);
  CHECK_THROWS_AS(train_seg(model, {img, img}, {empty, empty},
                            {Split::kTrain, Split::kVal}, cfg, 1),
                  ValidationError);
}

TEST_CASE("seg benchmark: held-out DSC >= 0.95 and zero-lr no-op") {
  Rng rng(11);
  std::vector<ImageGrid> images;
  std::vector<BinaryMask> masks;
  std::vector<Split> groups;
  for (int i = 0; i < 200; ++i) {
    auto [img, mask] = disk_example(rng);
    images.push_back(std::move(img));
    masks.push_back(std::move(mask));
    groups.push_back(i < 150 ? Split::kTrain : (i < 175 ? Split::kVal : Split::kTest));
  }

  auto backbone = std::make_shared<adapt::Backbone>(seg_vit(), 12);
  SegModel model(backbone, 32, 13);

  // zero learning rate first: parameters unchanged, DSC stays at baseline
  {
    const StateDict before = model.state_dict();
    SegConfig frozen;
    frozen.epochs = 1;
    frozen.learning_rate = 0.0;
    frozen.color_jitter = 0.0;
    frozen.max_rotation_deg = 0.0;
    train_seg(model, images, masks, groups, frozen, 14);
    const StateDict after = model.state_dict();
    for (std::size_t i = 0; i < before.size(); ++i)
      CHECK(before[i].data == after[i].data);
  }

  SegConfig cfg;
  cfg.epochs = 10;
  cfg.batch_size = 2;
  cfg.learning_rate = 4e-3;
  cfg.color_jitter = 0.05;
  cfg.max_rotation_deg = 0.0;
  const SegTrainResult result = train_seg(model, images, masks, groups, cfg, 15);
  CHECK(result.best_val_dsc >= 0.95);
  model.load_state_dict(result.best_state);

  // held-out evaluation
  double dsc_sum = 0.0;
  int held = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (groups[i] != Split::kTest) continue;
    const BinaryMask pred = model.predict(images[i], 0.5);
    dsc_sum += stats::seg_metrics(pred.mask, masks[i].mask).dsc;
    ++held;
  }
  CHECK(dsc_sum / held >= 0.95);
}
