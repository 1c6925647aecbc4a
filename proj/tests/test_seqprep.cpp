#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "dermfoundry/seqprep.hpp"
#include "testutil.hpp"

using namespace dermfoundry;
using namespace dermfoundry::seqprep;
using imageops::Euclidean2D;

namespace {

ImageGrid bright_disk_on_black(int side, double cx, double cy, double r) {
  ImageGrid img(3, side, side, 0.02);
  const double skin[3] = {0.85, 0.65, 0.55};
  testutil::stamp_disk(img, cx, cy, r, skin);
  return img;
}

// pixels differing after 8-bit quantization
long quantized_diff_count(const ImageGrid& a, const ImageGrid& b) {
  long n = 0;
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x) {
      bool differs = false;
      for (int c = 0; c < a.channels; ++c)
        differs = differs || std::lround(a.at(c, y, x) * 255) !=
                                 std::lround(b.at(c, y, x) * 255);
      n += differs;
    }
  return n;
}

}  // namespace

TEST_CASE("dark corner: synthetic disk fitted within tolerance") {
  const ImageGrid img = bright_disk_on_black(256, 128, 128, 100);
  const auto [out, info] = remove_dark_corner(img);
  CHECK(info.detected);
  CHECK(std::fabs(info.radius - 100.0) <= 2.0);
  CHECK(std::fabs(info.applied_radius - 80.0) <= 2.0);
  CHECK(std::fabs(info.cx - 128.0) <= 2.0);
  CHECK(std::fabs(info.cy - 128.0) <= 2.0);
  // exterior has been inpainted away from near-black
  double corner_mean = 0.0;
  for (int c = 0; c < 3; ++c) corner_mean += out.at(c, 4, 4);
  CHECK(corner_mean / 3.0 > 0.2);
}

TEST_CASE("dark corner: uniformly bright image passes through") {
  const ImageGrid img(3, 64, 64, 0.8);
  const auto [out, info] = remove_dark_corner(img);
  CHECK_FALSE(info.detected);
  CHECK(out.pixels == img.pixels);
}

TEST_CASE("dark corner: all-black image passes through") {
  const ImageGrid img(3, 64, 64, 0.0);
  const auto [out, info] = remove_dark_corner(img);
  CHECK_FALSE(info.detected);
  CHECK(out.pixels == img.pixels);
}

TEST_CASE("hair removal: drawn curves are detected and inpainted") {
  ImageGrid img(3, 128, 128);
  for (int y = 0; y < 128; ++y)
    for (int x = 0; x < 128; ++x) {
      img.at(0, y, x) = 0.82;
      img.at(1, y, x) = 0.62;
      img.at(2, y, x) = 0.52;
    }
  // three 2-px dark curves
  std::vector<std::pair<int, int>> curve_pixels;
  for (int t = 10; t < 118; ++t) {
    const int rows[3] = {20 + t / 6, 64, 100 - t / 5};
    const int cols[3] = {t, t, t};
    for (int k = 0; k < 3; ++k)
      for (int w = 0; w < 2; ++w) {
        const int y = rows[k] + w, x = cols[k];
        if (y < 0 || y >= 128) continue;
        img.at(0, y, x) = 0.25;
        img.at(1, y, x) = 0.2;
        img.at(2, y, x) = 0.18;
        curve_pixels.emplace_back(y, x);
      }
  }

  const HairRemovalResult res = remove_hair(img);
  CHECK(res.hair_fraction > 0.0);
  long caught = 0;
  for (const auto& [y, x] : curve_pixels) caught += res.hair_mask.at(y, x);
  CHECK(static_cast<double>(caught) / curve_pixels.size() >= 0.9);

  // inpainted pixels close to the surrounding skin tone (15/255 gray levels)
  for (const auto& [y, x] : curve_pixels) {
    if (!res.hair_mask.at(y, x)) continue;
    double gray = 0.0;
    for (int c = 0; c < 3; ++c) gray += res.image.at(c, y, x);
    gray /= 3.0;
    const double skin_gray = (0.82 + 0.62 + 0.52) / 3.0;
    CHECK(std::fabs(gray - skin_gray) <= 15.0 / 255.0);
  }
}

TEST_CASE("hair removal: uniform image untouched, second pass near-idempotent") {
  const ImageGrid img(3, 96, 96, 0.7);
  const HairRemovalResult first = remove_hair(img);
  CHECK(first.hair_fraction == 0.0);
  CHECK(first.image.pixels == img.pixels);

  // a textured image: the second application must change almost nothing
  Rng rng(5);
  ImageGrid skin = testutil::textured_image(128, rng, 4);
  const HairRemovalResult once = remove_hair(skin);
  const HairRemovalResult twice = remove_hair(once.image);
  const long changed = quantized_diff_count(once.image, twice.image);
  CHECK(static_cast<double>(changed) / (128.0 * 128.0) < 0.001);
}

TEST_CASE("registration: image to itself is the identity") {
  Rng rng(6);
  const ImageGrid img = testutil::textured_image(256, rng, 24);
  const RegistrationResult res = register_pair(img, img, 1);
  REQUIRE_FALSE(res.failed);
  CHECK(std::fabs(res.transform.rotation) <= 0.005);
  CHECK(std::fabs(res.transform.tx) <= 0.5);
  CHECK(std::fabs(res.transform.ty) <= 0.5);
  CHECK(res.inlier_count >= 3);
}

TEST_CASE("registration recovers a known shift within half a pixel") {
  Rng rng(7);
  const ImageGrid fixed = testutil::textured_image(256, rng, 24);
  Euclidean2D t;
  t.tx = 7.0;
  t.ty = -4.0;
  const ImageGrid moving = imageops::warp_euclidean(fixed, t.inverse());
  const RegistrationResult res = register_pair(fixed, moving, 2);
  REQUIRE_FALSE(res.failed);
  CHECK(std::fabs(res.transform.tx - 7.0) <= 0.5);
  CHECK(std::fabs(res.transform.ty + 4.0) <= 0.5);
  CHECK(std::fabs(res.transform.rotation) <= 0.5 * M_PI / 180.0);
}

TEST_CASE("registration recovers a known rotation within half a degree") {
  Rng rng(8);
  const ImageGrid fixed = testutil::textured_image(256, rng, 24);
  Euclidean2D t;
  t.rotation = 10.0 * M_PI / 180.0;
  // rotate about the image center
  const double c = 127.5;
  const auto [rcx, rcy] = t.apply(c, c);
  t.tx = c - rcx + t.tx;
  t.ty = c - rcy + t.ty;
  const ImageGrid moving = imageops::warp_euclidean(fixed, t.inverse());
  const RegistrationResult res = register_pair(fixed, moving, 3);
  REQUIRE_FALSE(res.failed);
  CHECK(std::fabs(res.transform.rotation - t.rotation) <= 0.5 * M_PI / 180.0);
}

TEST_CASE("registration failure is flagged, not thrown") {
  const ImageGrid blank_a(3, 128, 128, 0.5);
  const ImageGrid blank_b(3, 128, 128, 0.5);
  const RegistrationResult res = register_pair(blank_a, blank_b, 4);
  CHECK(res.failed);
  CHECK(res.transform.rotation == 0.0);
  CHECK(res.transform.tx == 0.0);
}

TEST_CASE("transform group: compose with inverse is identity") {
  Rng rng(9);
  for (int rep = 0; rep < 50; ++rep) {
    Euclidean2D t;
    t.rotation = rng.uniform(-3.0, 3.0);
    while (t.rotation > M_PI) t.rotation -= 2 * M_PI;
    while (t.rotation <= -M_PI) t.rotation += 2 * M_PI;
    t.tx = rng.uniform(-40, 40);
    t.ty = rng.uniform(-40, 40);
    const Euclidean2D id = t.compose(t.inverse());
    CHECK(std::fabs(id.rotation) < 1e-9);
    CHECK(std::fabs(id.tx) < 1e-9);
    CHECK(std::fabs(id.ty) < 1e-9);
  }
}

TEST_CASE("warp consistency: T then T-inverse returns the original interior") {
  // smooth content: bilinear resampling of per-pixel noise is lossy by
  // construction, which is not what this invariant is about
  Rng rng(10);
  ImageGrid img(3, 128, 128, 0.4);
  for (int b = 0; b < 16; ++b) {
    const double rgb[3] = {rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9),
                           rng.uniform(0.1, 0.9)};
    testutil::stamp_disk(img, rng.uniform(20, 108), rng.uniform(20, 108),
                         rng.uniform(8, 20), rgb);
  }
  // soften edges so the content is band-limited
  img = imageops::resize_bilinear(imageops::resize_bilinear(img, 64, 64), 128, 128);
  Euclidean2D t;
  t.rotation = 0.12;
  t.tx = 6.0;
  t.ty = -3.0;
  const ImageGrid warped = imageops::warp_euclidean(img, t);
  const ImageGrid back = imageops::warp_euclidean(warped, t.inverse());
  double err = 0.0;
  long count = 0;
  const int margin = 24;  // stay clear of reflect-padding effects
  for (int c = 0; c < 3; ++c)
    for (int y = margin; y < 128 - margin; ++y)
      for (int x = margin; x < 128 - margin; ++x) {
        err += std::fabs(back.at(c, y, x) - img.at(c, y, x));
        ++count;
      }
  CHECK(err / count < 2.0 / 255.0);
}

TEST_CASE("focus_lesion: full mask identity, empty mask flagged, half-plane median") {
  Rng rng(11);
  const ImageGrid img = testutil::textured_image(64, rng, 8);

  seg::BinaryMask full(64, 64);
  std::fill(full.mask.begin(), full.mask.end(), 1);
  const FocusResult f1 = focus_lesion(img, full);
  CHECK_FALSE(f1.empty_mask);
  CHECK(f1.image.pixels == img.pixels);

  const seg::BinaryMask empty(64, 64);
  const FocusResult f2 = focus_lesion(img, empty);
  CHECK(f2.empty_mask);
  CHECK(f2.image.pixels == img.pixels);

  // half-plane mask: exterior = rows below the dilation boundary
  seg::BinaryMask half(64, 64);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 64; ++x) half.at(y, x) = 1;
  const FocusResult f3 = focus_lesion(img, half, 8);
  // dilation extends the mask 8 rows down; exterior starts at row 40
  std::vector<double> med(3);
  {
    std::vector<double> vals[3];
    for (int c = 0; c < 3; ++c) {
      for (int y = 40; y < 64; ++y)
        for (int x = 0; x < 64; ++x) vals[c].push_back(img.at(c, y, x));
      std::nth_element(vals[c].begin(), vals[c].begin() + vals[c].size() / 2,
                       vals[c].end());
      med[c] = vals[c][vals[c].size() / 2];
    }
  }
  long exact = 0;
  for (int c = 0; c < 3; ++c)
    for (int y = 40; y < 64; ++y)
      for (int x = 0; x < 64; ++x) exact += f3.image.at(c, y, x) == med[c];
  CHECK(exact == 3 * 24 * 64);
}

TEST_CASE("stage toggles parse arm names and stage lists") {
  const StageToggles def = StageToggles::from_string("default");
  CHECK_FALSE(def.corner);
  CHECK_FALSE(def.warp);
  const StageToggles warp = StageToggles::from_string("warp");
  CHECK(warp.warp);
  CHECK_FALSE(warp.corner);
  const StageToggles whole = StageToggles::from_string("whole");
  CHECK(whole.corner);
  CHECK(whole.hair);
  CHECK(whole.warp);
  CHECK(whole.mask);
  const StageToggles list = StageToggles::from_string("corner,hair");
  CHECK(list.corner);
  CHECK(list.hair);
  CHECK_FALSE(list.warp);
  CHECK_THROWS_AS(StageToggles::from_string("bogus"), ValidationError);
}

TEST_CASE("preprocess_pair: identical inputs give a near-identity transform") {
  Rng rng(12);
  const ImageGrid img = testutil::textured_image(192, rng, 20);
  StageToggles stages;
  stages.mask = false;
  const PreprocessedPair out = preprocess_pair(img, img, stages, nullptr, nullptr, 5);
  CHECK_FALSE(out.report.registration_failed);
  CHECK(std::fabs(out.report.transform.rotation) <= 0.005);
  CHECK(std::fabs(out.report.transform.tx) <= 0.5);
  CHECK(std::fabs(out.report.transform.ty) <= 0.5);
}

TEST_CASE("preprocess_pair: known shift appears in the report") {
  Rng rng(13);
  const ImageGrid fixed = testutil::textured_image(192, rng, 20);
  Euclidean2D t;
  t.tx = 5.0;
  t.ty = 3.0;
  const ImageGrid moving = imageops::warp_euclidean(fixed, t.inverse());
  StageToggles stages;
  stages.corner = false;
  stages.hair = false;
  stages.mask = false;
  const PreprocessedPair out =
      preprocess_pair(fixed, moving, stages, nullptr, nullptr, 6);
  REQUIRE_FALSE(out.report.registration_failed);
  CHECK(std::fabs(out.report.transform.tx - 5.0) <= 0.5);
  CHECK(std::fabs(out.report.transform.ty - 3.0) <= 0.5);
}

TEST_CASE("preprocess_pair: corner artifact only in t1 is reported per image") {
  Rng rng(14);
  ImageGrid t0 = testutil::textured_image(256, rng, 16);
  for (auto& v : t0.pixels) v = std::min(1.0, v + 0.3);  // well-lit frame
  // t1: same content inside a bright disk, black corners
  ImageGrid t1(3, 256, 256, 0.01);
  for (int y = 0; y < 256; ++y)
    for (int x = 0; x < 256; ++x) {
      const double dx = x - 128.0, dy = y - 128.0;
      if (dx * dx + dy * dy <= 110.0 * 110.0)
        for (int c = 0; c < 3; ++c) t1.at(c, y, x) = std::max(0.45, t0.at(c, y, x));
    }
  StageToggles stages;
  stages.hair = false;
  stages.warp = false;
  stages.mask = false;
  const PreprocessedPair out = preprocess_pair(t0, t1, stages, nullptr, nullptr, 7);
  CHECK_FALSE(out.report.t0.corner.detected);
  CHECK(out.report.t1.corner.detected);
}
