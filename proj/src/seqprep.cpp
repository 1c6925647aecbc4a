#include "dermfoundry/seqprep.hpp"

#include <algorithm>
#include <cmath>

#include <opencv2/features2d.hpp>
#include <opencv2/imgproc.hpp>
#include <opencv2/photo.hpp>

#include "dermfoundry/rng.hpp"

namespace dermfoundry::seqprep {

namespace {

constexpr int kCornerThreshold = 100;
constexpr double kCornerShrink = 0.8;
constexpr int kCornerInpaintRadius = 10;
constexpr double kCornerCoverageBailout = 0.98;
constexpr int kHairKernel = 17;
constexpr int kHairThreshold = 10;
constexpr int kHairInpaintRadius = 6;

cv::Mat to_cv_bgr(const ImageGrid& img) {
  cv::Mat m(img.height, img.width, CV_8UC3);
  for (int y = 0; y < img.height; ++y) {
    auto* row = m.ptr<cv::Vec3b>(y);
    for (int x = 0; x < img.width; ++x) {
      auto q = [&](int c) {
        const int src = img.channels == 1 ? 0 : c;
        return static_cast<unsigned char>(
            std::lround(std::clamp(img.at(src, y, x), 0.0, 1.0) * 255.0));
      };
      row[x] = cv::Vec3b(q(2), q(1), q(0));
    }
  }
  return m;
}

ImageGrid from_cv_bgr(const cv::Mat& m, const std::string& source) {
  ImageGrid img(3, m.rows, m.cols);
  img.source_path = source;
  for (int y = 0; y < m.rows; ++y) {
    const auto* row = m.ptr<cv::Vec3b>(y);
    for (int x = 0; x < m.cols; ++x) {
      img.at(0, y, x) = row[x][2] / 255.0;
      img.at(1, y, x) = row[x][1] / 255.0;
      img.at(2, y, x) = row[x][0] / 255.0;
    }
  }
  return img;
}

cv::Mat to_cv_gray(const ImageGrid& img) {
  cv::Mat gray;
  cv::cvtColor(to_cv_bgr(img), gray, cv::COLOR_BGR2GRAY);
  return gray;
}

}  // namespace

std::pair<ImageGrid, CornerInfo> remove_dark_corner(const ImageGrid& img) {
  CornerInfo info;
  const cv::Mat gray = to_cv_gray(img);
  cv::Mat bin;
  cv::threshold(gray, bin, kCornerThreshold, 255, cv::THRESH_BINARY);

  std::vector<std::vector<cv::Point>> contours;
  cv::findContours(bin, contours, cv::RETR_TREE, cv::CHAIN_APPROX_SIMPLE);
  if (contours.empty()) return {img, info};

  double best_area = -1.0;
  int best = -1;
  for (std::size_t i = 0; i < contours.size(); ++i) {
    const double a = cv::contourArea(contours[i]);
    if (a > best_area) {
      best_area = a;
      best = static_cast<int>(i);
    }
  }
  cv::Point2f center;
  float radius = 0.0f;
  cv::minEnclosingCircle(contours[best], center, radius);

  // fraction of image pixels already inside the fitted circle
  long inside = 0;
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const double dx = x - center.x, dy = y - center.y;
      inside += dx * dx + dy * dy <= static_cast<double>(radius) * radius;
    }
  const double coverage =
      static_cast<double>(inside) / (static_cast<double>(img.height) * img.width);
  if (coverage >= kCornerCoverageBailout) return {img, info};

  info.detected = true;
  info.cx = center.x;
  info.cy = center.y;
  info.radius = radius;
  info.applied_radius = kCornerShrink * radius;

  cv::Mat mask = cv::Mat::zeros(img.height, img.width, CV_8UC1);
  const double r2 = info.applied_radius * info.applied_radius;
  for (int y = 0; y < img.height; ++y) {
    auto* row = mask.ptr<unsigned char>(y);
    for (int x = 0; x < img.width; ++x) {
      const double dx = x - center.x, dy = y - center.y;
      if (dx * dx + dy * dy > r2) row[x] = 255;
    }
  }
  cv::Mat out;
  cv::inpaint(to_cv_bgr(img), mask, out, kCornerInpaintRadius, cv::INPAINT_TELEA);
  return {from_cv_bgr(out, img.source_path), info};
}

HairRemovalResult remove_hair(const ImageGrid& img) {
  const cv::Mat gray = to_cv_gray(img);
  const cv::Mat kernel =
      cv::getStructuringElement(cv::MORPH_RECT, cv::Size(kHairKernel, kHairKernel));
  cv::Mat blackhat;
  cv::morphologyEx(gray, blackhat, cv::MORPH_BLACKHAT, kernel);
  cv::Mat mask;
  cv::threshold(blackhat, mask, kHairThreshold, 255, cv::THRESH_BINARY);

  HairRemovalResult res;
  res.hair_mask = seg::BinaryMask(img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      res.hair_mask.at(y, x) = mask.at<unsigned char>(y, x) ? 1 : 0;

  const long hair_pixels = cv::countNonZero(mask);
  res.hair_fraction =
      static_cast<double>(hair_pixels) / (static_cast<double>(img.height) * img.width);
  if (hair_pixels == 0) {
    res.image = img;
    return res;
  }
  cv::Mat out;
  cv::inpaint(to_cv_bgr(img), mask, out, kHairInpaintRadius, cv::INPAINT_TELEA);
  res.image = from_cv_bgr(out, img.source_path);
  return res;
}

namespace {

struct PointPair {
  double fx, fy, mx, my;
};

imageops::Euclidean2D fit_two_points(const PointPair& a, const PointPair& b) {
  const double fdx = b.fx - a.fx, fdy = b.fy - a.fy;
  const double mdx = b.mx - a.mx, mdy = b.my - a.my;
  imageops::Euclidean2D t;
  t.rotation = std::atan2(mdy, mdx) - std::atan2(fdy, fdx);
  while (t.rotation > M_PI) t.rotation -= 2.0 * M_PI;
  while (t.rotation <= -M_PI) t.rotation += 2.0 * M_PI;
  const double cs = std::cos(t.rotation), sn = std::sin(t.rotation);
  t.tx = a.mx - (cs * a.fx - sn * a.fy);
  t.ty = a.my - (sn * a.fx + cs * a.fy);
  return t;
}

// least squares rigid fit (moving ~ R * fixed + t) over the inlier set
imageops::Euclidean2D fit_least_squares(const std::vector<PointPair>& pts) {
  double fcx = 0, fcy = 0, mcx = 0, mcy = 0;
  for (const auto& p : pts) {
    fcx += p.fx;
    fcy += p.fy;
    mcx += p.mx;
    mcy += p.my;
  }
  const double n = static_cast<double>(pts.size());
  fcx /= n; fcy /= n; mcx /= n; mcy /= n;
  double a = 0.0, b = 0.0;
  for (const auto& p : pts) {
    const double fx = p.fx - fcx, fy = p.fy - fcy;
    const double mx = p.mx - mcx, my = p.my - mcy;
    a += fx * mx + fy * my;
    b += fx * my - fy * mx;
  }
  imageops::Euclidean2D t;
  t.rotation = std::atan2(b, a);
  const double cs = std::cos(t.rotation), sn = std::sin(t.rotation);
  t.tx = mcx - (cs * fcx - sn * fcy);
  t.ty = mcy - (sn * fcx + cs * fcy);
  return t;
}

double residual(const imageops::Euclidean2D& t, const PointPair& p) {
  const auto [x, y] = t.apply(p.fx, p.fy);
  const double dx = x - p.mx, dy = y - p.my;
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

RegistrationResult register_pair(const ImageGrid& fixed, const ImageGrid& moving,
                                 std::uint64_t seed, const RansacParams& params) {
  if (fixed.height != moving.height || fixed.width != moving.width)
    throw ShapeError("register_pair: images must share dimensions");

  RegistrationResult out;
  out.warped = moving;

  auto akaze = cv::AKAZE::create(cv::AKAZE::DESCRIPTOR_MLDB,
                                 /*descriptor_size=*/0,
                                 /*descriptor_channels=*/3,
                                 /*threshold=*/9e-5f,
                                 /*nOctaves=*/4);
  std::vector<cv::KeyPoint> kp_fixed, kp_moving;
  cv::Mat desc_fixed, desc_moving;
  akaze->detectAndCompute(to_cv_gray(fixed), cv::noArray(), kp_fixed, desc_fixed);
  akaze->detectAndCompute(to_cv_gray(moving), cv::noArray(), kp_moving, desc_moving);

  std::vector<cv::DMatch> matches;
  if (!desc_fixed.empty() && !desc_moving.empty()) {
    cv::BFMatcher matcher(cv::NORM_HAMMING, /*crossCheck=*/true);
    matcher.match(desc_fixed, desc_moving, matches);
  }
  out.match_count = static_cast<int>(matches.size());

  std::vector<PointPair> pairs;
  pairs.reserve(matches.size());
  for (const auto& m : matches) {
    const auto& f = kp_fixed[m.queryIdx].pt;
    const auto& v = kp_moving[m.trainIdx].pt;
    pairs.push_back({f.x, f.y, v.x, v.y});
  }

  if (pairs.size() < static_cast<std::size_t>(params.min_samples)) {
    out.failed = true;
    return out;
  }

  Rng rng(derive_seed(seed, "ransac"));
  std::vector<std::size_t> best_inliers;
  for (int trial = 0; trial < params.max_trials; ++trial) {
    const std::size_t i = rng.index(pairs.size());
    std::size_t j = rng.index(pairs.size());
    if (j == i) j = (j + 1) % pairs.size();
    const auto model = fit_two_points(pairs[i], pairs[j]);
    std::vector<std::size_t> inliers;
    for (std::size_t p = 0; p < pairs.size(); ++p)
      if (residual(model, pairs[p]) <= params.residual_threshold)
        inliers.push_back(p);
    if (inliers.size() > best_inliers.size()) best_inliers = std::move(inliers);
  }

  if (best_inliers.size() < 3) {
    out.failed = true;
    return out;
  }

  std::vector<PointPair> inlier_pts;
  for (auto i : best_inliers) inlier_pts.push_back(pairs[i]);
  out.transform = fit_least_squares(inlier_pts);
  out.inlier_count = static_cast<int>(best_inliers.size());
  out.warped = imageops::warp_euclidean(moving, out.transform);
  return out;
}

FocusResult focus_lesion(const ImageGrid& img, const seg::BinaryMask& mask,
                         int dilation_px) {
  if (mask.height != img.height || mask.width != img.width)
    throw ShapeError("focus_lesion: mask shape mismatch");
  FocusResult out;
  if (mask.foreground() == 0) {
    out.image = img;
    out.empty_mask = true;
    return out;
  }

  cv::Mat m(mask.height, mask.width, CV_8UC1);
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width; ++x)
      m.at<unsigned char>(y, x) = mask.at(y, x) ? 255 : 0;
  const cv::Mat kernel = cv::getStructuringElement(
      cv::MORPH_ELLIPSE, cv::Size(2 * dilation_px + 1, 2 * dilation_px + 1));
  cv::Mat dilated;
  cv::dilate(m, dilated, kernel);

  // median color over the exterior region, per channel
  std::vector<double> exterior[3];
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      if (!dilated.at<unsigned char>(y, x))
        for (int c = 0; c < img.channels; ++c)
          exterior[c].push_back(img.at(c, y, x));

  out.image = img;
  if (exterior[0].empty()) return out;  // mask covers everything: no exterior
  double median[3] = {0, 0, 0};
  for (int c = 0; c < img.channels; ++c) {
    auto& v = exterior[c];
    std::nth_element(v.begin(), v.begin() + v.size() / 2, v.end());
    median[c] = v[v.size() / 2];
  }
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      if (!dilated.at<unsigned char>(y, x))
        for (int c = 0; c < img.channels; ++c) out.image.at(c, y, x) = median[c];
  return out;
}

StageToggles StageToggles::from_string(const std::string& spec) {
  StageToggles t{false, false, false, false};
  if (spec == "default") return t;
  if (spec == "warp") {
    t.warp = true;
    return t;
  }
  if (spec == "mask") {
    t.mask = true;
    return t;
  }
  if (spec == "whole" || spec == "all") return StageToggles{};
  std::string token;
  for (std::size_t i = 0; i <= spec.size(); ++i) {
    if (i == spec.size() || spec[i] == ',') {
      if (token == "corner") t.corner = true;
      else if (token == "hair") t.hair = true;
      else if (token == "warp") t.warp = true;
      else if (token == "mask") t.mask = true;
      else if (!token.empty())
        throw ValidationError("unknown preprocessing stage: '" + token + "'");
      token.clear();
    } else {
      token += spec[i];
    }
  }
  return t;
}

std::string StageToggles::to_string() const {
  std::string s;
  auto append = [&](bool on, const char* name) {
    if (!on) return;
    if (!s.empty()) s += ',';
    s += name;
  };
  append(corner, "corner");
  append(hair, "hair");
  append(warp, "warp");
  append(mask, "mask");
  return s.empty() ? "default" : s;
}

PreprocessedPair preprocess_pair(const ImageGrid& img_t0, const ImageGrid& img_t1,
                                 const StageToggles& stages,
                                 const seg::BinaryMask* mask_t0,
                                 const seg::BinaryMask* mask_t1,
                                 std::uint64_t seed) {
  PreprocessedPair out;
  out.t0 = img_t0;
  out.t1 = img_t1;

  if (stages.corner) {
    auto [p0, c0] = remove_dark_corner(out.t0);
    auto [p1, c1] = remove_dark_corner(out.t1);
    out.t0 = std::move(p0);
    out.t1 = std::move(p1);
    out.report.t0.corner = c0;
    out.report.t1.corner = c1;
  }
  if (stages.hair) {
    auto h0 = remove_hair(out.t0);
    auto h1 = remove_hair(out.t1);
    out.t0 = std::move(h0.image);
    out.t1 = std::move(h1.image);
    out.report.t0.hair_fraction = h0.hair_fraction;
    out.report.t1.hair_fraction = h1.hair_fraction;
  }
  if (stages.warp) {
    auto reg = register_pair(out.t0, out.t1, seed);
    out.report.transform = reg.transform;
    out.report.inlier_count = reg.inlier_count;
    out.report.registration_failed = reg.failed;
    if (!reg.failed) out.t1 = std::move(reg.warped);
  }
  if (stages.mask) {
    if (!mask_t0 || !mask_t1) {
      out.report.mask_skipped = true;
    } else {
      auto f0 = focus_lesion(out.t0, *mask_t0);
      auto f1 = focus_lesion(out.t1, *mask_t1);
      out.report.mask_skipped = f0.empty_mask || f1.empty_mask;
      out.t0 = std::move(f0.image);
      out.t1 = std::move(f1.image);
    }
  }
  return out;
}

}  // namespace dermfoundry::seqprep
