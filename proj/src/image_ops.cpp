#include "dermfoundry/image_ops.hpp"

#include <algorithm>
#include <cmath>

namespace dermfoundry::imageops {

nn::Mat patchify(const ImageGrid& img, int patch_side) {
  if (img.height % patch_side != 0 || img.width % patch_side != 0)
    throw ShapeError("patchify: image side not divisible by patch side");
  const int gh = img.height / patch_side, gw = img.width / patch_side;
  nn::Mat out(gh * gw, img.channels * patch_side * patch_side);
  for (int py = 0; py < gh; ++py)
    for (int px = 0; px < gw; ++px) {
      const int row = py * gw + px;
      int col = 0;
      for (int c = 0; c < img.channels; ++c)
        for (int y = 0; y < patch_side; ++y)
          for (int x = 0; x < patch_side; ++x)
            out(row, col++) = img.at(c, py * patch_side + y, px * patch_side + x);
    }
  return out;
}

namespace {

double reflect_coord(double v, int n) {
  if (n == 1) return 0.0;
  const double period = 2.0 * (n - 1);
  v = std::fmod(v, period);
  if (v < 0) v += period;
  return v > n - 1 ? period - v : v;
}

double sample_bilinear(const ImageGrid& img, int c, double y, double x) {
  y = reflect_coord(y, img.height);
  x = reflect_coord(x, img.width);
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  const int y1 = std::min(y0 + 1, img.height - 1);
  const int x1 = std::min(x0 + 1, img.width - 1);
  const double fy = y - y0, fx = x - x0;
  return img.at(c, y0, x0) * (1 - fy) * (1 - fx) +
         img.at(c, y0, x1) * (1 - fy) * fx +
         img.at(c, y1, x0) * fy * (1 - fx) + img.at(c, y1, x1) * fy * fx;
}

double cubic_weight(double t) {
  // Catmull-Rom (a = -0.5)
  constexpr double a = -0.5;
  t = std::fabs(t);
  if (t <= 1.0) return (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0;
  if (t < 2.0) return a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a;
  return 0.0;
}

double sample_bicubic(const ImageGrid& img, int c, double y, double x) {
  const int y0 = static_cast<int>(std::floor(y));
  const int x0 = static_cast<int>(std::floor(x));
  double acc = 0.0;
  for (int dy = -1; dy <= 2; ++dy) {
    const double wy = cubic_weight(y - (y0 + dy));
    if (wy == 0.0) continue;
    const int yy = std::clamp(y0 + dy, 0, img.height - 1);
    for (int dx = -1; dx <= 2; ++dx) {
      const double wx = cubic_weight(x - (x0 + dx));
      if (wx == 0.0) continue;
      const int xx = std::clamp(x0 + dx, 0, img.width - 1);
      acc += wy * wx * img.at(c, yy, xx);
    }
  }
  return acc;
}

}  // namespace

ImageGrid resize_bilinear(const ImageGrid& img, int out_h, int out_w) {
  ImageGrid out(img.channels, out_h, out_w);
  out.source_path = img.source_path;
  const double sy = static_cast<double>(img.height) / out_h;
  const double sx = static_cast<double>(img.width) / out_w;
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x)
        out.at(c, y, x) = sample_bilinear(img, c, (y + 0.5) * sy - 0.5,
                                          (x + 0.5) * sx - 0.5);
  return out;
}

ImageGrid resize_bicubic(const ImageGrid& img, int out_h, int out_w) {
  ImageGrid out(img.channels, out_h, out_w);
  out.source_path = img.source_path;
  const double sy = static_cast<double>(img.height) / out_h;
  const double sx = static_cast<double>(img.width) / out_w;
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x)
        out.at(c, y, x) = std::clamp(
            sample_bicubic(img, c, (y + 0.5) * sy - 0.5, (x + 0.5) * sx - 0.5),
            0.0, 1.0);
  return out;
}

ImageGrid hflip(const ImageGrid& img) {
  ImageGrid out(img.channels, img.height, img.width);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x)
        out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
  return out;
}

ImageGrid crop(const ImageGrid& img, int y0, int x0, int h, int w) {
  if (y0 < 0 || x0 < 0 || y0 + h > img.height || x0 + w > img.width)
    throw ShapeError("crop: region out of bounds");
  ImageGrid out(img.channels, h, w);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
  return out;
}

ImageGrid random_resized_crop(const ImageGrid& img, int out_side, Rng& rng,
                              double min_scale, double max_scale) {
  const double area = static_cast<double>(img.height) * img.width;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(min_scale, max_scale);
    const double aspect = std::exp(rng.uniform(std::log(0.75), std::log(4.0 / 3.0)));
    const int w = static_cast<int>(std::lround(std::sqrt(target * aspect)));
    const int h = static_cast<int>(std::lround(std::sqrt(target / aspect)));
    if (w <= 0 || h <= 0 || w > img.width || h > img.height) continue;
    const int y0 = static_cast<int>(rng.index(img.height - h + 1));
    const int x0 = static_cast<int>(rng.index(img.width - w + 1));
    return resize_bilinear(crop(img, y0, x0, h, w), out_side, out_side);
  }
  const int side = std::min(img.height, img.width);
  return resize_bilinear(crop(img, (img.height - side) / 2,
                              (img.width - side) / 2, side, side),
                         out_side, out_side);
}

ImageGrid color_jitter(const ImageGrid& img, Rng& rng, double strength) {
  const double fb = rng.uniform(1.0 - strength, 1.0 + strength);
  const double fc = rng.uniform(1.0 - strength, 1.0 + strength);
  const double fs = rng.uniform(1.0 - strength, 1.0 + strength);
  ImageGrid out = img;
  double mean = 0.0;
  for (double v : img.pixels) mean += v;
  mean /= static_cast<double>(img.pixels.size());
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      double gray = 0.0;
      for (int c = 0; c < img.channels; ++c) gray += img.at(c, y, x);
      gray /= img.channels;
      for (int c = 0; c < img.channels; ++c) {
        double v = img.at(c, y, x) * fb;                 // brightness
        v = mean + (v - mean) * fc;                      // contrast
        v = gray + (v - gray) * fs;                      // saturation
        out.at(c, y, x) = std::clamp(v, 0.0, 1.0);
      }
    }
  return out;
}

ImageGrid rotate(const ImageGrid& img, double degrees, bool nearest) {
  const double rad = degrees * M_PI / 180.0;
  const double cx = (img.width - 1) / 2.0, cy = (img.height - 1) / 2.0;
  const double cs = std::cos(rad), sn = std::sin(rad);
  ImageGrid out(img.channels, img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      // inverse rotation of output coordinates
      const double dx = x - cx, dy = y - cy;
      const double sxp = cx + cs * dx + sn * dy;
      const double syp = cy - sn * dx + cs * dy;
      for (int c = 0; c < img.channels; ++c) {
        if (nearest) {
          const int yy = static_cast<int>(std::lround(reflect_coord(syp, img.height)));
          const int xx = static_cast<int>(std::lround(reflect_coord(sxp, img.width)));
          out.at(c, y, x) = img.at(c, std::clamp(yy, 0, img.height - 1),
                                   std::clamp(xx, 0, img.width - 1));
        } else {
          out.at(c, y, x) = sample_bilinear(img, c, syp, sxp);
        }
      }
    }
  return out;
}

ImageGrid random_erase(const ImageGrid& img, Rng& rng, double p) {
  if (rng.uniform() >= p) return img;
  ImageGrid out = img;
  const double area = static_cast<double>(img.height) * img.width;
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = area * rng.uniform(0.02, 0.33);
    const double aspect = std::exp(rng.uniform(std::log(0.3), std::log(1.0 / 0.3)));
    const int h = static_cast<int>(std::lround(std::sqrt(target / aspect)));
    const int w = static_cast<int>(std::lround(std::sqrt(target * aspect)));
    if (h <= 0 || w <= 0 || h > img.height || w > img.width) continue;
    const int y0 = static_cast<int>(rng.index(img.height - h + 1));
    const int x0 = static_cast<int>(rng.index(img.width - w + 1));
    for (int c = 0; c < img.channels; ++c)
      for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x) out.at(c, y, x) = rng.uniform();
    break;
  }
  return out;
}

std::pair<double, double> Euclidean2D::apply(double x, double y) const {
  const double cs = std::cos(rotation), sn = std::sin(rotation);
  return {cs * x - sn * y + tx, sn * x + cs * y + ty};
}

Euclidean2D Euclidean2D::inverse() const {
  const double cs = std::cos(rotation), sn = std::sin(rotation);
  Euclidean2D inv;
  inv.rotation = -rotation;
  inv.tx = -(cs * tx + sn * ty);
  inv.ty = -(-sn * tx + cs * ty);
  return inv;
}

Euclidean2D Euclidean2D::compose(const Euclidean2D& inner) const {
  Euclidean2D out;
  out.rotation = rotation + inner.rotation;
  // normalize into (-pi, pi]
  while (out.rotation > M_PI) out.rotation -= 2.0 * M_PI;
  while (out.rotation <= -M_PI) out.rotation += 2.0 * M_PI;
  const auto [x, y] = apply(inner.tx, inner.ty);
  out.tx = x;
  out.ty = y;
  return out;
}

ImageGrid warp_euclidean(const ImageGrid& img, const Euclidean2D& t) {
  ImageGrid out(img.channels, img.height, img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      const auto [sx, sy] = t.apply(x, y);
      for (int c = 0; c < img.channels; ++c)
        out.at(c, y, x) = sample_bilinear(img, c, sy, sx);
    }
  return out;
}

}  // namespace dermfoundry::imageops
