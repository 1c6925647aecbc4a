#pragma once

#include "dermfoundry/core.hpp"
#include "dermfoundry/rng.hpp"
#include "dermfoundry/tensor.hpp"

namespace dermfoundry::imageops {

// Rows are patches in row-major grid order; columns are (c, y, x) within the
// patch. Inverse of unpatchify for matching shapes.
nn::Mat patchify(const ImageGrid& img, int patch_side);

ImageGrid resize_bilinear(const ImageGrid& img, int out_h, int out_w);
ImageGrid resize_bicubic(const ImageGrid& img, int out_h, int out_w);
ImageGrid hflip(const ImageGrid& img);
ImageGrid crop(const ImageGrid& img, int y0, int x0, int h, int w);

// Random resized crop to a square of side `out_side`; area scale drawn from
// [min_scale, max_scale], aspect from [3/4, 4/3].
ImageGrid random_resized_crop(const ImageGrid& img, int out_side, Rng& rng,
                              double min_scale, double max_scale);

// Brightness / contrast / saturation each jittered by a factor drawn from
// [1-strength, 1+strength]; output clamped to [0,1].
ImageGrid color_jitter(const ImageGrid& img, Rng& rng, double strength);

// Rotation about the image center, reflect padding. Nearest-neighbour
// sampling keeps binary masks binary.
ImageGrid rotate(const ImageGrid& img, double degrees, bool nearest = false);

// Random erasing: with probability p, overwrite a random rectangle
// (2..33% of area) with uniform noise.
ImageGrid random_erase(const ImageGrid& img, Rng& rng, double p);

// Rigid 2-D transform: maps output (fixed-frame) pixel coordinates to input
// (moving-frame) coordinates, x' = R(rot) * x + t.
struct Euclidean2D {
  double rotation = 0.0;  // radians, in (-pi, pi]
  double tx = 0.0;
  double ty = 0.0;

  std::pair<double, double> apply(double x, double y) const;
  Euclidean2D inverse() const;
  Euclidean2D compose(const Euclidean2D& inner) const;  // this after inner
};

// output(x) = img(T(x)), bilinear sampling with reflect padding.
ImageGrid warp_euclidean(const ImageGrid& img, const Euclidean2D& t);

}  // namespace dermfoundry::imageops
