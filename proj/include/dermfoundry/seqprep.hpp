#pragma once

#include <optional>
#include <string>

#include "dermfoundry/core.hpp"
#include "dermfoundry/image_ops.hpp"
#include "dermfoundry/seg.hpp"

namespace dermfoundry::seqprep {

struct CornerInfo {
  bool detected = false;
  double cx = 0.0;
  double cy = 0.0;
  double radius = 0.0;          // fitted enclosing-circle radius
  double applied_radius = 0.0;  // after the 80% shrink
};

// Dark-corner removal: grayscale threshold 100, largest contour, minimum
// enclosing circle shrunk to 80%, Telea inpaint (radius 10) of the circle
// exterior. No-op when the circle already covers >= 98% of the image.
std::pair<ImageGrid, CornerInfo> remove_dark_corner(const ImageGrid& img);

// Hair removal: 17x17 black-hat, binary threshold 10, Telea inpaint of the
// detected pixels.
struct HairRemovalResult {
  ImageGrid image;
  double hair_fraction = 0.0;
  seg::BinaryMask hair_mask;
};
HairRemovalResult remove_hair(const ImageGrid& img);

struct RegistrationResult {
  ImageGrid warped;                   // moving resampled onto the fixed frame
  imageops::Euclidean2D transform;    // maps fixed coords -> moving coords
  int inlier_count = 0;
  int match_count = 0;
  bool failed = false;                // < 3 RANSAC inliers
};

struct RansacParams {
  double residual_threshold = 3.0;  // px
  int max_trials = 2000;
  int min_samples = 2;
};

// AKAZE (descriptor size 0, threshold 9e-5, 4 octaves) + brute-force Hamming
// matching with cross-check + RANSAC rigid fit, least-squares refined on the
// inliers. Failure is a flagged identity result, not an exception.
RegistrationResult register_pair(const ImageGrid& fixed, const ImageGrid& moving,
                                 std::uint64_t seed = 0,
                                 const RansacParams& params = {});

// Pixels outside the 8 px-dilated mask are replaced by the median color of
// that exterior region. An empty mask passes through with the flag set.
struct FocusResult {
  ImageGrid image;
  bool empty_mask = false;
};
FocusResult focus_lesion(const ImageGrid& img, const seg::BinaryMask& mask,
                         int dilation_px = 8);

struct StageToggles {
  bool corner = true;
  bool hair = true;
  bool warp = true;
  bool mask = true;

  // parses "corner,hair,warp,mask" / arm names default|warp|mask|whole
  static StageToggles from_string(const std::string& spec);
  std::string to_string() const;
};

struct ImageStageReport {
  CornerInfo corner;
  double hair_fraction = 0.0;
};

struct PreprocessReport {
  ImageStageReport t0, t1;
  imageops::Euclidean2D transform;
  int inlier_count = 0;
  bool registration_failed = false;
  bool mask_skipped = false;  // mask stage on but no mask supplied / empty
};

struct PreprocessedPair {
  ImageGrid t0, t1;
  PreprocessReport report;
};

PreprocessedPair preprocess_pair(const ImageGrid& img_t0, const ImageGrid& img_t1,
                                 const StageToggles& stages,
                                 const seg::BinaryMask* mask_t0 = nullptr,
                                 const seg::BinaryMask* mask_t1 = nullptr,
                                 std::uint64_t seed = 0);

}  // namespace dermfoundry::seqprep
