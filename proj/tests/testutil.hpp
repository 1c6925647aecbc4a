#pragma once

// Shared test fixtures and independent oracles. Everything here is
// implementation-independent on purpose: the finite-difference checker and
// the synthetic data builders are the reference the library is tested
// against, so they must not call into the code paths they validate.

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dermfoundry/core.hpp"
#include "dermfoundry/rng.hpp"
#include "dermfoundry/tensor.hpp"

namespace testutil {

using dermfoundry::ImageGrid;
using dermfoundry::Rng;

// Central finite differences against analytic gradients on `n_samples`
// randomly chosen parameter scalars. `forward` must rebuild the graph and
// return the scalar loss. Returns the max relative error observed.
// The step balances truncation against cancellation: losses are O(1), so
// h ~ 1e-4 keeps both error sources below ~1e-3 even for small gradients.
inline double finite_diff_max_rel_err(
    dermfoundry::nn::ParamStore& store,
    const std::function<dermfoundry::nn::Var()>& forward, int n_samples,
    Rng& rng, double h = 1e-4) {
  using dermfoundry::nn::backward;

  store.zero_grad();
  backward(forward());
  // snapshot analytic grads
  std::vector<std::vector<double>> analytic;
  for (const auto& p : store.params()) analytic.push_back(p->grad.data);

  double max_rel = 0.0;
  for (int s = 0; s < n_samples; ++s) {
    const std::size_t pi = rng.index(store.params().size());
    auto& p = store.params()[pi];
    if (p->value.size() == 0) continue;
    const std::size_t ei = rng.index(static_cast<std::size_t>(p->value.size()));
    const double orig = p->value.data[ei];
    const double step = h * std::max(1.0, std::fabs(orig));

    p->value.data[ei] = orig + step;
    const double lp = forward()->value(0, 0);
    p->value.data[ei] = orig - step;
    const double lm = forward()->value(0, 0);
    p->value.data[ei] = orig;

    const double fd = (lp - lm) / (2.0 * step);
    const double an = analytic[pi][ei];
    const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-8});
    max_rel = std::max(max_rel, std::fabs(fd - an) / denom);
  }
  return max_rel;
}

// Temporary directory unique to a test, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    dir_ = std::filesystem::temp_directory_path() /
           ("dermfoundry_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::remove_all(dir_);
    std::filesystem::create_directories(dir_);
  }
  ~TempDir() { std::filesystem::remove_all(dir_); }
  std::string path() const { return dir_.string(); }
  std::string file(const std::string& name) const { return (dir_ / name).string(); }

 private:
  std::filesystem::path dir_;
};

// Noise image with a few random smooth blobs; enough texture for keypoint
// detectors and encoders to latch onto.
inline ImageGrid textured_image(int side, Rng& rng, int blobs = 12) {
  ImageGrid img(3, side, side, 0.0);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x)
        img.at(c, y, x) = 0.35 + 0.08 * rng.uniform();
  for (int b = 0; b < blobs; ++b) {
    const double cx = rng.uniform(0.15, 0.85) * side;
    const double cy = rng.uniform(0.15, 0.85) * side;
    const double r = rng.uniform(0.03, 0.12) * side;
    const double amp[3] = {rng.uniform(-0.3, 0.45), rng.uniform(-0.3, 0.45),
                           rng.uniform(-0.3, 0.45)};
    const int y0 = std::max(0, static_cast<int>(cy - 2 * r));
    const int y1 = std::min(side - 1, static_cast<int>(cy + 2 * r));
    const int x0 = std::max(0, static_cast<int>(cx - 2 * r));
    const int x1 = std::min(side - 1, static_cast<int>(cx + 2 * r));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double d2 = ((x - cx) * (x - cx) + (y - cy) * (y - cy)) / (r * r);
        const double w = std::exp(-d2);
        for (int c = 0; c < 3; ++c) {
          double& v = img.at(c, y, x);
          v = std::clamp(v + amp[c] * w, 0.0, 1.0);
        }
      }
  }
  return img;
}

// Disk stamped into an image; used by seg / change-detection fixtures.
inline void stamp_disk(ImageGrid& img, double cx, double cy, double r,
                       const double* rgb) {
  const int y0 = std::max(0, static_cast<int>(cy - r - 1));
  const int y1 = std::min(img.height - 1, static_cast<int>(cy + r + 1));
  const int x0 = std::max(0, static_cast<int>(cx - r - 1));
  const int x1 = std::min(img.width - 1, static_cast<int>(cx + r + 1));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r)
        for (int c = 0; c < img.channels; ++c) img.at(c, y, x) = rgb[c];
}

}  // namespace testutil
