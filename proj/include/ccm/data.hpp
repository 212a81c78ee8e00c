#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include "ccm/random.hpp"
#include "ccm/schedule.hpp"
#include "ccm/tensor.hpp"

namespace ccm {

// ---- shapes ---------------------------------------------------------------

enum class ShapeClass { Circle = 0, Square = 1, Triangle = 2 };
inline constexpr int kShapeClasses = 3;
inline constexpr int kImageSize = 16;
const char* shape_class_name(int label);

struct ShapesDataset {
  uint64_t seed = 0;
  Tensor images;            // [n, 1, 16, 16], values in [-1, 1], background -1
  std::vector<int> labels;  // round-robin circle, square, triangle

  int64_t size() const { return static_cast<int64_t>(labels.size()); }
  // Rows selected by idx, in that order.
  Tensor batch_images(std::span<const int64_t> idx) const;
  std::vector<int> batch_labels(std::span<const int64_t> idx) const;
};

struct ShapeParams {
  double cx, cy;      // center in pixel coordinates (pixel centers at i + 0.5)
  double size;        // radius or half-width
  double intensity;   // foreground value in [0, 1]
};

// Anti-aliased render: each pixel blends background -1 toward intensity by
// its 4x4-supersampled coverage.
Tensor render_shape(ShapeClass cls, const ShapeParams& p);

ShapesDataset gen_shapes(uint64_t seed, int64_t n);

// ---- conditions -------------------------------------------------------------

enum class ConditionKind { Edge = 0, Lowres = 1, Mask = 2 };
inline constexpr int kConditionKinds = 3;

const char* condition_name(ConditionKind k);
ConditionKind parse_condition(const std::string& name);
int condition_channels(ConditionKind k);

// All extractors take [B, 1, 16, 16] (or [1, 16, 16]) and return
// [B, C, 16, 16].
// Sobel magnitude, thinned by non-maximum suppression along the quantized
// gradient direction, thresholded at 0.25 of the largest possible magnitude.
Tensor edge_condition(const Tensor& img);
// 4x4 box mean presented at 16x16 by nearest-neighbor upsampling.
Tensor lowres_condition(const Tensor& img);
// Channel 0: image with a random rectangle (10-50% of the area) set to 0;
// channel 1: the rectangle as a 0/1 mask. Sample b uses a stream seeded by
// seed + b, so the result is a pure function of (img, seed).
Tensor mask_condition(const Tensor& img, uint64_t seed);

struct MaskRect {
  int x0, y0, w, h;
};
MaskRect draw_mask_rect(Rng& rng);

// Dispatch by kind; the output channel count is checked against the spec.
Tensor extract_condition(ConditionKind k, const Tensor& img, uint64_t seed);

// ---- 2D Gaussian mixture -----------------------------------------------------

struct Gmm2D {
  std::vector<double> weights;
  std::vector<std::array<double, 2>> means;
  std::vector<std::array<double, 3>> covs;  // (xx, xy, yy)

  void validate() const;
  Tensor64 sample(int64_t n, Rng& rng) const;  // [n, 2]

  // log p_t and its gradient for the VP-perturbed mixture; t = 0 gives the data density.
  double log_density(std::array<double, 2> x, int t, const NoiseSchedule& s) const;
  // Draws from p(x_0 | x_t), itself a Gaussian mixture.
  Tensor64 sample_posterior(std::array<double, 2> xt, int t, const NoiseSchedule& s, int64_t n,
                            Rng& rng) const;
};

Gmm2D default_gmm();

// Analytic score of the perturbed mixture at (x, t), computed with
// log-sum-exp responsibilities. Requires t > 0.
std::array<double, 2> gmm_score(const Gmm2D& g, std::array<double, 2> x, int t,
                                const NoiseSchedule& s);

// ---- dumps ---------------------------------------------------------------------

// <dir>/<split>.ckpt holds "images" and "labels"; <dir>/<split>.json holds
// {seed, n, classes}.
void save_dataset(const std::filesystem::path& dir, const std::string& split,
                  const ShapesDataset& ds);
ShapesDataset load_dataset(const std::filesystem::path& dir, const std::string& split);

}  // namespace ccm
