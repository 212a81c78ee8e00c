#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "ccm/consistency.hpp"
#include "ccm/data.hpp"

namespace ccm {

// Exact 1D 2-Wasserstein distance between two empirical distributions, by
// integrating the squared difference of their quantile functions. Sizes may
// differ.
double w2_1d(std::vector<double> a, std::vector<double> b);

// Mean over n_proj random unit directions of the 1D W2 distance between the
// projected sets. Rows are samples; trailing dims are flattened.
template <class T>
double sliced_w2(const BasicTensor<T>& a, const BasicTensor<T>& b, int n_proj, Rng& rng);

// The projections sliced_w2 would draw, as n_proj unit rows of length dim.
std::vector<std::vector<double>> draw_directions(int64_t dim, int n_proj, Rng& rng);

// IoU of two binary maps; empty vs empty is 1.
double binary_iou(std::span<const float> a, std::span<const float> b);

// Per-sample IoU between a condition edge map and the edges of the generated
// image.
std::vector<double> edge_iou(const Tensor& cond_edges, const Tensor& generated);

inline constexpr double kPsnrCap = 99.0;
inline constexpr double kPsnrPeak = 2.0;

// Per-sample PSNR over pixels with mask == 0, peak 2, capped at 99 dB. A
// sample whose mask covers everything throws UsageError.
std::vector<double> outside_mask_psnr(const Tensor& original, const Tensor& generated,
                                      const Tensor& mask);

// Per-sample MSE between the low-resolution condition and the low-resolution
// view of the generated image.
std::vector<double> lowres_mse(const Tensor& cond_lowres, const Tensor& generated);

// The CT objective (l1, unit weights) evaluated without gradients.
double self_consistency(const ConsistencyFunction& f, const Batch& batch, const CtDraw& draw);

// Fraction of samples whose k-nearest-neighbour vote over the reference set
// matches the intended label.
double class_consistency(const Tensor& samples, std::span<const int> labels,
                         const ShapesDataset& reference, int k = 5);

double mean_of(const std::vector<double>& v);

struct MetricsRecord {
  std::string run_id, strategy, condition;
  int nfes = 1;
  uint64_t seed = 0;
  std::optional<double> sw2, edge_iou, outside_mask_psnr, lowres_mse, self_consistency;
};

inline constexpr const char* kMetricsHeader =
    "run_id,strategy,condition,nfes,seed,sw2,edge_iou,outside_mask_psnr,lowres_mse,"
    "self_consistency";

// Missing metrics become empty fields. Values print with 17 significant
// digits so reruns compare byte for byte.
std::string metrics_csv(const std::vector<MetricsRecord>& rows);
void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& rows);

}  // namespace ccm
