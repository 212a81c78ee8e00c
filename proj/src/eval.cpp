#include "ccm/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace ccm {

double w2_1d(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw UsageError("W2 of an empty sample set");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const size_t n = a.size(), m = b.size();
  double acc = 0.0;
  if (n == m) {
    for (size_t i = 0; i < n; ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(acc / static_cast<double>(n));
  }
  // Walk the merged breakpoints i/n and j/m of both quantile functions.
  size_t i = 0, j = 0;
  double u = 0.0;
  while (i < n && j < m) {
    const double ua = static_cast<double>(i + 1) / static_cast<double>(n);
    const double ub = static_cast<double>(j + 1) / static_cast<double>(m);
    const double next = std::min(ua, ub);
    const double d = a[i] - b[j];
    acc += (next - u) * d * d;
    u = next;
    if (ua <= next) ++i;
    if (ub <= next) ++j;
  }
  return std::sqrt(acc);
}

std::vector<std::vector<double>> draw_directions(int64_t dim, int n_proj, Rng& rng) {
  if (n_proj < 1) throw UsageError("sliced W2 needs at least one projection");
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<std::vector<double>> dirs;
  for (int p = 0; p < n_proj; ++p) {
    std::vector<double> u(static_cast<size_t>(dim));
    double norm = 0.0;
    do {
      norm = 0.0;
      for (auto& v : u) {
        v = nd(rng);
        norm += v * v;
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (auto& v : u) v /= norm;
    dirs.push_back(std::move(u));
  }
  return dirs;
}

template <class T>
double sliced_w2(const BasicTensor<T>& a, const BasicTensor<T>& b, int n_proj, Rng& rng) {
  if (a.rank() == 0 || b.rank() == 0 || a.dim(0) == 0 || b.dim(0) == 0)
    throw UsageError("sliced W2 of an empty sample set");
  const int64_t da = a.numel() / a.dim(0), db = b.numel() / b.dim(0);
  if (da != db) throw ShapeError("sliced W2: sample dimensionality differs");
  const auto dirs = draw_directions(da, n_proj, rng);
  auto project = [da](const BasicTensor<T>& x, const std::vector<double>& u) {
    std::vector<double> out(static_cast<size_t>(x.dim(0)));
    for (int64_t i = 0; i < x.dim(0); ++i) {
      double s = 0.0;
      const T* row = x.ptr() + i * da;
      for (int64_t j = 0; j < da; ++j) s += u[static_cast<size_t>(j)] * static_cast<double>(row[j]);
      out[static_cast<size_t>(i)] = s;
    }
    return out;
  };
  double total = 0.0;
  for (const auto& u : dirs) total += w2_1d(project(a, u), project(b, u));
  return total / static_cast<double>(n_proj);
}

double binary_iou(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("IoU: map sizes differ");
  int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    const bool x = a[i] > 0.5f, y = b[i] > 0.5f;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<double> edge_iou(const Tensor& cond_edges, const Tensor& generated) {
  const Tensor ge = edge_condition(generated);
  if (ge.shape() != cond_edges.shape()) throw ShapeError("edge IoU: condition shape mismatch");
  const int64_t nb = ge.dim(0), inner = ge.numel() / nb;
  std::vector<double> out;
  for (int64_t b = 0; b < nb; ++b)
    out.push_back(binary_iou(cond_edges.data().subspan(static_cast<size_t>(b * inner), static_cast<size_t>(inner)),
                             ge.data().subspan(static_cast<size_t>(b * inner), static_cast<size_t>(inner))));
  return out;
}

std::vector<double> outside_mask_psnr(const Tensor& original, const Tensor& generated,
                                      const Tensor& mask) {
  if (original.shape() != generated.shape() || original.numel() != mask.numel())
    throw ShapeError("outside-mask PSNR: shapes differ");
  const int64_t nb = original.dim(0), inner = original.numel() / nb;
  std::vector<double> out;
  for (int64_t b = 0; b < nb; ++b) {
    double se = 0.0;
    int64_t count = 0;
    for (int64_t i = b * inner; i < (b + 1) * inner; ++i) {
      if (mask[i] != 0.0f) continue;
      const double d = static_cast<double>(original[i]) - generated[i];
      se += d * d;
      ++count;
    }
    if (count == 0) throw UsageError("outside-mask PSNR: the mask covers the whole image");
    const double mse = se / static_cast<double>(count);
    out.push_back(mse == 0.0 ? kPsnrCap
                             : std::min(kPsnrCap, 10.0 * std::log10(kPsnrPeak * kPsnrPeak / mse)));
  }
  return out;
}

std::vector<double> lowres_mse(const Tensor& cond_lowres, const Tensor& generated) {
  const Tensor gl = lowres_condition(generated);
  if (gl.shape() != cond_lowres.shape()) throw ShapeError("lowres MSE: condition shape mismatch");
  const int64_t nb = gl.dim(0), inner = gl.numel() / nb;
  std::vector<double> out;
  for (int64_t b = 0; b < nb; ++b) {
    double se = 0.0;
    for (int64_t i = b * inner; i < (b + 1) * inner; ++i) {
      const double d = static_cast<double>(gl[i]) - cond_lowres[i];
      se += d * d;
    }
    out.push_back(se / static_cast<double>(inner));
  }
  return out;
}

double self_consistency(const ConsistencyFunction& f, const Batch& batch, const CtDraw& draw) {
  NoGradGuard ng;
  return ct_loss(f, f, batch, draw, ConsistencyLoss{}).value()[0];
}

double class_consistency(const Tensor& samples, std::span<const int> labels,
                         const ShapesDataset& reference, int k) {
  const int64_t nb = samples.dim(0), d = samples.numel() / nb, nr = reference.size();
  if (static_cast<int64_t>(labels.size()) != nb) throw ShapeError("class consistency: label count");
  if (nr < k) throw UsageError("class consistency: reference set smaller than k");
  int64_t hits = 0;
  std::vector<std::pair<double, int>> dist(static_cast<size_t>(nr));
  for (int64_t i = 0; i < nb; ++i) {
    const float* x = samples.ptr() + i * d;
    for (int64_t r = 0; r < nr; ++r) {
      const float* y = reference.images.ptr() + r * d;
      double s = 0.0;
      for (int64_t j = 0; j < d; ++j) s += (static_cast<double>(x[j]) - y[j]) * (static_cast<double>(x[j]) - y[j]);
      dist[static_cast<size_t>(r)] = {s, reference.labels[static_cast<size_t>(r)]};
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    std::map<int, int> votes;
    for (int j = 0; j < k; ++j) ++votes[dist[static_cast<size_t>(j)].second];
    int best = -1, best_n = 0;
    for (auto [lab, n] : votes)
      if (n > best_n) best = lab, best_n = n;
    hits += best == labels[static_cast<size_t>(i)];
  }
  return static_cast<double>(hits) / static_cast<double>(nb);
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) throw UsageError("mean of an empty list");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

std::string metrics_csv(const std::vector<MetricsRecord>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << kMetricsHeader << '\n';
  auto opt = [&os](const std::optional<double>& v) {
    os << ',';
    if (v) {
      if (!std::isfinite(*v)) throw NumericError("non-finite metric value");
      os << *v;
    }
  };
  for (const auto& r : rows) {
    if (r.nfes < 1) throw UsageError("metrics record needs nfes >= 1");
    os << r.run_id << ',' << r.strategy << ',' << r.condition << ',' << r.nfes << ',' << r.seed;
    opt(r.sw2);
    opt(r.edge_iou);
    opt(r.outside_mask_psnr);
    opt(r.lowres_mse);
    opt(r.self_consistency);
    os << '\n';
  }
  return os.str();
}

void write_metrics_csv(const std::filesystem::path& path, const std::vector<MetricsRecord>& rows) {
  const auto text = metrics_csv(rows);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
}

template double sliced_w2(const Tensor&, const Tensor&, int, Rng&);
template double sliced_w2(const Tensor64&, const Tensor64&, int, Rng&);

}  // namespace ccm
