#include "ccm/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <nlohmann/json.hpp>

#include "ccm/checkpoint.hpp"

namespace ccm {
namespace {

constexpr int S = kImageSize;

// Returns images as [B, 1, S, S] whatever the input rank.
int64_t image_batch(const Tensor& img, const char* what) {
  const Shape& s = img.shape();
  if (s.size() == 3 && s[0] == 1 && s[1] == S && s[2] == S) return 1;
  if (s.size() == 4 && s[1] == 1 && s[2] == S && s[3] == S) return s[0];
  throw ShapeError(std::string(what) + ": expected a 16x16 single-channel image, got " +
                   shape_str(s));
}

bool inside(ShapeClass cls, const ShapeParams& p, double x, double y) {
  const double dx = x - p.cx, dy = y - p.cy, r = p.size;
  switch (cls) {
    case ShapeClass::Circle:
      return dx * dx + dy * dy <= r * r;
    case ShapeClass::Square:
      return std::abs(dx) <= r && std::abs(dy) <= r;
    case ShapeClass::Triangle: {
      // Apex up at (cx, cy - r), base corners at (cx -+ r, cy + r).
      if (dy > r || dy < -r) return false;
      const double half = r * (dy + r) / (2 * r);
      return std::abs(dx) <= half;
    }
  }
  return false;
}

struct Sym2 {
  double xx, xy, yy;
  double det() const { return xx * yy - xy * xy; }
  Sym2 inv() const {
    const double d = det();
    return {yy / d, -xy / d, xx / d};
  }
  std::array<double, 2> mul(std::array<double, 2> v) const {
    return {xx * v[0] + xy * v[1], xy * v[0] + yy * v[1]};
  }
};

Sym2 perturbed_cov(const std::array<double, 3>& c, double a) {
  return {a * c[0] + (1 - a), a * c[1], a * c[2] + (1 - a)};
}

double log_normal(std::array<double, 2> x, std::array<double, 2> m, const Sym2& c) {
  const std::array<double, 2> d{x[0] - m[0], x[1] - m[1]};
  const auto q = c.inv().mul(d);
  return -0.5 * (d[0] * q[0] + d[1] * q[1]) - std::log(2 * std::acos(-1.0)) - 0.5 * std::log(c.det());
}

// Per-component log w_k N(x; sqrt(a) mu_k, C_k(a)).
std::vector<double> component_logs(const Gmm2D& g, std::array<double, 2> x, double a) {
  std::vector<double> out(g.weights.size());
  const double sa = std::sqrt(a);
  for (size_t k = 0; k < out.size(); ++k)
    out[k] = std::log(g.weights[k]) +
             log_normal(x, {sa * g.means[k][0], sa * g.means[k][1]}, perturbed_cov(g.covs[k], a));
  return out;
}

std::vector<double> responsibilities(const std::vector<double>& logs) {
  const double mx = *std::max_element(logs.begin(), logs.end());
  if (!std::isfinite(mx)) throw NumericError("GMM responsibilities are degenerate");
  std::vector<double> r(logs.size());
  double z = 0;
  for (size_t k = 0; k < logs.size(); ++k) z += r[k] = std::exp(logs[k] - mx);
  for (auto& v : r) v /= z;
  return r;
}

}  // namespace

const char* shape_class_name(int label) {
  static const char* names[] = {"circle", "square", "triangle"};
  if (label < 0 || label >= kShapeClasses) throw RangeError("shape label out of range");
  return names[label];
}

Tensor ShapesDataset::batch_images(std::span<const int64_t> idx) const {
  const int64_t inner = S * S;
  Tensor out({static_cast<int64_t>(idx.size()), 1, S, S});
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= size()) throw RangeError("dataset index out of range");
    std::copy_n(images.ptr() + idx[i] * inner, inner, out.ptr() + static_cast<int64_t>(i) * inner);
  }
  return out;
}

std::vector<int> ShapesDataset::batch_labels(std::span<const int64_t> idx) const {
  std::vector<int> out;
  out.reserve(idx.size());
  for (int64_t i : idx) out.push_back(labels.at(static_cast<size_t>(i)));
  return out;
}

Tensor render_shape(ShapeClass cls, const ShapeParams& p) {
  Tensor img({1, S, S});
  constexpr int ss = 4;
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      int hits = 0;
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx)
          hits += inside(cls, p, x + (sx + 0.5) / ss, y + (sy + 0.5) / ss);
      const double cov = hits / double(ss * ss);
      img[y * S + x] = static_cast<float>(-1.0 + cov * (p.intensity + 1.0));
    }
  return img;
}

ShapesDataset gen_shapes(uint64_t seed, int64_t n) {
  if (n < 1) throw ConfigError("dataset size must be at least 1");
  ShapesDataset ds;
  ds.seed = seed;
  ds.images = Tensor({n, 1, S, S});
  ds.labels.resize(static_cast<size_t>(n));
  Rng rng(seed);
  std::uniform_real_distribution<double> center(5.5, 10.5), size(3.0, 5.5), level(0.4, 1.0);
  for (int64_t i = 0; i < n; ++i) {
    const int label = static_cast<int>(i % kShapeClasses);
    ShapeParams p;
    p.cx = center(rng);
    p.cy = center(rng);
    p.size = size(rng);
    p.intensity = level(rng);
    const Tensor img = render_shape(static_cast<ShapeClass>(label), p);
    std::copy_n(img.ptr(), S * S, ds.images.ptr() + i * S * S);
    ds.labels[static_cast<size_t>(i)] = label;
  }
  return ds;
}

const char* condition_name(ConditionKind k) {
  switch (k) {
    case ConditionKind::Edge: return "edge";
    case ConditionKind::Lowres: return "lowres";
    case ConditionKind::Mask: return "mask";
  }
  return "?";
}

ConditionKind parse_condition(const std::string& name) {
  if (name == "edge") return ConditionKind::Edge;
  if (name == "lowres") return ConditionKind::Lowres;
  if (name == "mask") return ConditionKind::Mask;
  throw ConfigError("unknown condition '" + name + "' (expected edge, lowres, or mask)");
}

int condition_channels(ConditionKind k) { return k == ConditionKind::Mask ? 2 : 1; }

Tensor edge_condition(const Tensor& img) {
  const int64_t nb = image_batch(img, "edge_condition");
  // |Gx| and |Gy| are each at most 4 * 2 on [-1, 1] data.
  const double threshold = 0.25 * 8.0 * std::sqrt(2.0);
  Tensor out({nb, 1, S, S});
  std::vector<double> mag(S * S), gx(S * S), gy(S * S);
  for (int64_t b = 0; b < nb; ++b) {
    const float* p = img.ptr() + b * S * S;
    auto at = [p](int y, int x) {
      return static_cast<double>(p[std::clamp(y, 0, S - 1) * S + std::clamp(x, 0, S - 1)]);
    };
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const double sx = (at(y - 1, x + 1) + 2 * at(y, x + 1) + at(y + 1, x + 1)) -
                          (at(y - 1, x - 1) + 2 * at(y, x - 1) + at(y + 1, x - 1));
        const double sy = (at(y + 1, x - 1) + 2 * at(y + 1, x) + at(y + 1, x + 1)) -
                          (at(y - 1, x - 1) + 2 * at(y - 1, x) + at(y - 1, x + 1));
        gx[y * S + x] = sx;
        gy[y * S + x] = sy;
        mag[y * S + x] = std::hypot(sx, sy);
      }
    auto m = [&](int y, int x) { return (y < 0 || y >= S || x < 0 || x >= S) ? 0.0 : mag[y * S + x]; };
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const double v = mag[y * S + x];
        if (v < threshold) continue;
        // Quantize the gradient direction to one of four neighbor axes.
        const double ang = std::atan2(gy[y * S + x], gx[y * S + x]);
        const int sector = static_cast<int>(std::lround(ang / (std::acos(-1.0) / 4))) & 3;
        static const int dx[] = {1, 1, 0, -1}, dy[] = {0, 1, 1, 1};
        const double ahead = m(y + dy[sector], x + dx[sector]);
        const double behind = m(y - dy[sector], x - dx[sector]);
        // Ties go to the pixel on the positive side so a plateau yields one line.
        if (v >= ahead && v > behind) out[b * S * S + y * S + x] = 1.0f;
      }
  }
  return out;
}

Tensor lowres_condition(const Tensor& img) {
  const int64_t nb = image_batch(img, "lowres_condition");
  constexpr int f = 4;
  Tensor out({nb, 1, S, S});
  for (int64_t b = 0; b < nb; ++b) {
    const float* p = img.ptr() + b * S * S;
    float* o = out.ptr() + b * S * S;
    for (int by = 0; by < S / f; ++by)
      for (int bx = 0; bx < S / f; ++bx) {
        double acc = 0;
        for (int y = 0; y < f; ++y)
          for (int x = 0; x < f; ++x) acc += p[(by * f + y) * S + bx * f + x];
        const float mean = static_cast<float>(acc / (f * f));
        for (int y = 0; y < f; ++y)
          for (int x = 0; x < f; ++x) o[(by * f + y) * S + bx * f + x] = mean;
      }
  }
  return out;
}

MaskRect draw_mask_rect(Rng& rng) {
  constexpr int lo = 26, hi = 128;  // ceil(0.1 * 256), 0.5 * 256
  std::uniform_int_distribution<int> wd(2, S);
  for (;;) {
    const int w = wd(rng);
    const int hmin = (lo + w - 1) / w, hmax = std::min(S, hi / w);
    if (hmin > hmax) continue;
    const int h = std::uniform_int_distribution<int>(hmin, hmax)(rng);
    const int x0 = std::uniform_int_distribution<int>(0, S - w)(rng);
    const int y0 = std::uniform_int_distribution<int>(0, S - h)(rng);
    return {x0, y0, w, h};
  }
}

Tensor mask_condition(const Tensor& img, uint64_t seed) {
  const int64_t nb = image_batch(img, "mask_condition");
  Tensor out({nb, 2, S, S});
  for (int64_t b = 0; b < nb; ++b) {
    Rng rng(seed + static_cast<uint64_t>(b));
    const MaskRect r = draw_mask_rect(rng);
    const float* p = img.ptr() + b * S * S;
    float* c0 = out.ptr() + b * 2 * S * S;
    float* c1 = c0 + S * S;
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const bool masked = x >= r.x0 && x < r.x0 + r.w && y >= r.y0 && y < r.y0 + r.h;
        c0[y * S + x] = masked ? 0.0f : p[y * S + x];
        c1[y * S + x] = masked ? 1.0f : 0.0f;
      }
  }
  return out;
}

Tensor extract_condition(ConditionKind k, const Tensor& img, uint64_t seed) {
  Tensor out;
  switch (k) {
    case ConditionKind::Edge: out = edge_condition(img); break;
    case ConditionKind::Lowres: out = lowres_condition(img); break;
    case ConditionKind::Mask: out = mask_condition(img, seed); break;
  }
  if (out.dim(1) != condition_channels(k))
    throw StructuralError(std::string("extractor for ") + condition_name(k) +
                          " produced the wrong channel count");
  return out;
}

void Gmm2D::validate() const {
  if (weights.empty() || weights.size() != means.size() || weights.size() != covs.size())
    throw ConfigError("GMM component arrays must be non-empty and equally long");
  double z = 0;
  for (double w : weights) {
    if (!(w > 0)) throw ConfigError("GMM weights must be positive");
    z += w;
  }
  if (std::abs(z - 1.0) > 1e-9) throw ConfigError("GMM weights must sum to 1");
  for (const auto& c : covs)
    if (!(c[0] > 0 && c[2] > 0 && c[0] * c[2] - c[1] * c[1] > 0))
      throw ConfigError("GMM covariance must be positive definite");
}

Tensor64 Gmm2D::sample(int64_t n, Rng& rng) const {
  validate();
  std::discrete_distribution<int> pick(weights.begin(), weights.end());
  std::normal_distribution<double> z(0.0, 1.0);
  Tensor64 out({n, 2});
  for (int64_t i = 0; i < n; ++i) {
    const auto k = static_cast<size_t>(pick(rng));
    const auto& c = covs[k];
    const double l00 = std::sqrt(c[0]), l10 = c[1] / l00, l11 = std::sqrt(c[2] - l10 * l10);
    const double z0 = z(rng), z1 = z(rng);
    out[2 * i] = means[k][0] + l00 * z0;
    out[2 * i + 1] = means[k][1] + l10 * z0 + l11 * z1;
  }
  return out;
}

double Gmm2D::log_density(std::array<double, 2> x, int t, const NoiseSchedule& s) const {
  const auto logs = component_logs(*this, x, s.alpha_bar(t));
  const double mx = *std::max_element(logs.begin(), logs.end());
  if (!std::isfinite(mx)) throw NumericError("GMM log-density is degenerate");
  double z = 0;
  for (double l : logs) z += std::exp(l - mx);
  return mx + std::log(z);
}

Tensor64 Gmm2D::sample_posterior(std::array<double, 2> xt, int t, const NoiseSchedule& s,
                                 int64_t n, Rng& rng) const {
  const double a = s.alpha_bar(t);
  if (!(a < 1.0)) throw NumericError("posterior at t_0 is a point mass");
  const auto r = responsibilities(component_logs(*this, xt, a));
  const double lam = a / (1 - a), sa = std::sqrt(a);
  struct Post {
    std::array<double, 2> mean;
    double l00, l10, l11;
  };
  std::vector<Post> post;
  for (size_t k = 0; k < weights.size(); ++k) {
    const Sym2 prec0 = Sym2{covs[k][0], covs[k][1], covs[k][2]}.inv();
    const Sym2 prec{prec0.xx + lam, prec0.xy, prec0.yy + lam};
    const Sym2 cov = prec.inv();
    const auto pm = prec0.mul(means[k]);
    const std::array<double, 2> rhs{pm[0] + sa / (1 - a) * xt[0], pm[1] + sa / (1 - a) * xt[1]};
    Post p;
    p.mean = cov.mul(rhs);
    p.l00 = std::sqrt(cov.xx);
    p.l10 = cov.xy / p.l00;
    p.l11 = std::sqrt(cov.yy - p.l10 * p.l10);
    post.push_back(p);
  }
  std::discrete_distribution<int> pick(r.begin(), r.end());
  std::normal_distribution<double> z(0.0, 1.0);
  Tensor64 out({n, 2});
  for (int64_t i = 0; i < n; ++i) {
    const auto& p = post[static_cast<size_t>(pick(rng))];
    const double z0 = z(rng), z1 = z(rng);
    out[2 * i] = p.mean[0] + p.l00 * z0;
    out[2 * i + 1] = p.mean[1] + p.l10 * z0 + p.l11 * z1;
  }
  return out;
}

Gmm2D default_gmm() {
  Gmm2D g;
  g.weights = {0.4, 0.6};
  g.means = {{{-1.2, 0.6}}, {{1.0, -0.5}}};
  g.covs = {{{0.08, 0.02, 0.05}}, {{0.05, -0.01, 0.10}}};
  return g;
}

std::array<double, 2> gmm_score(const Gmm2D& g, std::array<double, 2> x, int t,
                                const NoiseSchedule& s) {
  if (t <= 0) throw RangeError("gmm_score requires t > 0");
  g.validate();
  const double a = s.alpha_bar(t), sa = std::sqrt(a);
  const auto r = responsibilities(component_logs(g, x, a));
  std::array<double, 2> out{0, 0};
  for (size_t k = 0; k < r.size(); ++k) {
    const auto q = perturbed_cov(g.covs[k], a).inv().mul({x[0] - sa * g.means[k][0], x[1] - sa * g.means[k][1]});
    out[0] -= r[k] * q[0];
    out[1] -= r[k] * q[1];
  }
  return out;
}

void save_dataset(const std::filesystem::path& dir, const std::string& split,
                  const ShapesDataset& ds) {
  std::filesystem::create_directories(dir);
  TensorMap m;
  m["images"] = ds.images;
  Tensor labels({ds.size()});
  for (int64_t i = 0; i < ds.size(); ++i) labels[i] = static_cast<float>(ds.labels[static_cast<size_t>(i)]);
  m["labels"] = labels;
  save_checkpoint(dir / (split + ".ckpt"), m);
  nlohmann::json j;
  j["seed"] = ds.seed;
  j["n"] = ds.size();
  j["classes"] = {"circle", "square", "triangle"};
  std::ofstream(dir / (split + ".json")) << j.dump(2) << '\n';
}

ShapesDataset load_dataset(const std::filesystem::path& dir, const std::string& split) {
  auto m = load_checkpoint(dir / (split + ".ckpt"));
  std::ifstream side(dir / (split + ".json"));
  if (!side) throw MissingArtifact((dir / (split + ".json")).string());
  nlohmann::json j;
  try {
    side >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("dataset sidecar: ") + e.what());
  }
  if (!m.count("images") || !m.count("labels")) throw IoError("dataset file lacks images/labels");
  ShapesDataset ds;
  ds.seed = j.at("seed").get<uint64_t>();
  ds.images = m.at("images");
  for (float v : m.at("labels").data()) ds.labels.push_back(static_cast<int>(v));
  if (ds.images.rank() != 4 || ds.images.dim(0) != ds.size()) throw IoError("dataset shape mismatch");
  return ds;
}

}  // namespace ccm
