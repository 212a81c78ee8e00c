#include "ccm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include <malloc.h>

#include <Eigen/Core>

#include "ccm/parallel.hpp"

namespace ccm {
namespace {

template <class T>
using NodePtr = std::shared_ptr<Node<T>>;

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

// Row-major C = alpha * op(A) * op(B) + beta * C, with cblas argument conventions.
template <class T>
void gemm(bool ta, bool tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b, int ldb,
          T beta, T* c, int ldc) {
  Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>> cm(c, m, n, Eigen::OuterStride<>(ldc));
  ConstMap<T> am(a, ta ? k : m, ta ? m : k, Eigen::OuterStride<>(lda));
  ConstMap<T> bm(b, tb ? n : k, tb ? k : n, Eigen::OuterStride<>(ldb));
  if (beta == T{0})
    cm.setZero();
  else if (beta != T{1})
    cm *= beta;
  if (ta && tb)
    cm.noalias() += alpha * am.transpose() * bm.transpose();
  else if (ta)
    cm.noalias() += alpha * am.transpose() * bm;
  else if (tb)
    cm.noalias() += alpha * am * bm.transpose();
  else
    cm.noalias() += alpha * am * bm;
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_rank(const Shape& s, size_t r, const char* op) {
  if (s.size() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_str(s));
}

// Per-thread reusable buffer; contents are unspecified on return.
template <class T>
std::vector<T>& scratch(size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

// Keep freed activation memory in the heap instead of returning it to the OS
// after every op; large fresh mappings otherwise dominate step time.
const bool g_heap_tuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();

// Reductions use eight fixed lanes so the summation order depends only on n,
// never on pointer alignment.
template <class T, class F>
double lane_sum(int64_t n, F&& term) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int64_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (int j = 0; j < 8; ++j) acc[j] += static_cast<double>(term(i + j));
  for (; i < n; ++i) acc[0] += static_cast<double>(term(i));
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

int64_t per_sample(const Shape& s) { return s.empty() || s[0] == 0 ? 0 : shape_numel(s) / s[0]; }

// Batch reductions sum per-sample partials in sorted order, so reordering the
// batch cannot change a loss value.
double sorted_sum(std::vector<double> parts) {
  std::sort(parts.begin(), parts.end());
  double acc = 0.0;
  for (double p : parts) acc += p;
  return acc;
}

template <class T, class F>
double batch_sum(const Shape& shape, int64_t numel, F&& term) {
  const int64_t rows = shape.empty() || shape[0] == 0 ? 1 : shape[0];
  const int64_t inner = numel / rows;
  std::vector<double> parts(static_cast<size_t>(rows));
  for (int64_t r = 0; r < rows; ++r)
    parts[static_cast<size_t>(r)] = lane_sum<T>(inner, [&](int64_t j) { return term(r * inner + j); });
  return sorted_sum(std::move(parts));
}

template <class T>
void im2col(const T* x, int ci, int h, int w, int k, int pad, T* col) {
  const int p = h * w;
  for (int c = 0; c < ci; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + static_cast<int64_t>((c * k + ky) * k + kx) * p;
        const T* plane = x + static_cast<int64_t>(c) * p;
        const int x0 = std::max(0, pad - kx), x1 = std::min(w, w + pad - kx);
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          T* dst = row + y * w;
          if (sy < 0 || sy >= h) {
            std::fill(dst, dst + w, T{0});
            continue;
          }
          std::fill(dst, dst + x0, T{0});
          std::copy(plane + sy * w + x0 + kx - pad, plane + sy * w + x1 + kx - pad, dst + x0);
          std::fill(dst + x1, dst + w, T{0});
        }
      }
}

template <class T>
void col2im(const T* col, int ci, int h, int w, int k, int pad, T* x) {
  const int p = h * w;
  for (int c = 0; c < ci; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + static_cast<int64_t>((c * k + ky) * k + kx) * p;
        T* plane = x + static_cast<int64_t>(c) * p;
        const int x0 = std::max(0, pad - kx), x1 = std::min(w, w + pad - kx);
        for (int y = 0; y < h; ++y) {
          const int sy = y + ky - pad;
          if (sy < 0 || sy >= h) continue;
          T* dst = plane + sy * w + kx - pad;
          const T* src = row + y * w;
          for (int xx = x0; xx < x1; ++xx) dst[xx] += src[xx];
        }
      }
}

}  // namespace

template <class T>
BasicVar<T> add(const BasicVar<T>& a, const BasicVar<T>& b) {
  require_same(a.shape(), b.shape(), "add");
  BasicTensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] + b.value()[i];
  return make_result<T>(std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    for (auto& in : self.inputs)
      if (in->requires_grad) in->accumulate(self.grad);
  });
}

template <class T>
BasicVar<T> sub(const BasicVar<T>& a, const BasicVar<T>& b) {
  require_same(a.shape(), b.shape(), "sub");
  BasicTensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] - b.value()[i];
  return make_result<T>(std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    if (self.inputs[0]->requires_grad) self.inputs[0]->accumulate(self.grad);
    if (self.inputs[1]->requires_grad) {
      auto& g = self.inputs[1]->grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <class T>
BasicVar<T> mul(const BasicVar<T>& a, const BasicVar<T>& b) {
  require_same(a.shape(), b.shape(), "mul");
  BasicTensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * b.value()[i];
  return make_result<T>(std::move(out), {a.node(), b.node()}, [](Node<T>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    if (x.requires_grad) {
      auto& g = x.grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * y.value[i];
    }
    if (y.requires_grad) {
      auto& g = y.grad_buffer();
      for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * x.value[i];
    }
  });
}

template <class T>
BasicVar<T> scale(const BasicVar<T>& a, T s) {
  BasicTensor<T> out(a.shape());
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = a.value()[i] * s;
  return make_result<T>(std::move(out), {a.node()}, [s](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * s;
  });
}

template <class T>
BasicVar<T> silu(const BasicVar<T>& a) {
  const int64_t n = a.numel();
  auto sig = std::make_shared<BasicTensor<T>>(a.shape());
  BasicTensor<T> out(a.shape());
  const T* x = a.value().ptr();
  T* sg = sig->ptr();
  T* o = out.ptr();
  // Fixed-size aligned blocks: every element goes through the same packet
  // path, so the result never depends on where the buffers were allocated.
  constexpr int64_t kBlock = 64;
  alignas(64) Eigen::Array<T, kBlock, 1> buf;
  for (int64_t i = 0; i < n; i += kBlock) {
    const int64_t len = std::min(kBlock, n - i);
    buf.setZero();
    for (int64_t j = 0; j < len; ++j) buf[j] = -x[i + j];
    buf = T{1} / (T{1} + buf.exp());
    for (int64_t j = 0; j < len; ++j) {
      sg[i + j] = buf[j];
      o[i + j] = x[i + j] * buf[j];
    }
  }
  return make_result<T>(std::move(out), {a.node()}, [sig, n](Node<T>& self) {
    auto& in = *self.inputs[0];
    T* g = in.grad_buffer().ptr();
    const T* s = sig->ptr();
    const T* xv = in.value.ptr();
    const T* dy = self.grad.ptr();
    for (int64_t i = 0; i < n; ++i) g[i] += dy[i] * s[i] * (T{1} + xv[i] * (T{1} - s[i]));
  });
}

template <class T>
BasicVar<T> reshape(const BasicVar<T>& a, Shape s) {
  BasicTensor<T> out = a.value().reshaped(std::move(s));
  return make_result<T>(std::move(out), {a.node()}, [](Node<T>& self) {
    auto& in = *self.inputs[0];
    in.accumulate(self.grad.reshaped(in.value.shape()));
  });
}

template <class T>
BasicVar<T> mul_per_sample(const BasicVar<T>& x, std::span<const T> coef) {
  const int64_t b = x.dim(0), inner = per_sample(x.shape());
  if (static_cast<int64_t>(coef.size()) != b)
    throw ShapeError("mul_per_sample: coefficient count does not match batch");
  std::vector<T> c(coef.begin(), coef.end());
  BasicTensor<T> out(x.shape());
  for (int64_t i = 0; i < b; ++i)
    for (int64_t j = 0; j < inner; ++j) out[i * inner + j] = c[i] * x.value()[i * inner + j];
  return make_result<T>(std::move(out), {x.node()}, [c, b, inner](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int64_t i = 0; i < b; ++i)
      for (int64_t j = 0; j < inner; ++j) g[i * inner + j] += c[i] * self.grad[i * inner + j];
  });
}

template <class T>
BasicVar<T> conv2d(const BasicVar<T>& x, const BasicVar<T>& w, const BasicVar<T>& bias, int pad) {
  require_rank(x.shape(), 4, "conv2d input");
  require_rank(w.shape(), 4, "conv2d weight");
  const int nb = static_cast<int>(x.dim(0)), ci = static_cast<int>(x.dim(1));
  const int h = static_cast<int>(x.dim(2)), wd = static_cast<int>(x.dim(3));
  const int co = static_cast<int>(w.dim(0)), k = static_cast<int>(w.dim(2));
  if (w.dim(1) != ci || w.dim(3) != k)
    throw ShapeError("conv2d: weight " + shape_str(w.shape()) + " incompatible with input " +
                     shape_str(x.shape()));
  if (bias.numel() != co) throw ShapeError("conv2d: bias length mismatch");
  if (2 * pad != k - 1) throw ShapeError("conv2d: only same-size padding is supported");
  const int p = h * wd, kk = ci * k * k;
  // 1x1 kernels use the input directly as the column matrix. Otherwise the
  // column matrix is built per sample in scratch and rebuilt in backward.
  const bool direct = (k == 1);

  BasicTensor<T> out({nb, co, h, wd});
  parallel_for(nb, [&](int64_t b0, int64_t b1) {
    std::vector<T>& col = scratch<T>(direct ? 0 : static_cast<size_t>(kk) * p);
    for (int64_t b = b0; b < b1; ++b) {
      const T* xb = x.value().ptr() + b * ci * p;
      if (!direct) im2col(xb, ci, h, wd, k, pad, col.data());
      T* y = out.ptr() + b * co * p;
      for (int o = 0; o < co; ++o) std::fill(y + o * p, y + (o + 1) * p, bias.value()[o]);
      gemm(false, false, co, p, kk, T{1}, w.value().ptr(), kk, direct ? xb : col.data(), p, T{1}, y,
           p);
    }
  });

  return make_result<T>(
      std::move(out), {x.node(), w.node(), bias.node()},
      [direct, nb, ci, h, wd, co, k, pad, p, kk](Node<T>& self) {
        auto& xin = *self.inputs[0];
        auto& win = *self.inputs[1];
        auto& bin = *self.inputs[2];
        const T* dy = self.grad.ptr();
        if (win.requires_grad) {
          auto& gw = win.grad_buffer();
          std::vector<T>& col = scratch<T>(direct ? 0 : static_cast<size_t>(kk) * p);
          // Fixed sample order keeps the weight gradient reduction deterministic.
          for (int64_t b = 0; b < nb; ++b) {
            const T* xb = xin.value.ptr() + b * ci * p;
            if (!direct) im2col(xb, ci, h, wd, k, pad, col.data());
            gemm(false, true, co, kk, p, T{1}, dy + b * co * p, p, direct ? xb : col.data(), p, T{1},
                 gw.ptr(), kk);
          }
        }
        if (bin.requires_grad) {
          auto& gb = bin.grad_buffer();
          for (int64_t b = 0; b < nb; ++b)
            for (int o = 0; o < co; ++o) {
              T acc{0};
              const T* row = dy + (b * co + o) * p;
              for (int i = 0; i < p; ++i) acc += row[i];
              gb[o] += acc;
            }
        }
        if (xin.requires_grad) {
          auto& gx = xin.grad_buffer();
          const T* wp = win.value.ptr();
          parallel_for(nb, [&](int64_t b0, int64_t b1) {
            std::vector<T>& dcol = scratch<T>(direct ? 0 : static_cast<size_t>(kk) * p);
            for (int64_t b = b0; b < b1; ++b) {
              T* gxb = gx.ptr() + b * ci * p;
              if (direct) {
                gemm(true, false, kk, p, co, T{1}, wp, kk, dy + b * co * p, p, T{1}, gxb, p);
              } else {
                gemm(true, false, kk, p, co, T{1}, wp, kk, dy + b * co * p, p, T{0}, dcol.data(), p);
                col2im(dcol.data(), ci, h, wd, k, pad, gxb);
              }
            }
          });
        }
      });
}

template <class T>
BasicVar<T> avg_pool2(const BasicVar<T>& x) {
  require_rank(x.shape(), 4, "avg_pool2");
  const int64_t n = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h % 2 || w % 2) throw ShapeError("avg_pool2: odd spatial size");
  const int64_t oh = h / 2, ow = w / 2;
  BasicTensor<T> out({x.dim(0), x.dim(1), oh, ow});
  const T* src = x.value().ptr();
  for (int64_t c = 0; c < n; ++c)
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t xx = 0; xx < ow; ++xx) {
        const T* s = src + c * h * w + 2 * y * w + 2 * xx;
        out[(c * oh + y) * ow + xx] = (s[0] + s[1] + s[w] + s[w + 1]) * T(0.25);
      }
  return make_result<T>(std::move(out), {x.node()}, [n, h, w, oh, ow](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int64_t c = 0; c < n; ++c)
      for (int64_t y = 0; y < oh; ++y)
        for (int64_t xx = 0; xx < ow; ++xx) {
          const T d = self.grad[(c * oh + y) * ow + xx] * T(0.25);
          T* s = g.ptr() + c * h * w + 2 * y * w + 2 * xx;
          s[0] += d;
          s[1] += d;
          s[w] += d;
          s[w + 1] += d;
        }
  });
}

template <class T>
BasicVar<T> upsample_nearest2(const BasicVar<T>& x) {
  require_rank(x.shape(), 4, "upsample_nearest2");
  const int64_t n = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t oh = 2 * h, ow = 2 * w;
  BasicTensor<T> out({x.dim(0), x.dim(1), oh, ow});
  for (int64_t c = 0; c < n; ++c)
    for (int64_t y = 0; y < oh; ++y)
      for (int64_t xx = 0; xx < ow; ++xx)
        out[(c * oh + y) * ow + xx] = x.value()[(c * h + y / 2) * w + xx / 2];
  return make_result<T>(std::move(out), {x.node()}, [n, h, w, oh, ow](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (int64_t c = 0; c < n; ++c)
      for (int64_t y = 0; y < oh; ++y)
        for (int64_t xx = 0; xx < ow; ++xx)
          g[(c * h + y / 2) * w + xx / 2] += self.grad[(c * oh + y) * ow + xx];
  });
}

template <class T>
BasicVar<T> concat1(const BasicVar<T>& a, const BasicVar<T>& b) {
  if (a.shape().size() < 2 || a.shape().size() != b.shape().size() || a.dim(0) != b.dim(0))
    throw ShapeError("concat1: incompatible shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  for (size_t i = 2; i < a.shape().size(); ++i)
    if (a.shape()[i] != b.shape()[i]) throw ShapeError("concat1: trailing dims differ");
  const int64_t nb = a.dim(0), sa = per_sample(a.shape()), sb = per_sample(b.shape());
  Shape s = a.shape();
  s[1] += b.dim(1);
  BasicTensor<T> out(s);
  for (int64_t i = 0; i < nb; ++i) {
    std::copy_n(a.value().ptr() + i * sa, sa, out.ptr() + i * (sa + sb));
    std::copy_n(b.value().ptr() + i * sb, sb, out.ptr() + i * (sa + sb) + sa);
  }
  return make_result<T>(std::move(out), {a.node(), b.node()}, [nb, sa, sb](Node<T>& self) {
    for (int which = 0; which < 2; ++which) {
      auto& in = *self.inputs[which];
      if (!in.requires_grad) continue;
      auto& g = in.grad_buffer();
      const int64_t len = which ? sb : sa, off = which ? sa : 0;
      for (int64_t i = 0; i < nb; ++i) {
        const T* src = self.grad.ptr() + i * (sa + sb) + off;
        T* dst = g.ptr() + i * len;
        for (int64_t j = 0; j < len; ++j) dst[j] += src[j];
      }
    }
  });
}

template <class T>
BasicVar<T> group_norm(const BasicVar<T>& x, const BasicVar<T>& gamma, const BasicVar<T>& beta,
                       int groups, T eps) {
  require_rank(x.shape(), 4, "group_norm");
  const int64_t nb = x.dim(0), c = x.dim(1), p = x.dim(2) * x.dim(3);
  if (groups <= 0 || c % groups) throw ShapeError("group_norm: channels not divisible by groups");
  if (gamma.numel() != c || beta.numel() != c) throw ShapeError("group_norm: affine size mismatch");
  const int64_t cg = c / groups, m = cg * p;
  auto xhat = std::make_shared<BasicTensor<T>>(x.shape());
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(nb * groups));
  BasicTensor<T> out(x.shape());
  parallel_for(nb * groups, [&](int64_t g0, int64_t g1) {
    for (int64_t bg = g0; bg < g1; ++bg) {
      const int64_t b = bg / groups, g = bg % groups;
      const int64_t base = (b * c + g * cg) * p;
      const T* src = x.value().ptr() + base;
      const double mu = lane_sum<T>(m, [src](int64_t i) { return src[i]; }) / static_cast<double>(m);
      const double var = lane_sum<T>(m, [src, mu](int64_t i) {
                           const double d = src[i] - mu;
                           return d * d;
                         }) / static_cast<double>(m);
      const T is = static_cast<T>(1.0 / std::sqrt(var + eps));
      (*inv_std)[static_cast<size_t>(bg)] = is;
      const T mut = static_cast<T>(mu);
      for (int64_t ch = 0; ch < cg; ++ch) {
        const int64_t cc = g * cg + ch, off = base + ch * p;
        const T ga = gamma.value()[cc], be = beta.value()[cc];
        T* xh = xhat->ptr() + off;
        T* o = out.ptr() + off;
        const T* src = x.value().ptr() + off;
        for (int64_t i = 0; i < p; ++i) {
          xh[i] = (src[i] - mut) * is;
          o[i] = xh[i] * ga + be;
        }
      }
    }
  });
  return make_result<T>(
      std::move(out), {x.node(), gamma.node(), beta.node()},
      [xhat, inv_std, nb, c, p, groups, cg, m](Node<T>& self) {
        auto& xin = *self.inputs[0];
        auto& gin = *self.inputs[1];
        auto& bin = *self.inputs[2];
        const T* dy = self.grad.ptr();
        // Per (sample, channel): sum dy and sum dy * xhat.
        std::vector<double> s1(static_cast<size_t>(nb * c)), s2(static_cast<size_t>(nb * c));
        for (int64_t bc = 0; bc < nb * c; ++bc) {
          const T* d = dy + bc * p;
          const T* xh = xhat->ptr() + bc * p;
          s1[static_cast<size_t>(bc)] = lane_sum<T>(p, [d](int64_t i) { return d[i]; });
          s2[static_cast<size_t>(bc)] = lane_sum<T>(p, [d, xh](int64_t i) { return d[i] * xh[i]; });
        }
        if (gin.requires_grad) {
          auto& gg = gin.grad_buffer();
          for (int64_t ch = 0; ch < c; ++ch) {
            double acc = 0;
            for (int64_t b = 0; b < nb; ++b) acc += s2[static_cast<size_t>(b * c + ch)];
            gg[ch] += static_cast<T>(acc);
          }
        }
        if (bin.requires_grad) {
          auto& gb = bin.grad_buffer();
          for (int64_t ch = 0; ch < c; ++ch) {
            double acc = 0;
            for (int64_t b = 0; b < nb; ++b) acc += s1[static_cast<size_t>(b * c + ch)];
            gb[ch] += static_cast<T>(acc);
          }
        }
        if (xin.requires_grad) {
          auto& gx = xin.grad_buffer();
          const T* gam = gin.value.ptr();
          parallel_for(nb * groups, [&](int64_t g0, int64_t g1) {
            for (int64_t bg = g0; bg < g1; ++bg) {
              const int64_t b = bg / groups, g = bg % groups;
              double sd = 0, sdx = 0;
              for (int64_t ch = 0; ch < cg; ++ch) {
                const auto idx = static_cast<size_t>(b * c + g * cg + ch);
                sd += gam[g * cg + ch] * s1[idx];
                sdx += gam[g * cg + ch] * s2[idx];
              }
              const T md = static_cast<T>(sd / static_cast<double>(m));
              const T mdx = static_cast<T>(sdx / static_cast<double>(m));
              const T is = (*inv_std)[static_cast<size_t>(bg)];
              for (int64_t ch = 0; ch < cg; ++ch) {
                const int64_t off = (b * c + g * cg + ch) * p;
                const T ga = gam[g * cg + ch];
                T* gxc = gx.ptr() + off;
                const T* d = dy + off;
                const T* xh = xhat->ptr() + off;
                for (int64_t i = 0; i < p; ++i) gxc[i] += is * (ga * d[i] - md - xh[i] * mdx);
              }
            }
          });
        }
      });
}

template <class T>
BasicVar<T> linear(const BasicVar<T>& x, const BasicVar<T>& w, const BasicVar<T>& bias) {
  require_rank(x.shape(), 2, "linear input");
  require_rank(w.shape(), 2, "linear weight");
  const int nb = static_cast<int>(x.dim(0)), in = static_cast<int>(x.dim(1));
  const int out_f = static_cast<int>(w.dim(0));
  if (w.dim(1) != in) throw ShapeError("linear: weight does not match input features");
  if (bias.numel() != out_f) throw ShapeError("linear: bias length mismatch");
  BasicTensor<T> out({nb, out_f});
  for (int b = 0; b < nb; ++b) std::copy_n(bias.value().ptr(), out_f, out.ptr() + b * out_f);
  gemm(false, true, nb, out_f, in, T{1}, x.value().ptr(), in, w.value().ptr(), in, T{1}, out.ptr(),
       out_f);
  return make_result<T>(std::move(out), {x.node(), w.node(), bias.node()},
                        [nb, in, out_f](Node<T>& self) {
                          auto& xin = *self.inputs[0];
                          auto& win = *self.inputs[1];
                          auto& bin = *self.inputs[2];
                          const T* dy = self.grad.ptr();
                          if (xin.requires_grad)
                            gemm(false, false, nb, in, out_f, T{1}, dy, out_f, win.value.ptr(), in,
                                 T{1}, xin.grad_buffer().ptr(), in);
                          if (win.requires_grad)
                            gemm(true, false, out_f, in, nb, T{1}, dy, out_f, xin.value.ptr(), in,
                                 T{1}, win.grad_buffer().ptr(), in);
                          if (bin.requires_grad) {
                            auto& gb = bin.grad_buffer();
                            for (int b = 0; b < nb; ++b)
                              for (int o = 0; o < out_f; ++o) gb[o] += dy[b * out_f + o];
                          }
                        });
}

template <class T>
BasicVar<T> embedding(const BasicVar<T>& table, std::span<const int> labels) {
  require_rank(table.shape(), 2, "embedding");
  const int64_t v = table.dim(0), d = table.dim(1), nb = static_cast<int64_t>(labels.size());
  std::vector<int> lab(labels.begin(), labels.end());
  for (int l : lab)
    if (l < 0 || l >= v) throw RangeError("embedding: label " + std::to_string(l) + " out of range");
  BasicTensor<T> out({nb, d});
  for (int64_t b = 0; b < nb; ++b)
    std::copy_n(table.value().ptr() + lab[b] * d, d, out.ptr() + b * d);
  return make_result<T>(std::move(out), {table.node()}, [lab, d](Node<T>& self) {
    auto& g = self.inputs[0]->grad_buffer();
    for (size_t b = 0; b < lab.size(); ++b)
      for (int64_t j = 0; j < d; ++j) g[lab[b] * d + j] += self.grad[static_cast<int64_t>(b) * d + j];
  });
}

template <class T>
BasicVar<T> scale_shift(const BasicVar<T>& x, const BasicVar<T>& ss) {
  const int64_t nb = x.dim(0), c = x.dim(1);
  if (ss.shape() != Shape{nb, 2 * c})
    throw ShapeError("scale_shift: modulation shape " + shape_str(ss.shape()) +
                     " does not match input " + shape_str(x.shape()));
  const int64_t p = per_sample(x.shape()) / c;
  BasicTensor<T> out(x.shape());
  for (int64_t b = 0; b < nb; ++b)
    for (int64_t ch = 0; ch < c; ++ch) {
      const T s = T{1} + ss.value()[b * 2 * c + ch], sh = ss.value()[b * 2 * c + c + ch];
      const int64_t base = (b * c + ch) * p;
      for (int64_t i = 0; i < p; ++i) out[base + i] = x.value()[base + i] * s + sh;
    }
  return make_result<T>(std::move(out), {x.node(), ss.node()}, [nb, c, p](Node<T>& self) {
    auto& xin = *self.inputs[0];
    auto& sin = *self.inputs[1];
    for (int64_t b = 0; b < nb; ++b)
      for (int64_t ch = 0; ch < c; ++ch) {
        const int64_t base = (b * c + ch) * p;
        if (xin.requires_grad) {
          auto& gx = xin.grad_buffer();
          const T s = T{1} + sin.value[b * 2 * c + ch];
          for (int64_t i = 0; i < p; ++i) gx[base + i] += self.grad[base + i] * s;
        }
        if (sin.requires_grad) {
          T as{0}, ah{0};
          for (int64_t i = 0; i < p; ++i) {
            as += self.grad[base + i] * xin.value[base + i];
            ah += self.grad[base + i];
          }
          auto& gs = sin.grad_buffer();
          gs[b * 2 * c + ch] += as;
          gs[b * 2 * c + c + ch] += ah;
        }
      }
  });
}

template <class T>
BasicVar<T> sum(const BasicVar<T>& a) {
  T acc{0};
  for (T v : a.value().data()) acc += v;
  return make_result<T>(BasicTensor<T>(Shape{}, std::vector<T>{acc}), {a.node()},
                        [](Node<T>& self) {
                          auto& g = self.inputs[0]->grad_buffer();
                          const T d = self.grad[0];
                          for (int64_t i = 0; i < g.numel(); ++i) g[i] += d;
                        });
}

template <class T>
BasicVar<T> mean(const BasicVar<T>& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  const T* av = a.value().ptr();
  const double acc = batch_sum<T>(a.shape(), a.numel(), [av](int64_t i) { return static_cast<double>(av[i]); });
  const T n = static_cast<T>(a.numel());
  const T m = static_cast<T>(acc / static_cast<double>(a.numel()));
  return make_result<T>(BasicTensor<T>(Shape{}, std::vector<T>{m}), {a.node()},
                        [n](Node<T>& self) {
                          auto& g = self.inputs[0]->grad_buffer();
                          const T d = self.grad[0] / n;
                          for (int64_t i = 0; i < g.numel(); ++i) g[i] += d;
                        });
}

template <class T>
BasicVar<T> mse(const BasicVar<T>& a, const BasicVar<T>& b) {
  require_same(a.shape(), b.shape(), "mse");
  if (a.numel() == 0) throw ShapeError("mse of empty tensors");
  const T n = static_cast<T>(a.numel());
  const T* av = a.value().ptr();
  const T* bv = b.value().ptr();
  const double acc = batch_sum<T>(a.shape(), a.numel(), [av, bv](int64_t i) {
    const double d = static_cast<double>(av[i]) - static_cast<double>(bv[i]);
    return d * d;
  });
  const T m = static_cast<T>(acc / static_cast<double>(a.numel()));
  return make_result<T>(BasicTensor<T>(Shape{}, std::vector<T>{m}), {a.node(), b.node()},
                        [n](Node<T>& self) {
                          auto& x = *self.inputs[0];
                          auto& y = *self.inputs[1];
                          const T k = T{2} * self.grad[0] / n;
                          if (x.requires_grad) {
                            auto& g = x.grad_buffer();
                            for (int64_t i = 0; i < g.numel(); ++i)
                              g[i] += k * (x.value[i] - y.value[i]);
                          }
                          if (y.requires_grad) {
                            auto& g = y.grad_buffer();
                            for (int64_t i = 0; i < g.numel(); ++i)
                              g[i] -= k * (x.value[i] - y.value[i]);
                          }
                        });
}

template <class T>
BasicVar<T> distance_per_sample(const BasicVar<T>& a, const BasicVar<T>& b, DistanceKind kind) {
  require_same(a.shape(), b.shape(), "distance_per_sample");
  const int64_t nb = a.dim(0), inner = per_sample(a.shape());
  if (inner == 0) throw ShapeError("distance_per_sample: empty samples");
  BasicTensor<T> out({nb});
  for (int64_t s = 0; s < nb; ++s) {
    const T* av = a.value().ptr() + s * inner;
    const T* bv = b.value().ptr() + s * inner;
    const double acc = lane_sum<T>(inner, [av, bv, kind](int64_t j) {
      const double d = static_cast<double>(av[j]) - static_cast<double>(bv[j]);
      return kind == DistanceKind::L1 ? std::abs(d) : d * d;
    });
    out[s] = static_cast<T>(acc / static_cast<double>(inner));
  }
  return make_result<T>(std::move(out), {a.node(), b.node()}, [nb, inner, kind](Node<T>& self) {
    auto& x = *self.inputs[0];
    auto& y = *self.inputs[1];
    for (int64_t s = 0; s < nb; ++s) {
      const T k = self.grad[s] / static_cast<T>(inner);
      for (int64_t j = 0; j < inner; ++j) {
        const int64_t i = s * inner + j;
        const T d = x.value[i] - y.value[i];
        // Subgradient 0 at the kink.
        const T gd = kind == DistanceKind::L1 ? k * static_cast<T>((d > 0) - (d < 0)) : k * T{2} * d;
        if (x.requires_grad) x.grad_buffer()[i] += gd;
        if (y.requires_grad) y.grad_buffer()[i] -= gd;
      }
    }
  });
}

template <class T>
BasicVar<T> weighted_mean(const BasicVar<T>& v, std::span<const T> w) {
  require_rank(v.shape(), 1, "weighted_mean");
  const int64_t nb = v.dim(0);
  if (static_cast<int64_t>(w.size()) != nb) throw ShapeError("weighted_mean: weight count mismatch");
  if (nb == 0) throw ShapeError("weighted_mean of empty batch");
  std::vector<T> wt(w.begin(), w.end());
  std::vector<double> parts(static_cast<size_t>(nb));
  for (int64_t i = 0; i < nb; ++i)
    parts[static_cast<size_t>(i)] = static_cast<double>(wt[i]) * static_cast<double>(v.value()[i]);
  const T m = static_cast<T>(sorted_sum(std::move(parts)) / static_cast<double>(nb));
  return make_result<T>(BasicTensor<T>(Shape{}, std::vector<T>{m}),
                        {v.node()}, [wt, nb](Node<T>& self) {
                          auto& g = self.inputs[0]->grad_buffer();
                          for (int64_t i = 0; i < nb; ++i)
                            g[i] += self.grad[0] * wt[i] / static_cast<T>(nb);
                        });
}

#define CCM_INSTANTIATE_OPS(T)                                                                    \
  template BasicVar<T> add(const BasicVar<T>&, const BasicVar<T>&);                               \
  template BasicVar<T> sub(const BasicVar<T>&, const BasicVar<T>&);                               \
  template BasicVar<T> mul(const BasicVar<T>&, const BasicVar<T>&);                               \
  template BasicVar<T> scale(const BasicVar<T>&, T);                                              \
  template BasicVar<T> silu(const BasicVar<T>&);                                                  \
  template BasicVar<T> reshape(const BasicVar<T>&, Shape);                                        \
  template BasicVar<T> mul_per_sample(const BasicVar<T>&, std::span<const T>);                    \
  template BasicVar<T> conv2d(const BasicVar<T>&, const BasicVar<T>&, const BasicVar<T>&, int);   \
  template BasicVar<T> avg_pool2(const BasicVar<T>&);                                             \
  template BasicVar<T> upsample_nearest2(const BasicVar<T>&);                                     \
  template BasicVar<T> concat1(const BasicVar<T>&, const BasicVar<T>&);                           \
  template BasicVar<T> group_norm(const BasicVar<T>&, const BasicVar<T>&, const BasicVar<T>&, int, \
                                  T);                                                             \
  template BasicVar<T> linear(const BasicVar<T>&, const BasicVar<T>&, const BasicVar<T>&);        \
  template BasicVar<T> embedding(const BasicVar<T>&, std::span<const int>);                       \
  template BasicVar<T> scale_shift(const BasicVar<T>&, const BasicVar<T>&);                       \
  template BasicVar<T> sum(const BasicVar<T>&);                                                   \
  template BasicVar<T> mean(const BasicVar<T>&);                                                  \
  template BasicVar<T> mse(const BasicVar<T>&, const BasicVar<T>&);                               \
  template BasicVar<T> distance_per_sample(const BasicVar<T>&, const BasicVar<T>&, DistanceKind); \
  template BasicVar<T> weighted_mean(const BasicVar<T>&, std::span<const T>);

CCM_INSTANTIATE_OPS(float)
CCM_INSTANTIATE_OPS(double)

}  // namespace ccm
