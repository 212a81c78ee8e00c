#include "ccm/nn.hpp"

#include <cmath>

namespace ccm {
namespace {

// PyTorch's default Kaiming-uniform (a = sqrt(5)): bound = 1 / sqrt(fan_in).
template <class T>
BasicTensor<T> kaiming_uniform(Shape s, int64_t fan_in, Rng& rng) {
  BasicTensor<T> t(std::move(s));
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.storage()) v = static_cast<T>(u(rng) * bound);
  return t;
}

template <class T>
BasicTensor<T> normal_init(Shape s, double stddev, Rng& rng) {
  BasicTensor<T> t(std::move(s));
  std::normal_distribution<double> n(0.0, stddev);
  for (auto& v : t.storage()) v = static_cast<T>(n(rng));
  return t;
}

}  // namespace

template <class T>
Conv2d<T>::Conv2d(BasicParameterSet<T>& ps, const std::string& name, int in_ch, int out_ch, int k,
                  Rng& rng, Init init)
    : kernel(k) {
  Shape ws{out_ch, in_ch, k, k};
  weight = ps.add(name + ".w", init == Init::Zero ? BasicTensor<T>(ws)
                                                  : kaiming_uniform<T>(ws, in_ch * k * k, rng));
  bias = ps.add(name + ".b", BasicTensor<T>({out_ch}));
}

template <class T>
BasicVar<T> Conv2d<T>::operator()(const BasicVar<T>& x) const {
  return conv2d(x, weight, bias, kernel / 2);
}

template <class T>
Linear<T>::Linear(BasicParameterSet<T>& ps, const std::string& name, int in_f, int out_f, Rng& rng,
                  Init init) {
  Shape ws{out_f, in_f};
  weight = ps.add(name + ".w",
                  init == Init::Zero ? BasicTensor<T>(ws) : kaiming_uniform<T>(ws, in_f, rng));
  bias = ps.add(name + ".b", BasicTensor<T>({out_f}));
}

template <class T>
BasicVar<T> Linear<T>::operator()(const BasicVar<T>& x) const {
  return linear(x, weight, bias);
}

template <class T>
GroupNorm<T>::GroupNorm(BasicParameterSet<T>& ps, const std::string& name, int channels, int g)
    : groups(g) {
  gamma = ps.add(name + ".gamma", BasicTensor<T>({channels}, T{1}));
  beta = ps.add(name + ".beta", BasicTensor<T>({channels}));
}

template <class T>
BasicVar<T> GroupNorm<T>::operator()(const BasicVar<T>& x) const {
  return group_norm(x, gamma, beta, groups, static_cast<T>(1e-5));
}

template <class T>
BasicVar<T> timestep_embedding(std::span<const int> t, int dim) {
  const int half = dim / 2;
  BasicTensor<T> out({static_cast<int64_t>(t.size()), dim});
  for (size_t b = 0; b < t.size(); ++b)
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      out[static_cast<int64_t>(b) * dim + i] = static_cast<T>(std::sin(t[b] * freq));
      out[static_cast<int64_t>(b) * dim + half + i] = static_cast<T>(std::cos(t[b] * freq));
    }
  return BasicVar<T>(std::move(out));
}

template <class T>
ResBlock<T>::ResBlock(BasicParameterSet<T>& ps, const std::string& name, int in_ch, int out_ch,
                      int emb_dim, int groups, Rng& rng)
    : norm1(ps, name + ".norm1", in_ch, groups),
      norm2(ps, name + ".norm2", out_ch, groups),
      conv1(ps, name + ".conv1", in_ch, out_ch, 3, rng),
      conv2(ps, name + ".conv2", out_ch, out_ch, 3, rng),
      emb_proj(ps, name + ".emb", emb_dim, 2 * out_ch, rng),
      has_skip(in_ch != out_ch) {
  if (has_skip) skip = Conv2d<T>(ps, name + ".skip", in_ch, out_ch, 1, rng);
}

template <class T>
BasicVar<T> ResBlock<T>::operator()(const BasicVar<T>& x, const BasicVar<T>& emb) const {
  auto h = conv1(silu(norm1(x)));
  h = scale_shift(norm2(h), emb_proj(emb));
  h = conv2(silu(h));
  return add(h, has_skip ? skip(x) : x);
}

template <class T>
UNetEncoder<T>::UNetEncoder(BasicParameterSet<T>& ps, const std::string& prefix,
                            const UNetConfig& c, Rng& rng)
    : cfg(c),
      temb1(ps, prefix + "temb1", c.temb_dim, c.emb_dim, rng),
      temb2(ps, prefix + "temb2", c.emb_dim, c.emb_dim, rng),
      label_table(ps.add(prefix + "label",
                         normal_init<T>({c.num_classes + 1, c.emb_dim}, 0.02, rng))),
      in_conv(ps, prefix + "in_conv", c.channels, c.width1, 3, rng),
      enc1(ps, prefix + "enc1", c.width1, c.width1, c.emb_dim, c.groups, rng),
      enc2(ps, prefix + "enc2", c.width1, c.width2, c.emb_dim, c.groups, rng),
      mid(ps, prefix + "mid", c.width2, c.width2, c.emb_dim, c.groups, rng) {}

template <class T>
BasicVar<T> UNetEncoder<T>::embed(std::span<const int> t, std::span<const int> labels) const {
  auto e = temb2(silu(temb1(timestep_embedding<T>(t, cfg.temb_dim))));
  return silu(add(e, embedding(label_table, labels)));
}

template <class T>
EncoderFeatures<T> UNetEncoder<T>::operator()(const BasicVar<T>& x, const BasicVar<T>& emb,
                                              const BasicVar<T>* h0_extra) const {
  auto h0 = in_conv(x);
  if (h0_extra) h0 = add(h0, *h0_extra);
  auto s1 = enc1(h0, emb);
  auto s2 = enc2(avg_pool2(s1), emb);
  auto m = mid(s2, emb);
  return {emb, s1, s2, m};
}

template <class T>
TinyUNet<T>::TinyUNet(const UNetConfig& cfg, uint64_t seed, Role role)
    : cfg_(cfg), params_(role) {
  Rng rng(seed);
  enc_ = UNetEncoder<T>(params_, "enc.", cfg, rng);
  dec2_ = ResBlock<T>(params_, "dec2", 2 * cfg.width2, cfg.width2, cfg.emb_dim, cfg.groups, rng);
  dec1_ = ResBlock<T>(params_, "dec1", cfg.width2 + cfg.width1, cfg.width1, cfg.emb_dim, cfg.groups,
                      rng);
  out_norm_ = GroupNorm<T>(params_, "out_norm", cfg.width1, cfg.groups);
  out_conv_ = Conv2d<T>(params_, "out_conv", cfg.width1, cfg.channels, 3, rng);
  if (role == Role::Teacher) params_.set_trainable(false);
}

template <class T>
void TinyUNet<T>::check_inputs(const BasicVar<T>& x, std::span<const int> t,
                               std::span<const int> labels) const {
  const Shape& s = x.shape();
  if (s.size() != 4 || s[1] != cfg_.channels || s[2] != cfg_.image_size ||
      s[3] != cfg_.image_size)
    throw ShapeError("TinyUNet: expected [B," + std::to_string(cfg_.channels) + "," +
                     std::to_string(cfg_.image_size) + "," + std::to_string(cfg_.image_size) +
                     "] input, got " + shape_str(s));
  if (static_cast<int64_t>(t.size()) != s[0] || static_cast<int64_t>(labels.size()) != s[0])
    throw ShapeError("TinyUNet: timestep/label count does not match batch");
  for (int v : t)
    if (v < 0 || v > cfg_.timesteps) throw RangeError("TinyUNet: timestep out of range");
  for (int l : labels)
    if (l < 0 || l > cfg_.num_classes) throw RangeError("TinyUNet: label out of range");
  if (!x.value().all_finite()) throw NumericError("TinyUNet: non-finite input");
}

template <class T>
BasicVar<T> TinyUNet<T>::forward(const BasicVar<T>& x, std::span<const int> t,
                                 std::span<const int> labels,
                                 const ControlResiduals<T>* control) const {
  check_inputs(x, t, labels);
  auto emb = enc_.embed(t, labels);
  auto f = enc_(x, emb);
  auto s1 = f.skip1, s2 = f.skip2, m = f.mid;
  if (control) {
    s1 = add(s1, control->skip1);
    s2 = add(s2, control->skip2);
    m = add(m, control->mid);
  }
  auto h = dec2_(concat1(m, s2), emb);
  h = dec1_(concat1(upsample_nearest2(h), s1), emb);
  return out_conv_(silu(out_norm_(h)));
}

template <class T>
MlpBackbone<T>::MlpBackbone(const MlpConfig& cfg, uint64_t seed, Role role)
    : cfg_(cfg), params_(role) {
  Rng rng(seed);
  temb_ = Linear<T>(params_, "temb", cfg.temb_dim, cfg.hidden, rng);
  in_ = Linear<T>(params_, "in", cfg.dim, cfg.hidden, rng);
  h1_ = Linear<T>(params_, "h1", cfg.hidden, cfg.hidden, rng);
  h2_ = Linear<T>(params_, "h2", cfg.hidden, cfg.hidden, rng);
  out_ = Linear<T>(params_, "out", cfg.hidden, cfg.dim, rng);
  if (role == Role::Teacher) params_.set_trainable(false);
}

template <class T>
BasicVar<T> MlpBackbone<T>::forward(const BasicVar<T>& x, std::span<const int> t,
                                    std::span<const int> labels,
                                    const ControlResiduals<T>* control) const {
  if (control) throw StructuralError("MLP backbone does not accept control residuals");
  if (x.shape().size() != 2 || x.dim(1) != cfg_.dim)
    throw ShapeError("MlpBackbone: expected [B," + std::to_string(cfg_.dim) + "] input, got " +
                     shape_str(x.shape()));
  if (static_cast<int64_t>(t.size()) != x.dim(0))
    throw ShapeError("MlpBackbone: timestep count does not match batch");
  (void)labels;
  for (int v : t)
    if (v < 0 || v > cfg_.timesteps) throw RangeError("MlpBackbone: timestep out of range");
  if (!x.value().all_finite()) throw NumericError("MlpBackbone: non-finite input");
  auto h = silu(add(in_(x), temb_(timestep_embedding<T>(t, cfg_.temb_dim))));
  h = silu(h1_(h));
  h = silu(h2_(h));
  return out_(h);
}

#define CCM_INSTANTIATE_NN(T)                                                    \
  template struct Conv2d<T>;                                                     \
  template struct Linear<T>;                                                     \
  template struct GroupNorm<T>;                                                  \
  template struct ResBlock<T>;                                                   \
  template struct UNetEncoder<T>;                                                \
  template class TinyUNet<T>;                                                    \
  template class MlpBackbone<T>;                                                 \
  template BasicVar<T> timestep_embedding<T>(std::span<const int>, int);

CCM_INSTANTIATE_NN(float)
CCM_INSTANTIATE_NN(double)

}  // namespace ccm
