#include "ccm/adapter.hpp"

namespace ccm {

Adapter::Adapter(const UNetConfig& cfg, int width, uint64_t seed)
    : temb_dim_(cfg.temb_dim), width_(width), params_(Role::AdapterDeltaPsi) {
  if (width < 1) throw ConfigError("adapter width must be positive");
  Rng rng(seed);
  auto site = [&](const std::string& name, int ch) {
    Site s;
    s.a = Conv2d<float>(params_, "dpsi." + name + ".a", ch, width, 1, rng);
    s.b = Conv2d<float>(params_, "dpsi." + name + ".b", width, ch, 1, rng, Init::Zero);
    s.emb = Linear<float>(params_, "dpsi." + name + ".emb", cfg.temb_dim, 2 * width, rng);
    return s;
  };
  s1_ = site("skip1", cfg.width1);
  s2_ = site("skip2", cfg.width2);
  mid_ = site("mid", cfg.width2);
}

Var Adapter::Site::operator()(const Var& r, const Var& temb) const {
  return add(r, b(silu(scale_shift(a(r), emb(temb)))));
}

ControlResiduals<float> Adapter::apply(const ControlResiduals<float>& r,
                                       std::span<const int> t) const {
  auto temb = timestep_embedding<float>(t, temb_dim_);
  return {s1_(r.skip1, temb), s2_(r.skip2, temb), mid_(r.mid, temb)};
}

const ControlNetBranch& ControlBank::at(int k) const {
  if (k < 0 || k >= size())
    throw StructuralError("condition index " + std::to_string(k) + " outside a bank of " +
                          std::to_string(size()));
  return *branches[static_cast<size_t>(k)];
}

std::vector<int> draw_k(Rng& rng, int64_t batch, int K) {
  if (K < 1) throw ConfigError("control bank must hold at least one branch");
  std::uniform_int_distribution<int> d(0, K - 1);
  std::vector<int> k(static_cast<size_t>(batch));
  for (auto& v : k) v = d(rng);
  return k;
}

namespace {

Tensor gather_rows(const Tensor& t, const std::vector<int64_t>& idx) {
  const int64_t inner = t.numel() / std::max<int64_t>(t.dim(0), 1);
  Shape s = t.shape();
  s[0] = static_cast<int64_t>(idx.size());
  Tensor out(s);
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy_n(t.ptr() + idx[i] * inner, inner, out.ptr() + static_cast<int64_t>(i) * inner);
  return out;
}

template <class V>
std::vector<V> gather(const std::vector<V>& v, const std::vector<int64_t>& idx) {
  std::vector<V> out;
  for (int64_t i : idx) out.push_back(v[static_cast<size_t>(i)]);
  return out;
}

}  // namespace

Var adapter_ct_loss(const TinyUNet<float>& cm, const ControlBank& bank, const Adapter& adapter,
                    const Batch& batch, const std::vector<int>& k, const CtDraw& draw,
                    uint64_t mask_seed, const NoiseSchedule& s, const ConsistencyLoss& loss) {
  if (static_cast<int64_t>(k.size()) != batch.size())
    throw ShapeError("adapter loss: one condition index per sample");
  for (int kk : k) bank.at(kk);
  const double nb = static_cast<double>(batch.size());
  Var total;
  for (int kk = 0; kk < bank.size(); ++kk) {
    std::vector<int64_t> idx;
    for (size_t i = 0; i < k.size(); ++i)
      if (k[i] == kk) idx.push_back(static_cast<int64_t>(i));
    if (idx.empty()) continue;
    const auto& branch = bank.at(kk);
    Batch sub{gather_rows(batch.x, idx), gather(batch.labels, idx)};
    CtDraw sd{gather(draw.n, idx), gather(draw.t_next, idx), gather(draw.t_cur, idx),
              gather_rows(draw.eps, idx)};
    const Tensor cond = extract_condition(branch.kind(), sub.x, mask_seed + static_cast<uint64_t>(kk) * 1000003u);
    ConsistencyFunction f(controlled_net(cm, branch, cond, &adapter), s);
    auto part = scale(ct_loss(f, f, sub, sd, loss), static_cast<float>(idx.size() / nb));
    total = total.defined() ? add(total, part) : part;
  }
  return total;
}

}  // namespace ccm
