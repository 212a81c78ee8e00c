#include "ccm/control.hpp"

#include "ccm/adapter.hpp"

namespace ccm {

ConditionedBatch make_conditioned(const Batch& b, ConditionKind kind, uint64_t mask_seed) {
  return {b.x, b.labels, extract_condition(kind, b.x, mask_seed), kind};
}

std::string ControlNetBranch::prefix() const {
  return std::string("psi.") + condition_name(kind_) + ".";
}

ControlNetBranch::ControlNetBranch(const UNetConfig& cfg, ConditionKind kind, uint64_t seed)
    : cfg_(cfg), kind_(kind), params_(Role::ControlNetPsi) {
  Rng rng(seed);
  const std::string p = prefix();
  enc_ = UNetEncoder<float>(params_, p + "enc.", cfg, rng);
  const int cc = condition_channels(kind);
  hint1_ = Conv2d<float>(params_, p + "hint1", cc, cfg.width1, 3, rng);
  hint2_ = Conv2d<float>(params_, p + "hint2", cfg.width1, cfg.width1, 3, rng);
  hint3_ = Conv2d<float>(params_, p + "hint3", cfg.width1, cfg.width1, 3, rng);
  zc1_ = Conv2d<float>(params_, p + "zc1", cfg.width1, cfg.width1, 1, rng, Init::Zero);
  zc2_ = Conv2d<float>(params_, p + "zc2", cfg.width2, cfg.width2, 1, rng, Init::Zero);
  zc3_ = Conv2d<float>(params_, p + "zc3", cfg.width2, cfg.width2, 1, rng, Init::Zero);
}

void ControlNetBranch::init_from(const TinyUNet<float>& base) {
  if (!(base.config() == cfg_))
    throw StructuralError("ControlNet branch and base network architectures differ");
  // Only the encoder copy is inherited; hint and coupling convs keep their init.
  params_.copy_values_from(base.params(), "enc.", prefix() + "enc.");
}

ControlResiduals<float> ControlNetBranch::residuals(const Var& x, const Var& cond,
                                                    std::span<const int> t,
                                                    std::span<const int> labels) const {
  const int cc = condition_channels(kind_);
  if (cond.shape().size() != 4 || cond.dim(1) != cc || cond.dim(0) != x.dim(0) ||
      cond.dim(2) != x.dim(2) || cond.dim(3) != x.dim(3))
    throw StructuralError(std::string("condition for ") + condition_name(kind_) + " branch must be [B," +
                          std::to_string(cc) + ",H,W], got " + shape_str(cond.shape()));
  auto hint = hint3_(silu(hint2_(silu(hint1_(cond)))));
  auto emb = enc_.embed(t, labels);
  auto f = enc_(x, emb, &hint);
  return {zc1_(f.skip1), zc2_(f.skip2), zc3_(f.mid)};
}

Var controlled_forward(const TinyUNet<float>& base, const ControlNetBranch& branch, const Var& x,
                       std::span<const int> t, std::span<const int> labels, const Tensor& cond,
                       const Adapter* adapter) {
  if (!(base.config() == branch.config()))
    throw StructuralError("ControlNet branch and base network architectures differ");
  base.check_inputs(x, t, labels);
  auto r = branch.residuals(x, Var(cond), t, labels);
  if (adapter) r = adapter->apply(r, t);
  return base.forward(x, t, labels, &r);
}

EpsFn controlled_net(const TinyUNet<float>& base, const ControlNetBranch& branch,
                     const Tensor& cond, const Adapter* adapter) {
  if (!(base.config() == branch.config()))
    throw StructuralError("ControlNet branch and base network architectures differ");
  return [&base, &branch, cond, adapter](const Var& x, std::span<const int> t,
                                         std::span<const int> y) {
    if (x.dim(0) == cond.dim(0)) return controlled_forward(base, branch, x, t, y, cond, adapter);
    // Guided evaluation stacks the batch twice.
    if (x.dim(0) == 2 * cond.dim(0))
      return controlled_forward(base, branch, x, t, y, concat0(cond, cond), adapter);
    throw ShapeError("controlled net: batch does not match the bound condition");
  };
}

ConsistencyFunction transplant(const TinyUNet<float>& cm, const ControlNetBranch& branch,
                               const NoiseSchedule& s, const Tensor& cond, const Adapter* adapter) {
  return ConsistencyFunction(controlled_net(cm, branch, cond, adapter), s);
}

Var controlnet_dm_loss(const TinyUNet<float>& dm, const ControlNetBranch& branch,
                       const ConditionedBatch& batch, const DmDraw& draw, const NoiseSchedule& s) {
  return dm_loss(controlled_net(dm, branch, batch.cond), batch.base(), draw, s);
}

Var controlnet_ct_loss(const TinyUNet<float>& cm, const ControlNetBranch& branch,
                       const ConditionedBatch& batch, const CtDraw& draw, const NoiseSchedule& s,
                       const ConsistencyLoss& loss) {
  ConsistencyFunction f(controlled_net(cm, branch, batch.cond), s);
  return ct_loss(f, f, batch.base(), draw, loss);
}

}  // namespace ccm
