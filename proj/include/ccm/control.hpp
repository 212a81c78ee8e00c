#pragma once

#include <string>

#include "ccm/consistency.hpp"
#include "ccm/data.hpp"

namespace ccm {

class Adapter;

struct ConditionedBatch {
  Tensor x;                 // [B, 1, 16, 16]
  std::vector<int> labels;
  Tensor cond;              // [B, C_k, 16, 16]
  ConditionKind kind = ConditionKind::Edge;

  Batch base() const { return {x, labels}; }
};

ConditionedBatch make_conditioned(const Batch& b, ConditionKind kind, uint64_t mask_seed);

// Trainable copy of the backbone encoder (embedding, input conv, both encoder
// blocks, mid block) plus a condition encoder whose features are added to the
// copy's input-conv output. Three zero-initialized 1x1 couplings map the
// copy's skip and mid features into the base decoder. All names live under
// "psi.<condition>.".
class ControlNetBranch {
 public:
  ControlNetBranch(const UNetConfig& cfg, ConditionKind kind, uint64_t seed);

  // Copies the encoder weights of a base network with the same configuration.
  void init_from(const TinyUNet<float>& base);

  ControlResiduals<float> residuals(const Var& x, const Var& cond, std::span<const int> t,
                                    std::span<const int> labels) const;

  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }
  ConditionKind kind() const noexcept { return kind_; }
  const UNetConfig& config() const noexcept { return cfg_; }
  std::string prefix() const;

 private:
  UNetConfig cfg_;
  ConditionKind kind_;
  ParameterSet params_;
  UNetEncoder<float> enc_;
  Conv2d<float> hint1_, hint2_, hint3_;
  Conv2d<float> zc1_, zc2_, zc3_;
};

// Base forward with the branch's couplings (optionally passed through the
// adapter) added to the decoder inputs. A fresh branch reproduces the base
// output bit-exactly.
Var controlled_forward(const TinyUNet<float>& base, const ControlNetBranch& branch, const Var& x,
                       std::span<const int> t, std::span<const int> labels, const Tensor& cond,
                       const Adapter* adapter = nullptr);

// Network closure with the condition bound, for use as an eps model or as the
// net inside a ConsistencyFunction. Requires a matching architecture.
EpsFn controlled_net(const TinyUNet<float>& base, const ControlNetBranch& branch,
                     const Tensor& cond, const Adapter* adapter = nullptr);

// Strategy 1: the DM-trained branch attached to the consistency model as is.
ConsistencyFunction transplant(const TinyUNet<float>& cm, const ControlNetBranch& branch,
                               const NoiseSchedule& s, const Tensor& cond,
                               const Adapter* adapter = nullptr);

// Eq. 2 objective, only the branch trainable.
Var controlnet_dm_loss(const TinyUNet<float>& dm, const ControlNetBranch& branch,
                       const ConditionedBatch& batch, const DmDraw& draw, const NoiseSchedule& s);

// Eq. 5 objective against the frozen CM; the teacher is stopgrad of the
// controlled CM itself.
Var controlnet_ct_loss(const TinyUNet<float>& cm, const ControlNetBranch& branch,
                       const ConditionedBatch& batch, const CtDraw& draw, const NoiseSchedule& s,
                       const ConsistencyLoss& loss);

}  // namespace ccm
