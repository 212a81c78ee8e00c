#pragma once

#include <vector>

#include "ccm/control.hpp"

namespace ccm {

// Shared residual transform on each coupling output:
//   r + conv_b(silu(scale_shift(conv_a(r), emb_proj(temb(t)))))
// with conv_b zero-initialized, so a fresh adapter is the identity. The same
// parameters serve every condition type. Names live under "dpsi.".
class Adapter {
 public:
  Adapter(const UNetConfig& cfg, int width, uint64_t seed);

  ControlResiduals<float> apply(const ControlResiduals<float>& r, std::span<const int> t) const;

  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }
  int width() const noexcept { return width_; }

 private:
  struct Site {
    Conv2d<float> a, b;
    Linear<float> emb;
    Var operator()(const Var& r, const Var& temb) const;
  };

  int temb_dim_;
  int width_;
  ParameterSet params_;
  Site s1_, s2_, mid_;
};

// Frozen ControlNet branches, one per condition type.
struct ControlBank {
  std::vector<const ControlNetBranch*> branches;

  int size() const noexcept { return static_cast<int>(branches.size()); }
  const ControlNetBranch& at(int k) const;
};

// Condition index per sample, uniform over {0..K-1}.
std::vector<int> draw_k(Rng& rng, int64_t batch, int K);

// Eq. 6: samples are grouped by their condition type; each group runs the
// adapted ControlNet CT loss, and group losses are combined with weights
// n_k / B so the result is the mean over the whole batch.
Var adapter_ct_loss(const TinyUNet<float>& cm, const ControlBank& bank, const Adapter& adapter,
                    const Batch& batch, const std::vector<int>& k, const CtDraw& draw,
                    uint64_t mask_seed, const NoiseSchedule& s, const ConsistencyLoss& loss);

}  // namespace ccm
