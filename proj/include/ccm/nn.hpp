#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "ccm/ops.hpp"
#include "ccm/parameters.hpp"
#include "ccm/random.hpp"

namespace ccm {

// ---- layers -------------------------------------------------------------

enum class Init { KaimingUniform, Zero };

template <class T>
struct Conv2d {
  BasicVar<T> weight, bias;
  int kernel = 3;

  Conv2d() = default;
  Conv2d(BasicParameterSet<T>& ps, const std::string& name, int in_ch, int out_ch, int kernel,
         Rng& rng, Init init = Init::KaimingUniform);
  BasicVar<T> operator()(const BasicVar<T>& x) const;
};

template <class T>
struct Linear {
  BasicVar<T> weight, bias;

  Linear() = default;
  Linear(BasicParameterSet<T>& ps, const std::string& name, int in_f, int out_f, Rng& rng,
         Init init = Init::KaimingUniform);
  BasicVar<T> operator()(const BasicVar<T>& x) const;
};

template <class T>
struct GroupNorm {
  BasicVar<T> gamma, beta;
  int groups = 8;

  GroupNorm() = default;
  GroupNorm(BasicParameterSet<T>& ps, const std::string& name, int channels, int groups);
  BasicVar<T> operator()(const BasicVar<T>& x) const;
};

// Sets every weight and bias under prefix to zero.
template <class T>
void zero_init(BasicParameterSet<T>& ps, const std::string& prefix) {
  ps.zero_values(prefix);
}

// Sinusoidal embedding of integer timesteps -> [B, dim] constant.
template <class T>
BasicVar<T> timestep_embedding(std::span<const int> t, int dim);

// GN -> SiLU -> conv, timestep scale-shift, GN -> SiLU -> conv, plus skip.
template <class T>
struct ResBlock {
  GroupNorm<T> norm1, norm2;
  Conv2d<T> conv1, conv2, skip;
  Linear<T> emb_proj;
  bool has_skip = false;

  ResBlock() = default;
  ResBlock(BasicParameterSet<T>& ps, const std::string& name, int in_ch, int out_ch, int emb_dim,
           int groups, Rng& rng);
  BasicVar<T> operator()(const BasicVar<T>& x, const BasicVar<T>& emb) const;
};

// ---- backbones ----------------------------------------------------------

// Residuals injected into the decoder's skip inputs and mid output.
template <class T>
struct ControlResiduals {
  BasicVar<T> skip1, skip2, mid;
};

template <class T>
class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual BasicVar<T> forward(const BasicVar<T>& x, std::span<const int> t,
                              std::span<const int> labels,
                              const ControlResiduals<T>* control = nullptr) const = 0;
  virtual BasicParameterSet<T>& params() = 0;
  virtual const BasicParameterSet<T>& params() const = 0;
  virtual Shape sample_shape() const = 0;
  virtual int num_classes() const = 0;
  virtual int timesteps() const = 0;
};

struct UNetConfig {
  int image_size = 16;
  int channels = 1;
  int width1 = 16;
  int width2 = 32;
  int temb_dim = 32;
  int emb_dim = 64;
  int groups = 8;
  int num_classes = 3;  // the table has num_classes + 1 rows; the last is the null label
  int timesteps = 1000;

  int null_label() const noexcept { return num_classes; }
  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

template <class T>
struct EncoderFeatures {
  BasicVar<T> emb, skip1, skip2, mid;
};

// Embedding MLP, input conv, two encoder blocks, and the mid block. The
// ControlNet branch holds its own copy under a different prefix.
template <class T>
struct UNetEncoder {
  UNetConfig cfg;
  Linear<T> temb1, temb2;
  BasicVar<T> label_table;
  Conv2d<T> in_conv;
  ResBlock<T> enc1, enc2, mid;

  UNetEncoder() = default;
  UNetEncoder(BasicParameterSet<T>& ps, const std::string& prefix, const UNetConfig& cfg, Rng& rng);

  BasicVar<T> embed(std::span<const int> t, std::span<const int> labels) const;
  // h0_extra, when given, is added to the input-conv features.
  EncoderFeatures<T> operator()(const BasicVar<T>& x, const BasicVar<T>& emb,
                                const BasicVar<T>* h0_extra = nullptr) const;
};

template <class T>
class TinyUNet final : public Backbone<T> {
 public:
  explicit TinyUNet(const UNetConfig& cfg = {}, uint64_t seed = 0, Role role = Role::Other);

  BasicVar<T> forward(const BasicVar<T>& x, std::span<const int> t, std::span<const int> labels,
                      const ControlResiduals<T>* control = nullptr) const override;

  BasicParameterSet<T>& params() override { return params_; }
  const BasicParameterSet<T>& params() const override { return params_; }
  Shape sample_shape() const override { return {cfg_.channels, cfg_.image_size, cfg_.image_size}; }
  int num_classes() const override { return cfg_.num_classes; }
  int timesteps() const override { return cfg_.timesteps; }
  const UNetConfig& config() const noexcept { return cfg_; }

  // Validates that x is [B, C, S, S], finite, with matching t/label counts.
  void check_inputs(const BasicVar<T>& x, std::span<const int> t, std::span<const int> labels) const;

 private:
  UNetConfig cfg_;
  BasicParameterSet<T> params_;
  UNetEncoder<T> enc_;
  ResBlock<T> dec2_, dec1_;
  GroupNorm<T> out_norm_;
  Conv2d<T> out_conv_;
};

struct MlpConfig {
  int dim = 2;
  int hidden = 128;
  int temb_dim = 32;
  int timesteps = 1000;
};

// Small MLP backbone for low-dimensional point data.
template <class T>
class MlpBackbone final : public Backbone<T> {
 public:
  explicit MlpBackbone(const MlpConfig& cfg = {}, uint64_t seed = 0, Role role = Role::Other);

  BasicVar<T> forward(const BasicVar<T>& x, std::span<const int> t, std::span<const int> labels,
                      const ControlResiduals<T>* control = nullptr) const override;

  BasicParameterSet<T>& params() override { return params_; }
  const BasicParameterSet<T>& params() const override { return params_; }
  Shape sample_shape() const override { return {cfg_.dim}; }
  int num_classes() const override { return 1; }
  int timesteps() const override { return cfg_.timesteps; }

 private:
  MlpConfig cfg_;
  BasicParameterSet<T> params_;
  Linear<T> temb_, in_, h1_, h2_, out_;
};

}  // namespace ccm
