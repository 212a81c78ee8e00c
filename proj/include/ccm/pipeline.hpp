#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "ccm/adapter.hpp"
#include "ccm/config.hpp"
#include "ccm/eval.hpp"

namespace ccm {

namespace fs = std::filesystem;

// On-disk layout under io.out. Each stage directory holds its checkpoint,
// loss.csv, config.json (resolved), hashes.json, and timing.json.
struct Artifacts {
  fs::path root;

  fs::path dm() const { return root / "dm"; }
  fs::path cm_distill() const { return root / "cm_distill"; }
  fs::path cm_ct() const { return root / "cm_ct"; }
  fs::path controlnet_dm(ConditionKind k) const {
    return root / (std::string("controlnet_dm_") + condition_name(k));
  }
  fs::path controlnet_ct(ConditionKind k) const {
    return root / (std::string("controlnet_ct_") + condition_name(k));
  }
  fs::path adapter() const { return root / "adapter"; }
  fs::path samples() const { return root / "samples"; }
  fs::path eval() const { return root / "eval"; }
  fs::path compare() const { return root / "compare"; }
};

inline constexpr const char* kModelFile = "model.ckpt";

struct StageReport {
  std::string kind;
  fs::path dir;
  std::vector<double> losses;
  double seconds = 0.0;
  // Hash of every frozen parameter set before and after training.
  std::map<std::string, uint64_t> frozen_before, frozen_after;
};

enum class Strategy { None, Transfer, Ct, Adapter };
const char* strategy_name(Strategy s);
Strategy parse_strategy(const std::string& s);

struct SampleRequest {
  std::string model = "cm";  // cm | dm | cm_ct | transfer | ct | adapter
  std::optional<ConditionKind> condition;
  int nfes = 4;
  int n = 16;
};

struct SampleResult {
  Tensor samples;
  std::vector<int> labels;
  Tensor condition;  // empty for unconditional models
};

// Derived per-purpose random stream; the tag keeps streams independent.
Rng stream(uint64_t seed, std::string_view tag);

class Lab {
 public:
  explicit Lab(RunConfig cfg);

  const RunConfig& config() const noexcept { return cfg_; }
  const Artifacts& paths() const noexcept { return paths_; }
  const ShapesDataset& train_set() const noexcept { return train_; }
  const ShapesDataset& test_set() const noexcept { return test_; }
  const NoiseSchedule& schedule() const noexcept { return sched_; }
  const NoiseSchedule& ct_schedule() const noexcept { return ct_sched_; }

  // Training stages. Each checks its prerequisites (MissingArtifact) and
  // throws NumericError on a non-finite loss.
  StageReport train_dm();
  StageReport train_cm_distill();
  StageReport train_cm_ct();
  StageReport train_controlnet_dm(ConditionKind k);
  StageReport train_controlnet_ct(ConditionKind k);
  StageReport train_adapter();

  // Loading. Architecture mismatches throw StructuralError.
  std::unique_ptr<TinyUNet<float>> load_unet(const fs::path& stage_dir, Role role) const;
  std::unique_ptr<MlpBackbone<float>> load_mlp(const fs::path& stage_dir, Role role) const;
  std::unique_ptr<ControlNetBranch> load_branch(const fs::path& stage_dir, ConditionKind k) const;
  std::unique_ptr<Adapter> load_adapter() const;

  // The paired evaluation set: first n_samples test images, their labels,
  // and conditions extracted with the eval seed.
  Batch eval_batch() const;
  Tensor eval_condition(ConditionKind k) const;

  // Samples a model; conditional models use eval_condition.
  SampleResult sample(const SampleRequest& req, uint64_t seed) const;

  // Metrics for one (strategy, condition) pair at eval.nfes with the eval
  // seed; Strategy::None is the unconditional CM.
  MetricsRecord evaluate(Strategy s, std::optional<ConditionKind> k) const;
  // Per-sample fidelity values behind evaluate(), for paired deltas.
  std::vector<double> fidelity(Strategy s, ConditionKind k) const;

  // One row per (strategy, condition), plus the csv and a summary table.
  std::vector<MetricsRecord> compare() const;

  // Reference numbers used by the acceptance checks.
  double sw2_to_test(const Tensor& samples) const;
  Tensor ddim_teacher_samples() const;
  Tensor cm_samples(const TinyUNet<float>& cm, int nfes) const;
  double gmm_sw2(const Backbone<float>& net, int nfes) const;

 private:
  void begin_stage(const fs::path& dir) const;
  void finish_stage(StageReport& r, const std::string& checkpoint_note) const;
  std::vector<int> eval_labels() const;

  RunConfig cfg_;
  Artifacts paths_;
  ShapesDataset train_, test_;
  NoiseSchedule sched_, ct_sched_;
};

// Grid of images as binary PGM; values in [-1, 1] map to 0..255. With a
// condition, each sample column is preceded by its condition's channel 0.
void write_pgm_grid(const fs::path& path, const Tensor& images, int cols,
                    const Tensor* condition = nullptr);

// step,loss rows with 17 significant digits.
void write_loss_csv(const fs::path& path, const std::vector<double>& losses);

// FNV-1a of a file's bytes; MissingArtifact when absent.
uint64_t file_hash(const fs::path& path);

}  // namespace ccm
