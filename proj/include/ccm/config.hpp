#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ccm/consistency.hpp"
#include "ccm/data.hpp"
#include "ccm/nn.hpp"
#include "ccm/optim.hpp"

namespace ccm {

struct StageConfig {
  int steps = 1000;
  int batch = 32;
  AdamConfig optimizer;
  std::string decay = "none";  // or "cosine" (to zero over `steps`)
  // Rate of the running weight average that gets saved; 0 saves the last
  // iterate.
  double ema = 0.0;

  double lr_at(int step) const;
};

struct DataSection {
  int64_t n_train = 3000;
  int64_t n_test = 512;
  uint64_t seed = 1;
};

struct ScheduleSection {
  int T = 1000;
  double beta_start = 1e-4;
  double beta_end = 2e-2;
  int N = 200;     // diffusion and distillation grid
  int N_ct = 100;  // consistency-training grid
  bool zero_terminal_snr = true;
};

struct ModelSection {
  int width1 = 16;
  int width2 = 32;
  int temb_dim = 32;
  int emb_dim = 64;
  int groups = 8;
  double sigma_data = kSigmaData;
  int mlp_hidden = 128;
};

struct TrainSection {
  StageConfig dm{3000, 32, {2e-3, 0.9, 0.999, 1e-8}, "cosine"};
  StageConfig cm_distill{2000, 16, {2e-4, 0.9, 0.999, 1e-8}};
  StageConfig cm_ct{5000, 256, {5e-4, 0.9, 0.999, 1e-8}, "none", 0.999};
  StageConfig controlnet{1500, 16, {5e-4, 0.9, 0.999, 1e-8}};
  StageConfig adapter{1500, 16, {5e-4, 0.9, 0.999, 1e-8}};
  double p_drop = 0.1;
};

struct ConsistencySection {
  double lambda = 1.0;
  std::string distance = "l1";
  std::string teacher = "stopgrad";  // or "ema"
  double mu = 0.95;
  double cfg_w = 5.0;

  // Constant weights over a grid of grid_points + 1 entries.
  ConsistencyLoss loss(int grid_points) const;
};

struct StrategySection {
  std::string condition = "edge";
  std::vector<std::string> strategies{"transfer", "ct", "adapter"};
  std::vector<std::string> conditions{"edge", "lowres", "mask"};
};

struct AdapterSection {
  std::vector<std::string> held_in{"lowres", "mask"};
  std::vector<std::string> held_out{"edge"};
  int width = 8;
};

struct EvalSection {
  int n_samples = 256;
  int n_proj = 64;
  int nfes = 4;
  int ddim_steps = 50;
  uint64_t seed = 12345;
};

struct IoSection {
  std::string out = "runs/default";
};

struct RunConfig {
  uint64_t seed = 0;
  DataSection data;
  ScheduleSection schedule;
  ModelSection model;
  TrainSection train;
  ConsistencySection consistency;
  StrategySection strategy;
  AdapterSection adapter;
  EvalSection eval;
  IoSection io;

  UNetConfig unet() const;
  MlpConfig mlp() const;
  // The diffusion/distillation schedule (grid N); with_grid gives the CT one.
  NoiseSchedule noise_schedule() const;
  NoiseSchedule ct_schedule() const { return noise_schedule().with_grid(schedule.N_ct); }

  // Throws ConfigError on an invalid value.
  void validate() const;
};

// Unknown keys anywhere throw ConfigError; missing keys keep their defaults.
RunConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const RunConfig& c);

RunConfig load_config(const std::filesystem::path& path);
// Pretty-printed fully-resolved config.
void save_config(const std::filesystem::path& path, const RunConfig& c);

}  // namespace ccm
