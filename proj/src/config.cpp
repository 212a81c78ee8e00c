#include "ccm/config.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

namespace ccm {

using nlohmann::json;

namespace {

// Reads known keys from one object and rejects whatever is left over.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class V>
  void get(const char* key, V& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<V>();
    } catch (const json::exception& e) {
      throw ConfigError(path_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, _] : j_.items())
      if (!seen_.count(k)) throw ConfigError("unknown config key: " + (path_.empty() ? k : path_ + "." + k));
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void read_stage(const json& j, const std::string& path, StageConfig& s) {
  Section r(j, path);
  r.get("steps", s.steps);
  r.get("batch", s.batch);
  if (const json* o = r.child("optimizer")) {
    Section q(*o, path + ".optimizer");
    q.get("lr", s.optimizer.lr);
    q.get("beta1", s.optimizer.beta1);
    q.get("beta2", s.optimizer.beta2);
    q.get("eps", s.optimizer.eps);
    q.finish();
  }
  r.get("decay", s.decay);
  r.get("ema", s.ema);
  r.finish();
}

json stage_json(const StageConfig& s) {
  return {{"steps", s.steps},
          {"batch", s.batch},
          {"optimizer",
           {{"lr", s.optimizer.lr},
            {"beta1", s.optimizer.beta1},
            {"beta2", s.optimizer.beta2},
            {"eps", s.optimizer.eps}}},
          {"decay", s.decay},
          {"ema", s.ema}};
}

void check(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("invalid config: " + what);
}

void check_stage(const StageConfig& s, const std::string& name) {
  check(s.steps >= 0, name + ".steps must be >= 0");
  check(s.batch >= 1, name + ".batch must be >= 1");
  check(s.optimizer.lr > 0, name + ".optimizer.lr must be positive");
  check(s.optimizer.beta1 >= 0 && s.optimizer.beta1 < 1, name + ".optimizer.beta1 in [0,1)");
  check(s.optimizer.beta2 >= 0 && s.optimizer.beta2 < 1, name + ".optimizer.beta2 in [0,1)");
  check(s.optimizer.eps > 0, name + ".optimizer.eps must be positive");
  check(s.decay == "none" || s.decay == "cosine", name + ".decay must be none or cosine");
  check(s.ema >= 0 && s.ema < 1, name + ".ema in [0,1)");
}

}  // namespace

double StageConfig::lr_at(int step) const {
  if (decay != "cosine" || steps == 0) return optimizer.lr;
  return optimizer.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * step / steps));
}

ConsistencyLoss ConsistencySection::loss(int grid_points) const {
  ConsistencyLoss l;
  if (distance == "l1") l.distance = DistanceKind::L1;
  else if (distance == "l2") l.distance = DistanceKind::L2;
  else throw ConfigError("consistency.distance must be \"l1\" or \"l2\"");
  if (!(lambda > 0)) throw ConfigError("consistency.lambda must be positive");
  if (lambda != 1.0) l.lambda.assign(static_cast<size_t>(grid_points) + 1, lambda);
  return l;
}

UNetConfig RunConfig::unet() const {
  UNetConfig u;
  u.width1 = model.width1;
  u.width2 = model.width2;
  u.temb_dim = model.temb_dim;
  u.emb_dim = model.emb_dim;
  u.groups = model.groups;
  u.timesteps = schedule.T;
  return u;
}

MlpConfig RunConfig::mlp() const {
  MlpConfig m;
  m.hidden = model.mlp_hidden;
  m.temb_dim = model.temb_dim;
  m.timesteps = schedule.T;
  return m;
}

NoiseSchedule RunConfig::noise_schedule() const {
  auto s = make_schedule(schedule.T, schedule.beta_start, schedule.beta_end, schedule.N);
  return schedule.zero_terminal_snr ? enforce_zero_terminal_snr(s) : s;
}

void RunConfig::validate() const {
  check(data.n_train >= 1 && data.n_test >= 1, "data sizes must be >= 1");
  check(schedule.N >= 2 && schedule.N <= schedule.T && schedule.T % schedule.N == 0,
        "schedule.N must divide T");
  check(schedule.N_ct >= 2 && schedule.N_ct <= schedule.T && schedule.T % schedule.N_ct == 0,
        "schedule.N_ct must divide T");
  check(model.width1 % model.groups == 0 && model.width2 % model.groups == 0,
        "widths must be multiples of groups");
  check(model.sigma_data > 0, "model.sigma_data must be positive");
  check(model.mlp_hidden >= 1, "model.mlp_hidden must be >= 1");
  check_stage(train.dm, "train.dm");
  check_stage(train.cm_distill, "train.cm_distill");
  check_stage(train.cm_ct, "train.cm_ct");
  check_stage(train.controlnet, "train.controlnet");
  check_stage(train.adapter, "train.adapter");
  check(train.p_drop >= 0 && train.p_drop <= 1, "train.p_drop in [0,1]");
  consistency.loss(schedule.N);
  check(consistency.teacher == "stopgrad" || consistency.teacher == "ema",
        "consistency.teacher must be \"stopgrad\" or \"ema\"");
  check(consistency.mu >= 0 && consistency.mu <= 1, "consistency.mu in [0,1]");
  check(consistency.cfg_w >= 0, "consistency.cfg_w must be >= 0");
  parse_condition(strategy.condition);
  for (const auto& c : strategy.conditions) parse_condition(c);
  for (const auto& s : strategy.strategies)
    check(s == "transfer" || s == "ct" || s == "adapter",
          "strategy.strategies entries must be transfer, ct, or adapter");
  check(!adapter.held_in.empty(), "adapter.held_in must list at least one condition");
  for (const auto& c : adapter.held_in) parse_condition(c);
  for (const auto& c : adapter.held_out) {
    parse_condition(c);
    for (const auto& h : adapter.held_in) check(c != h, "held-out condition " + c + " is also held in");
  }
  check(adapter.width >= 1, "adapter.width must be >= 1");
  check(eval.n_samples >= 1 && eval.n_proj >= 1, "eval sizes must be >= 1");
  check(eval.nfes >= 1 && eval.nfes <= schedule.N_ct, "eval.nfes in [1, N_ct]");
  check(eval.ddim_steps >= 1 && eval.ddim_steps <= schedule.N, "eval.ddim_steps in [1, N]");
}

RunConfig config_from_json(const json& j) {
  RunConfig c;
  Section root(j, "");
  root.get("seed", c.seed);
  if (const json* s = root.child("data")) {
    Section r(*s, "data");
    r.get("n_train", c.data.n_train);
    r.get("n_test", c.data.n_test);
    r.get("seed", c.data.seed);
    r.finish();
  }
  if (const json* s = root.child("schedule")) {
    Section r(*s, "schedule");
    r.get("T", c.schedule.T);
    r.get("beta_start", c.schedule.beta_start);
    r.get("beta_end", c.schedule.beta_end);
    r.get("N", c.schedule.N);
    r.get("N_ct", c.schedule.N_ct);
    r.get("zero_terminal_snr", c.schedule.zero_terminal_snr);
    r.finish();
  }
  if (const json* s = root.child("model")) {
    Section r(*s, "model");
    r.get("width1", c.model.width1);
    r.get("width2", c.model.width2);
    r.get("temb_dim", c.model.temb_dim);
    r.get("emb_dim", c.model.emb_dim);
    r.get("groups", c.model.groups);
    r.get("sigma_data", c.model.sigma_data);
    r.get("mlp_hidden", c.model.mlp_hidden);
    r.finish();
  }
  if (const json* s = root.child("train")) {
    Section r(*s, "train");
    if (const json* t = r.child("dm")) read_stage(*t, "train.dm", c.train.dm);
    if (const json* t = r.child("cm_distill")) read_stage(*t, "train.cm_distill", c.train.cm_distill);
    if (const json* t = r.child("cm_ct")) read_stage(*t, "train.cm_ct", c.train.cm_ct);
    if (const json* t = r.child("controlnet")) read_stage(*t, "train.controlnet", c.train.controlnet);
    if (const json* t = r.child("adapter")) read_stage(*t, "train.adapter", c.train.adapter);
    r.get("p_drop", c.train.p_drop);
    r.finish();
  }
  if (const json* s = root.child("consistency")) {
    Section r(*s, "consistency");
    r.get("lambda", c.consistency.lambda);
    r.get("distance", c.consistency.distance);
    r.get("teacher", c.consistency.teacher);
    r.get("mu", c.consistency.mu);
    r.get("cfg_w", c.consistency.cfg_w);
    r.finish();
  }
  if (const json* s = root.child("strategy")) {
    Section r(*s, "strategy");
    r.get("condition", c.strategy.condition);
    r.get("strategies", c.strategy.strategies);
    r.get("conditions", c.strategy.conditions);
    r.finish();
  }
  if (const json* s = root.child("adapter")) {
    Section r(*s, "adapter");
    r.get("held_in", c.adapter.held_in);
    r.get("held_out", c.adapter.held_out);
    r.get("width", c.adapter.width);
    r.finish();
  }
  if (const json* s = root.child("eval")) {
    Section r(*s, "eval");
    r.get("n_samples", c.eval.n_samples);
    r.get("n_proj", c.eval.n_proj);
    r.get("nfes", c.eval.nfes);
    r.get("ddim_steps", c.eval.ddim_steps);
    r.get("seed", c.eval.seed);
    r.finish();
  }
  if (const json* s = root.child("io")) {
    Section r(*s, "io");
    r.get("out", c.io.out);
    r.finish();
  }
  root.finish();
  c.validate();
  return c;
}

json config_to_json(const RunConfig& c) {
  return {
      {"seed", c.seed},
      {"data", {{"n_train", c.data.n_train}, {"n_test", c.data.n_test}, {"seed", c.data.seed}}},
      {"schedule",
       {{"T", c.schedule.T},
        {"beta_start", c.schedule.beta_start},
        {"beta_end", c.schedule.beta_end},
        {"N", c.schedule.N},
        {"N_ct", c.schedule.N_ct},
        {"zero_terminal_snr", c.schedule.zero_terminal_snr}}},
      {"model",
       {{"width1", c.model.width1},
        {"width2", c.model.width2},
        {"temb_dim", c.model.temb_dim},
        {"emb_dim", c.model.emb_dim},
        {"groups", c.model.groups},
        {"sigma_data", c.model.sigma_data},
        {"mlp_hidden", c.model.mlp_hidden}}},
      {"train",
       {{"dm", stage_json(c.train.dm)},
        {"cm_distill", stage_json(c.train.cm_distill)},
        {"cm_ct", stage_json(c.train.cm_ct)},
        {"controlnet", stage_json(c.train.controlnet)},
        {"adapter", stage_json(c.train.adapter)},
        {"p_drop", c.train.p_drop}}},
      {"consistency",
       {{"lambda", c.consistency.lambda},
        {"distance", c.consistency.distance},
        {"teacher", c.consistency.teacher},
        {"mu", c.consistency.mu},
        {"cfg_w", c.consistency.cfg_w}}},
      {"strategy",
       {{"condition", c.strategy.condition},
        {"strategies", c.strategy.strategies},
        {"conditions", c.strategy.conditions}}},
      {"adapter",
       {{"held_in", c.adapter.held_in}, {"held_out", c.adapter.held_out}, {"width", c.adapter.width}}},
      {"eval",
       {{"n_samples", c.eval.n_samples},
        {"n_proj", c.eval.n_proj},
        {"nfes", c.eval.nfes},
        {"ddim_steps", c.eval.ddim_steps},
        {"seed", c.eval.seed}}},
      {"io", {{"out", c.io.out}}},
  };
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw MissingArtifact(path.string());
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

void save_config(const std::filesystem::path& path, const RunConfig& c) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << config_to_json(c).dump(2) << '\n';
}

}  // namespace ccm
