#include "ccm/pipeline.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ccm/checkpoint.hpp"

namespace ccm {

namespace {

using Clock = std::chrono::steady_clock;

uint64_t splitmix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ull;
  return h;
}

std::string hex(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

fs::path model_path(const fs::path& dir) { return dir / kModelFile; }

void require(const fs::path& p) {
  if (!fs::exists(p)) throw MissingArtifact(p.string());
}

Batch draw_batch(const ShapesDataset& ds, int b, Rng& rng) {
  std::uniform_int_distribution<int64_t> pick(0, ds.size() - 1);
  std::vector<int64_t> idx(static_cast<size_t>(b));
  for (auto& i : idx) i = pick(rng);
  return {ds.batch_images(idx), ds.batch_labels(idx)};
}

std::vector<int> round_robin(int64_t n, int classes) {
  std::vector<int> l(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) l[static_cast<size_t>(i)] = static_cast<int>(i % classes);
  return l;
}

Tensor channel(const Tensor& t, int c) {
  const int64_t nb = t.dim(0), ch = t.dim(1), hw = t.dim(2) * t.dim(3);
  Tensor out({nb, 1, t.dim(2), t.dim(3)});
  for (int64_t b = 0; b < nb; ++b)
    std::copy_n(t.ptr() + (b * ch + c) * hw, hw, out.ptr() + b * hw);
  return out;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

template <class F>
std::map<std::string, uint64_t> hashes(const F& sets) {
  std::map<std::string, uint64_t> h;
  for (const auto& [name, ps] : sets) h[name] = ps->hash();
  return h;
}

// Exponential average of a stage's iterates. With rate 0 the final iterate
// is what gets saved.
class WeightAverage {
 public:
  WeightAverage(const ParameterSet& live, double mu) : live_(live), mu_(mu), avg_(live.role()) {
    if (mu_ > 0)
      for (const auto& [name, v] : live) avg_.add(name, v.value());
    avg_.set_trainable(false);
  }
  void update() {
    if (mu_ > 0) ema_update(avg_, live_, mu_);
  }
  const ParameterSet& weights() const { return mu_ > 0 ? avg_ : live_; }

 private:
  const ParameterSet& live_;
  double mu_;
  ParameterSet avg_;
};

}  // namespace

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::None: return "none";
    case Strategy::Transfer: return "transfer";
    case Strategy::Ct: return "ct";
    case Strategy::Adapter: return "adapter";
  }
  return "?";
}

Strategy parse_strategy(const std::string& s) {
  if (s == "none") return Strategy::None;
  if (s == "transfer") return Strategy::Transfer;
  if (s == "ct") return Strategy::Ct;
  if (s == "adapter") return Strategy::Adapter;
  throw ConfigError("unknown strategy: " + s);
}

Rng stream(uint64_t seed, std::string_view tag) { return Rng(splitmix(seed ^ fnv1a(tag))); }

uint64_t file_hash(const fs::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifact(path.string());
  std::ostringstream os;
  os << f.rdbuf();
  return fnv1a(os.str());
}

void write_loss_csv(const fs::path& path, const std::vector<double>& losses) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << std::setprecision(17) << "step,loss\n";
  for (size_t i = 0; i < losses.size(); ++i) f << i + 1 << ',' << losses[i] << '\n';
}

void write_pgm_grid(const fs::path& path, const Tensor& images, int cols, const Tensor* condition) {
  const int64_t n = images.dim(0), h = images.dim(-2), w = images.dim(-1);
  const int64_t per = images.numel() / n;
  const int64_t cpb = condition ? condition->numel() / n : 0;
  const int64_t tiles_per_sample = condition ? 2 : 1;
  cols = static_cast<int>(std::max<int64_t>(1, std::min<int64_t>(cols, n)));
  const int64_t rows = (n + cols - 1) / cols, gw = (w + 1) * cols * tiles_per_sample + 1,
                gh = (h + 1) * rows + 1;
  std::vector<unsigned char> px(static_cast<size_t>(gw * gh), 128);
  auto put = [&](const float* src, int64_t ox, int64_t oy) {
    for (int64_t y = 0; y < h; ++y)
      for (int64_t x = 0; x < w; ++x) {
        const double v = std::clamp((static_cast<double>(src[y * w + x]) + 1.0) * 127.5, 0.0, 255.0);
        px[static_cast<size_t>((oy + y) * gw + ox + x)] = static_cast<unsigned char>(std::lround(v));
      }
  };
  for (int64_t i = 0; i < n; ++i) {
    const int64_t r = i / cols, c = i % cols;
    int64_t ox = 1 + c * tiles_per_sample * (w + 1);
    const int64_t oy = 1 + r * (h + 1);
    if (condition) {
      put(condition->ptr() + i * cpb, ox, oy);
      ox += w + 1;
    }
    put(images.ptr() + i * per, ox, oy);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << "P5\n" << gw << ' ' << gh << "\n255\n";
  f.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
}

Lab::Lab(RunConfig cfg) : cfg_(std::move(cfg)) {
  cfg_.validate();
  paths_.root = cfg_.io.out;
  train_ = gen_shapes(cfg_.data.seed, cfg_.data.n_train);
  test_ = gen_shapes(splitmix(cfg_.data.seed + 1), cfg_.data.n_test);
  sched_ = cfg_.noise_schedule();
  ct_sched_ = sched_.with_grid(cfg_.schedule.N_ct);
}

void Lab::begin_stage(const fs::path& dir) const { fs::create_directories(dir); }

void Lab::finish_stage(StageReport& r, const std::string& checkpoint_note) const {
  write_loss_csv(r.dir / "loss.csv", r.losses);
  save_config(r.dir / "config.json", cfg_);
  nlohmann::json h = nlohmann::json::object();
  for (const auto& [name, before] : r.frozen_before) {
    const uint64_t after = r.frozen_after.at(name);
    h[name] = {{"before", hex(before)}, {"after", hex(after)}, {"equal", before == after}};
  }
  std::ofstream(r.dir / "hashes.json", std::ios::binary) << h.dump(2) << '\n';
  std::ofstream(r.dir / "timing.json", std::ios::binary)
      << nlohmann::json{{"kind", r.kind}, {"seconds", r.seconds}, {"checkpoint", checkpoint_note}}.dump(2)
      << '\n';
  for (const auto& [name, before] : r.frozen_before)
    if (before != r.frozen_after.at(name))
      throw InvariantViolation("frozen parameters " + name + " changed during " + r.kind);
}

std::unique_ptr<TinyUNet<float>> Lab::load_unet(const fs::path& dir, Role role) const {
  require(model_path(dir));
  auto net = std::make_unique<TinyUNet<float>>(cfg_.unet(), 0, role);
  load_params(model_path(dir), net->params());
  return net;
}

std::unique_ptr<MlpBackbone<float>> Lab::load_mlp(const fs::path& dir, Role role) const {
  require(model_path(dir));
  auto net = std::make_unique<MlpBackbone<float>>(cfg_.mlp(), 0, role);
  load_params(model_path(dir), net->params());
  return net;
}

std::unique_ptr<ControlNetBranch> Lab::load_branch(const fs::path& dir, ConditionKind k) const {
  require(model_path(dir));
  auto b = std::make_unique<ControlNetBranch>(cfg_.unet(), k, 0);
  load_params(model_path(dir), b->params());
  return b;
}

std::unique_ptr<Adapter> Lab::load_adapter() const {
  require(model_path(paths_.adapter()));
  auto a = std::make_unique<Adapter>(cfg_.unet(), cfg_.adapter.width, 0);
  load_params(model_path(paths_.adapter()), a->params());
  return a;
}

// ---- training stages ----------------------------------------------------------

StageReport Lab::train_dm() {
  const auto t0 = Clock::now();
  StageReport r{"dm", paths_.dm(), {}, 0, {}, {}};
  begin_stage(r.dir);
  Rng rng = stream(cfg_.seed, "dm");
  TinyUNet<float> net(cfg_.unet(), rng(), Role::DmPhi);
  AdamState opt{cfg_.train.dm.optimizer, 0, {}, {}};
  WeightAverage avg(net.params(), cfg_.train.dm.ema);
  for (int step = 0; step < cfg_.train.dm.steps; ++step) {
    opt.cfg.lr = cfg_.train.dm.lr_at(step);
    const Batch b = draw_batch(train_, cfg_.train.dm.batch, rng);
    r.losses.push_back(dm_train_step(net, opt, b, sched_, cfg_.train.p_drop, rng));
    avg.update();
  }
  save_params(model_path(r.dir), avg.weights());
  r.seconds = seconds_since(t0);
  finish_stage(r, kModelFile);
  return r;
}

StageReport Lab::train_cm_distill() {
  const auto t0 = Clock::now();
  StageReport r{"cm-distill", paths_.cm_distill(), {}, 0, {}, {}};
  auto dm = load_unet(paths_.dm(), Role::DmPhi);
  dm->params().set_trainable(false);
  begin_stage(r.dir);
  Rng rng = stream(cfg_.seed, "cm_distill");
  // Initialized from the diffusion model: one lineage for DM, CM, and branches.
  TinyUNet<float> student(cfg_.unet(), 0, Role::CmTheta);
  student.params().copy_values_from(dm->params());
  std::unique_ptr<TinyUNet<float>> ema;
  if (cfg_.consistency.teacher == "ema") {
    ema = std::make_unique<TinyUNet<float>>(cfg_.unet(), 0, Role::Teacher);
    ema->params().copy_values_from(dm->params());
  }
  const double sd = cfg_.model.sigma_data;
  ConsistencyFunction f_student(eps_fn(student), sched_, sd);
  ConsistencyFunction f_teacher = ema ? ConsistencyFunction(eps_fn(*ema), sched_, sd) : f_student;
  const GuidanceConfig g{cfg_.consistency.cfg_w, cfg_.unet().null_label()};
  const auto loss = cfg_.consistency.loss(sched_.N());
  std::vector<const ParameterSet*> frozen{&dm->params()};
  if (ema) frozen.push_back(&ema->params());
  r.frozen_before = hashes(std::map<std::string, const ParameterSet*>{{"dm", &dm->params()}});
  AdamState opt{cfg_.train.cm_distill.optimizer, 0, {}, {}};
  const EpsFn teacher_dm = eps_fn(*dm);
  WeightAverage avg(student.params(), cfg_.train.cm_distill.ema);
  for (int step = 0; step < cfg_.train.cm_distill.steps; ++step) {
    opt.cfg.lr = cfg_.train.cm_distill.lr_at(step);
    const Batch b = draw_batch(train_, cfg_.train.cm_distill.batch, rng);
    const CtDraw d = draw_ct(b.x, sched_, rng);
    r.losses.push_back(optimize_step(
        student.params(), opt,
        [&] { return cd_loss(f_student, f_teacher, teacher_dm, g, b, d, loss); }, frozen));
    if (ema) ema_update(ema->params(), student.params(), cfg_.consistency.mu);
    avg.update();
  }
  r.frozen_after = hashes(std::map<std::string, const ParameterSet*>{{"dm", &dm->params()}});
  save_params(model_path(r.dir), avg.weights());
  r.seconds = seconds_since(t0);
  finish_stage(r, kModelFile);
  return r;
}

StageReport Lab::train_cm_ct() {
  const auto t0 = Clock::now();
  StageReport r{"cm-ct", paths_.cm_ct(), {}, 0, {}, {}};
  begin_stage(r.dir);
  Rng rng = stream(cfg_.seed, "cm_ct");
  MlpBackbone<float> net(cfg_.mlp(), rng(), Role::CmTheta);
  save_params(r.dir / "init.ckpt", net.params());
  const Gmm2D gmm = default_gmm();
  ConsistencyFunction f(eps_fn(net), ct_sched_, cfg_.model.sigma_data);
  const auto loss = cfg_.consistency.loss(ct_sched_.N());
  AdamState opt{cfg_.train.cm_ct.optimizer, 0, {}, {}};
  const int bs = cfg_.train.cm_ct.batch;
  WeightAverage avg(net.params(), cfg_.train.cm_ct.ema);
  for (int step = 0; step < cfg_.train.cm_ct.steps; ++step) {
    opt.cfg.lr = cfg_.train.cm_ct.lr_at(step);
    const Batch b{gmm.sample(bs, rng).cast<float>(), std::vector<int>(static_cast<size_t>(bs), 0)};
    const CtDraw d = draw_ct(b.x, ct_sched_, rng);
    r.losses.push_back(optimize_step(net.params(), opt, [&] { return ct_loss(f, f, b, d, loss); }));
    avg.update();
  }
  save_params(model_path(r.dir), avg.weights());
  r.seconds = seconds_since(t0);
  finish_stage(r, kModelFile);
  return r;
}

StageReport Lab::train_controlnet_dm(ConditionKind k) {
  const auto t0 = Clock::now();
  StageReport r{std::string("controlnet-dm:") + condition_name(k), paths_.controlnet_dm(k), {}, 0, {}, {}};
  auto dm = load_unet(paths_.dm(), Role::DmPhi);
  dm->params().set_trainable(false);
  begin_stage(r.dir);
  Rng rng = stream(cfg_.seed, std::string("controlnet_dm_") + condition_name(k));
  ControlNetBranch branch(cfg_.unet(), k, rng());
  branch.init_from(*dm);
  const std::vector<const ParameterSet*> frozen{&dm->params()};
  r.frozen_before = hashes(std::map<std::string, const ParameterSet*>{{"dm", &dm->params()}});
  AdamState opt{cfg_.train.controlnet.optimizer, 0, {}, {}};
  WeightAverage avg(branch.params(), cfg_.train.controlnet.ema);
  for (int step = 0; step < cfg_.train.controlnet.steps; ++step) {
    opt.cfg.lr = cfg_.train.controlnet.lr_at(step);
    const Batch b = draw_batch(train_, cfg_.train.controlnet.batch, rng);
    const DmDraw d = draw_dm(b, sched_, 0.0, cfg_.unet().null_label(), rng);
    const ConditionedBatch cb = make_conditioned(b, k, rng());
    r.losses.push_back(optimize_step(
        branch.params(), opt, [&] { return controlnet_dm_loss(*dm, branch, cb, d, sched_); }, frozen));
    avg.update();
  }
  r.frozen_after = hashes(std::map<std::string, const ParameterSet*>{{"dm", &dm->params()}});
  save_params(model_path(r.dir), avg.weights());
  r.seconds = seconds_since(t0);
  finish_stage(r, kModelFile);
  return r;
}

StageReport Lab::train_controlnet_ct(ConditionKind k) {
  const auto t0 = Clock::now();
  StageReport r{std::string("controlnet-ct:") + condition_name(k), paths_.controlnet_ct(k), {}, 0, {}, {}};
  auto cm = load_unet(paths_.cm_distill(), Role::CmTheta);
  cm->params().set_trainable(false);
  begin_stage(r.dir);
  Rng rng = stream(cfg_.seed, std::string("controlnet_ct_") + condition_name(k));
  ControlNetBranch branch(cfg_.unet(), k, rng());
  branch.init_from(*cm);
  const std::vector<const ParameterSet*> frozen{&cm->params()};
  r.frozen_before = hashes(std::map<std::string, const ParameterSet*>{{"cm", &cm->params()}});
  const auto loss = cfg_.consistency.loss(ct_sched_.N());
  AdamState opt{cfg_.train.controlnet.optimizer, 0, {}, {}};
  WeightAverage avg(branch.params(), cfg_.train.controlnet.ema);
  for (int step = 0; step < cfg_.train.controlnet.steps; ++step) {
    opt.cfg.lr = cfg_.train.controlnet.lr_at(step);
    const Batch b = draw_batch(train_, cfg_.train.controlnet.batch, rng);
    const CtDraw d = draw_ct(b.x, ct_sched_, rng);
    const ConditionedBatch cb = make_conditioned(b, k, rng());
    r.losses.push_back(optimize_step(
        branch.params(), opt, [&] { return controlnet_ct_loss(*cm, branch, cb, d, ct_sched_, loss); },
        frozen));
    avg.update();
  }
  r.frozen_after = hashes(std::map<std::string, const ParameterSet*>{{"cm", &cm->params()}});
  save_params(model_path(r.dir), avg.weights());
  r.seconds = seconds_since(t0);
  finish_stage(r, kModelFile);
  return r;
}

StageReport Lab::train_adapter() {
  const auto t0 = Clock::now();
  StageReport r{"adapter", paths_.adapter(), {}, 0, {}, {}};
  auto cm = load_unet(paths_.cm_distill(), Role::CmTheta);
  cm->params().set_trainable(false);
  std::vector<std::unique_ptr<ControlNetBranch>> owned;
  ControlBank bank;
  std::map<std::string, const ParameterSet*> frozen_sets{{"cm", &cm->params()}};
  for (const auto& name : cfg_.adapter.held_in) {
    const auto k = parse_condition(name);
    owned.push_back(load_branch(paths_.controlnet_dm(k), k));
    owned.back()->params().set_trainable(false);
    bank.branches.push_back(owned.back().get());
    frozen_sets["psi." + name] = &owned.back()->params();
  }
  begin_stage(r.dir);
  Rng rng = stream(cfg_.seed, "adapter");
  Adapter adapter(cfg_.unet(), cfg_.adapter.width, rng());
  std::vector<const ParameterSet*> frozen;
  for (const auto& [_, ps] : frozen_sets) frozen.push_back(ps);
  r.frozen_before = hashes(frozen_sets);
  const auto loss = cfg_.consistency.loss(ct_sched_.N());
  AdamState opt{cfg_.train.adapter.optimizer, 0, {}, {}};
  WeightAverage avg(adapter.params(), cfg_.train.adapter.ema);
  for (int step = 0; step < cfg_.train.adapter.steps; ++step) {
    opt.cfg.lr = cfg_.train.adapter.lr_at(step);
    const Batch b = draw_batch(train_, cfg_.train.adapter.batch, rng);
    const auto ks = draw_k(rng, b.size(), bank.size());
    const CtDraw d = draw_ct(b.x, ct_sched_, rng);
    const uint64_t mask_seed = rng();
    r.losses.push_back(optimize_step(
        adapter.params(), opt,
        [&] { return adapter_ct_loss(*cm, bank, adapter, b, ks, d, mask_seed, ct_sched_, loss); },
        frozen));
    avg.update();
  }
  r.frozen_after = hashes(frozen_sets);
  save_params(model_path(r.dir), avg.weights());
  r.seconds = seconds_since(t0);
  finish_stage(r, kModelFile);
  return r;
}

// ---- evaluation -----------------------------------------------------------------

std::vector<int> Lab::eval_labels() const { return round_robin(cfg_.eval.n_samples, kShapeClasses); }

Batch Lab::eval_batch() const {
  const int64_t n = std::min<int64_t>(cfg_.eval.n_samples, test_.size());
  std::vector<int64_t> idx(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  return {test_.batch_images(idx), test_.batch_labels(idx)};
}

Tensor Lab::eval_condition(ConditionKind k) const {
  return extract_condition(k, eval_batch().x, cfg_.eval.seed);
}

double Lab::sw2_to_test(const Tensor& samples) const {
  Rng rng = stream(cfg_.eval.seed, "sw2");
  return sliced_w2(samples, test_.images, cfg_.eval.n_proj, rng);
}

Tensor Lab::ddim_teacher_samples() const {
  auto dm = load_unet(paths_.dm(), Role::DmPhi);
  Rng rng = stream(cfg_.eval.seed, "ddim");
  const GuidanceConfig g{cfg_.consistency.cfg_w, cfg_.unet().null_label()};
  return ddim_sample(eps_fn(*dm), g, sched_, cfg_.eval.ddim_steps, eval_labels(), dm->sample_shape(), rng);
}

Tensor Lab::cm_samples(const TinyUNet<float>& cm, int nfes) const {
  Rng rng = stream(cfg_.eval.seed, "cm_sampling");
  ConsistencyFunction f(eps_fn(cm), sched_, cfg_.model.sigma_data);
  return multistep_sample(f, nfes, eval_labels(), cm.sample_shape(), rng);
}

double Lab::gmm_sw2(const Backbone<float>& net, int nfes) const {
  const int64_t n = 2000;
  Rng ref_rng = stream(cfg_.eval.seed, "gmm_reference");
  const Tensor ref = default_gmm().sample(n, ref_rng).cast<float>();
  ConsistencyFunction f(eps_fn(net), ct_sched_, cfg_.model.sigma_data);
  Rng rng = stream(cfg_.eval.seed, "gmm_sampling");
  const Tensor x = multistep_sample(f, nfes, std::vector<int>(static_cast<size_t>(n), 0), net.sample_shape(), rng);
  Rng proj = stream(cfg_.eval.seed, "gmm_sw2");
  return sliced_w2(x, ref, cfg_.eval.n_proj, proj);
}

namespace {

struct EvalRun {
  Tensor samples;
  std::vector<double> fidelity;
  double self_consistency = 0.0;
};

}  // namespace

static EvalRun run_eval(const Lab& lab, Strategy s, std::optional<ConditionKind> k) {
  const auto& cfg = lab.config();
  const Batch eb = lab.eval_batch();
  auto cm = lab.load_unet(lab.paths().cm_distill(), Role::CmTheta);
  std::unique_ptr<ControlNetBranch> branch;
  std::unique_ptr<Adapter> adapter;
  Tensor cond;
  if (s != Strategy::None) {
    if (!k) throw UsageError("conditional strategy without a condition");
    switch (s) {
      case Strategy::Ct: branch = lab.load_branch(lab.paths().controlnet_ct(*k), *k); break;
      case Strategy::Adapter: adapter = lab.load_adapter(); [[fallthrough]];
      default: branch = lab.load_branch(lab.paths().controlnet_dm(*k), *k); break;
    }
  }
  if (k) cond = lab.eval_condition(*k);
  const auto& sched = lab.ct_schedule();
  ConsistencyFunction f = branch ? transplant(*cm, *branch, sched, cond, adapter.get())
                                 : ConsistencyFunction(eps_fn(*cm), sched, cfg.model.sigma_data);
  // The same stream for every strategy: paired initial noise and step noise.
  Rng rng = stream(cfg.eval.seed, "paired_sampling");
  EvalRun out;
  out.samples = multistep_sample(f, cfg.eval.nfes, eb.labels, cm->sample_shape(), rng);
  if (k) {
    switch (*k) {
      case ConditionKind::Edge: out.fidelity = edge_iou(cond, out.samples); break;
      case ConditionKind::Lowres: out.fidelity = lowres_mse(cond, out.samples); break;
      case ConditionKind::Mask:
        out.fidelity = outside_mask_psnr(eb.x, out.samples, channel(cond, 1));
        break;
    }
  }
  Rng sc_rng = stream(cfg.eval.seed, "self_consistency");
  const CtDraw d = draw_ct(eb.x, sched, sc_rng);
  out.self_consistency = self_consistency(f, eb, d);
  return out;
}

std::vector<double> Lab::fidelity(Strategy s, ConditionKind k) const {
  return run_eval(*this, s, k).fidelity;
}

MetricsRecord Lab::evaluate(Strategy s, std::optional<ConditionKind> k) const {
  const auto run = run_eval(*this, s, k);
  MetricsRecord m;
  m.run_id = paths_.root.filename().string();
  m.strategy = strategy_name(s);
  m.condition = k ? condition_name(*k) : "none";
  m.nfes = cfg_.eval.nfes;
  m.seed = cfg_.eval.seed;
  m.sw2 = sw2_to_test(run.samples);
  m.self_consistency = run.self_consistency;
  if (k) {
    const double v = mean_of(run.fidelity);
    switch (*k) {
      case ConditionKind::Edge: m.edge_iou = v; break;
      case ConditionKind::Lowres: m.lowres_mse = v; break;
      case ConditionKind::Mask: m.outside_mask_psnr = v; break;
    }
  }
  return m;
}

SampleResult Lab::sample(const SampleRequest& req, uint64_t seed) const {
  if (req.n < 1) throw UsageError("sample count must be positive");
  Rng rng = stream(seed, "sample");
  SampleResult out;
  if (req.model == "cm_ct") {
    auto net = load_mlp(paths_.cm_ct(), Role::CmTheta);
    ConsistencyFunction f(eps_fn(*net), ct_sched_, cfg_.model.sigma_data);
    out.labels.assign(static_cast<size_t>(req.n), 0);
    out.samples = multistep_sample(f, req.nfes, out.labels, net->sample_shape(), rng);
    return out;
  }
  if (req.model == "dm") {
    auto dm = load_unet(paths_.dm(), Role::DmPhi);
    out.labels = round_robin(req.n, kShapeClasses);
    const GuidanceConfig g{cfg_.consistency.cfg_w, cfg_.unet().null_label()};
    out.samples = ddim_sample(eps_fn(*dm), g, sched_, cfg_.eval.ddim_steps, out.labels, dm->sample_shape(), rng);
    return out;
  }
  auto cm = load_unet(paths_.cm_distill(), Role::CmTheta);
  if (req.model == "cm") {
    out.labels = round_robin(req.n, kShapeClasses);
    ConsistencyFunction f(eps_fn(*cm), sched_, cfg_.model.sigma_data);
    out.samples = multistep_sample(f, req.nfes, out.labels, cm->sample_shape(), rng);
    return out;
  }
  const Strategy s = parse_strategy(req.model);
  if (s == Strategy::None || !req.condition) throw UsageError("conditional sampling needs a condition");
  const auto k = *req.condition;
  std::unique_ptr<Adapter> adapter;
  if (s == Strategy::Adapter) adapter = load_adapter();
  auto branch = s == Strategy::Ct ? load_branch(paths_.controlnet_ct(k), k)
                                  : load_branch(paths_.controlnet_dm(k), k);
  Batch eb = eval_batch();
  const int64_t n = std::min<int64_t>(req.n, eb.size());
  out.condition = eval_condition(k).slice0(0, n);
  out.labels.assign(eb.labels.begin(), eb.labels.begin() + n);
  ConsistencyFunction f = transplant(*cm, *branch, ct_sched_, out.condition, adapter.get());
  out.samples = multistep_sample(f, req.nfes, out.labels, cm->sample_shape(), rng);
  return out;
}

std::vector<MetricsRecord> Lab::compare() const {
  std::vector<std::pair<Strategy, ConditionKind>> cells;
  for (const auto& sn : cfg_.strategy.strategies)
    for (const auto& cn : cfg_.strategy.conditions) cells.emplace_back(parse_strategy(sn), parse_condition(cn));
  // Fail before any work when something is missing.
  require(model_path(paths_.cm_distill()));
  for (auto [s, k] : cells) {
    if (s == Strategy::Ct) require(model_path(paths_.controlnet_ct(k)));
    if (s == Strategy::Transfer || s == Strategy::Adapter) require(model_path(paths_.controlnet_dm(k)));
    if (s == Strategy::Adapter) require(model_path(paths_.adapter()));
  }
  fs::create_directories(paths_.compare());
  std::vector<MetricsRecord> rows;
  std::ostringstream pairing;
  for (auto [s, k] : cells) {
    rows.push_back(evaluate(s, k));
    Rng probe = stream(cfg_.eval.seed, "paired_sampling");
    pairing << strategy_name(s) << ',' << condition_name(k) << ",seed=" << cfg_.eval.seed
            << ",first_draw=" << hex(probe()) << '\n';
  }
  write_metrics_csv(paths_.compare() / "metrics.csv", rows);
  std::ofstream(paths_.compare() / "pairing.log", std::ios::binary) << pairing.str();

  // Ranked summary per condition on its fidelity metric.
  std::ostringstream sum;
  sum << std::fixed << std::setprecision(4);
  for (const auto& cn : cfg_.strategy.conditions) {
    const auto k = parse_condition(cn);
    std::vector<std::pair<double, std::string>> ranked;
    for (const auto& r : rows) {
      if (r.condition != cn) continue;
      const double v = k == ConditionKind::Edge     ? *r.edge_iou
                       : k == ConditionKind::Lowres ? -*r.lowres_mse
                                                    : *r.outside_mask_psnr;
      ranked.emplace_back(v, r.strategy);
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](auto& a, auto& b) { return a.first > b.first; });
    sum << cn << ':';
    for (const auto& [v, name] : ranked) sum << ' ' << name << '(' << (k == ConditionKind::Lowres ? -v : v) << ')';
    std::map<std::string, double> by;
    for (const auto& [v, name] : ranked) by[name] = v;
    const bool full = by.count("ct") && by.count("adapter") && by.count("transfer");
    if (full) {
      const bool ok = by["ct"] >= by["adapter"] && by["adapter"] >= by["transfer"];
      sum << (ok ? "  ordering ct>=adapter>=transfer holds" : "  FLAG: ordering ct>=adapter>=transfer violated");
    }
    sum << '\n';
  }
  std::ofstream(paths_.compare() / "summary.txt", std::ios::binary) << sum.str();
  return rows;
}

}  // namespace ccm
