// ccm: train, sample, evaluate, and compare consistency-model control
// strategies on the shapes dataset.
//
//   ccm --config run.json train dm
//   ccm --config run.json train controlnet-ct --condition mask
//   ccm --config run.json sample --model ct --condition edge --nfes 4
//   ccm --config run.json compare
//
// Exit codes: 0 ok, 1 bad usage or config, 2 missing or mismatched
// artifact, 3 non-finite loss.

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "ccm/checkpoint.hpp"
#include "ccm/pipeline.hpp"

using namespace ccm;

namespace {

struct Globals {
  std::string config;
  std::optional<uint64_t> seed;
  std::string out;
};

RunConfig resolve(const Globals& g) {
  RunConfig c = g.config.empty() ? RunConfig{} : load_config(g.config);
  if (g.seed) c.seed = *g.seed;
  if (!g.out.empty()) c.io.out = g.out;
  c.validate();
  return c;
}

void report(const StageReport& r) {
  const double last = r.losses.empty() ? 0.0 : r.losses.back();
  std::cout << r.kind << ": " << r.losses.size() << " steps, final loss " << std::setprecision(6) << last
            << ", " << std::fixed << std::setprecision(1) << r.seconds << " s -> " << r.dir.string() << '\n';
  std::cout.unsetf(std::ios::fixed);
  for (const auto& [name, before] : r.frozen_before)
    std::cout << "  frozen " << name << " hash " << std::hex << before << " -> " << r.frozen_after.at(name)
              << std::dec << '\n';
}

std::optional<ConditionKind> condition_or_default(const std::string& s, const RunConfig& c) {
  return parse_condition(s.empty() ? c.strategy.condition : s);
}

int run_train(const Globals& g, const std::string& kind, const std::string& cond) {
  Lab lab(resolve(g));
  if (kind == "dm") report(lab.train_dm());
  else if (kind == "cm-distill") report(lab.train_cm_distill());
  else if (kind == "cm-ct") report(lab.train_cm_ct());
  else if (kind == "controlnet-dm") report(lab.train_controlnet_dm(*condition_or_default(cond, lab.config())));
  else if (kind == "controlnet-ct") report(lab.train_controlnet_ct(*condition_or_default(cond, lab.config())));
  else if (kind == "adapter") report(lab.train_adapter());
  else throw UsageError("unknown training kind: " + kind);
  return 0;
}

int run_sample(const Globals& g, SampleRequest req, const std::string& cond) {
  const RunConfig cfg = resolve(g);
  Lab lab(cfg);
  const bool conditional = req.model == "transfer" || req.model == "ct" || req.model == "adapter";
  if (conditional) req.condition = condition_or_default(cond, cfg);
  const uint64_t seed = g.seed ? *g.seed : cfg.eval.seed;
  const SampleResult res = lab.sample(req, seed);

  const fs::path dir = lab.paths().samples();
  fs::create_directories(dir);
  std::string stem = req.model;
  if (req.condition) stem += std::string("_") + condition_name(*req.condition);
  stem += "_nfes" + std::to_string(req.nfes) + "_seed" + std::to_string(seed);

  TensorMap dump{{"samples", res.samples}};
  Tensor labels({static_cast<int64_t>(res.labels.size())});
  for (size_t i = 0; i < res.labels.size(); ++i) labels[static_cast<int64_t>(i)] = static_cast<float>(res.labels[i]);
  dump["labels"] = labels;
  if (res.condition.numel() > 0) dump["condition"] = res.condition;
  save_checkpoint(dir / (stem + ".tensors"), dump);

  if (res.samples.rank() == 2) {
    // Point samples from the 2D model.
    std::ofstream f(dir / (stem + ".csv"), std::ios::binary);
    f << "x,y\n" << std::setprecision(9);
    for (int64_t i = 0; i < res.samples.dim(0); ++i) f << res.samples[2 * i] << ',' << res.samples[2 * i + 1] << '\n';
  } else {
    write_pgm_grid(dir / (stem + ".pgm"), res.samples, 8, res.condition.numel() > 0 ? &res.condition : nullptr);
  }
  save_config(dir / (stem + ".config.json"), cfg);
  std::cout << "wrote " << (dir / stem).string() << ".*\n";
  return 0;
}

int run_eval(const Globals& g, const std::string& strategy, const std::string& cond) {
  const RunConfig cfg = resolve(g);
  Lab lab(cfg);
  const Strategy s = parse_strategy(strategy);
  std::optional<ConditionKind> k;
  if (s != Strategy::None) k = condition_or_default(cond, cfg);
  const MetricsRecord m = lab.evaluate(s, k);
  const fs::path dir = lab.paths().eval();
  fs::create_directories(dir);
  const std::string stem = std::string(strategy_name(s)) + "_" + m.condition;
  write_metrics_csv(dir / (stem + ".csv"), {m});
  save_config(dir / (stem + ".config.json"), cfg);
  std::cout << metrics_csv({m});
  return 0;
}

int run_compare(const Globals& g) {
  const RunConfig cfg = resolve(g);
  Lab lab(cfg);
  const auto rows = lab.compare();
  save_config(lab.paths().compare() / "config.json", cfg);
  std::cout << metrics_csv(rows);
  std::ifstream sum(lab.paths().compare() / "summary.txt");
  std::cout << sum.rdbuf();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Consistency-model control strategies: train, sample, evaluate, compare."};
  app.require_subcommand(1);
  Globals g;
  uint64_t seed = 0;
  app.add_option("--config", g.config, "Run config (JSON)")->check(CLI::ExistingFile);
  auto* seed_opt = app.add_option("--seed", seed, "Override the run seed");
  app.add_option("--out", g.out, "Override io.out");

  std::string kind, cond;
  auto* train = app.add_subcommand("train", "Train one stage");
  train->add_option("kind", kind, "dm | cm-distill | cm-ct | controlnet-dm | controlnet-ct | adapter")
      ->required()
      ->check(CLI::IsMember({"dm", "cm-distill", "cm-ct", "controlnet-dm", "controlnet-ct", "adapter"}));

  SampleRequest req;
  auto* sample = app.add_subcommand("sample", "Sample a trained model");
  sample->add_option("--model", req.model, "cm | dm | cm_ct | transfer | ct | adapter")
      ->check(CLI::IsMember({"cm", "dm", "cm_ct", "transfer", "ct", "adapter"}))
      ->capture_default_str();
  sample->add_option("--nfes", req.nfes, "Network evaluations")->capture_default_str();
  sample->add_option("-n", req.n, "Number of samples")->capture_default_str();

  std::string strategy = "ct";
  auto* eval = app.add_subcommand("eval", "Metrics for one strategy and condition");
  eval->add_option("--strategy", strategy, "none | transfer | ct | adapter")
      ->check(CLI::IsMember({"none", "transfer", "ct", "adapter"}))
      ->capture_default_str();

  auto* compare = app.add_subcommand("compare", "Every configured strategy x condition");

  for (auto* sub : {train, sample, eval})
    sub->add_option("--condition", cond, "edge | lowres | mask (default: strategy.condition)")
        ->check(CLI::IsMember({"edge", "lowres", "mask"}));
  // Global flags are accepted after the subcommand as well.
  for (auto* sub : {train, sample, eval, compare}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }
  if (*seed_opt) g.seed = seed;

  try {
    if (*train) return run_train(g, kind, cond);
    if (*sample) return run_sample(g, req, cond);
    if (*eval) return run_eval(g, strategy, cond);
    return run_compare(g);
  } catch (const MissingArtifact& e) {
    std::cerr << "missing artifact: " << e.artifact() << '\n';
    return 2;
  } catch (const StructuralError& e) {
    std::cerr << "artifact mismatch: " << e.what() << '\n';
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "non-finite value: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
