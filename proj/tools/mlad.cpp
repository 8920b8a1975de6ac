#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "mlad/commands.hpp"
#include "mlad/errors.hpp"

namespace fs = std::filesystem;
using namespace mlad;

namespace {

struct CommonArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config, "experiment config (JSON); defaults apply to absent keys");
  cmd->add_option("--seed", a.seed, "seed (default: first entry of config seeds)");
  cmd->add_option("--out", a.out, "output directory (default: config output_dir)");
}

ExperimentConfig resolve(const CommonArgs& a, fs::path& out, std::size_t threads) {
  ExperimentConfig cfg = a.config.empty() ? ExperimentConfig{} : load_config(a.config);
  if (a.seed) cfg.seeds = {*a.seed};
  if (!a.out.empty()) cfg.output_dir = a.out;
  cfg.validate();
  out = cfg.output_dir;
  const std::string dump = dump_config(cfg);
  std::error_code ec;
  fs::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  std::ofstream(out / "effective_config.json") << dump << '\n';
  std::cout << "effective config (threads " << threads << "):\n" << dump << '\n';
  return cfg;
}

int run(int argc, char** argv) {
  CLI::App app{"Multi-level adaptive deconfusion for multimodal classification"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, eval_args, sweep_args, ablate_args;
  std::string stage = "all";
  bool restart = false;

  auto* gen = app.add_subcommand("gen-data", "write a synthetic dataset (CSV + manifest)");
  add_common(gen, gen_args);
  auto* train = app.add_subcommand("train", "train one stage or the whole pipeline");
  add_common(train, train_args);
  train->add_option("--stage", stage, "phase1, qlearn, priors, phase2 or all")
      ->check(CLI::IsMember({"phase1", "qlearn", "priors", "phase2", "all"}));
  train->add_flag("--restart", restart, "discard an existing checkpoint");
  auto* eval = app.add_subcommand("eval", "evaluate a trained checkpoint on the test split");
  add_common(eval, eval_args);
  auto* sweep = app.add_subcommand("sweep", "noise sweep over sigmas, kinds and seeds");
  add_common(sweep, sweep_args);
  auto* ablate = app.add_subcommand("ablate", "ablation table over model variants");
  add_common(ablate, ablate_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kValidation);
  }

  const std::size_t threads = thread_override();
  fs::path out;
  if (gen->parsed()) {
    SynthSpec spec;
    if (!gen_args.config.empty()) {
      std::ifstream in(gen_args.config);
      if (!in) throw IoError("cannot open " + gen_args.config);
      std::stringstream ss;
      ss << in.rdbuf();
      spec = parse_synth_spec(ss.str());
    }
    if (gen_args.seed) spec.seed = *gen_args.seed;
    out = gen_args.out.empty() ? fs::path("runs/mlad") : fs::path(gen_args.out);
    OutputLock lock(out);
    std::cout << "wrote " << cmd_gen_data(spec, out).string() << '\n';
  } else if (train->parsed()) {
    const ExperimentConfig cfg = resolve(train_args, out, threads);
    OutputLock lock(out);
    const auto m = cmd_train(cfg, out, cfg.seeds.front(), {stage, restart}, std::cerr);
    std::cout << "checkpoint " << (out / "checkpoints").string() << " stages done: " << m.next_stage()
              << "/" << kNumStages << '\n';
  } else if (eval->parsed()) {
    const ExperimentConfig cfg = resolve(eval_args, out, threads);
    OutputLock lock(out);
    const MetricReport r = cmd_eval(cfg, out, cfg.seeds.front(), std::cerr);
    std::cout << "accuracy " << r.accuracy << '\n';
  } else if (sweep->parsed()) {
    const ExperimentConfig cfg = resolve(sweep_args, out, threads);
    OutputLock lock(out);
    cmd_sweep(cfg, out, std::cout);
  } else if (ablate->parsed()) {
    const ExperimentConfig cfg = resolve(ablate_args, out, threads);
    OutputLock lock(out);
    cmd_ablate(cfg, out, std::cout);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(e.exit_code());
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kValidation);
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kIo);
  } catch (const std::bad_alloc&) {
    std::cerr << "error: out of memory\n";
    return static_cast<int>(ExitCode::kNumerical);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return static_cast<int>(ExitCode::kValidation);
  }
}
