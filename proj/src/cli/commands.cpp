#include "mlad/commands.hpp"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <ostream>

#include "json.hpp"
#include "mlad/errors.hpp"

namespace mlad {

namespace fs = std::filesystem;
using nlohmann::json;

OutputLock::OutputLock(const fs::path& out_dir) : path_(out_dir / ".mlad.lock") {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  for (int attempt = 0; attempt < 2; ++attempt) {
    const int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_EXCL, 0644);
    if (fd >= 0) {
      const std::string pid = std::to_string(::getpid()) + "\n";
      const bool ok = ::write(fd, pid.data(), pid.size()) == static_cast<ssize_t>(pid.size());
      ::close(fd);
      if (!ok) throw IoError("cannot write lock file " + path_.string());
      return;
    }
    if (errno != EEXIST) throw IoError("cannot create lock file " + path_.string() + ": " + std::strerror(errno));
    long owner = 0;
    std::ifstream(path_) >> owner;
    const bool stale = owner > 0 && ::kill(static_cast<pid_t>(owner), 0) != 0 && errno == ESRCH;
    if (!stale)
      throw IoError(out_dir.string() + " is in use by another process (lock " + path_.string() + ")");
    fs::remove(path_, ec);
  }
  throw IoError("cannot acquire lock " + path_.string());
}

OutputLock::~OutputLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

std::size_t thread_override() {
  const char* v = std::getenv("MLAD_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end != '\0' || n < 1) throw ValidationError("MLAD_THREADS must be a positive integer");
  return static_cast<std::size_t>(n);
}

MultimodalDataset experiment_dataset(const ExperimentConfig& cfg) {
  if (!cfg.dataset_manifest.empty()) return load_dataset(cfg.dataset_manifest);
  return synth_generate(cfg.synth);
}

fs::path cmd_gen_data(const SynthSpec& spec, const fs::path& out) {
  spec.validate();
  const fs::path dir = out / "data";
  write_dataset(synth_generate(spec), dir);
  return dir / "manifest.json";
}

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::error_code ec;
  fs::create_directories(path.parent_path(), ec);
  if (ec) throw IoError("cannot create " + path.parent_path().string() + ": " + ec.message());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw IoError("failed writing " + path.string());
}

std::string snapshot(const ExperimentConfig& cfg) { return json::parse(dump_config(cfg)).dump(); }

Split experiment_split(const ExperimentConfig& cfg, const MultimodalDataset& ds, std::uint64_t seed) {
  return stratified_split(ds, cfg.train_frac, cfg.val_frac, seed);
}

json report_json(const MetricReport& r) {
  json j = {{"accuracy", r.accuracy},
            {"weighted_f1", r.weighted_f1},
            {"macro_f1", r.macro_f1},
            {"macro_f1_excludes_zero_support", true},
            {"zero_support_classes", r.zero_support_classes},
            {"per_class_f1", r.per_class_f1},
            {"support", r.support},
            {"confusion", r.confusion}};
  j["auc"] = r.auc ? json(*r.auc) : json(nullptr);
  return j;
}

json mat_json(const Mat& m) {
  json rows = json::array();
  for (std::size_t i = 0; i < m.rows(); ++i) rows.push_back(Vec(m.row(i).begin(), m.row(i).end()));
  return rows;
}

}  // namespace

CheckpointManifest cmd_train(const ExperimentConfig& cfg, const fs::path& out, std::uint64_t seed,
                             const TrainRequest& req, std::ostream& log) {
  cfg.validate();
  const bool all = req.stage == "all";
  const Stage only = all ? Stage::kPhase1 : parse_stage(req.stage);
  const Checkpoint ckpt(out / "checkpoints");
  const std::string snap = snapshot(cfg);

  bool fresh = req.restart || !ckpt.exists();
  if (!fresh) {
    const CheckpointManifest m = ckpt.read_manifest();
    if (m.config != snap || m.seed != seed) {
      if (!all && only == Stage::kPhase1)
        fresh = true;
      else
        throw ValidationError("checkpoint in " + ckpt.dir().string() +
                              " was trained with a different config or seed; use --restart or "
                              "another --out");
    }
  }
  if (fresh) {
    if (!all && only != Stage::kPhase1)
      throw StageChainError("stage " + req.stage + " needs a checkpoint with phase1 complete");
    ckpt.reset(snap, seed);
  }

  const CheckpointManifest before = ckpt.read_manifest();
  std::size_t first = all ? before.next_stage() : static_cast<std::size_t>(only);
  const std::size_t last = all ? kNumStages : first + 1;
  if (first >= last) {
    log << "checkpoint already complete\n";
    return before;
  }

  const MultimodalDataset ds = experiment_dataset(cfg);
  const Split split = experiment_split(cfg, ds, seed);
  const MultimodalDataset train = ds.subset(split.train);
  const Variant variant = cfg.variant();
  PipelineState st = first == 0 ? PipelineState{} : ckpt.load(static_cast<Stage>(first - 1));

  for (std::size_t s = first; s < last; ++s) {
    const Stage stage = static_cast<Stage>(s);
    log << "stage " << to_string(stage) << " (seed " << seed << ")\n";
    switch (stage) {
      case Stage::kPhase1:
        run_phase1(st, train, cfg.pipeline, variant, seed);
        if (!st.phase1_loss.empty()) log << "  final loss " << st.phase1_loss.back() << "\n";
        break;
      case Stage::kQLearn:
        run_qlearn(st, train, cfg.pipeline, variant, seed);
        for (std::size_t m = 0; m < st.model.table.exit_depth.size(); ++m) {
          log << "  exit depths m" << m << ":";
          for (std::size_t d : st.model.table.exit_depth[m]) log << ' ' << d;
          log << "\n";
        }
        break;
      case Stage::kPriors:
        run_priors(st, train, cfg.pipeline, variant);
        for (std::size_t m = 0; m < st.splits.size(); ++m)
          log << "  entropy threshold m" << m << ": " << st.splits[m].threshold << "\n";
        break;
      case Stage::kPhase2:
        run_phase2(st, train, cfg.pipeline, variant, seed);
        if (!st.phase2_loss.empty()) log << "  final loss " << st.phase2_loss.back() << "\n";
        break;
    }
    ckpt.save_stage(stage, st);
  }
  const CheckpointManifest after = ckpt.read_manifest();
  json losses = {{"phase1", st.phase1_loss}, {"qlearn", st.qlearn_loss}, {"phase2", st.phase2_loss}};
  write_text(out / "reports" / "train_losses.json", losses.dump(2) + "\n");
  return after;
}

MetricReport cmd_eval(const ExperimentConfig& cfg, const fs::path& out, std::uint64_t seed,
                      std::ostream& log) {
  cfg.validate();
  const Checkpoint ckpt(out / "checkpoints");
  if (!ckpt.exists()) throw ValidationError("no checkpoint in " + ckpt.dir().string());
  const CheckpointManifest m = ckpt.read_manifest();
  if (!m.has(Stage::kPhase2))
    throw StageChainError("checkpoint in " + ckpt.dir().string() + " is incomplete (next stage: " +
                          to_string(static_cast<Stage>(m.next_stage())) + ")");
  if (m.seed != seed)
    log << "note: checkpoint seed " << m.seed << " is used for the split (requested " << seed << ")\n";
  const PipelineState st = ckpt.load(Stage::kPhase2);

  const MultimodalDataset ds = experiment_dataset(cfg);
  const Split split = experiment_split(cfg, ds, m.seed);
  // Noise is drawn over the whole dataset, as in sweeps, so the corrupted
  // test rows match a sweep cell with the same seed.
  MultimodalDataset test = ds.subset(split.test);
  if (cfg.noise.sigma > 0.0) {
    const FeatureStats bounds = FeatureStats::fit(ds.subset(split.train));
    test = inject_noise(ds, cfg.noise, m.seed, &bounds).subset(split.test);
  }
  const Evaluation ev = evaluate(st, test, true);
  const SadInputs latents = sad_inputs(st.model, st.normalized ? st.stats.normalize(test) : test);

  json report = report_json(ev.report);
  report["seed"] = m.seed;
  report["noise"] = {{"kind", to_string(cfg.noise.kind)}, {"sigma", cfg.noise.sigma},
                     {"fraction", cfg.noise.fraction}, {"target_modalities", cfg.noise.target_modalities}};
  report["test_size"] = test.size();
  report["diagnostics"] = "../diagnostics/diagnostics.json";
  write_text(out / "reports" / "eval.json", report.dump(2) + "\n");

  std::string csv = "index,label,prediction";
  for (std::size_t c = 0; c < test.num_classes; ++c) csv += ",p" + std::to_string(c);
  csv += "\n";
  char buf[32];
  for (std::size_t i = 0; i < ev.predictions.size(); ++i) {
    const Prediction& p = ev.predictions[i];
    csv += std::to_string(split.test[i]) + "," + std::to_string(test.labels[i]) + "," + std::to_string(p.label);
    for (double v : p.probabilities) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      csv += buf;
    }
    csv += "\n";
  }
  write_text(out / "reports" / "predictions.csv", csv);

  json samples = json::array();
  for (std::size_t i = 0; i < ev.predictions.size(); ++i) {
    const Prediction& p = ev.predictions[i];
    Vec latent;
    for (const Vec& z : latents.z[i]) latent.insert(latent.end(), z.begin(), z.end());
    json s = {{"index", split.test[i]},     {"label", test.labels[i]},
              {"prediction", p.label},      {"exit_depth", p.exit_depth},
              {"entropy", p.entropies},     {"gates", mat_json(p.gates)},
              {"latent", latent}};
    if (i < cfg.max_attention_samples) {
      json att = json::array();
      for (const auto& row : p.attention) {
        json r = json::array();
        for (const Mat& a : row) r.push_back(mat_json(a));
        att.push_back(std::move(r));
      }
      s["attention"] = std::move(att);
    }
    samples.push_back(std::move(s));
  }
  json splits = json::array();
  for (const GmmSplit& g : st.splits)
    splits.push_back({{"threshold", g.threshold}, {"mean", g.mean}, {"stddev", g.stddev},
                      {"weight", g.weight}, {"converged", g.converged}});
  const json diag = {{"class_exit_depth", st.model.table.exit_depth},
                     {"gmm", splits},
                     {"samples", samples}};
  write_text(out / "diagnostics" / "diagnostics.json", diag.dump() + "\n");
  log << "accuracy " << ev.report.accuracy << ", weighted F1 " << ev.report.weighted_f1
      << ", macro F1 " << ev.report.macro_f1 << "\n";
  return ev.report;
}

SweepOptions sweep_options(const ExperimentConfig& cfg) {
  SweepOptions o;
  o.train_frac = cfg.train_frac;
  o.val_frac = cfg.val_frac;
  o.fraction = cfg.noise.fraction;
  o.target_modalities = cfg.noise.target_modalities;
  o.noise_on_train = cfg.sweep.noise_on_train;
  return o;
}

namespace {

void write_grid(const std::vector<SweepCell>& cells, const fs::path& dir, const std::string& stem) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  write_sweep_csv(dir / (stem + ".csv"), cells);
  write_sweep_json(dir / (stem + ".json"), cells);
}

void log_summary(const std::vector<SweepCell>& cells, std::ostream& log) {
  for (const SweepSummary& s : summarize(cells))
    log << s.variant << " " << to_string(s.kind) << " sigma=" << s.sigma << ": accuracy "
        << s.accuracy_mean << " +- " << s.accuracy_std << " (" << s.runs << " runs)\n";
}

}  // namespace

std::vector<SweepCell> cmd_sweep(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log) {
  cfg.validate();
  std::vector<Variant> variants;
  for (ReweightMode mode : cfg.sweep.reweight) {
    Variant v = cfg.variant();
    v.reweight = mode;
    if (cfg.sweep.reweight.size() > 1) v.name += "/" + to_string(mode);
    variants.push_back(v);
  }
  const auto cells = noise_sweep(experiment_dataset(cfg), cfg.pipeline, variants, cfg.sweep.sigmas,
                                 cfg.sweep.kinds, cfg.seeds, sweep_options(cfg));
  write_grid(cells, out / "reports", "sweep");
  log_summary(cells, log);
  return cells;
}

std::vector<SweepCell> cmd_ablate(const ExperimentConfig& cfg, const fs::path& out, std::ostream& log) {
  cfg.validate();
  std::vector<Variant> variants;
  for (const auto& name : cfg.ablate.variants) variants.push_back(parse_variant(name, cfg.pipeline.sad.reweight));
  const auto cells = ablation_run(experiment_dataset(cfg), cfg.pipeline, variants, cfg.ablate.sigmas,
                                  cfg.seeds, sweep_options(cfg));
  write_grid(cells, out / "reports", "ablation");
  log_summary(cells, log);
  return cells;
}

}  // namespace mlad
