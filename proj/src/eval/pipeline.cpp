#include "mlad/errors.hpp"
#include "mlad/eval.hpp"

namespace mlad {

std::string AblationToggles::name() const {
  std::string out;
  auto add = [&](bool on, const char* tag) {
    if (on) return;
    if (!out.empty()) out += "+";
    out += std::string("no-") + tag;
  };
  add(de, "de");
  add(rccr, "rccr");
  add(cfmp, "cfmp");
  add(cmr, "cmr");
  return out.empty() ? "full" : out;
}

std::vector<Variant> single_toggle_ablations() {
  std::vector<Variant> out(5);
  out[1].toggles.de = false;
  out[2].toggles.rccr = false;
  out[3].toggles.cfmp = false;
  out[4].toggles.cmr = false;
  for (auto& v : out) v.name = v.toggles.name();
  return out;
}

std::string to_string(ReweightMode mode) {
  switch (mode) {
    case ReweightMode::kNormal: return "normal";
    case ReweightMode::kUniform: return "none";
    case ReweightMode::kNegative: return "negative";
  }
  return "normal";
}

ReweightMode parse_reweight_mode(const std::string& s) {
  if (s == "normal") return ReweightMode::kNormal;
  if (s == "none" || s == "uniform") return ReweightMode::kUniform;
  if (s == "negative") return ReweightMode::kNegative;
  throw ValidationError("unknown reweight mode '" + s + "' (expected normal, none or negative)");
}

namespace {

MultimodalDataset prepared(const PipelineState& st, const MultimodalDataset& ds) {
  return st.normalized ? st.stats.normalize(ds) : ds;
}

SadOptions sad_options(const PipelineConfig& cfg, const Variant& v) {
  SadOptions o = cfg.sad;
  o.cfmp = o.cfmp && v.toggles.cfmp;
  o.cmr = o.cmr && v.toggles.cmr;
  o.reweight = v.reweight;
  return o;
}

CadOptions cad_options(const PipelineConfig& cfg, const Variant& v) {
  CadOptions o = cfg.phase1.cad;
  o.cross_term = o.cross_term && v.toggles.rccr;
  return o;
}

}  // namespace

void run_phase1(PipelineState& st, const MultimodalDataset& train, const PipelineConfig& cfg,
                const Variant& variant, std::uint64_t seed) {
  train.validate(true);
  st.stats = FeatureStats::fit(train);
  st.normalized = cfg.normalize_features;
  const MultimodalDataset x = prepared(st, train);
  st.model = MladModel{};
  st.model.towers = init_towers(x, cfg.tower, seed);
  Phase1Config p1 = cfg.phase1;
  p1.cad = cad_options(cfg, variant);
  auto res = phase1_train(st.model.towers, x, p1, seed);
  st.phase1_loss = std::move(res.epoch_loss);
  st.cache = std::move(res.cache);
  st.model.table = std::move(res.table);
}

void run_qlearn(PipelineState& st, const MultimodalDataset& train, const PipelineConfig& cfg,
                const Variant& variant, std::uint64_t seed) {
  const MultimodalDataset x = prepared(st, train);
  st.model.policy = ExitPolicy::init(st.model.towers, seed, cfg.qlearn.gamma);
  st.model.dynamic_exit = variant.toggles.de;
  st.model.table = final_depth_table(st.cache, x);
  st.rewards.clear();
  st.qlearn_loss.clear();
  if (!variant.toggles.de) return;
  auto res = qlearn_train(st.model.towers, st.model.policy, st.model.table, st.cache, x,
                          cfg.qlearn, cad_options(cfg, variant), seed);
  st.rewards = std::move(res.rewards);
  st.qlearn_loss = std::move(res.episode_loss);
}

void run_priors(PipelineState& st, const MultimodalDataset& train, const PipelineConfig& cfg,
                const Variant& variant) {
  const MultimodalDataset x = prepared(st, train);
  st.model.sad = sad_options(cfg, variant);
  const SadInputs in = sad_inputs(st.model, x);
  st.model.priors = fit_priors(in, x.num_modalities(), st.model.sad, &st.splits);
}

void run_phase2(PipelineState& st, const MultimodalDataset& train, const PipelineConfig& cfg,
                const Variant& variant, std::uint64_t seed) {
  const MultimodalDataset x = prepared(st, train);
  st.model.sad = sad_options(cfg, variant);
  const std::size_t M = x.num_modalities();
  const std::size_t L = cfg.tower.latent_dim;
  Rng init = Rng::stream(seed, "init-sad");
  st.model.rectifier = Rectifier(M, L, init);
  st.model.head = ClassifierHead(M * L, x.num_classes, init);
  const SadInputs in = sad_inputs(st.model, x);
  auto res = phase2_train(in, st.model.priors, st.model.rectifier, st.model.head, st.model.sad,
                          cfg.phase2, seed);
  st.phase2_loss = std::move(res.epoch_loss);
}

PipelineState train_pipeline(const MultimodalDataset& train, const PipelineConfig& cfg,
                             const Variant& variant, std::uint64_t seed) {
  PipelineState st;
  run_phase1(st, train, cfg, variant, seed);
  run_qlearn(st, train, cfg, variant, seed);
  run_priors(st, train, cfg, variant);
  run_phase2(st, train, cfg, variant, seed);
  return st;
}

Evaluation evaluate(const PipelineState& st, const MultimodalDataset& test, bool keep_attention) {
  const MultimodalDataset x = prepared(st, test);
  Evaluation ev;
  ev.predictions = predict_batch(st.model, x, keep_attention);
  std::vector<std::size_t> preds;
  Mat scores(test.size(), test.num_classes);
  for (std::size_t i = 0; i < ev.predictions.size(); ++i) {
    preds.push_back(ev.predictions[i].label);
    scores.set_row(i, ev.predictions[i].probabilities);
  }
  ev.report = compute_metrics(preds, scores, test.labels, test.num_classes);
  return ev;
}

}  // namespace mlad
