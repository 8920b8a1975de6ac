#include "mlad/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "mlad/errors.hpp"

namespace mlad {

using nlohmann::json;

namespace {

// Reads keys from one JSON object and complains about leftovers.
class Reader {
 public:
  Reader(const json& obj, std::string where) : obj_(obj), where_(std::move(where)) {
    if (!obj_.is_object()) throw ValidationError(where_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    if (!obj_.contains(key)) return;
    try {
      out = obj_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ValidationError(where_ + "." + key + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    return obj_.contains(key) ? &obj_.at(key) : nullptr;
  }

  std::string path(const char* key) const { return where_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : obj_.items())
      if (!seen_.count(k)) throw ValidationError(where_ + ": unknown key '" + k + "'");
  }

 private:
  const json& obj_;
  std::string where_;
  std::set<std::string> seen_;
};

json synth_to_json(const SynthSpec& s) {
  json pairs = json::array();
  for (const auto& p : s.confusion_pairs)
    pairs.push_back({{"a", p.a}, {"b", p.b}, {"strength", p.strength}, {"modalities", p.modalities}});
  return {{"num_classes", s.num_classes},
          {"num_modalities", s.num_modalities},
          {"dims", s.dims},
          {"samples_per_class", s.samples_per_class},
          {"confusion_pairs", pairs},
          {"depth_profile", s.depth_profile},
          {"tower_depth", s.tower_depth},
          {"class_separation", s.class_separation},
          {"noise_std", s.noise_std},
          {"displacement_fraction", s.displacement_fraction},
          {"displacement_strength", s.displacement_strength},
          {"seed", s.seed}};
}

void synth_from_json(const json& j, const std::string& where, SynthSpec& s) {
  Reader r(j, where);
  r.get("num_classes", s.num_classes);
  r.get("num_modalities", s.num_modalities);
  r.get("dims", s.dims);
  r.get("samples_per_class", s.samples_per_class);
  if (const json* pairs = r.child("confusion_pairs")) {
    if (!pairs->is_array()) throw ValidationError(r.path("confusion_pairs") + ": expected an array");
    s.confusion_pairs.clear();
    for (const json& pj : *pairs) {
      ConfusionPair p;
      Reader pr(pj, r.path("confusion_pairs") + "[]");
      pr.get("a", p.a);
      pr.get("b", p.b);
      pr.get("strength", p.strength);
      pr.get("modalities", p.modalities);
      pr.finish();
      s.confusion_pairs.push_back(std::move(p));
    }
  }
  r.get("depth_profile", s.depth_profile);
  r.get("tower_depth", s.tower_depth);
  r.get("class_separation", s.class_separation);
  r.get("noise_std", s.noise_std);
  r.get("displacement_fraction", s.displacement_fraction);
  r.get("displacement_strength", s.displacement_strength);
  r.get("seed", s.seed);
  r.finish();
  // A single dims entry is broadcast to every modality.
  if (s.dims.size() == 1 && s.num_modalities > 1) s.dims.assign(s.num_modalities, s.dims[0]);
}

std::string depth_mode_name(CadDepthMode m) { return m == CadDepthMode::kAll ? "all" : "final"; }
std::string reduction_name(CadReduction r) { return r == CadReduction::kMean ? "mean" : "sum"; }

template <class T>
std::vector<std::string> names(const std::vector<T>& v) {
  std::vector<std::string> out;
  for (const auto& x : v) out.push_back(to_string(x));
  return out;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (dataset_manifest.empty()) synth.validate();
  if (!(train_frac > 0.0 && val_frac > 0.0 && train_frac + val_frac < 1.0))
    throw ValidationError("split fractions must be positive and sum below 1");
  const TowerSizes& t = pipeline.tower;
  if (t.depth < 1 || t.width < 1 || t.latent_dim < 1 || t.decoder_hidden < 1 ||
      t.transform_hidden < 1)
    throw ValidationError("model sizes must be positive");
  const Phase1Config& p1 = pipeline.phase1;
  if (p1.batch_size < 2 || !(p1.lr > 0.0) || !(p1.weight_decay >= 0.0) || !(p1.lr_decay > 0.0))
    throw ValidationError("phase1: need batch_size >= 2, lr > 0, weight_decay >= 0, lr_decay > 0");
  if (!(p1.cad.alpha >= 0.0)) throw ValidationError("phase1: alpha must be >= 0");
  const QLearnConfig& q = pipeline.qlearn;
  if (q.batch < 1 || !(q.gamma > 0.0 && q.gamma <= 1.0) || !(q.lr > 0.0))
    throw ValidationError("qlearn: need batch >= 1, gamma in (0,1], lr > 0");
  if (!(q.eps_start >= 0.0 && q.eps_start <= 1.0 && q.eps_end >= 0.0 && q.eps_end <= 1.0))
    throw ValidationError("qlearn: exploration rates must lie in [0,1]");
  if (!(pipeline.sad.ridge > 0.0) || !(pipeline.sad.gate_eps > 0.0))
    throw ValidationError("sad: ridge and gate_eps must be positive");
  const Phase2Config& p2 = pipeline.phase2;
  if (p2.batch_size < 1 || !(p2.lr > 0.0) || !(p2.weight_decay >= 0.0) || !(p2.nll_weight >= 0.0))
    throw ValidationError("phase2: need batch_size >= 1, lr > 0, weight_decay >= 0");
  noise.validate();
  if (seeds.empty()) throw ValidationError("seeds must not be empty");
  if (sweep.sigmas.empty() || sweep.kinds.empty() || sweep.reweight.empty())
    throw ValidationError("sweep: sigmas, kinds and reweight must not be empty");
  if (ablate.variants.empty() || ablate.sigmas.empty())
    throw ValidationError("ablate: variants and sigmas must not be empty");
  for (const auto& v : ablate.variants) parse_variant(v);
}

Variant ExperimentConfig::variant() const {
  Variant v;
  v.toggles = ablation;
  v.reweight = pipeline.sad.reweight;
  v.name = ablation.name();
  return v;
}

Variant parse_variant(const std::string& name, ReweightMode reweight) {
  Variant v;
  v.reweight = reweight;
  if (name != "full") {
    std::stringstream ss(name);
    std::string part;
    while (std::getline(ss, part, '+')) {
      if (part == "no-de") v.toggles.de = false;
      else if (part == "no-rccr") v.toggles.rccr = false;
      else if (part == "no-cfmp") v.toggles.cfmp = false;
      else if (part == "no-cmr") v.toggles.cmr = false;
      else throw ValidationError("unknown variant '" + name + "'");
    }
  }
  v.name = v.toggles.name();
  return v;
}

std::string dump_config(const ExperimentConfig& c) {
  const auto& p = c.pipeline;
  json j;
  j["dataset"] = {{"manifest", c.dataset_manifest}, {"synth", synth_to_json(c.synth)}};
  j["split"] = {{"train_frac", c.train_frac}, {"val_frac", c.val_frac}};
  j["normalize_features"] = p.normalize_features;
  j["model"] = {{"depth", p.tower.depth},
                {"width", p.tower.width},
                {"latent_dim", p.tower.latent_dim},
                {"decoder_hidden", p.tower.decoder_hidden},
                {"transform_hidden", p.tower.transform_hidden}};
  j["phase1"] = {{"epochs", p.phase1.epochs},
                 {"batch_size", p.phase1.batch_size},
                 {"lr", p.phase1.lr},
                 {"weight_decay", p.phase1.weight_decay},
                 {"lr_decay", p.phase1.lr_decay},
                 {"lr_decay_every", p.phase1.lr_decay_every},
                 {"depth_mode", depth_mode_name(p.phase1.depth_mode)},
                 {"cad_weight", p.phase1.cad_weight},
                 {"alpha", p.phase1.cad.alpha},
                 {"cross_term", p.phase1.cad.cross_term},
                 {"decode_residual", p.phase1.cad.decode_residual},
                 {"reduction", reduction_name(p.phase1.cad.reduction)}};
  j["qlearn"] = {{"episodes", p.qlearn.episodes},
                 {"batch", p.qlearn.batch},
                 {"gamma", p.qlearn.gamma},
                 {"eps_start", p.qlearn.eps_start},
                 {"eps_end", p.qlearn.eps_end},
                 {"lr", p.qlearn.lr},
                 {"per_class_reward", p.qlearn.per_class_reward},
                 {"reward_draws", p.qlearn.reward_draws},
                 {"normalize_rewards", p.qlearn.normalize_rewards}};
  j["sad"] = {{"ridge", p.sad.ridge},
              {"gate_eps", p.sad.gate_eps},
              {"additive_gate", p.sad.additive_gate},
              {"literal_frame", p.sad.literal_frame},
              {"reweight", to_string(p.sad.reweight)}};
  j["phase2"] = {{"epochs", p.phase2.epochs},
                 {"batch_size", p.phase2.batch_size},
                 {"lr", p.phase2.lr},
                 {"weight_decay", p.phase2.weight_decay},
                 {"nll_weight", p.phase2.nll_weight}};
  j["ablation"] = {{"de", c.ablation.de},
                   {"rccr", c.ablation.rccr},
                   {"cfmp", c.ablation.cfmp},
                   {"cmr", c.ablation.cmr}};
  j["noise"] = {{"kind", to_string(c.noise.kind)},
                {"sigma", c.noise.sigma},
                {"fraction", c.noise.fraction},
                {"target_modalities", c.noise.target_modalities}};
  j["seeds"] = c.seeds;
  j["sweep"] = {{"sigmas", c.sweep.sigmas},
                {"kinds", names(c.sweep.kinds)},
                {"reweight", names(c.sweep.reweight)},
                {"noise_on_train", c.sweep.noise_on_train}};
  j["ablate"] = {{"variants", c.ablate.variants}, {"sigmas", c.ablate.sigmas}};
  j["max_attention_samples"] = c.max_attention_samples;
  j["output_dir"] = c.output_dir;
  return j.dump(2);
}

ExperimentConfig parse_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  ExperimentConfig c;
  auto& p = c.pipeline;
  Reader r(doc, "config");
  if (const json* ds = r.child("dataset")) {
    Reader dr(*ds, "config.dataset");
    dr.get("manifest", c.dataset_manifest);
    if (const json* s = dr.child("synth")) synth_from_json(*s, "config.dataset.synth", c.synth);
    dr.finish();
  }
  if (const json* s = r.child("split")) {
    Reader sr(*s, "config.split");
    sr.get("train_frac", c.train_frac);
    sr.get("val_frac", c.val_frac);
    sr.finish();
  }
  r.get("normalize_features", p.normalize_features);
  if (const json* m = r.child("model")) {
    Reader mr(*m, "config.model");
    mr.get("depth", p.tower.depth);
    mr.get("width", p.tower.width);
    mr.get("latent_dim", p.tower.latent_dim);
    mr.get("decoder_hidden", p.tower.decoder_hidden);
    mr.get("transform_hidden", p.tower.transform_hidden);
    mr.finish();
  }
  if (const json* s = r.child("phase1")) {
    Reader pr(*s, "config.phase1");
    pr.get("epochs", p.phase1.epochs);
    pr.get("batch_size", p.phase1.batch_size);
    pr.get("lr", p.phase1.lr);
    pr.get("weight_decay", p.phase1.weight_decay);
    pr.get("lr_decay", p.phase1.lr_decay);
    pr.get("lr_decay_every", p.phase1.lr_decay_every);
    std::string mode = depth_mode_name(p.phase1.depth_mode);
    pr.get("depth_mode", mode);
    if (mode == "all") p.phase1.depth_mode = CadDepthMode::kAll;
    else if (mode == "final") p.phase1.depth_mode = CadDepthMode::kFinal;
    else throw ValidationError("config.phase1.depth_mode: expected all or final");
    pr.get("cad_weight", p.phase1.cad_weight);
    pr.get("alpha", p.phase1.cad.alpha);
    pr.get("cross_term", p.phase1.cad.cross_term);
    pr.get("decode_residual", p.phase1.cad.decode_residual);
    std::string red = reduction_name(p.phase1.cad.reduction);
    pr.get("reduction", red);
    if (red == "mean") p.phase1.cad.reduction = CadReduction::kMean;
    else if (red == "sum") p.phase1.cad.reduction = CadReduction::kSum;
    else throw ValidationError("config.phase1.reduction: expected mean or sum");
    pr.finish();
  }
  if (const json* s = r.child("qlearn")) {
    Reader qr(*s, "config.qlearn");
    qr.get("episodes", p.qlearn.episodes);
    qr.get("batch", p.qlearn.batch);
    qr.get("gamma", p.qlearn.gamma);
    qr.get("eps_start", p.qlearn.eps_start);
    qr.get("eps_end", p.qlearn.eps_end);
    qr.get("lr", p.qlearn.lr);
    qr.get("per_class_reward", p.qlearn.per_class_reward);
    qr.get("reward_draws", p.qlearn.reward_draws);
    qr.get("normalize_rewards", p.qlearn.normalize_rewards);
    qr.finish();
  }
  if (const json* s = r.child("sad")) {
    Reader sr(*s, "config.sad");
    sr.get("ridge", p.sad.ridge);
    sr.get("gate_eps", p.sad.gate_eps);
    sr.get("additive_gate", p.sad.additive_gate);
    sr.get("literal_frame", p.sad.literal_frame);
    std::string rw = to_string(p.sad.reweight);
    sr.get("reweight", rw);
    p.sad.reweight = parse_reweight_mode(rw);
    sr.finish();
  }
  if (const json* s = r.child("phase2")) {
    Reader pr(*s, "config.phase2");
    pr.get("epochs", p.phase2.epochs);
    pr.get("batch_size", p.phase2.batch_size);
    pr.get("lr", p.phase2.lr);
    pr.get("weight_decay", p.phase2.weight_decay);
    pr.get("nll_weight", p.phase2.nll_weight);
    pr.finish();
  }
  if (const json* s = r.child("ablation")) {
    Reader ar(*s, "config.ablation");
    ar.get("de", c.ablation.de);
    ar.get("rccr", c.ablation.rccr);
    ar.get("cfmp", c.ablation.cfmp);
    ar.get("cmr", c.ablation.cmr);
    ar.finish();
  }
  if (const json* s = r.child("noise")) {
    Reader nr(*s, "config.noise");
    std::string kind = to_string(c.noise.kind);
    nr.get("kind", kind);
    c.noise.kind = parse_noise_kind(kind);
    nr.get("sigma", c.noise.sigma);
    nr.get("fraction", c.noise.fraction);
    nr.get("target_modalities", c.noise.target_modalities);
    nr.finish();
  }
  r.get("seeds", c.seeds);
  if (const json* s = r.child("sweep")) {
    Reader sr(*s, "config.sweep");
    sr.get("sigmas", c.sweep.sigmas);
    std::vector<std::string> kinds = names(c.sweep.kinds), rw = names(c.sweep.reweight);
    sr.get("kinds", kinds);
    sr.get("reweight", rw);
    c.sweep.kinds.clear();
    for (const auto& k : kinds) c.sweep.kinds.push_back(parse_noise_kind(k));
    c.sweep.reweight.clear();
    for (const auto& k : rw) c.sweep.reweight.push_back(parse_reweight_mode(k));
    sr.get("noise_on_train", c.sweep.noise_on_train);
    sr.finish();
  }
  if (const json* s = r.child("ablate")) {
    Reader ar(*s, "config.ablate");
    ar.get("variants", c.ablate.variants);
    ar.get("sigmas", c.ablate.sigmas);
    ar.finish();
  }
  r.get("max_attention_samples", c.max_attention_samples);
  r.get("output_dir", c.output_dir);
  r.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  ExperimentConfig c = parse_config(ss.str());
  // Relative manifest paths are taken relative to the config file.
  if (!c.dataset_manifest.empty() && std::filesystem::path(c.dataset_manifest).is_relative())
    c.dataset_manifest = (path.parent_path() / c.dataset_manifest).lexically_normal().string();
  return c;
}

SynthSpec parse_synth_spec(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("synth spec: ") + e.what());
  }
  SynthSpec s;
  if (doc.is_object() && doc.contains("dataset")) {
    const json& ds = doc.at("dataset");
    if (ds.is_object() && ds.contains("synth")) synth_from_json(ds.at("synth"), "dataset.synth", s);
  } else {
    synth_from_json(doc, "synth", s);
  }
  s.validate();
  return s;
}

}  // namespace mlad
