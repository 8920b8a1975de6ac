#include "mlad/checkpoint.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <sstream>

#include "json.hpp"
#include "mlad/errors.hpp"

namespace mlad {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kStageNames[kNumStages] = {"phase1", "qlearn", "priors", "phase2"};

std::string digest_bytes(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot open " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Mat gaussians_field(const std::vector<GaussianDiag>& g, bool var) {
  Mat out(g.size(), g.empty() ? 0 : g.front().dim());
  for (std::size_t c = 0; c < g.size(); ++c) out.set_row(c, var ? g[c].var : g[c].mean);
  return out;
}

Vec row0(const Mat& m) {
  if (m.rows() != 1) throw ValidationError("checkpoint: expected a row vector");
  const auto r = m.row(0);
  return Vec(r.begin(), r.end());
}

Vec as_vec(const Mat& m) { return m.rows() == 0 ? Vec{} : row0(m); }

json sad_json(const SadOptions& o) {
  return {{"gate_eps", o.gate_eps},     {"ridge", o.ridge},
          {"additive_gate", o.additive_gate}, {"literal_frame", o.literal_frame},
          {"cfmp", o.cfmp},             {"cmr", o.cmr},
          {"reweight", static_cast<int>(o.reweight)}};
}

SadOptions sad_from_json(const json& j) {
  SadOptions o;
  o.gate_eps = j.at("gate_eps").get<double>();
  o.ridge = j.at("ridge").get<double>();
  o.additive_gate = j.at("additive_gate").get<bool>();
  o.literal_frame = j.at("literal_frame").get<bool>();
  o.cfmp = j.at("cfmp").get<bool>();
  o.cmr = j.at("cmr").get<bool>();
  o.reweight = static_cast<ReweightMode>(j.at("reweight").get<int>());
  return o;
}

// Writes matrices of one stage under <stage>/... and records them.
class StageWriter {
 public:
  StageWriter(const fs::path& dir, Stage stage, CheckpointManifest& m)
      : dir_(dir), stage_(stage), manifest_(m) {}

  void put(const std::string& name, const Mat& value) {
    const std::string rel = std::string(kStageNames[static_cast<int>(stage_)]) + "/" + name + ".bin";
    const fs::path file = dir_ / rel;
    std::error_code ec;
    fs::create_directories(file.parent_path(), ec);
    if (ec) throw IoError("cannot create " + file.parent_path().string() + ": " + ec.message());
    std::ostringstream buf(std::ios::binary);
    write_mat(buf, value);
    const std::string bytes = buf.str();
    std::ofstream out(file, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing " + file.string());
    manifest_.files[rel] = {value.rows(), value.cols(), digest_bytes(bytes), stage_};
  }
  void put(const std::string& name, const Vec& v) { put(name, Mat::row_vector(v)); }

 private:
  fs::path dir_;
  Stage stage_;
  CheckpointManifest& manifest_;
};

class StageReader {
 public:
  StageReader(const fs::path& dir, Stage stage, const CheckpointManifest& m)
      : dir_(dir), stage_(stage), manifest_(m) {}

  Mat get(const std::string& name) const {
    const std::string rel = std::string(kStageNames[static_cast<int>(stage_)]) + "/" + name + ".bin";
    const auto it = manifest_.files.find(rel);
    if (it == manifest_.files.end()) throw ValidationError("checkpoint: missing entry " + rel);
    const fs::path file = dir_ / rel;
    if (!fs::exists(file)) throw IoError("checkpoint: missing file " + file.string());
    const std::string bytes = slurp(file);
    if (digest_bytes(bytes) != it->second.sha256)
      throw IoError("checkpoint: digest mismatch for " + file.string());
    std::istringstream in(bytes, std::ios::binary);
    Mat m = read_mat(in);
    if (m.rows() != it->second.rows || m.cols() != it->second.cols)
      throw ValidationError("checkpoint: shape mismatch for " + rel);
    return m;
  }
  Vec vec(const std::string& name) const { return as_vec(get(name)); }

  void into(const std::string& name, Param& p) const {
    Mat v = get(name);
    if (v.rows() != p.value.rows() || v.cols() != p.value.cols())
      throw ValidationError("checkpoint: parameter shape mismatch for " + name);
    p.reset(std::move(v));
  }
  void into(const std::string& name, Linear& l) const {
    into(name + "/weight", l.weight());
    into(name + "/bias", l.bias());
  }

 private:
  fs::path dir_;
  Stage stage_;
  const CheckpointManifest& manifest_;
};

std::string mk(std::size_t m) { return "m" + std::to_string(m); }
std::string dk(std::size_t d) { return "d" + std::to_string(d); }

void save_table(StageWriter& w, const ClassLatentTable& t) {
  for (std::size_t m = 0; m < t.dist.size(); ++m) {
    w.put("table/" + mk(m) + "/mean", gaussians_field(t.dist[m], false));
    w.put("table/" + mk(m) + "/var", gaussians_field(t.dist[m], true));
  }
  w.put("table/class_prior", t.class_prior);
}

ClassLatentTable load_table(const StageReader& r, const json& meta, std::size_t M) {
  ClassLatentTable t;
  t.exit_depth = meta.at("exit_depth").get<std::vector<std::vector<std::size_t>>>();
  for (std::size_t m = 0; m < M; ++m) {
    const Mat mean = r.get("table/" + mk(m) + "/mean"), var = r.get("table/" + mk(m) + "/var");
    std::vector<GaussianDiag> g;
    for (std::size_t c = 0; c < mean.rows(); ++c)
      g.push_back({Vec(mean.row(c).begin(), mean.row(c).end()), Vec(var.row(c).begin(), var.row(c).end())});
    t.dist.push_back(std::move(g));
  }
  t.class_prior = r.vec("table/class_prior");
  return t;
}

}  // namespace

std::string to_string(Stage s) { return kStageNames[static_cast<int>(s)]; }

Stage parse_stage(const std::string& s) {
  for (std::size_t i = 0; i < kNumStages; ++i)
    if (s == kStageNames[i]) return static_cast<Stage>(i);
  throw ValidationError("unknown stage '" + s + "' (expected phase1, qlearn, priors, phase2 or all)");
}

std::string sha256_hex(const fs::path& file) { return digest_bytes(slurp(file)); }

std::size_t CheckpointManifest::next_stage() const {
  std::size_t i = 0;
  while (i < kNumStages && complete[i]) ++i;
  return i;
}

bool Checkpoint::exists() const { return fs::exists(dir_ / "manifest.json"); }

CheckpointManifest Checkpoint::read_manifest() const {
  const fs::path path = dir_ / "manifest.json";
  if (!fs::exists(path)) throw ValidationError("no checkpoint at " + dir_.string());
  CheckpointManifest m;
  try {
    const json j = json::parse(slurp(path));
    m.schema_version = j.at("schema_version").get<int>();
    if (m.schema_version != CheckpointManifest::kSchemaVersion)
      throw ValidationError("checkpoint schema version " + std::to_string(m.schema_version) +
                            " is not supported");
    m.config = j.at("config").dump();
    m.seed = j.at("seed").get<std::uint64_t>();
    for (std::size_t i = 0; i < kNumStages; ++i)
      m.complete[i] = j.at("stages").at(kStageNames[i]).get<bool>();
    for (const auto& [rel, e] : j.at("files").items())
      m.files[rel] = {e.at("rows").get<std::size_t>(), e.at("cols").get<std::size_t>(),
                      e.at("sha256").get<std::string>(), parse_stage(e.at("stage").get<std::string>())};
    m.meta = j.at("meta").dump();
  } catch (const json::exception& e) {
    throw ValidationError("checkpoint manifest " + path.string() + ": " + e.what());
  }
  for (std::size_t i = 1; i < kNumStages; ++i)
    if (m.complete[i] && !m.complete[i - 1])
      throw StageChainError("checkpoint manifest: stage " + std::string(kStageNames[i]) +
                            " is marked complete but " + kStageNames[i - 1] + " is not");
  return m;
}

void Checkpoint::write_manifest(const CheckpointManifest& m) const {
  json j;
  j["schema_version"] = m.schema_version;
  j["config"] = json::parse(m.config);
  j["seed"] = m.seed;
  for (std::size_t i = 0; i < kNumStages; ++i) j["stages"][kStageNames[i]] = m.complete[i];
  j["files"] = json::object();
  for (const auto& [rel, e] : m.files)
    j["files"][rel] = {{"rows", e.rows}, {"cols", e.cols}, {"sha256", e.sha256}, {"stage", to_string(e.stage)}};
  j["meta"] = m.meta.empty() ? json::object() : json::parse(m.meta);
  const fs::path tmp = dir_ / "manifest.json.tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed writing " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, dir_ / "manifest.json", ec);
  if (ec) throw IoError("cannot replace checkpoint manifest: " + ec.message());
}

void Checkpoint::reset(const std::string& config, std::uint64_t seed) const {
  std::error_code ec;
  fs::remove_all(dir_, ec);
  fs::create_directories(dir_, ec);
  if (ec) throw IoError("cannot create " + dir_.string() + ": " + ec.message());
  CheckpointManifest m;
  m.config = json::parse(config).dump();
  m.seed = seed;
  m.meta = "{}";
  write_manifest(m);
}

void Checkpoint::save_stage(Stage stage, const PipelineState& st) const {
  CheckpointManifest m = read_manifest();
  const std::size_t s = static_cast<std::size_t>(stage);
  for (std::size_t i = 0; i < s; ++i)
    if (!m.complete[i])
      throw StageChainError("stage " + to_string(stage) + " needs " + kStageNames[i] + " first");
  json meta = json::parse(m.meta);
  for (std::size_t i = s; i < kNumStages; ++i) {
    m.complete[i] = false;
    meta.erase(kStageNames[i]);
    std::error_code ec;
    fs::remove_all(dir_ / kStageNames[i], ec);
  }
  std::erase_if(m.files, [&](const auto& kv) { return static_cast<std::size_t>(kv.second.stage) >= s; });

  StageWriter w(dir_, stage, m);
  const auto& model = st.model;
  const std::size_t M = model.towers.size();
  json sm;
  switch (stage) {
    case Stage::kPhase1: {
      json towers = json::array();
      for (std::size_t k = 0; k < M; ++k) {
        auto& tower = const_cast<ModalityTower&>(model.towers[k]);
        const TowerSizes& z = tower.sizes();
        towers.push_back({{"input_dim", z.input_dim}, {"num_classes", z.num_classes},
                          {"depth", z.depth}, {"width", z.width}, {"latent_dim", z.latent_dim},
                          {"decoder_hidden", z.decoder_hidden}, {"transform_hidden", z.transform_hidden}});
        for (auto& [name, p] : tower.named_params()) w.put("towers/" + mk(k) + "/" + name, p->value);
        w.put("stats/" + mk(k) + "/mean", st.stats.mean[k]);
        w.put("stats/" + mk(k) + "/std", st.stats.std[k]);
        w.put("stats/" + mk(k) + "/min", st.stats.min[k]);
        w.put("stats/" + mk(k) + "/max", st.stats.max[k]);
        for (std::size_t d = 0; d < st.cache[k].size(); ++d) {
          w.put("cache/" + mk(k) + "/" + dk(d + 1) + "/mean", gaussians_field(st.cache[k][d], false));
          w.put("cache/" + mk(k) + "/" + dk(d + 1) + "/var", gaussians_field(st.cache[k][d], true));
        }
      }
      save_table(w, model.table);
      w.put("loss", st.phase1_loss);
      sm = {{"towers", towers}, {"normalized", st.normalized}, {"exit_depth", model.table.exit_depth},
            {"class_prior", model.table.class_prior}};
      break;
    }
    case Stage::kQLearn: {
      for (std::size_t k = 0; k < model.policy.q_heads.size(); ++k)
        for (std::size_t d = 0; d < model.policy.q_heads[k].size(); ++d) {
          const Linear& h = model.policy.q_heads[k][d];
          w.put("policy/" + mk(k) + "/" + dk(d + 1) + "/weight", h.weight().value);
          w.put("policy/" + mk(k) + "/" + dk(d + 1) + "/bias", h.bias().value);
        }
      save_table(w, model.table);
      for (std::size_t k = 0; k < st.rewards.size(); ++k) {
        Mat r(st.rewards[k].size(), st.rewards[k].empty() ? 0 : st.rewards[k][0].size());
        for (std::size_t d = 0; d < r.rows(); ++d) r.set_row(d, st.rewards[k][d]);
        w.put("rewards/" + mk(k), r);
      }
      w.put("loss", st.qlearn_loss);
      sm = {{"gamma", model.policy.gamma}, {"dynamic_exit", model.dynamic_exit},
            {"exit_depth", model.table.exit_depth}, {"rewards", st.rewards.size()}};
      break;
    }
    case Stage::kPriors: {
      json support = json::array(), sweeps = json::array(), splits = json::array();
      for (std::size_t k = 0; k < model.priors.size(); ++k) {
        const ModalityPrior& p = model.priors[k];
        w.put("priors/" + mk(k) + "/mean", p.mean);
        w.put("priors/" + mk(k) + "/cov", p.cov);
        w.put("priors/" + mk(k) + "/eigvecs", p.eig.eigvecs);
        w.put("priors/" + mk(k) + "/eigvals", p.eig.eigvals);
        w.put("priors/" + mk(k) + "/reweight", p.reweight);
        support.push_back(p.support_count);
        sweeps.push_back(p.eig.sweeps);
      }
      for (const GmmSplit& g : st.splits)
        splits.push_back({{"weight", g.weight}, {"mean", g.mean}, {"stddev", g.stddev},
                          {"threshold", g.threshold}, {"converged", g.converged},
                          {"iterations", g.iterations}});
      sm = {{"sad", sad_json(model.sad)}, {"support_count", support}, {"sweeps", sweeps},
            {"gmm", splits}};
      break;
    }
    case Stage::kPhase2: {
      const Rectifier& r = model.rectifier;
      for (std::size_t k = 0; k < r.num_modalities(); ++k) {
        w.put("rectifier/" + mk(k) + "/wq", r.target(k).wq.value);
        w.put("rectifier/" + mk(k) + "/wk", r.target(k).wk.value);
        w.put("rectifier/" + mk(k) + "/wv", r.target(k).wv.value);
      }
      w.put("head/weight", model.head.map.weight().value);
      w.put("head/bias", model.head.map.bias().value);
      w.put("loss", st.phase2_loss);
      sm = {{"sad", sad_json(model.sad)}, {"classes", model.head.map.out_dim()}};
      break;
    }
  }
  meta[kStageNames[s]] = sm;
  m.meta = meta.dump();
  m.complete[s] = true;
  write_manifest(m);
}

PipelineState Checkpoint::load(Stage upto) const {
  const CheckpointManifest m = read_manifest();
  if (!m.has(upto))
    throw StageChainError("checkpoint at " + dir_.string() + " has no completed " + to_string(upto) +
                          " stage");
  const json meta = json::parse(m.meta);
  PipelineState st;
  MladModel& model = st.model;
  Rng scratch(0);

  {
    const StageReader r(dir_, Stage::kPhase1, m);
    const json& sm = meta.at("phase1");
    st.normalized = sm.at("normalized").get<bool>();
    const std::size_t M = sm.at("towers").size();
    for (std::size_t k = 0; k < M; ++k) {
      const json& t = sm.at("towers")[k];
      TowerSizes z;
      z.input_dim = t.at("input_dim");
      z.num_classes = t.at("num_classes");
      z.depth = t.at("depth");
      z.width = t.at("width");
      z.latent_dim = t.at("latent_dim");
      z.decoder_hidden = t.at("decoder_hidden");
      z.transform_hidden = t.at("transform_hidden");
      ModalityTower tower(z, scratch);
      for (auto& [name, p] : tower.named_params()) r.into("towers/" + mk(k) + "/" + name, *p);
      model.towers.push_back(std::move(tower));
      st.stats.mean.push_back(r.vec("stats/" + mk(k) + "/mean"));
      st.stats.std.push_back(r.vec("stats/" + mk(k) + "/std"));
      st.stats.min.push_back(r.vec("stats/" + mk(k) + "/min"));
      st.stats.max.push_back(r.vec("stats/" + mk(k) + "/max"));
      std::vector<std::vector<GaussianDiag>> per_depth;
      for (std::size_t d = 1; d <= z.depth; ++d) {
        const Mat mean = r.get("cache/" + mk(k) + "/" + dk(d) + "/mean");
        const Mat var = r.get("cache/" + mk(k) + "/" + dk(d) + "/var");
        std::vector<GaussianDiag> g;
        for (std::size_t c = 0; c < mean.rows(); ++c)
          g.push_back({Vec(mean.row(c).begin(), mean.row(c).end()), Vec(var.row(c).begin(), var.row(c).end())});
        per_depth.push_back(std::move(g));
      }
      st.cache.push_back(std::move(per_depth));
    }
    model.table = load_table(r, sm, M);
    st.phase1_loss = r.vec("loss");
  }
  if (upto >= Stage::kQLearn) {
    const StageReader r(dir_, Stage::kQLearn, m);
    const json& sm = meta.at("qlearn");
    model.policy = ExitPolicy::init(model.towers, 0, sm.at("gamma").get<double>());
    for (std::size_t k = 0; k < model.policy.q_heads.size(); ++k)
      for (std::size_t d = 0; d < model.policy.q_heads[k].size(); ++d)
        r.into("policy/" + mk(k) + "/" + dk(d + 1), model.policy.q_heads[k][d]);
    model.dynamic_exit = sm.at("dynamic_exit").get<bool>();
    model.table = load_table(r, sm, model.towers.size());
    const std::size_t nr = sm.at("rewards").get<std::size_t>();
    for (std::size_t k = 0; k < nr; ++k) {
      const Mat rw = r.get("rewards/" + mk(k));
      std::vector<Vec> per;
      for (std::size_t d = 0; d < rw.rows(); ++d) per.emplace_back(rw.row(d).begin(), rw.row(d).end());
      st.rewards.push_back(std::move(per));
    }
    st.qlearn_loss = r.vec("loss");
  }
  if (upto >= Stage::kPriors) {
    const StageReader r(dir_, Stage::kPriors, m);
    const json& sm = meta.at("priors");
    model.sad = sad_from_json(sm.at("sad"));
    for (std::size_t k = 0; k < model.towers.size(); ++k) {
      ModalityPrior p;
      p.mean = r.vec("priors/" + mk(k) + "/mean");
      p.cov = r.get("priors/" + mk(k) + "/cov");
      p.eig.eigvecs = r.get("priors/" + mk(k) + "/eigvecs");
      p.eig.eigvals = r.vec("priors/" + mk(k) + "/eigvals");
      p.eig.sweeps = sm.at("sweeps")[k].get<int>();
      p.reweight = r.vec("priors/" + mk(k) + "/reweight");
      p.support_count = sm.at("support_count")[k].get<std::size_t>();
      model.priors.push_back(std::move(p));
    }
    for (const json& g : sm.at("gmm")) {
      GmmSplit s;
      for (int i = 0; i < 2; ++i) {
        s.weight[i] = g.at("weight")[i];
        s.mean[i] = g.at("mean")[i];
        s.stddev[i] = g.at("stddev")[i];
      }
      s.threshold = g.at("threshold");
      s.converged = g.at("converged");
      s.iterations = g.at("iterations");
      st.splits.push_back(s);
    }
  }
  if (upto >= Stage::kPhase2) {
    const StageReader r(dir_, Stage::kPhase2, m);
    const json& sm = meta.at("phase2");
    model.sad = sad_from_json(sm.at("sad"));
    const std::size_t M = model.towers.size();
    const std::size_t L = M ? model.towers[0].sizes().latent_dim : 0;
    model.rectifier = Rectifier(M, L, scratch);
    for (std::size_t k = 0; k < M; ++k) {
      r.into("rectifier/" + mk(k) + "/wq", model.rectifier.target(k).wq);
      r.into("rectifier/" + mk(k) + "/wk", model.rectifier.target(k).wk);
      r.into("rectifier/" + mk(k) + "/wv", model.rectifier.target(k).wv);
    }
    model.head = ClassifierHead(M * L, sm.at("classes").get<std::size_t>(), scratch);
    r.into("head", model.head.map);
    st.phase2_loss = r.vec("loss");
  }
  return st;
}

}  // namespace mlad
