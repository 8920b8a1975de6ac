#include <algorithm>
#include <cmath>
#include <map>

#include "mlad/data.hpp"
#include "mlad/errors.hpp"
#include "mlad/rng.hpp"

namespace mlad {

void NoiseSpec::validate() const {
  if (!(sigma >= 0.0)) throw ValidationError("noise sigma must be >= 0");
  if (!(fraction >= 0.0 && fraction <= 1.0))
    throw ValidationError("noise fraction must lie in [0,1]");
}

NoiseKind parse_noise_kind(const std::string& s) {
  if (s == "gaussian") return NoiseKind::kGaussian;
  if (s == "salt_pepper") return NoiseKind::kSaltPepper;
  throw ValidationError("unknown noise kind '" + s + "'");
}

std::string to_string(NoiseKind k) {
  return k == NoiseKind::kGaussian ? "gaussian" : "salt_pepper";
}

std::vector<std::size_t> noise_affected_rows(std::size_t n, double fraction, std::uint64_t seed,
                                             const std::string& stream) {
  Rng rng = Rng::stream(seed, stream, 0);
  auto perm = rng.permutation(n);
  const auto k = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
  perm.resize(std::min(k, n));
  std::sort(perm.begin(), perm.end());
  return perm;
}

double salt_pepper_probability(double sigma) { return std::min(sigma / 20.0, 0.5); }

MultimodalDataset inject_noise(const MultimodalDataset& ds, const NoiseSpec& spec,
                               std::uint64_t seed, const FeatureStats* bounds) {
  spec.validate();
  MultimodalDataset out = ds;
  if (spec.sigma == 0.0 || spec.fraction == 0.0) return out;

  std::vector<std::size_t> targets = spec.target_modalities;
  if (targets.empty())
    for (std::size_t m = 0; m < ds.num_modalities(); ++m) targets.push_back(m);
  for (std::size_t m : targets)
    if (m >= ds.num_modalities()) throw ValidationError("noise target modality out of range");

  FeatureStats own;
  if (spec.kind == NoiseKind::kSaltPepper && bounds == nullptr) {
    own = FeatureStats::fit(ds);
    bounds = &own;
  }
  const auto rows = noise_affected_rows(ds.size(), spec.fraction, seed, spec.seed_stream);
  for (std::size_t m : targets) {
    Rng rng = Rng::stream(seed, spec.seed_stream, 1 + m);
    Mat& f = out.features[m];
    for (std::size_t i : rows) {
      auto r = f.row(i);
      if (spec.kind == NoiseKind::kGaussian) {
        for (double& v : r) v += spec.sigma * rng.normal();
      } else {
        const double p = salt_pepper_probability(spec.sigma);
        for (std::size_t j = 0; j < r.size(); ++j) {
          const double u = rng.uniform();
          const bool salt = rng.uniform() < 0.5;
          if (u < p) r[j] = salt ? bounds->max[m][j] : bounds->min[m][j];
        }
      }
    }
  }
  return out;
}

void SynthSpec::validate() const {
  if (num_classes < 1) throw ValidationError("synth: num_classes must be >= 1");
  if (num_modalities < 1) throw ValidationError("synth: num_modalities must be >= 1");
  if (dims.size() != num_modalities) throw ValidationError("synth: need one dim per modality");
  for (std::size_t d : dims)
    if (d == 0) throw ValidationError("synth: zero feature dimension");
  if (samples_per_class < 2) throw ValidationError("synth: samples_per_class must be >= 2");
  for (const auto& p : confusion_pairs) {
    if (p.a >= num_classes || p.b >= num_classes || p.a == p.b)
      throw ValidationError("synth: confusion pair references invalid classes");
    if (!(p.strength >= 0.0 && p.strength <= 1.0))
      throw ValidationError("synth: overlap strength must lie in [0,1]");
    for (std::size_t m : p.modalities)
      if (m >= num_modalities) throw ValidationError("synth: confusion pair modality out of range");
  }
  if (!depth_profile.empty()) {
    if (depth_profile.size() != num_classes)
      throw ValidationError("synth: depth_profile needs one entry per class");
    for (std::size_t k : depth_profile)
      if (k < 1 || k > tower_depth)
        throw ValidationError("synth: depth_profile entries must lie in [1, tower depth]");
  }
  if (!(class_separation >= 0.0) || !(noise_std > 0.0))
    throw ValidationError("synth: separation must be >= 0 and noise_std > 0");
  if (!(displacement_fraction >= 0.0 && displacement_fraction <= 1.0))
    throw ValidationError("synth: displacement_fraction must lie in [0,1]");
}

namespace {

// Orthonormal directions when count <= dim, otherwise unit random directions.
std::vector<Vec> random_directions(Rng& rng, std::size_t count, std::size_t dim) {
  std::vector<Vec> dirs;
  for (std::size_t k = 0; k < count; ++k) {
    Vec v(dim);
    for (double& x : v) x = rng.normal();
    if (k < dim)
      for (const Vec& u : dirs) {
        const double proj = dot(u, v);
        for (std::size_t j = 0; j < dim; ++j) v[j] -= proj * u[j];
      }
    const double norm = std::sqrt(dot(v, v));
    for (double& x : v) x /= norm;
    dirs.push_back(std::move(v));
  }
  return dirs;
}

}  // namespace

// Depth-1 classes are isotropic Gaussians around scaled orthogonal means.
// Classes sharing a depth k > 1 sit at the origin and are told apart only by
// a noise-free "striped" coordinate: the stripe axis is cut into
// |group| * 2^(k-1) equal stripes assigned round-robin to the group, so every
// extra level doubles the number of linear pieces needed to carve a class out.
SynthResult synth_generate_full(const SynthSpec& spec) {
  spec.validate();
  const std::size_t C = spec.num_classes;
  const std::size_t n = C * spec.samples_per_class;
  std::vector<std::size_t> depth = spec.depth_profile;
  if (depth.empty()) depth.assign(C, 1);

  std::map<std::size_t, std::vector<std::size_t>> groups;
  for (std::size_t c = 0; c < C; ++c)
    if (depth[c] > 1) groups[depth[c]].push_back(c);

  SynthResult res;
  MultimodalDataset& ds = res.dataset;
  ds.num_classes = C;
  ds.labels.resize(n);
  for (std::size_t i = 0; i < n; ++i) ds.labels[i] = i / spec.samples_per_class;

  Rng disp_rng = Rng::stream(spec.seed, "synth-displace");
  // Which (sample, modality) cells receive a sample-level displacement.
  std::vector<std::vector<std::size_t>> displace_to(spec.num_modalities,
                                                    std::vector<std::size_t>(n, C));
  if (C > 1)
    for (std::size_t m = 0; m < spec.num_modalities; ++m)
      for (std::size_t i = 0; i < n; ++i)
        if (disp_rng.uniform() < spec.displacement_fraction) {
          std::size_t other = disp_rng.uniform_int(C - 1);
          if (other >= ds.labels[i]) ++other;
          displace_to[m][i] = other;
        }

  for (std::size_t m = 0; m < spec.num_modalities; ++m) {
    const std::size_t d = spec.dims[m];
    Rng rng = Rng::stream(spec.seed, "synth", m);
    const std::size_t n_dirs = C + spec.confusion_pairs.size() + groups.size();
    const auto dirs = random_directions(rng, n_dirs, d);

    Mat means(C, d);
    for (std::size_t c = 0; c < C; ++c)
      if (depth[c] == 1)
        for (std::size_t j = 0; j < d; ++j) means(c, j) = spec.class_separation * dirs[c][j];
    for (std::size_t p = 0; p < spec.confusion_pairs.size(); ++p) {
      const auto& pair = spec.confusion_pairs[p];
      const bool applies =
          pair.modalities.empty() ||
          std::find(pair.modalities.begin(), pair.modalities.end(), m) != pair.modalities.end();
      if (!applies) continue;
      const Vec& shared = dirs[C + p];
      for (std::size_t c : {pair.a, pair.b})
        for (std::size_t j = 0; j < d; ++j)
          means(c, j) = (1.0 - pair.strength) * means(c, j) +
                        pair.strength * spec.class_separation * shared[j];
    }

    Mat x(n, d);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = ds.labels[i];
      auto r = x.row(i);
      for (std::size_t j = 0; j < d; ++j) r[j] = means(c, j) + spec.noise_std * rng.normal();
    }

    std::size_t g = 0;
    for (const auto& [k, members] : groups) {
      const Vec& axis = dirs[C + spec.confusion_pairs.size() + g++];
      const std::size_t stripes = members.size() << (k - 1);
      const double width = 4.0 * spec.noise_std;
      const double half = 0.5 * width * static_cast<double>(stripes);
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = ds.labels[i];
        auto r = x.row(i);
        const double current = dot(r, axis);
        double t = 0.0;
        const auto pos = std::find(members.begin(), members.end(), c);
        if (pos == members.end()) {
          t = rng.uniform(-half, half);
        } else {
          const auto slot = static_cast<std::size_t>(pos - members.begin());
          const std::size_t per_class = std::size_t{1} << (k - 1);
          const std::size_t stripe = slot + members.size() * rng.uniform_int(per_class);
          t = -half + width * (static_cast<double>(stripe) + rng.uniform(0.1, 0.9));
        }
        for (std::size_t j = 0; j < d; ++j) r[j] += (t - current) * axis[j];
      }
    }

    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t to = displace_to[m][i];
      if (to == C) continue;
      const std::size_t c = ds.labels[i];
      auto r = x.row(i);
      for (std::size_t j = 0; j < d; ++j)
        r[j] += spec.displacement_strength * (means(to, j) - means(c, j));
    }

    ds.modality_names.push_back("m" + std::to_string(m));
    ds.features.push_back(std::move(x));
    res.class_means.push_back(std::move(means));
  }
  ds.validate();
  return res;
}

MultimodalDataset synth_generate(const SynthSpec& spec) {
  return synth_generate_full(spec).dataset;
}

double synth_pair_bayes_accuracy(const SynthResult& synth, double noise_std, std::size_t a,
                                 std::size_t b) {
  double dist2 = 0.0;
  for (const Mat& means : synth.class_means) {
    for (std::size_t j = 0; j < means.cols(); ++j) {
      const double diff = means(a, j) - means(b, j);
      dist2 += diff * diff;
    }
  }
  const double z = std::sqrt(dist2) / (2.0 * noise_std);
  return 0.5 * std::erfc(-z / std::sqrt(2.0));
}

}  // namespace mlad
