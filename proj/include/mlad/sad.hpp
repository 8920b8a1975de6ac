#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mlad/cad.hpp"
#include "mlad/linalg.hpp"
#include "mlad/mat.hpp"
#include "mlad/nn.hpp"

namespace mlad {

// Entropy of the class posterior pi_c p_c(z) / sum_c' pi_c' p_c'(z) for one
// modality, evaluated in log space.
double posterior_entropy(std::span<const double> z, const ClassLatentTable& table, std::size_t m);
Vec posterior_entropies(const Mat& z, const ClassLatentTable& table, std::size_t m);

struct GmmSplit {
  double weight[2] = {0.5, 0.5};
  double mean[2] = {0.0, 0.0};
  double stddev[2] = {1.0, 1.0};
  double threshold = 0.0;
  bool converged = false;
  std::size_t iterations = 0;
};

struct GmmOptions {
  std::size_t max_iterations = 200;
  double tolerance = 1e-8;  // on the mean log-likelihood
  double sigma_floor = 1e-4;
  double weight_floor = 1e-3;
};

// Two-component 1-D mixture fit by EM, started at the 25th/75th percentiles.
// Component 0 has the smaller mean. The threshold is the point between the
// means where the weighted densities are equal; collapsed fits fall back to
// the median.
GmmSplit fit_entropy_gmm(std::span<const double> h, const GmmOptions& opt = {});

// Equal-weighted-density point between the means of a fitted split.
double gmm_threshold(const GmmSplit& g);

struct ConfusionSplit {
  std::vector<std::size_t> low;   // H < threshold
  std::vector<std::size_t> high;  // the rest
};

// Throws ValidationError when no sample falls below the threshold.
ConfusionSplit select_low_confusion(std::span<const double> h, const GmmSplit& split);
// select_low_confusion, or the N/2 lowest-entropy samples if it would be empty.
std::vector<std::size_t> low_confusion_or_fallback(std::span<const double> h,
                                                   const GmmSplit& split);

enum class ReweightMode {
  kNormal,    // softmax(-lambda): low-variance axes get the most weight
  kUniform,   // equal weight on every axis
  kNegative,  // softmax(+lambda)
};

Vec eigen_reweight(std::span<const double> eigvals, ReweightMode mode);

struct ModalityPrior {
  Vec mean;
  Mat cov;
  SymEig eig;
  Vec reweight;
  std::size_t support_count = 0;

  // Full-covariance Gaussian log density via the eigendecomposition.
  double log_density(std::span<const double> z) const;
  // Sigma^-1 (z - mean).
  Vec precision_times(std::span<const double> z) const;
};

// Entropy-weighted MLE over low-confusion latents with a ridge on the
// covariance.
ModalityPrior fit_prior(const Mat& latents, std::span<const double> entropies, double ridge = 1e-3,
                        ReweightMode mode = ReweightMode::kNormal);

struct SadOptions {
  double gate_eps = 1e-6;
  double ridge = 1e-3;
  bool additive_gate = false;  // add the gate inside the attention softmax
  bool literal_frame = false;  // add w * U^T (z~ - z) without rotating back
  bool cfmp = true;            // false: z^ = z + z~
  bool cmr = true;             // false: the head sees the unrectified latents
  ReweightMode reweight = ReweightMode::kNormal;
};

// Gate over sources n = 0..M-1 for target m:
// softmax_n( H_m / (H_n + eps) ). The n = m entry is part of the normalizer.
Vec entropy_gate(std::span<const double> h, std::size_t m, double eps);

// Query, key and value maps for one target modality; shared by every source.
struct AttentionMaps {
  Param wq;
  Param wk;
  Param wv;
};

class Rectifier {
 public:
  Rectifier() = default;
  Rectifier(std::size_t num_modalities, std::size_t dim, Rng& init);

  std::size_t num_modalities() const { return maps_.size(); }
  std::size_t dim() const { return maps_.empty() ? 0 : maps_.front().wq.value.rows(); }
  AttentionMaps& target(std::size_t m) { return maps_.at(m); }
  const AttentionMaps& target(std::size_t m) const { return maps_.at(m); }
  std::vector<Param*> params();

 private:
  std::vector<AttentionMaps> maps_;
};

struct PairTrace {
  Vec q, k, v;
  Mat attention;  // d x d, row softmax
};

struct RectifyResult {
  std::vector<Vec> z_hat;
  std::vector<Vec> compensation;           // z~ per target
  Mat gates;                               // gates(m, n) = H~^{m<-n}
  std::vector<std::vector<PairTrace>> pairs;  // [m][n]; empty when n == m
};

RectifyResult rectify(std::span<const Vec> z, std::span<const double> entropies,
                      std::span<const ModalityPrior> priors, const Rectifier& rectifier,
                      const SadOptions& opt);
RectifyResult rectify(std::span<const Vec> z, const ClassLatentTable& table,
                      std::span<const ModalityPrior> priors, const Rectifier& rectifier,
                      const SadOptions& opt);

// Accumulates rectifier gradients given d loss / d z^ per modality.
void rectify_backward(std::span<const Vec> z, const RectifyResult& fwd,
                      std::span<const ModalityPrior> priors, Rectifier& rectifier,
                      const SadOptions& opt, std::span<const Vec> grad_z_hat);

struct ClassifierHead {
  Linear map;

  ClassifierHead() = default;
  ClassifierHead(std::size_t in, std::size_t classes, Rng& init) : map(in, classes, init) {}
};

struct Phase2Config {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double nll_weight = 1.0;
};

// Frozen per-sample inputs to phase 2: exit latents and their entropies.
struct SadInputs {
  std::vector<std::vector<Vec>> z;  // [i][m]
  Mat entropies;                    // N x M
  std::vector<std::size_t> labels;
};

struct TotalLoss {
  double loss = 0.0;
  double nll = 0.0;
  double ce = 0.0;
};

// L_tot on a batch of rows of `in`; accumulates gradients when with_grad.
TotalLoss total_loss(const SadInputs& in, std::span<const std::size_t> rows,
                     std::span<const ModalityPrior> priors, Rectifier& rectifier,
                     ClassifierHead& head, const SadOptions& opt, double nll_weight,
                     bool with_grad);

struct Phase2Result {
  std::vector<double> epoch_loss;
};

Phase2Result phase2_train(const SadInputs& train, std::span<const ModalityPrior> priors,
                          Rectifier& rectifier, ClassifierHead& head, const SadOptions& opt,
                          const Phase2Config& cfg, std::uint64_t seed);

// Everything inference needs, after all stages.
struct MladModel {
  std::vector<ModalityTower> towers;
  ExitPolicy policy;
  ClassLatentTable table;
  std::vector<ModalityPrior> priors;
  Rectifier rectifier;
  ClassifierHead head;
  SadOptions sad;
  bool dynamic_exit = true;
};

// Exit latents and entropies for every row of a dataset.
SadInputs sad_inputs(const MladModel& model, const MultimodalDataset& ds);

// Priors from low-confusion training latents, one per modality.
std::vector<ModalityPrior> fit_priors(const SadInputs& train, std::size_t num_modalities,
                                      const SadOptions& opt, std::vector<GmmSplit>* splits);

struct Prediction {
  std::size_t label = 0;
  Vec logits;
  Vec probabilities;
  std::vector<std::size_t> exit_depth;
  Vec entropies;
  Mat gates;
  std::vector<std::vector<Mat>> attention;  // [m][n]
};

Prediction predict(const MladModel& model, std::span<const Vec> x, bool keep_attention = false);
std::vector<Prediction> predict_batch(const MladModel& model, const MultimodalDataset& ds,
                                      bool keep_attention = false);

}  // namespace mlad
