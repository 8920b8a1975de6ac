#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "mlad/data.hpp"
#include "mlad/mat.hpp"
#include "mlad/nn.hpp"
#include "mlad/rng.hpp"

namespace mlad {

struct TowerSizes {
  std::size_t input_dim = 0;
  std::size_t num_classes = 0;
  std::size_t depth = 5;
  std::size_t width = 128;  // width of every encoder block
  std::size_t latent_dim = 128;
  std::size_t decoder_hidden = 256;
  std::size_t transform_hidden = 512;
};

// Stacked dynamic-exit encoder for one modality. Block d maps the previous
// width to `width` with ReLU; latent head d maps block d's output into the
// shared latent space, where aux classifier d predicts the class. The
// residual decoder maps latents back to inputs; the residual-transform
// decoder maps residuals to inputs.
class ModalityTower {
 public:
  struct Pass {
    Mat input;
    std::vector<Mat> pre;     // block pre-activations
    std::vector<Mat> hidden;  // block outputs
    std::vector<Mat> latent;  // latent head outputs
    std::vector<Mat> logits;  // aux classifier outputs (only if requested)
  };

  ModalityTower() = default;
  ModalityTower(const TowerSizes& sizes, Rng& init);

  const TowerSizes& sizes() const { return sizes_; }
  std::size_t depth() const { return sizes_.depth; }

  // Runs blocks 1..depth, producing latents at every depth on the way.
  Pass run(const Mat& x, std::size_t depth, bool with_logits) const;
  // Latent head `d` applied after blocks 1..d (1-based).
  Mat forward_to_depth(const Mat& x, std::size_t d) const;

  // grad_latent[d] / grad_logits[d] may be empty matrices (no gradient).
  void backward(const Pass& pass, std::span<const Mat> grad_latent,
                std::span<const Mat> grad_logits);

  Mlp2& decoder() { return decoder_; }
  Mlp2& transform() { return transform_; }
  const Mlp2& decoder() const { return decoder_; }
  const Mlp2& transform() const { return transform_; }
  std::vector<Linear>& blocks() { return blocks_; }
  std::vector<Linear>& heads() { return heads_; }
  std::vector<Linear>& aux() { return aux_; }

  // Every trainable parameter; stable order.
  std::vector<Param*> params();
  // (name, param) pairs for checkpointing, e.g. "block1/weight".
  std::vector<std::pair<std::string, Param*>> named_params();

 private:
  TowerSizes sizes_;
  std::vector<Linear> blocks_;
  std::vector<Linear> heads_;
  std::vector<Linear> aux_;
  Mlp2 decoder_;
  Mlp2 transform_;
};

// Diagonal-Gaussian MLE (biased variance, floored at kVarianceFloor).
GaussianDiag fit_class_distribution(const Mat& latents);

struct CadLossParts {
  double intra = 0.0;
  double cross = 0.0;
  double total = 0.0;
};

enum class CadReduction {
  kMean,  // squared Frobenius norms divided by the entry count
  kSum,   // raw squared Frobenius norms
};

struct CadOptions {
  double alpha = 0.1;
  bool cross_term = true;       // residual cross-class reconstruction on/off
  bool decode_residual = true;  // pass residuals through the transform decoder
  CadReduction reduction = CadReduction::kMean;
};

// R = X - psi(z) + eps, eps ~ N(0, (alpha * std(X - psi(z)))^2 I), with std
// taken over all entries of the residual matrix.
Mat compute_residual(const Mat& x_c, const Mat& z_c, const ModalityTower& tower, double alpha,
                     Rng& residual_rng);

struct CadModalityResult {
  std::vector<double> class_intra;               // reduced ||psi(z_c) - X_c||^2
  std::vector<std::vector<double>> class_cross;  // [c][c'] reduced cross terms
  std::vector<Mat> grad_z;                       // d loss / d sampled latents per class
};

// CAD terms for one modality from already-sampled class latents. Random
// draws, in order for each class c: n_c x d residual normals from
// `residual_rng`, then (cross term only, when n_c exceeds the smallest class
// size) a permutation of n_c from `sampling_rng` whose first n_min entries,
// sorted, pick the rows used for cross-class comparison.
// When `intra_weight`/`cross_weight` are nonzero and `with_grad` is set,
// parameter gradients of intra_weight * sum(intra) + cross_weight *
// sum(cross) are accumulated into the tower's decoders.
CadModalityResult cad_modality_terms(ModalityTower& tower, std::span<const Mat> class_x,
                                     std::span<const Mat> class_z, const CadOptions& opt,
                                     Rng& sampling_rng, Rng& residual_rng, bool with_grad,
                                     double intra_weight, double cross_weight);

struct CadLossResult {
  CadLossParts parts;
  std::vector<std::vector<Mat>> grad_z;  // [m][c]
};

// Full L_CAD over modalities: intra averaged over M*C, cross over M*C*(C-1).
// class_x[m][c], class_z[m][c]. C = 1 gives a zero cross term.
CadLossResult loss_cad(std::span<ModalityTower> towers,
                       const std::vector<std::vector<Mat>>& class_x,
                       const std::vector<std::vector<Mat>>& class_z, const CadOptions& opt,
                       Rng& sampling_rng, Rng& residual_rng, bool with_grad);

// Reparameterized draw from the batch's class distribution: rows are
// mean + std * eps with eps ~ N(0, I) of the same shape as `latents`.
struct ReparamSample {
  Mat z;
  Mat eps;
  Vec mean;
  Vec var;
};
ReparamSample reparam_sample(const Mat& latents, Rng& sampling_rng);
// Gradient wrt the batch latents given the gradient wrt the sampled z.
Mat reparam_backward(const Mat& latents, const ReparamSample& s, const Mat& grad_z);

enum class CadDepthMode {
  kFinal,  // CAD term from the final layer only
  kAll,    // CAD term averaged over every exit depth
};

struct Phase1Config {
  std::size_t epochs = 60;
  std::size_t batch_size = 64;
  double lr = 1e-4;
  double weight_decay = 1e-4;
  double lr_decay = 0.2;
  std::size_t lr_decay_every = 0;  // epochs; 0 disables decay
  CadOptions cad;
  CadDepthMode depth_mode = CadDepthMode::kAll;
  double cad_weight = 1.0;
};

struct Phase1Batch {
  std::vector<Mat> x;  // per modality
  std::vector<std::size_t> labels;
};

struct Phase1StepResult {
  double loss = 0.0;
  double ce = 0.0;
  CadLossParts cad;
};

// Loss of one minibatch (sum of per-exit CE over modalities and depths plus
// the CAD term); accumulates gradients into every tower when with_grad.
// Random draws come from streams seeded by `draw_seed`, so repeated calls
// with the same seed evaluate the same function.
Phase1StepResult phase1_step(std::span<ModalityTower> towers, const Phase1Batch& batch,
                             const Phase1Config& cfg, std::uint64_t draw_seed, bool with_grad);

// Batches in which every class contributes at least two rows.
std::vector<std::vector<std::size_t>> stratified_batches(std::span<const std::size_t> labels,
                                                         std::size_t num_classes,
                                                         std::size_t batch_size, Rng& rng);

struct ClassLatentTable {
  std::vector<std::vector<GaussianDiag>> dist;      // [m][c]
  std::vector<std::vector<std::size_t>> exit_depth;  // [m][c], 1-based
  Vec class_prior;
};

// Class distributions at every depth: per_depth[m][d-1][c].
using DepthCache = std::vector<std::vector<std::vector<GaussianDiag>>>;

DepthCache fit_depth_cache(const std::vector<ModalityTower>& towers,
                           const MultimodalDataset& train);
// Table with every class exiting at the final depth.
ClassLatentTable final_depth_table(const DepthCache& cache, const MultimodalDataset& train);

struct Phase1Result {
  std::vector<double> epoch_loss;
  DepthCache cache;
  ClassLatentTable table;
};

std::vector<ModalityTower> init_towers(const MultimodalDataset& ds, const TowerSizes& proto,
                                       std::uint64_t seed);

Phase1Result phase1_train(std::vector<ModalityTower>& towers, const MultimodalDataset& train,
                          const Phase1Config& cfg, std::uint64_t seed);

// Actions: column 0 is continue (a_C), column 1 is exit (a_E).
struct ExitPolicy {
  std::vector<std::vector<Linear>> q_heads;  // [m][d-1] for d in 1..D-1
  double gamma = 0.9;

  static ExitPolicy init(const std::vector<ModalityTower>& towers, std::uint64_t seed,
                         double gamma);
  // Greedy action at layer d (1-based, d < D): true means exit.
  bool prefers_exit(std::size_t m, std::size_t d, std::span<const double> state) const;
};

struct QLearnConfig {
  std::size_t episodes = 300;
  std::size_t batch = 32;
  double gamma = 0.9;
  double eps_start = 0.9;
  double eps_end = 0.05;
  double lr = 1e-3;
  bool per_class_reward = true;
  std::size_t reward_draws = 1;  // latent draws averaged per reward evaluation
  // Divide each (modality, class) reward row by its maximum over depths. A
  // positive per-class factor leaves that class's best exit depth unchanged
  // and keeps targets at unit scale.
  bool normalize_rewards = true;
};

double exploration_rate(const QLearnConfig& cfg, std::size_t episode);

// L_CAD restricted to each class at each depth: rewards[m][d-1][c].
// With per_class == false, every class gets the modality-wide L_CAD.
std::vector<std::vector<Vec>> depth_rewards(std::vector<ModalityTower>& towers,
                                            const DepthCache& cache,
                                            const MultimodalDataset& train,
                                            const CadOptions& cad, bool per_class,
                                            std::size_t draws, std::uint64_t seed);

struct QLearnResult {
  std::vector<std::vector<Vec>> rewards;  // exp(-L) per [m][d-1][c]
  std::vector<double> episode_loss;
};

// Trains the per-layer Q heads with squared Bellman error and then sets
// exit_depth[m][c] to the first layer whose greedy action on the class-mean
// latent is exit; table distributions are refit at that depth.
QLearnResult qlearn_train(std::vector<ModalityTower>& towers, ExitPolicy& policy,
                          ClassLatentTable& table, const DepthCache& cache,
                          const MultimodalDataset& train, const QLearnConfig& cfg,
                          const CadOptions& cad, std::uint64_t seed);

// Bellman target: exit is terminal with reward r; continue bootstraps from
// gamma * max_a Q(s', a).
double bellman_target(bool exit, double reward, double gamma, double next_value);

struct ExitChoice {
  std::size_t depth = 0;
  Vec latent;
};

// Exits at the first layer whose Q head prefers exit; the final layer if none.
ExitChoice choose_exit(const ModalityTower& tower, const ExitPolicy& policy, std::size_t m,
                       std::span<const double> x);

struct BatchExit {
  std::vector<std::size_t> depth;
  Mat latent;
};
// Batched choose_exit. With dynamic == false every row exits at the final layer.
BatchExit choose_exit_batch(const ModalityTower& tower, const ExitPolicy& policy, std::size_t m,
                            const Mat& x, bool dynamic);

}  // namespace mlad
