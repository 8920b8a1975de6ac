#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mlad/mat.hpp"
#include "mlad/rng.hpp"

namespace mlad {

struct Param {
  Mat value;
  Mat grad;
  Mat adam_m;
  Mat adam_v;
  std::uint64_t step_count = 0;

  Param() = default;
  explicit Param(Mat init);

  void zero_grad() { grad.fill(0.0); }
  // Replaces the value and clears optimizer state.
  void reset(Mat v);
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Bias-corrected Adam with decoupled weight decay.
void adam_step(Param& p, double lr, double weight_decay, const AdamOptions& opt = {});

// Fully connected layer y = x W + b, W is (in x out).
class Linear {
 public:
  Linear() = default;
  // Kaiming-uniform with bound 1/sqrt(fan_in) for both weight and bias.
  Linear(std::size_t in, std::size_t out, Rng& init);

  std::size_t in_dim() const { return weight_.value.rows(); }
  std::size_t out_dim() const { return weight_.value.cols(); }

  Mat forward(const Mat& x) const;
  // Accumulates parameter gradients and returns d loss / d x.
  Mat backward(const Mat& x, const Mat& grad_out);
  // Same, without computing the input gradient.
  void accumulate(const Mat& x, const Mat& grad_out);

  Param& weight() { return weight_; }
  Param& bias() { return bias_; }
  const Param& weight() const { return weight_; }
  const Param& bias() const { return bias_; }

  void collect(std::vector<Param*>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

 private:
  Param weight_;
  Param bias_;
};

// in -> hidden (ReLU) -> out. Used for both reconstruction decoders.
class Mlp2 {
 public:
  struct Cache {
    Mat input;
    Mat pre;
    Mat hidden;
  };

  Mlp2() = default;
  Mlp2(std::size_t in, std::size_t hidden, std::size_t out, Rng& init);

  Mat forward(const Mat& x) const;
  Mat forward(const Mat& x, Cache& cache) const;
  Mat backward(const Cache& cache, const Mat& grad_out);

  Linear& first() { return first_; }
  Linear& second() { return second_; }
  const Linear& first() const { return first_; }
  const Linear& second() const { return second_; }

  void collect(std::vector<Param*>& out) {
    first_.collect(out);
    second_.collect(out);
  }

 private:
  Linear first_;
  Linear second_;
};

void zero_grads(std::span<Param* const> params);
void adam_all(std::span<Param* const> params, double lr, double weight_decay);

inline constexpr double kVarianceFloor = 1e-6;

struct GaussianDiag {
  Vec mean;
  Vec var;

  std::size_t dim() const { return mean.size(); }
  // Sum of per-coordinate normal log densities.
  double log_density(std::span<const double> x) const;
};

// Compares analytic gradients (already stored in each Param::grad) with
// central differences of `loss`. Coordinates are sampled deterministically,
// at most `max_coords` per parameter. Relative error uses the denominator
// max(|analytic|, |numeric|, 1e-6).
double finite_diff_check(const std::function<double()>& loss, std::span<Param* const> params,
                         double h = 1e-5, std::size_t max_coords = 24,
                         std::uint64_t seed = 7);

}  // namespace mlad
