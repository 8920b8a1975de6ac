#include "mlad/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "mlad/errors.hpp"

namespace mlad {

Param::Param(Mat init)
    : value(std::move(init)),
      grad(value.rows(), value.cols()),
      adam_m(value.rows(), value.cols()),
      adam_v(value.rows(), value.cols()) {}

void Param::reset(Mat v) { *this = Param(std::move(v)); }

void adam_step(Param& p, double lr, double weight_decay, const AdamOptions& opt) {
  ++p.step_count;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(p.step_count));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(p.step_count));
  auto val = p.value.flat();
  auto g = p.grad.flat();
  auto m = p.adam_m.flat();
  auto v = p.adam_v.flat();
  for (std::size_t i = 0; i < val.size(); ++i) {
    m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g[i];
    v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g[i] * g[i];
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    val[i] -= lr * (mhat / (std::sqrt(vhat) + opt.eps) + weight_decay * val[i]);
  }
}

Linear::Linear(std::size_t in, std::size_t out, Rng& init) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Mat w(in, out);
  for (double& v : w.flat()) v = init.uniform(-bound, bound);
  Mat b(1, out);
  for (double& v : b.flat()) v = init.uniform(-bound, bound);
  weight_ = Param(std::move(w));
  bias_ = Param(std::move(b));
}

Mat Linear::forward(const Mat& x) const {
  Mat y = matmul(x, weight_.value);
  const auto b = bias_.value.row(0);
  for (std::size_t i = 0; i < y.rows(); ++i) {
    auto r = y.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) r[j] += b[j];
  }
  return y;
}

void Linear::accumulate(const Mat& x, const Mat& grad_out) {
  weight_.grad += matmul_tn(x, grad_out);
  auto gb = bias_.grad.row(0);
  for (std::size_t i = 0; i < grad_out.rows(); ++i) {
    const auto r = grad_out.row(i);
    for (std::size_t j = 0; j < r.size(); ++j) gb[j] += r[j];
  }
}

Mat Linear::backward(const Mat& x, const Mat& grad_out) {
  accumulate(x, grad_out);
  return matmul_nt(grad_out, weight_.value);
}

Mlp2::Mlp2(std::size_t in, std::size_t hidden, std::size_t out, Rng& init)
    : first_(in, hidden, init), second_(hidden, out, init) {}

Mat Mlp2::forward(const Mat& x) const { return second_.forward(relu(first_.forward(x))); }

Mat Mlp2::forward(const Mat& x, Cache& cache) const {
  cache.input = x;
  cache.pre = first_.forward(x);
  cache.hidden = relu(cache.pre);
  return second_.forward(cache.hidden);
}

Mat Mlp2::backward(const Cache& cache, const Mat& grad_out) {
  Mat gh = second_.backward(cache.hidden, grad_out);
  return first_.backward(cache.input, relu_backward(cache.pre, gh));
}

void zero_grads(std::span<Param* const> params) {
  for (Param* p : params) p->zero_grad();
}

void adam_all(std::span<Param* const> params, double lr, double weight_decay) {
  for (Param* p : params) adam_step(*p, lr, weight_decay);
}

double GaussianDiag::log_density(std::span<const double> x) const {
  if (x.size() != mean.size()) throw DimensionError("GaussianDiag::log_density: dim mismatch");
  constexpr double kLog2Pi = 1.8378770664093454835606594728112;
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - mean[i];
    s += d * d / var[i] + std::log(var[i]) + kLog2Pi;
  }
  return -0.5 * s;
}

double finite_diff_check(const std::function<double()>& loss, std::span<Param* const> params,
                         double h, std::size_t max_coords, std::uint64_t seed) {
  Rng pick(seed);
  double worst = 0.0;
  for (Param* p : params) {
    const std::size_t n = p->value.size();
    std::vector<std::size_t> coords;
    if (n <= max_coords) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      auto perm = pick.permutation(n);
      coords.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(max_coords));
    }
    for (std::size_t i : coords) {
      double& v = p->value.flat()[i];
      const double orig = v;
      v = orig + h;
      const double up = loss();
      v = orig - h;
      const double down = loss();
      v = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p->grad.flat()[i];
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
      worst = std::max(worst, std::abs(analytic - numeric) / denom);
    }
  }
  return worst;
}

}  // namespace mlad
