#include "mlad/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mlad/errors.hpp"

namespace mlad {

namespace {

double off_diagonal_norm(const Mat& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      if (i != j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

}  // namespace

SymEig sym_eig(const Mat& input, const JacobiOptions& opt) {
  if (input.rows() != input.cols()) throw ValidationError("sym_eig: matrix is not square");
  require_finite(input, "sym_eig input");
  const std::size_t n = input.rows();
  double max_abs = 0.0;
  for (double v : input.flat()) max_abs = std::max(max_abs, std::abs(v));
  const double sym_tol = opt.symmetry_tolerance * std::max(1.0, max_abs);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (std::abs(input(i, j) - input(j, i)) > sym_tol)
        throw ValidationError("sym_eig: matrix is not symmetric");

  Mat a = input;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) a(i, j) = a(j, i) = 0.5 * (input(i, j) + input(j, i));

  Mat v = Mat::identity(n);
  const double stop = opt.tolerance * std::max(1.0, std::sqrt(frobenius_sq(a)));
  int sweep = 0;
  for (; sweep < opt.max_sweeps; ++sweep) {
    if (off_diagonal_norm(a) < stop) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (apq == 0.0) continue;
        const double app = a(p, p), aqq = a(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }
  if (off_diagonal_norm(a) >= stop) throw NumericalError("sym_eig: Jacobi did not converge");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t i, std::size_t j) { return a(i, i) > a(j, j); });

  SymEig out;
  out.sweeps = sweep;
  out.eigvals.resize(n);
  out.eigvecs = Mat(n, n);
  for (std::size_t col = 0; col < n; ++col) {
    const std::size_t src = order[col];
    out.eigvals[col] = a(src, src);
    std::size_t arg = 0;
    for (std::size_t k = 1; k < n; ++k)
      if (std::abs(v(k, src)) > std::abs(v(arg, src))) arg = k;
    const double sign = v(arg, src) < 0.0 ? -1.0 : 1.0;
    for (std::size_t k = 0; k < n; ++k) out.eigvecs(k, col) = sign * v(k, src);
  }
  return out;
}

Mat reconstruct(const SymEig& e) {
  const std::size_t n = e.eigvals.size();
  Mat scaled = e.eigvecs;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) scaled(i, j) *= e.eigvals[j];
  return matmul_nt(scaled, e.eigvecs);
}

}  // namespace mlad
