#include "mlad/mat.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <string>

#include "mlad/errors.hpp"

namespace mlad {

namespace {

std::string shape_str(const Mat& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

void require_same_shape(const Mat& a, const Mat& b, const char* op) {
  if (!a.same_shape(b)) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}

}  // namespace

Mat::Mat(std::size_t rows, std::size_t cols, Vec data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw DimensionError("Mat: data length " + std::to_string(data_.size()) +
                         " does not match " + std::to_string(rows_) + "x" +
                         std::to_string(cols_));
  }
}

Mat::Mat(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw DimensionError("Mat: ragged initializer");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Mat Mat::identity(std::size_t n) {
  Mat m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Mat Mat::row_vector(std::span<const double> v) {
  return Mat(1, v.size(), Vec(v.begin(), v.end()));
}

Mat Mat::column_vector(std::span<const double> v) {
  return Mat(v.size(), 1, Vec(v.begin(), v.end()));
}

Mat Mat::diagonal(std::span<const double> v) {
  Mat m(v.size(), v.size());
  for (std::size_t i = 0; i < v.size(); ++i) m(i, i) = v[i];
  return m;
}

Vec Mat::column(std::size_t c) const {
  Vec out(rows_);
  for (std::size_t r = 0; r < rows_; ++r) out[r] = (*this)(r, c);
  return out;
}

void Mat::set_row(std::size_t r, std::span<const double> v) {
  if (v.size() != cols_) throw DimensionError("set_row: width mismatch");
  std::copy(v.begin(), v.end(), data_.begin() + static_cast<std::ptrdiff_t>(r * cols_));
}

void Mat::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Mat& Mat::operator+=(const Mat& o) {
  require_same_shape(*this, o, "add");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
  return *this;
}

Mat& Mat::operator-=(const Mat& o) {
  require_same_shape(*this, o, "sub");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
  return *this;
}

Mat& Mat::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

Mat operator+(Mat a, const Mat& b) { return a += b; }
Mat operator-(Mat a, const Mat& b) { return a -= b; }
Mat operator*(Mat a, double s) { return a *= s; }

Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: " + shape_str(a) + " x " + shape_str(b));
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  Mat out(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    double* o = out.row(i).data();
    const double* ar = a.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ar[p];
      if (av == 0.0) continue;
      const double* br = b.row(p).data();
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

Mat matmul_tn(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows()) {
    throw DimensionError("matmul_tn: " + shape_str(a) + "^T x " + shape_str(b));
  }
  const std::size_t n = a.cols(), k = a.rows(), m = b.cols();
  Mat out(n, m);
  for (std::size_t p = 0; p < k; ++p) {
    const double* ar = a.row(p).data();
    const double* br = b.row(p).data();
    for (std::size_t i = 0; i < n; ++i) {
      const double av = ar[i];
      if (av == 0.0) continue;
      double* o = out.row(i).data();
      for (std::size_t j = 0; j < m; ++j) o[j] += av * br[j];
    }
  }
  return out;
}

Mat matmul_nt(const Mat& a, const Mat& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_nt: " + shape_str(a) + " x " + shape_str(b) + "^T");
  }
  const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
  Mat out(n, m);
  for (std::size_t i = 0; i < n; ++i) {
    const double* ar = a.row(i).data();
    for (std::size_t j = 0; j < m; ++j) {
      const double* br = b.row(j).data();
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += ar[p] * br[p];
      out(i, j) = s;
    }
  }
  return out;
}

Vec matvec(const Mat& a, std::span<const double> x) {
  if (a.cols() != x.size()) throw DimensionError("matvec: width mismatch");
  Vec out(a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i) out[i] = dot(a.row(i), x);
  return out;
}

Vec matvec_t(const Mat& a, std::span<const double> x) {
  if (a.rows() != x.size()) throw DimensionError("matvec_t: height mismatch");
  Vec out(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double xi = x[i];
    const auto r = a.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) out[j] += xi * r[j];
  }
  return out;
}

Mat transpose(const Mat& a) {
  Mat out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Mat hadamard(const Mat& a, const Mat& b) {
  require_same_shape(a, b, "hadamard");
  Mat out = a;
  auto o = out.flat();
  auto bv = b.flat();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] *= bv[i];
  return out;
}

Mat select_rows(const Mat& a, std::span<const std::size_t> idx) {
  Mat out(idx.size(), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= a.rows()) throw IndexError("select_rows: row index out of range");
    out.set_row(i, a.row(idx[i]));
  }
  return out;
}

Mat hconcat(std::span<const Mat> parts) {
  if (parts.empty()) return {};
  const std::size_t n = parts.front().rows();
  std::size_t width = 0;
  for (const Mat& p : parts) {
    if (p.rows() != n) throw DimensionError("hconcat: row count mismatch");
    width += p.cols();
  }
  Mat out(n, width);
  for (std::size_t i = 0; i < n; ++i) {
    double* o = out.row(i).data();
    for (const Mat& p : parts) {
      const auto r = p.row(i);
      std::copy(r.begin(), r.end(), o);
      o += r.size();
    }
  }
  return out;
}

Mat slice_cols(const Mat& a, std::size_t begin, std::size_t count) {
  if (begin + count > a.cols()) throw DimensionError("slice_cols: out of range");
  Mat out(a.rows(), count);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto r = a.row(i);
    std::copy(r.begin() + static_cast<std::ptrdiff_t>(begin),
              r.begin() + static_cast<std::ptrdiff_t>(begin + count), out.row(i).begin());
  }
  return out;
}

Mat softmax_rows(const Mat& x) {
  Mat out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto in = x.row(i);
    auto o = out.row(i);
    const double mx = *std::max_element(in.begin(), in.end());
    double s = 0.0;
    for (std::size_t j = 0; j < in.size(); ++j) {
      o[j] = std::exp(in[j] - mx);
      s += o[j];
    }
    const double inv = 1.0 / s;
    for (double& v : o) v *= inv;
  }
  return out;
}

Mat softmax_rows_backward(const Mat& y, const Mat& grad_out) {
  require_same_shape(y, grad_out, "softmax_rows_backward");
  Mat out(y.rows(), y.cols());
  for (std::size_t i = 0; i < y.rows(); ++i) {
    const auto yr = y.row(i);
    const auto gr = grad_out.row(i);
    const double inner = dot(yr, gr);
    auto o = out.row(i);
    for (std::size_t j = 0; j < yr.size(); ++j) o[j] = yr[j] * (gr[j] - inner);
  }
  return out;
}

Mat relu(const Mat& x) {
  Mat out = x;
  for (double& v : out.flat()) v = v > 0.0 ? v : 0.0;
  return out;
}

Mat relu_backward(const Mat& pre, const Mat& grad_out) {
  require_same_shape(pre, grad_out, "relu_backward");
  Mat out = grad_out;
  auto o = out.flat();
  auto p = pre.flat();
  for (std::size_t i = 0; i < o.size(); ++i)
    if (p[i] <= 0.0) o[i] = 0.0;
  return out;
}

double log_sum_exp(std::span<const double> v) {
  if (v.empty()) return -std::numeric_limits<double>::infinity();
  const double mx = *std::max_element(v.begin(), v.end());
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

double frobenius_sq(const Mat& a) {
  double s = 0.0;
  for (double v : a.flat()) s += v * v;
  return s;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

Vec column_mean(const Mat& a) {
  Vec m(a.cols(), 0.0);
  if (a.rows() == 0) return m;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto r = a.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) m[j] += r[j];
  }
  for (double& v : m) v /= static_cast<double>(a.rows());
  return m;
}

Vec column_var(const Mat& a, std::span<const double> mean) {
  Vec var(a.cols(), 0.0);
  if (a.rows() == 0) return var;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto r = a.row(i);
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const double d = r[j] - mean[j];
      var[j] += d * d;
    }
  }
  for (double& v : var) v /= static_cast<double>(a.rows());
  return var;
}

Vec weighted_mean(const Mat& rows, std::span<const double> weights) {
  if (weights.size() != rows.rows()) throw DimensionError("weighted_mean: weight count");
  Vec m(rows.cols(), 0.0);
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    const auto r = rows.row(i);
    for (std::size_t j = 0; j < rows.cols(); ++j) m[j] += weights[i] * r[j];
  }
  return m;
}

Mat weighted_covariance(const Mat& rows, std::span<const double> weights,
                        std::span<const double> mean) {
  if (weights.size() != rows.rows()) throw DimensionError("weighted_covariance: weight count");
  const std::size_t d = rows.cols();
  Mat cov(d, d);
  Vec diff(d);
  for (std::size_t i = 0; i < rows.rows(); ++i) {
    const auto r = rows.row(i);
    for (std::size_t j = 0; j < d; ++j) diff[j] = r[j] - mean[j];
    for (std::size_t a = 0; a < d; ++a) {
      const double wa = weights[i] * diff[a];
      double* c = cov.row(a).data();
      for (std::size_t b = a; b < d; ++b) c[b] += wa * diff[b];
    }
  }
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < a; ++b) cov(a, b) = cov(b, a);
  return cov;
}

CrossEntropyResult cross_entropy(const Mat& logits, std::span<const std::size_t> labels) {
  if (logits.rows() != labels.size()) throw DimensionError("cross_entropy: label count");
  const std::size_t n = logits.rows();
  CrossEntropyResult res;
  res.grad = softmax_rows(logits);
  const double inv_n = n == 0 ? 0.0 : 1.0 / static_cast<double>(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] >= logits.cols()) throw IndexError("cross_entropy: label out of range");
    const auto r = logits.row(i);
    total += log_sum_exp(r) - r[labels[i]];
    res.grad(i, labels[i]) -= 1.0;
  }
  res.grad *= inv_n;
  res.loss = total * inv_n;
  return res;
}

bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

void require_finite(const Mat& a, std::string_view what) {
  if (!all_finite(a.flat())) {
    throw NumericalError("non-finite value in " + std::string(what));
  }
}

namespace {

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    unsigned char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    std::reverse(b, b + sizeof(T));
    std::memcpy(&v, b, sizeof(T));
    return v;
  }
}

template <typename T>
void put(std::ostream& out, T v) {
  v = to_little(v);
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("read_mat: truncated stream");
  return to_little(v);
}

}  // namespace

void write_mat(std::ostream& out, const Mat& m) {
  put<std::uint64_t>(out, m.rows());
  put<std::uint64_t>(out, m.cols());
  for (double v : m.flat()) put<double>(out, v);
  if (!out) throw IoError("write_mat: write failed");
}

Mat read_mat(std::istream& in) {
  const auto rows = get<std::uint64_t>(in);
  const auto cols = get<std::uint64_t>(in);
  if (rows > (1ULL << 32) || cols > (1ULL << 32)) throw IoError("read_mat: implausible shape");
  Mat m(rows, cols);
  for (double& v : m.flat()) v = get<double>(in);
  return m;
}

}  // namespace mlad
