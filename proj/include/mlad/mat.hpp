#pragma once

#include <cstddef>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <string_view>
#include <vector>

namespace mlad {

using Vec = std::vector<double>;

// Dense row-major matrix of doubles.
class Mat {
 public:
  Mat() = default;
  Mat(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Mat(std::size_t rows, std::size_t cols, Vec data);
  Mat(std::initializer_list<std::initializer_list<double>> rows);

  static Mat identity(std::size_t n);
  static Mat row_vector(std::span<const double> v);
  static Mat column_vector(std::span<const double> v);
  static Mat diagonal(std::span<const double> v);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> flat() { return data_; }
  std::span<const double> flat() const { return data_; }
  const Vec& values() const { return data_; }

  Vec column(std::size_t c) const;
  void set_row(std::size_t r, std::span<const double> v);

  void fill(double v);
  bool same_shape(const Mat& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

  Mat& operator+=(const Mat& o);
  Mat& operator-=(const Mat& o);
  Mat& operator*=(double s);

  bool operator==(const Mat& o) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Vec data_;
};

Mat operator+(Mat a, const Mat& b);
Mat operator-(Mat a, const Mat& b);
Mat operator*(Mat a, double s);

// a * b
Mat matmul(const Mat& a, const Mat& b);
// a^T * b
Mat matmul_tn(const Mat& a, const Mat& b);
// a * b^T
Mat matmul_nt(const Mat& a, const Mat& b);
Vec matvec(const Mat& a, std::span<const double> x);
// a^T * x
Vec matvec_t(const Mat& a, std::span<const double> x);

Mat transpose(const Mat& a);
Mat hadamard(const Mat& a, const Mat& b);
Mat select_rows(const Mat& a, std::span<const std::size_t> idx);
Mat hconcat(std::span<const Mat> parts);
// Columns [begin, begin + count).
Mat slice_cols(const Mat& a, std::size_t begin, std::size_t count);

// Row-wise softmax with per-row max subtraction.
Mat softmax_rows(const Mat& x);
// Backward of softmax_rows given its output and the upstream gradient.
Mat softmax_rows_backward(const Mat& y, const Mat& grad_out);

Mat relu(const Mat& x);
// Gradient through ReLU; `pre` is the pre-activation input.
Mat relu_backward(const Mat& pre, const Mat& grad_out);

double log_sum_exp(std::span<const double> v);
double frobenius_sq(const Mat& a);
double dot(std::span<const double> a, std::span<const double> b);

Vec column_mean(const Mat& a);
// Biased (1/N) per-column variance.
Vec column_var(const Mat& a, std::span<const double> mean);
Vec weighted_mean(const Mat& rows, std::span<const double> weights);
// sum_i w_i (x_i - mean)(x_i - mean)^T
Mat weighted_covariance(const Mat& rows, std::span<const double> weights,
                        std::span<const double> mean);

struct CrossEntropyResult {
  double loss = 0.0;
  Mat grad;  // d loss / d logits
};

// Mean negative log softmax probability of the true class.
CrossEntropyResult cross_entropy(const Mat& logits, std::span<const std::size_t> labels);

// Throws NumericalError naming `what` if any entry is NaN or infinite.
void require_finite(const Mat& a, std::string_view what);
bool all_finite(std::span<const double> v);

// Checkpoint encoding: u64 rows, u64 cols, then row-major f64, all little-endian.
void write_mat(std::ostream& out, const Mat& m);
Mat read_mat(std::istream& in);

}  // namespace mlad
