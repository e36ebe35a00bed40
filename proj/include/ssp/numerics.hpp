#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace ssp {

using Vec = std::vector<double>;
using ConstSpan = std::span<const double>;

/// Dense row-major matrix.
struct Mat {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Mat() = default;
  Mat(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), values(r * c, fill) {}

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {values.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {values.data() + r * cols, cols}; }

  bool operator==(const Mat&) const = default;
};

enum class Metric { cosine, euclidean, manhattan, kl };

std::string_view to_string(Metric metric);
Metric parse_metric(std::string_view name);

/// Norms below this are treated as degenerate by cosine().
inline constexpr double kDegenerateNorm = 1e-12;

double dot(ConstSpan a, ConstSpan b);
double norm2(ConstSpan a);
bool all_finite(ConstSpan a);
void require_same_length(ConstSpan a, ConstSpan b, std::string_view what);

/// u.v / (|u||v|), clamped into [-1, 1].
double cosine(ConstSpan u, ConstSpan v);

struct CosineGrad {
  double value = 0.0;  // clamped
  Vec du;              // gradient of the unclamped expression
  Vec dv;
};

CosineGrad cosine_with_grad(ConstSpan u, ConstSpan v);

/// Discrepancy between two representations:
///   cosine    1 - cos(u, v)
///   euclidean |u - v|_2
///   manhattan |u - v|_1
///   kl        KL(softmax(u) || softmax(v))
double dist(ConstSpan u, ConstSpan v, Metric metric);

struct DistGrad {
  double value = 0.0;
  Vec du;
  Vec dv;
};

/// dist() together with its gradient in both arguments. Manhattan uses the
/// zero subgradient at coincident coordinates, euclidean returns zero
/// gradients when u == v.
DistGrad dist_with_grad(ConstSpan u, ConstSpan v, Metric metric);

/// Shortest round-trip decimal form; "nan", "inf" and "-inf" otherwise.
std::string format_double(double x);

double log_sum_exp(ConstSpan x);
Vec softmax(ConstSpan x);
Vec log_softmax(ConstSpan x);

/// Central-difference gradient of f at x, one coordinate at a time.
Vec finite_diff_grad(const std::function<double(ConstSpan)>& f, ConstSpan x, double eps);

// Small dense kernels. Weight matrices are stored input-major (in x out) so a
// row vector x maps to x * W.

/// a (r x k) * b (k x c)
Mat matmul(const Mat& a, const Mat& b);
/// a (r x k) * b^T where b is (c x k)
Mat matmul_bt(const Mat& a, const Mat& b);
/// a^T * b where a is (k x r) and b is (k x c)
Mat matmul_at(const Mat& a, const Mat& b);
/// x (1 x in) * w (in x out)
Vec vec_mat(ConstSpan x, const Mat& w);
/// w (in x out) * y (out) -> in
Vec mat_vec(const Mat& w, ConstSpan y);
/// g += scale * x y^T
void add_outer(Mat& g, ConstSpan x, ConstSpan y, double scale = 1.0);
/// y += a * x
void axpy(double a, ConstSpan x, std::span<double> y);

}  // namespace ssp
