#include "ssp/numerics.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <string>

#include "ssp/error.hpp"

namespace ssp {

std::string_view to_string(Metric metric) {
  switch (metric) {
    case Metric::cosine: return "cosine";
    case Metric::euclidean: return "euclidean";
    case Metric::manhattan: return "manhattan";
    case Metric::kl: return "kl";
  }
  return "cosine";
}

Metric parse_metric(std::string_view name) {
  if (name == "cosine") return Metric::cosine;
  if (name == "euclidean") return Metric::euclidean;
  if (name == "manhattan") return Metric::manhattan;
  if (name == "kl") return Metric::kl;
  throw Error(ErrorCode::ConfigError, "unknown metric '" + std::string(name) + "'");
}

double dot(ConstSpan a, ConstSpan b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm2(ConstSpan a) { return std::sqrt(dot(a, a)); }

bool all_finite(ConstSpan a) {
  return std::all_of(a.begin(), a.end(), [](double x) { return std::isfinite(x); });
}

void require_same_length(ConstSpan a, ConstSpan b, std::string_view what) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": lengths " + std::to_string(a.size()) +
                                              " and " + std::to_string(b.size()));
  }
  if (a.empty()) throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": empty vectors");
}

namespace {

void require_nondegenerate(double nu, double nv) {
  if (!(nu >= kDegenerateNorm) || !(nv >= kDegenerateNorm)) {
    throw Error(ErrorCode::DegenerateVector, "cosine of a vector with norm below 1e-12");
  }
}

}  // namespace

double cosine(ConstSpan u, ConstSpan v) {
  require_same_length(u, v, "cosine");
  const double nu = norm2(u);
  const double nv = norm2(v);
  require_nondegenerate(nu, nv);
  return std::clamp(dot(u, v) / (nu * nv), -1.0, 1.0);
}

CosineGrad cosine_with_grad(ConstSpan u, ConstSpan v) {
  require_same_length(u, v, "cosine");
  const double nu = norm2(u);
  const double nv = norm2(v);
  require_nondegenerate(nu, nv);
  const double raw = dot(u, v) / (nu * nv);
  CosineGrad out;
  out.value = std::clamp(raw, -1.0, 1.0);
  out.du.resize(u.size());
  out.dv.resize(v.size());
  const double inv = 1.0 / (nu * nv);
  for (std::size_t i = 0; i < u.size(); ++i) {
    out.du[i] = v[i] * inv - raw * u[i] / (nu * nu);
    out.dv[i] = u[i] * inv - raw * v[i] / (nv * nv);
  }
  return out;
}

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return {buf, res.ptr};
}

double log_sum_exp(ConstSpan x) {
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double xi : x) s += std::exp(xi - m);
  return m + std::log(s);
}

Vec softmax(ConstSpan x) {
  const double lse = log_sum_exp(x);
  Vec p(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) p[i] = std::exp(x[i] - lse);
  return p;
}

Vec log_softmax(ConstSpan x) {
  const double lse = log_sum_exp(x);
  Vec out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
  return out;
}

double dist(ConstSpan u, ConstSpan v, Metric metric) {
  switch (metric) {
    case Metric::cosine:
      return 1.0 - cosine(u, v);
    case Metric::euclidean: {
      require_same_length(u, v, "euclidean");
      double s = 0.0;
      for (std::size_t i = 0; i < u.size(); ++i) s += (u[i] - v[i]) * (u[i] - v[i]);
      return std::sqrt(s);
    }
    case Metric::manhattan: {
      require_same_length(u, v, "manhattan");
      double s = 0.0;
      for (std::size_t i = 0; i < u.size(); ++i) s += std::abs(u[i] - v[i]);
      return s;
    }
    case Metric::kl: {
      require_same_length(u, v, "kl");
      const Vec lp = log_softmax(u);
      const Vec lq = log_softmax(v);
      double s = 0.0;
      for (std::size_t i = 0; i < u.size(); ++i) s += std::exp(lp[i]) * (lp[i] - lq[i]);
      // rounding can push an exact zero slightly negative
      return std::max(s, 0.0);
    }
  }
  return 0.0;
}

DistGrad dist_with_grad(ConstSpan u, ConstSpan v, Metric metric) {
  DistGrad out;
  out.du.assign(u.size(), 0.0);
  out.dv.assign(v.size(), 0.0);
  switch (metric) {
    case Metric::cosine: {
      auto c = cosine_with_grad(u, v);
      out.value = 1.0 - c.value;
      for (std::size_t i = 0; i < u.size(); ++i) {
        out.du[i] = -c.du[i];
        out.dv[i] = -c.dv[i];
      }
      return out;
    }
    case Metric::euclidean: {
      out.value = dist(u, v, metric);
      if (out.value > 0.0) {
        for (std::size_t i = 0; i < u.size(); ++i) {
          out.du[i] = (u[i] - v[i]) / out.value;
          out.dv[i] = -out.du[i];
        }
      }
      return out;
    }
    case Metric::manhattan: {
      out.value = dist(u, v, metric);
      for (std::size_t i = 0; i < u.size(); ++i) {
        const double d = u[i] - v[i];
        out.du[i] = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
        out.dv[i] = -out.du[i];
      }
      return out;
    }
    case Metric::kl: {
      out.value = dist(u, v, metric);
      const Vec p = softmax(u);
      const Vec q = softmax(v);
      const Vec lp = log_softmax(u);
      const Vec lq = log_softmax(v);
      double mean_g = 0.0;
      for (std::size_t i = 0; i < u.size(); ++i) mean_g += p[i] * (lp[i] - lq[i]);
      for (std::size_t i = 0; i < u.size(); ++i) {
        out.du[i] = p[i] * ((lp[i] - lq[i]) - mean_g);
        out.dv[i] = q[i] - p[i];
      }
      return out;
    }
  }
  return out;
}

Vec finite_diff_grad(const std::function<double(ConstSpan)>& f, ConstSpan x, double eps) {
  if (!(eps > 0.0)) throw Error(ErrorCode::ConfigError, "finite_diff_grad: eps must be positive");
  Vec probe(x.begin(), x.end());
  Vec grad(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double xi = probe[i];
    probe[i] = xi + eps;
    const double fp = f(probe);
    probe[i] = xi - eps;
    const double fm = f(probe);
    probe[i] = xi;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw Error(ErrorCode::NonFiniteFunction, "non-finite probe at coordinate " + std::to_string(i));
    }
    grad[i] = (fp - fm) / (2.0 * eps);
  }
  return grad;
}

Mat matmul(const Mat& a, const Mat& b) {
  if (a.cols != b.rows) throw Error(ErrorCode::ShapeMismatch, "matmul inner dimensions differ");
  Mat c(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* ci = c.values.data() + i * c.cols;
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const double* bk = b.values.data() + k * b.cols;
      for (std::size_t j = 0; j < b.cols; ++j) ci[j] += aik * bk[j];
    }
  }
  return c;
}

Mat matmul_bt(const Mat& a, const Mat& b) {
  if (a.cols != b.cols) throw Error(ErrorCode::ShapeMismatch, "matmul_bt inner dimensions differ");
  Mat c(a.rows, b.rows);
  for (std::size_t i = 0; i < a.rows; ++i) {
    for (std::size_t j = 0; j < b.rows; ++j) c(i, j) = dot(a.row(i), b.row(j));
  }
  return c;
}

Mat matmul_at(const Mat& a, const Mat& b) {
  if (a.rows != b.rows) throw Error(ErrorCode::ShapeMismatch, "matmul_at inner dimensions differ");
  Mat c(a.cols, b.cols);
  for (std::size_t k = 0; k < a.rows; ++k) add_outer(c, a.row(k), b.row(k));
  return c;
}

Vec vec_mat(ConstSpan x, const Mat& w) {
  if (x.size() != w.rows) throw Error(ErrorCode::ShapeMismatch, "vec_mat dimensions differ");
  Vec y(w.cols, 0.0);
  for (std::size_t i = 0; i < w.rows; ++i) {
    if (x[i] == 0.0) continue;
    axpy(x[i], w.row(i), y);
  }
  return y;
}

Vec mat_vec(const Mat& w, ConstSpan y) {
  if (y.size() != w.cols) throw Error(ErrorCode::ShapeMismatch, "mat_vec dimensions differ");
  Vec x(w.rows);
  for (std::size_t i = 0; i < w.rows; ++i) x[i] = dot(w.row(i), y);
  return x;
}

void add_outer(Mat& g, ConstSpan x, ConstSpan y, double scale) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double s = scale * x[i];
    if (s == 0.0) continue;
    double* gi = g.values.data() + i * g.cols;
    for (std::size_t j = 0; j < y.size(); ++j) gi[j] += s * y[j];
  }
}

void axpy(double a, ConstSpan x, std::span<double> y) {
  for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

}  // namespace ssp
