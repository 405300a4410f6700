#include "tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace bf {

size_t shape_count(const std::vector<size_t>& s) {
  size_t c = 1;
  for (size_t d : s) c *= d;
  return c;
}

Tensor Tensor::zeros(std::vector<size_t> s) {
  Tensor t;
  t.shape = std::move(s);
  t.data.assign(shape_count(t.shape), 0.0);
  return t;
}

Tensor Tensor::full(std::vector<size_t> s, double v) {
  Tensor t = zeros(std::move(s));
  t.fill(v);
  return t;
}

Tensor Tensor::from(std::vector<size_t> s, std::vector<double> d) {
  if (shape_count(s) != d.size())
    throw error(ERR_CONFIG, "tensor: data length " + std::to_string(d.size()) +
                                " does not match shape");
  Tensor t;
  t.shape = std::move(s);
  t.data = std::move(d);
  return t;
}

size_t Tensor::rows() const {
  if (ndim() != 2) throw error(ERR_CONFIG, "tensor: rows() on " + shape_str());
  return shape[0];
}

size_t Tensor::cols() const {
  if (ndim() != 2) throw error(ERR_CONFIG, "tensor: cols() on " + shape_str());
  return shape[1];
}

double& Tensor::at(size_t i, size_t j) { return data[i * shape.back() + j]; }
double Tensor::at(size_t i, size_t j) const { return data[i * shape.back() + j]; }

std::string Tensor::shape_str() const {
  std::ostringstream os;
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  if (shape.empty()) os << "scalar";
  return os.str();
}

void Tensor::fill(double v) { std::fill(data.begin(), data.end(), v); }

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

void gemm_nn(const double* A, const double* B, double* C, size_t m, size_t k, size_t n, bool acc) {
  if (!acc) std::memset(C, 0, m * n * sizeof(double));
  for (size_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    double* c = C + i * n;
    for (size_t p = 0; p < k; ++p) {
      const double av = a[p];
      const double* b = B + p * n;
      for (size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

void gemm_nt(const double* A, const double* B, double* C, size_t m, size_t k, size_t n, bool acc) {
  for (size_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    double* c = C + i * n;
    for (size_t j = 0; j < n; ++j) {
      const double* b = B + j * k;
      double s = 0.0;
      for (size_t p = 0; p < k; ++p) s += a[p] * b[p];
      if (acc)
        c[j] += s;
      else
        c[j] = s;
    }
  }
}

void gemm_tn(const double* A, const double* B, double* C, size_t m, size_t k, size_t n, bool acc) {
  if (!acc) std::memset(C, 0, m * n * sizeof(double));
  for (size_t p = 0; p < k; ++p) {
    const double* a = A + p * m;
    const double* b = B + p * n;
    for (size_t i = 0; i < m; ++i) {
      const double av = a[i];
      double* c = C + i * n;
      for (size_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

static void require_2d(const Tensor& t, const char* who) {
  if (t.ndim() != 2) throw error(ERR_CONFIG, std::string(who) + ": expected 2-D, got " + t.shape_str());
}

Tensor t_mm(const Tensor& A, const Tensor& B) {
  require_2d(B, "t_mm");
  if (A.ndim() < 1 || A.last_dim() != B.shape[0])
    throw error(ERR_CONFIG, "t_mm: " + A.shape_str() + " by " + B.shape_str());
  const size_t k = B.shape[0], n = B.shape[1];
  const size_t M = A.numel() / k;
  std::vector<size_t> out_shape(A.shape.begin(), A.shape.end() - 1);
  out_shape.push_back(n);
  Tensor C = Tensor::zeros(out_shape);
  gemm_nn(A.data.data(), B.data.data(), C.data.data(), M, k, n, false);
  return C;
}

Tensor t_mm_nt(const Tensor& A, const Tensor& B) {
  require_2d(A, "t_mm_nt");
  require_2d(B, "t_mm_nt");
  if (A.shape[1] != B.shape[1])
    throw error(ERR_CONFIG, "t_mm_nt: " + A.shape_str() + " by " + B.shape_str());
  Tensor C = Tensor::zeros({A.shape[0], B.shape[0]});
  gemm_nt(A.data.data(), B.data.data(), C.data.data(), A.shape[0], A.shape[1], B.shape[0], false);
  return C;
}

static void require_bmm(const Tensor& A, const Tensor& B, const char* who) {
  if (A.ndim() != 3 || B.ndim() != 3 || A.shape[0] != B.shape[0])
    throw error(ERR_CONFIG, std::string(who) + ": " + A.shape_str() + " by " + B.shape_str());
}

Tensor t_bmm(const Tensor& A, const Tensor& B) {
  require_bmm(A, B, "t_bmm");
  if (A.shape[2] != B.shape[1]) throw error(ERR_CONFIG, "t_bmm: " + A.shape_str() + " by " + B.shape_str());
  const size_t Bn = A.shape[0], m = A.shape[1], k = A.shape[2], n = B.shape[2];
  Tensor C = Tensor::zeros({Bn, m, n});
  for (size_t s = 0; s < Bn; ++s)
    gemm_nn(A.data.data() + s * m * k, B.data.data() + s * k * n, C.data.data() + s * m * n, m, k, n, false);
  return C;
}

Tensor t_bmm_nt(const Tensor& A, const Tensor& B) {
  require_bmm(A, B, "t_bmm_nt");
  if (A.shape[2] != B.shape[2]) throw error(ERR_CONFIG, "t_bmm_nt: " + A.shape_str() + " by " + B.shape_str());
  const size_t Bn = A.shape[0], m = A.shape[1], k = A.shape[2], n = B.shape[1];
  Tensor C = Tensor::zeros({Bn, m, n});
  for (size_t s = 0; s < Bn; ++s)
    gemm_nt(A.data.data() + s * m * k, B.data.data() + s * n * k, C.data.data() + s * m * n, m, k, n, false);
  return C;
}

void t_axpy(Tensor& y, const Tensor& x, double a) {
  if (!y.same_shape(x)) throw error(ERR_CONFIG, "t_axpy: " + y.shape_str() + " vs " + x.shape_str());
  for (size_t i = 0; i < y.data.size(); ++i) y.data[i] += a * x.data[i];
}

void t_scale_inplace(Tensor& x, double c) {
  for (double& v : x.data) v *= c;
}

void t_add_bias_rows(Tensor& x, const Tensor& b) {
  const size_t d = x.last_dim();
  if (b.numel() != d) throw error(ERR_CONFIG, "t_add_bias_rows: " + x.shape_str() + " vs " + b.shape_str());
  for (size_t r = 0; r < x.numel() / d; ++r)
    for (size_t j = 0; j < d; ++j) x.data[r * d + j] += b.data[j];
}

void t_add_table_rows(Tensor& x, const Tensor& rows) {
  if (x.ndim() != 3 || rows.ndim() != 2 || x.shape[1] != rows.shape[0] || x.shape[2] != rows.shape[1])
    throw error(ERR_CONFIG, "t_add_table_rows: " + x.shape_str() + " vs " + rows.shape_str());
  const size_t per = rows.numel();
  for (size_t s = 0; s < x.shape[0]; ++s)
    for (size_t i = 0; i < per; ++i) x.data[s * per + i] += rows.data[i];
}

void softmax_rows_inplace(Tensor& s) {
  const size_t d = s.last_dim();
  for (size_t r = 0; r < s.numel() / d; ++r) {
    double* row = s.data.data() + r * d;
    double m = row[0];
    for (size_t j = 1; j < d; ++j) m = std::max(m, row[j]);
    double z = 0.0;
    for (size_t j = 0; j < d; ++j) {
      row[j] = std::exp(row[j] - m);
      z += row[j];
    }
    for (size_t j = 0; j < d; ++j) row[j] /= z;
  }
}

void normalize_rows_inplace(Tensor& x, double eps) {
  const size_t d = x.last_dim();
  for (size_t r = 0; r < x.numel() / d; ++r) {
    double* row = x.data.data() + r * d;
    double mu = 0.0;
    for (size_t j = 0; j < d; ++j) mu += row[j];
    mu /= double(d);
    double var = 0.0;
    for (size_t j = 0; j < d; ++j) {
      const double c = row[j] - mu;
      var += c * c;
    }
    var /= double(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (size_t j = 0; j < d; ++j) row[j] = (row[j] - mu) * inv;
  }
}

void affine_rows_inplace(Tensor& x, const Tensor& gamma, const Tensor& beta) {
  const size_t d = x.last_dim();
  if (gamma.numel() != d || beta.numel() != d)
    throw error(ERR_CONFIG, "affine_rows_inplace: width mismatch on " + x.shape_str());
  for (size_t r = 0; r < x.numel() / d; ++r)
    for (size_t j = 0; j < d; ++j) x.data[r * d + j] = gamma.data[j] * x.data[r * d + j] + beta.data[j];
}

void gelu_inplace(Tensor& x) {
  for (double& v : x.data) v = gelu_scalar(v);
}

double max_abs(const Tensor& x) {
  double m = 0.0;
  for (double v : x.data) m = std::max(m, std::fabs(v));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw error(ERR_CONFIG, "max_abs_diff: " + a.shape_str() + " vs " + b.shape_str());
  double m = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i) m = std::max(m, std::fabs(a.data[i] - b.data[i]));
  return m;
}

double norm_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

double norm_pdf(double x) { return std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI); }

double gelu_scalar(double x) { return x * norm_cdf(x); }

uint64_t splitmix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

double Rng::uniform() { return double(g() >> 11) * 0x1.0p-53; }

double Rng::uniform(double a, double b) { return a + (b - a) * uniform(); }

double Rng::normal() {
  if (has_cache) {
    has_cache = false;
    return cache;
  }
  const double u1 = 1.0 - uniform();  // (0,1]
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double th = 2.0 * M_PI * u2;
  cache = r * std::sin(th);
  has_cache = true;
  return r * std::cos(th);
}

double Rng::trunc_normal(double stddev) {
  double z;
  do {
    z = normal();
  } while (std::fabs(z) > 2.0);
  return z * stddev;
}

uint64_t Rng::below(uint64_t n) {
  if (n == 0) throw error(ERR_CONFIG, "Rng::below(0)");
  const uint64_t lim = UINT64_MAX - UINT64_MAX % n;
  uint64_t x;
  do {
    x = g();
  } while (x >= lim);
  return x % n;
}

void Rng::shuffle(std::vector<size_t>& v) {
  if (v.size() < 2) return;
  for (size_t i = v.size() - 1; i > 0; --i) {
    const size_t j = size_t(below(i + 1));
    std::swap(v[i], v[j]);
  }
}

Tensor Rng::normal_tensor(std::vector<size_t> shape, double stddev) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = normal() * stddev;
  return t;
}

Tensor Rng::uniform_tensor(std::vector<size_t> shape, double a, double b) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = uniform(a, b);
  return t;
}

Tensor Rng::trunc_normal_tensor(std::vector<size_t> shape, double stddev) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.data) v = trunc_normal(stddev);
  return t;
}

}  // namespace bf
