#pragma once
#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "common.hpp"

namespace bf {

// Dense row-major tensor of doubles. Everything in the library runs in 64-bit;
// the benchmark command may downconvert copies on its own.
struct Tensor {
  std::vector<size_t> shape;
  std::vector<double> data;

  Tensor() = default;

  static Tensor zeros(std::vector<size_t> s);
  static Tensor full(std::vector<size_t> s, double v);
  static Tensor from(std::vector<size_t> s, std::vector<double> d);
  static Tensor scalar(double v) { return from({1}, {v}); }

  size_t numel() const { return data.size(); }
  size_t ndim() const { return shape.size(); }
  size_t dim(size_t i) const { return shape.at(i); }
  size_t last_dim() const { return shape.empty() ? 1 : shape.back(); }

  // 2-D accessors (row-major)
  size_t rows() const;
  size_t cols() const;
  double& at(size_t i, size_t j);
  double at(size_t i, size_t j) const;

  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  std::string shape_str() const;  // e.g. "2x3"
  void fill(double v);
  bool all_finite() const;
};

size_t shape_count(const std::vector<size_t>& s);

// Raw row-major kernels. C is m-by-n; `acc` accumulates instead of overwriting.
void gemm_nn(const double* A, const double* B, double* C, size_t m, size_t k, size_t n, bool acc);  // A[m,k]*B[k,n]
void gemm_nt(const double* A, const double* B, double* C, size_t m, size_t k, size_t n, bool acc);  // A[m,k]*B[n,k]^T
void gemm_tn(const double* A, const double* B, double* C, size_t m, size_t k, size_t n, bool acc);  // A[k,m]^T*B[k,n]

// Plain (non-differentiated) tensor math used by oracles, the collapse pass
// and deployed inference.
Tensor t_mm(const Tensor& A, const Tensor& B);      // [...,k] x [k,n]
Tensor t_mm_nt(const Tensor& A, const Tensor& B);   // [m,k] x [n,k]^T
Tensor t_bmm(const Tensor& A, const Tensor& B);     // [B,m,k] x [B,k,n]
Tensor t_bmm_nt(const Tensor& A, const Tensor& B);  // [B,m,k] x [B,n,k]^T
void t_axpy(Tensor& y, const Tensor& x, double a);  // y += a*x
void t_scale_inplace(Tensor& x, double c);
void t_add_bias_rows(Tensor& x, const Tensor& b);           // broadcast over last dim
void t_add_table_rows(Tensor& x, const Tensor& rows);       // x[B,N,d] += rows[N,d] per sample
void softmax_rows_inplace(Tensor& s);                       // over last dim
void normalize_rows_inplace(Tensor& x, double eps);         // zero mean / unit variance over last dim
void affine_rows_inplace(Tensor& x, const Tensor& gamma, const Tensor& beta);
void gelu_inplace(Tensor& x);
double max_abs(const Tensor& x);
double max_abs_diff(const Tensor& a, const Tensor& b);

double norm_cdf(double x);  // Phi
double norm_pdf(double x);  // phi
double gelu_scalar(double x);

uint64_t splitmix64(uint64_t x);

// Deterministic RNG with portable distributions (the std:: distribution
// algorithms are implementation-defined; these are not).
struct Rng {
  std::mt19937_64 g;
  bool has_cache = false;
  double cache = 0.0;

  explicit Rng(uint64_t seed) : g(seed) {}
  uint64_t next_u64() { return g(); }
  double uniform();                       // [0,1)
  double uniform(double a, double b);
  double normal();                        // Box-Muller
  double trunc_normal(double stddev);     // resampled until |z| <= 2
  uint64_t below(uint64_t n);             // unbiased in [0,n)
  void shuffle(std::vector<size_t>& v);   // Fisher-Yates
  Tensor normal_tensor(std::vector<size_t> shape, double stddev = 1.0);
  Tensor uniform_tensor(std::vector<size_t> shape, double a, double b);
  Tensor trunc_normal_tensor(std::vector<size_t> shape, double stddev);
};

}  // namespace bf
