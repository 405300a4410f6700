#pragma once
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "autograd.hpp"

namespace bftest {

using bf::Tensor;
using bf::Var;

// Central differences on every coordinate of every listed parameter.
// f must re-run the full forward pass from the current parameter values.
inline std::vector<Tensor> finite_diff_grad(const std::function<double()>& f,
                                            const std::vector<Var>& params, double h) {
  std::vector<Tensor> out;
  for (const auto& p : params) {
    Tensor g = Tensor::zeros(p->val.shape);
    for (size_t i = 0; i < p->val.numel(); ++i) {
      const double saved = p->val.data[i];
      p->val.data[i] = saved + h;
      const double fp = f();
      p->val.data[i] = saved - h;
      const double fm = f();
      p->val.data[i] = saved;
      g.data[i] = (fp - fm) / (2.0 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

// The absolute floor keeps central-difference cancellation noise on near-zero
// coordinates from being read as relative error.
inline double rel_err(double a, double b, double floor_ = 1e-6) {
  return std::fabs(a - b) / std::max({std::fabs(a), std::fabs(b), floor_});
}

// Singular values via one-sided Jacobi, accurate to ~machine eps relative.
inline std::vector<double> singular_values(Tensor A) {
  size_t m = A.shape[0], n = A.shape[1];
  if (m < n) {  // work on the transpose so columns are the short axis
    Tensor T = Tensor::zeros({n, m});
    for (size_t i = 0; i < m; ++i)
      for (size_t j = 0; j < n; ++j) T.at(j, i) = A.at(i, j);
    A = std::move(T);
    std::swap(m, n);
  }
  auto col_dot = [&](size_t p, size_t q) {
    double s = 0.0;
    for (size_t i = 0; i < m; ++i) s += A.at(i, p) * A.at(i, q);
    return s;
  };
  for (int sweep = 0; sweep < 60; ++sweep) {
    bool rotated = false;
    for (size_t p = 0; p + 1 < n; ++p) {
      for (size_t q = p + 1; q < n; ++q) {
        const double app = col_dot(p, p), aqq = col_dot(q, q), apq = col_dot(p, q);
        if (std::fabs(apq) <= 1e-15 * std::sqrt(app * aqq)) continue;
        rotated = true;
        const double tau = (aqq - app) / (2.0 * apq);
        const double t = (tau >= 0 ? 1.0 : -1.0) / (std::fabs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t), s = c * t;
        for (size_t i = 0; i < m; ++i) {
          const double vp = A.at(i, p), vq = A.at(i, q);
          A.at(i, p) = c * vp - s * vq;
          A.at(i, q) = s * vp + c * vq;
        }
      }
    }
    if (!rotated) break;
  }
  std::vector<double> sv(n);
  for (size_t j = 0; j < n; ++j) sv[j] = std::sqrt(col_dot(j, j));
  std::sort(sv.rbegin(), sv.rend());
  return sv;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           (tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

}  // namespace bftest
