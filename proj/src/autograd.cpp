#include "autograd.hpp"

#include <cmath>

namespace bf {

Tensor& Node::ensure_grad() {
  if (grad.data.empty()) grad = Tensor::zeros(val.shape);
  return grad;
}

Var leaf(Tensor v, bool trainable) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  n->trainable = trainable;
  n->needs_grad = trainable;
  return n;
}

Var constant(Tensor v) { return leaf(std::move(v), false); }

static Var make_op(Tape* t, Tensor val, std::vector<Var> parents, std::function<void(Node&)> back) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  for (const auto& p : parents) n->needs_grad = n->needs_grad || p->needs_grad;
  if (t && n->needs_grad) {
    n->parents = std::move(parents);
    n->back = std::move(back);
    t->ops.push_back(n);
  }
  return n;
}

void Tape::backward(const Var& loss) {
  if (!loss) throw error(ERR_CONFIG, "backward: null loss");
  if (loss->val.numel() != 1)
    throw error(ERR_CONFIG, "backward: loss must be scalar, got " + loss->val.shape_str());
  if (!loss->needs_grad) return;  // nothing trainable feeds it
  loss->ensure_grad().data[0] = 1.0;
  for (auto it = ops.rbegin(); it != ops.rend(); ++it) {
    Node& n = **it;
    if (!n.back || n.grad.data.empty()) continue;
    n.back(n);
  }
}

void Tape::zero_grads() {
  for (auto& n : ops)
    if (!n->grad.data.empty()) n->grad.fill(0.0);
}

void zero_grad(const std::vector<Var>& params) {
  for (const auto& p : params)
    if (!p->grad.data.empty()) p->grad.fill(0.0);
}

Var mm(Tape* t, const Var& a, const Var& b) {
  const Tensor &A = a->val, &B = b->val;
  if (B.ndim() != 2 || A.ndim() < 1 || A.last_dim() != B.shape[0])
    throw error(ERR_CONFIG, "mm: " + A.shape_str() + " by " + B.shape_str());
  const size_t k = B.shape[0], n = B.shape[1], M = A.numel() / k;
  std::vector<size_t> out_shape(A.shape.begin(), A.shape.end() - 1);
  out_shape.push_back(n);
  Tensor C = Tensor::zeros(out_shape);
  gemm_nn(A.data.data(), B.data.data(), C.data.data(), M, k, n, false);
  return make_op(t, std::move(C), {a, b}, [a, b, M, k, n](Node& self) {
    const double* G = self.grad.data.data();
    if (a->needs_grad)
      gemm_nt(G, b->val.data.data(), a->ensure_grad().data.data(), M, n, k, true);
    if (b->needs_grad)
      gemm_tn(a->val.data.data(), G, b->ensure_grad().data.data(), k, M, n, true);
  });
}

Var mm_nt(Tape* t, const Var& a, const Var& b) {
  const Tensor &A = a->val, &B = b->val;
  if (A.ndim() != 2 || B.ndim() != 2 || A.shape[1] != B.shape[1])
    throw error(ERR_CONFIG, "mm_nt: " + A.shape_str() + " by " + B.shape_str());
  const size_t m = A.shape[0], k = A.shape[1], n = B.shape[0];
  Tensor C = Tensor::zeros({m, n});
  gemm_nt(A.data.data(), B.data.data(), C.data.data(), m, k, n, false);
  return make_op(t, std::move(C), {a, b}, [a, b, m, k, n](Node& self) {
    const double* G = self.grad.data.data();
    if (a->needs_grad)
      gemm_nn(G, b->val.data.data(), a->ensure_grad().data.data(), m, n, k, true);
    if (b->needs_grad)
      gemm_tn(G, a->val.data.data(), b->ensure_grad().data.data(), n, m, k, true);
  });
}

Var bmm(Tape* t, const Var& a, const Var& b) {
  const Tensor &A = a->val, &B = b->val;
  if (A.ndim() != 3 || B.ndim() != 3 || A.shape[0] != B.shape[0] || A.shape[2] != B.shape[1])
    throw error(ERR_CONFIG, "bmm: " + A.shape_str() + " by " + B.shape_str());
  const size_t S = A.shape[0], m = A.shape[1], k = A.shape[2], n = B.shape[2];
  Tensor C = Tensor::zeros({S, m, n});
  for (size_t s = 0; s < S; ++s)
    gemm_nn(A.data.data() + s * m * k, B.data.data() + s * k * n, C.data.data() + s * m * n, m, k, n, false);
  return make_op(t, std::move(C), {a, b}, [a, b, S, m, k, n](Node& self) {
    const double* G = self.grad.data.data();
    for (size_t s = 0; s < S; ++s) {
      if (a->needs_grad)
        gemm_nt(G + s * m * n, b->val.data.data() + s * k * n, a->ensure_grad().data.data() + s * m * k,
                m, n, k, true);
      if (b->needs_grad)
        gemm_tn(a->val.data.data() + s * m * k, G + s * m * n, b->ensure_grad().data.data() + s * k * n,
                k, m, n, true);
    }
  });
}

Var bmm_nt(Tape* t, const Var& a, const Var& b) {
  const Tensor &A = a->val, &B = b->val;
  if (A.ndim() != 3 || B.ndim() != 3 || A.shape[0] != B.shape[0] || A.shape[2] != B.shape[2])
    throw error(ERR_CONFIG, "bmm_nt: " + A.shape_str() + " by " + B.shape_str());
  const size_t S = A.shape[0], m = A.shape[1], k = A.shape[2], n = B.shape[1];
  Tensor C = Tensor::zeros({S, m, n});
  for (size_t s = 0; s < S; ++s)
    gemm_nt(A.data.data() + s * m * k, B.data.data() + s * n * k, C.data.data() + s * m * n, m, k, n, false);
  return make_op(t, std::move(C), {a, b}, [a, b, S, m, k, n](Node& self) {
    const double* G = self.grad.data.data();
    for (size_t s = 0; s < S; ++s) {
      if (a->needs_grad)
        gemm_nn(G + s * m * n, b->val.data.data() + s * n * k, a->ensure_grad().data.data() + s * m * k,
                m, n, k, true);
      if (b->needs_grad)
        gemm_tn(G + s * m * n, a->val.data.data() + s * m * k, b->ensure_grad().data.data() + s * n * k,
                n, m, k, true);
    }
  });
}

Var add(Tape* t, const Var& a, const Var& b) { return add_scaled(t, a, b, 1.0); }

Var add_scaled(Tape* t, const Var& a, const Var& b, double c) {
  if (!a->val.same_shape(b->val))
    throw error(ERR_CONFIG, "add: " + a->val.shape_str() + " vs " + b->val.shape_str());
  Tensor out = a->val;
  t_axpy(out, b->val, c);
  return make_op(t, std::move(out), {a, b}, [a, b, c](Node& self) {
    if (a->needs_grad) t_axpy(a->ensure_grad(), self.grad, 1.0);
    if (b->needs_grad) t_axpy(b->ensure_grad(), self.grad, c);
  });
}

Var scale(Tape* t, const Var& a, double c) {
  Tensor out = a->val;
  t_scale_inplace(out, c);
  return make_op(t, std::move(out), {a}, [a, c](Node& self) {
    if (a->needs_grad) t_axpy(a->ensure_grad(), self.grad, c);
  });
}

Var add_bias(Tape* t, const Var& x, const Var& b) {
  const size_t d = x->val.last_dim();
  if (b->val.numel() != d)
    throw error(ERR_CONFIG, "add_bias: " + x->val.shape_str() + " vs " + b->val.shape_str());
  Tensor out = x->val;
  t_add_bias_rows(out, b->val);
  return make_op(t, std::move(out), {x, b}, [x, b, d](Node& self) {
    if (x->needs_grad) t_axpy(x->ensure_grad(), self.grad, 1.0);
    if (b->needs_grad) {
      Tensor& gb = b->ensure_grad();
      const size_t R = self.grad.numel() / d;
      for (size_t r = 0; r < R; ++r)
        for (size_t j = 0; j < d; ++j) gb.data[j] += self.grad.data[r * d + j];
    }
  });
}

Var add_rows(Tape* t, const Var& x, const Var& rows) {
  Tensor out = x->val;
  t_add_table_rows(out, rows->val);
  return make_op(t, std::move(out), {x, rows}, [x, rows](Node& self) {
    if (x->needs_grad) t_axpy(x->ensure_grad(), self.grad, 1.0);
    if (rows->needs_grad) {
      Tensor& gr = rows->ensure_grad();
      const size_t per = gr.numel();
      for (size_t s = 0; s < self.grad.shape[0]; ++s)
        for (size_t i = 0; i < per; ++i) gr.data[i] += self.grad.data[s * per + i];
    }
  });
}

Var row_softmax(Tape* t, const Var& s) {
  if (!s->val.all_finite()) throw error(ERR_DIVERGED, "row_softmax: non-finite input");
  Tensor out = s->val;
  softmax_rows_inplace(out);
  return make_op(t, std::move(out), {s}, [s](Node& self) {
    if (!s->needs_grad) return;
    const size_t d = self.val.last_dim();
    const size_t R = self.val.numel() / d;
    Tensor& gx = s->ensure_grad();
    for (size_t r = 0; r < R; ++r) {
      const double* y = self.val.data.data() + r * d;
      const double* g = self.grad.data.data() + r * d;
      double dot = 0.0;
      for (size_t j = 0; j < d; ++j) dot += g[j] * y[j];
      double* out_g = gx.data.data() + r * d;
      for (size_t j = 0; j < d; ++j) out_g[j] += y[j] * (g[j] - dot);
    }
  });
}

Var gelu(Tape* t, const Var& x) {
  Tensor out = x->val;
  gelu_inplace(out);
  return make_op(t, std::move(out), {x}, [x](Node& self) {
    if (!x->needs_grad) return;
    Tensor& gx = x->ensure_grad();
    for (size_t i = 0; i < gx.numel(); ++i) {
      const double v = x->val.data[i];
      gx.data[i] += self.grad.data[i] * (norm_cdf(v) + v * norm_pdf(v));
    }
  });
}

Var layer_norm(Tape* t, const Var& x, double eps) {
  const size_t d = x->val.last_dim();
  if (d < 2) throw error(ERR_CONFIG, "layer_norm: needs width >= 2, got " + x->val.shape_str());
  Tensor out = x->val;
  normalize_rows_inplace(out, eps);
  return make_op(t, std::move(out), {x, }, [x, d, eps](Node& self) {
    if (!x->needs_grad) return;
    const size_t R = self.val.numel() / d;
    Tensor& gx = x->ensure_grad();
    for (size_t r = 0; r < R; ++r) {
      const double* xr = x->val.data.data() + r * d;
      const double* y = self.val.data.data() + r * d;
      const double* g = self.grad.data.data() + r * d;
      double mu = 0.0;
      for (size_t j = 0; j < d; ++j) mu += xr[j];
      mu /= double(d);
      double var = 0.0;
      for (size_t j = 0; j < d; ++j) {
        const double c = xr[j] - mu;
        var += c * c;
      }
      var /= double(d);
      const double inv = 1.0 / std::sqrt(var + eps);
      double gmean = 0.0, gymean = 0.0;
      for (size_t j = 0; j < d; ++j) {
        gmean += g[j];
        gymean += g[j] * y[j];
      }
      gmean /= double(d);
      gymean /= double(d);
      double* out_g = gx.data.data() + r * d;
      for (size_t j = 0; j < d; ++j) out_g[j] += inv * (g[j] - gmean - y[j] * gymean);
    }
  });
}

Var affine(Tape* t, const Var& x, const Var& gamma, const Var& beta) {
  const size_t d = x->val.last_dim();
  if (gamma->val.numel() != d || beta->val.numel() != d)
    throw error(ERR_CONFIG, "affine: width mismatch on " + x->val.shape_str());
  Tensor out = x->val;
  affine_rows_inplace(out, gamma->val, beta->val);
  return make_op(t, std::move(out), {x, gamma, beta}, [x, gamma, beta, d](Node& self) {
    const size_t R = self.val.numel() / d;
    for (size_t r = 0; r < R; ++r) {
      const double* g = self.grad.data.data() + r * d;
      const double* xr = x->val.data.data() + r * d;
      if (x->needs_grad) {
        double* gx = x->ensure_grad().data.data() + r * d;
        for (size_t j = 0; j < d; ++j) gx[j] += g[j] * gamma->val.data[j];
      }
      if (gamma->needs_grad) {
        double* gg = gamma->ensure_grad().data.data();
        for (size_t j = 0; j < d; ++j) gg[j] += g[j] * xr[j];
      }
      if (beta->needs_grad) {
        double* gb = beta->ensure_grad().data.data();
        for (size_t j = 0; j < d; ++j) gb[j] += g[j];
      }
    }
  });
}

Var mean_tokens(Tape* t, const Var& x) {
  const Tensor& X = x->val;
  size_t B = 1, N, d;
  if (X.ndim() == 3) {
    B = X.shape[0];
    N = X.shape[1];
    d = X.shape[2];
  } else if (X.ndim() == 2) {
    N = X.shape[0];
    d = X.shape[1];
  } else {
    throw error(ERR_CONFIG, "mean_tokens: expected 2-D or 3-D, got " + X.shape_str());
  }
  Tensor out = Tensor::zeros({B, d});
  for (size_t s = 0; s < B; ++s)
    for (size_t n = 0; n < N; ++n)
      for (size_t j = 0; j < d; ++j) out.data[s * d + j] += X.data[(s * N + n) * d + j] / double(N);
  return make_op(t, std::move(out), {x}, [x, B, N, d](Node& self) {
    if (!x->needs_grad) return;
    Tensor& gx = x->ensure_grad();
    for (size_t s = 0; s < B; ++s)
      for (size_t n = 0; n < N; ++n)
        for (size_t j = 0; j < d; ++j)
          gx.data[(s * N + n) * d + j] += self.grad.data[s * d + j] / double(N);
  });
}

Var cross_entropy(Tape* t, const Var& logits, const std::vector<int>& labels) {
  const Tensor& L = logits->val;
  if (L.ndim() != 2 || L.shape[0] != labels.size())
    throw error(ERR_CONFIG, "cross_entropy: logits " + L.shape_str() + " vs " +
                                std::to_string(labels.size()) + " labels");
  const size_t B = L.shape[0], C = L.shape[1];
  for (int y : labels)
    if (y < 0 || size_t(y) >= C) throw error(ERR_CONFIG, "cross_entropy: label out of range");
  double loss = 0.0;
  for (size_t b = 0; b < B; ++b) {
    const double* row = L.data.data() + b * C;
    double m = row[0];
    for (size_t c = 1; c < C; ++c) m = std::max(m, row[c]);
    double z = 0.0;
    for (size_t c = 0; c < C; ++c) z += std::exp(row[c] - m);
    loss += m + std::log(z) - row[labels[b]];
  }
  loss /= double(B);
  return make_op(t, Tensor::scalar(loss), {logits}, [logits, labels, B, C](Node& self) {
    if (!logits->needs_grad) return;
    const double g = self.grad.data[0] / double(B);
    Tensor& gx = logits->ensure_grad();
    for (size_t b = 0; b < B; ++b) {
      const double* row = logits->val.data.data() + b * C;
      double m = row[0];
      for (size_t c = 1; c < C; ++c) m = std::max(m, row[c]);
      double z = 0.0;
      for (size_t c = 0; c < C; ++c) z += std::exp(row[c] - m);
      double* outg = gx.data.data() + b * C;
      for (size_t c = 0; c < C; ++c) {
        const double p = std::exp(row[c] - m) / z;
        outg[c] += g * (p - (int(c) == labels[b] ? 1.0 : 0.0));
      }
    }
  });
}

Var vdot(Tape* t, const Var& a, const Var& b) {
  if (!a->val.same_shape(b->val))
    throw error(ERR_CONFIG, "vdot: " + a->val.shape_str() + " vs " + b->val.shape_str());
  double s = 0.0;
  for (size_t i = 0; i < a->val.numel(); ++i) s += a->val.data[i] * b->val.data[i];
  return make_op(t, Tensor::scalar(s), {a, b}, [a, b](Node& self) {
    const double g = self.grad.data[0];
    if (a->needs_grad) t_axpy(a->ensure_grad(), b->val, g);
    if (b->needs_grad) t_axpy(b->ensure_grad(), a->val, g);
  });
}

Var sqcos_mean(Tape* t, const Var& a, const Var& b) {
  if (!a->val.same_shape(b->val))
    throw error(ERR_CONFIG, "sqcos_mean: " + a->val.shape_str() + " vs " + b->val.shape_str());
  const size_t d = a->val.last_dim();
  const size_t R = a->val.numel() / d;
  auto cs = std::make_shared<std::vector<double>>(R);
  auto nas = std::make_shared<std::vector<double>>(R);
  auto nbs = std::make_shared<std::vector<double>>(R);
  double total = 0.0;
  for (size_t r = 0; r < R; ++r) {
    const double* ar = a->val.data.data() + r * d;
    const double* br = b->val.data.data() + r * d;
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t j = 0; j < d; ++j) {
      dot += ar[j] * br[j];
      na += ar[j] * ar[j];
      nb += br[j] * br[j];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    const double c = (na == 0.0 || nb == 0.0) ? 0.0 : dot / (na * nb);
    (*cs)[r] = c;
    (*nas)[r] = na;
    (*nbs)[r] = nb;
    total += c * c;
  }
  total /= double(R);
  return make_op(t, Tensor::scalar(total), {a, b}, [a, b, cs, nas, nbs, R, d](Node& self) {
    const double g = self.grad.data[0] / double(R);
    for (size_t r = 0; r < R; ++r) {
      const double c = (*cs)[r], na = (*nas)[r], nb = (*nbs)[r];
      if (na == 0.0 || nb == 0.0) continue;
      const double* ar = a->val.data.data() + r * d;
      const double* br = b->val.data.data() + r * d;
      const double coef = g * 2.0 * c;
      if (a->needs_grad) {
        double* ga = a->ensure_grad().data.data() + r * d;
        for (size_t j = 0; j < d; ++j) ga[j] += coef * (br[j] / (na * nb) - c * ar[j] / (na * na));
      }
      if (b->needs_grad) {
        double* gb = b->ensure_grad().data.data() + r * d;
        for (size_t j = 0; j < d; ++j) gb[j] += coef * (ar[j] / (na * nb) - c * br[j] / (nb * nb));
      }
    }
  });
}

}  // namespace bf
