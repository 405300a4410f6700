#pragma once
#include <functional>
#include <memory>
#include <vector>

#include "tensor.hpp"

namespace bf {

// Reverse-mode autodiff over whole tensors. Each op returns a node holding the
// result plus a closure that pushes the node's gradient into its parents. The
// tape records op nodes in execution order; backward replays it in reverse, so
// repeated backward passes over one record are bit-identical.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Tensor val;
  Tensor grad;  // empty until first needed
  bool trainable = false;
  bool needs_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> back;

  Tensor& ensure_grad();
};

Var leaf(Tensor v, bool trainable);
Var constant(Tensor v);

struct Tape {
  std::vector<Var> ops;

  // loss must be a scalar node; assumes gradients start zeroed.
  void backward(const Var& loss);
  void zero_grads();  // op-node gradients only; leaves are the caller's
};

void zero_grad(const std::vector<Var>& params);

// Ops accept tape == nullptr for pure inference (no bookkeeping, no grads).
Var mm(Tape* t, const Var& a, const Var& b);      // [...,k] x [k,n]
Var mm_nt(Tape* t, const Var& a, const Var& b);   // [m,k] x [n,k]^T
Var bmm(Tape* t, const Var& a, const Var& b);     // [B,m,k] x [B,k,n]
Var bmm_nt(Tape* t, const Var& a, const Var& b);  // [B,m,k] x [B,n,k]^T
Var add(Tape* t, const Var& a, const Var& b);
Var add_scaled(Tape* t, const Var& a, const Var& b, double c);  // a + c*b
Var scale(Tape* t, const Var& a, double c);
Var add_bias(Tape* t, const Var& x, const Var& b);        // broadcast over last dim
Var add_rows(Tape* t, const Var& x, const Var& rows);     // x[B,N,d] + rows[N,d]
Var row_softmax(Tape* t, const Var& s);                   // over last dim
Var gelu(Tape* t, const Var& x);
Var layer_norm(Tape* t, const Var& x, double eps);        // over last dim
Var affine(Tape* t, const Var& x, const Var& gamma, const Var& beta);
Var mean_tokens(Tape* t, const Var& x);                   // [B,N,d] -> [B,d] (or [N,d] -> [1,d])
Var cross_entropy(Tape* t, const Var& logits, const std::vector<int>& labels);
Var sqcos_mean(Tape* t, const Var& a, const Var& b);      // mean over rows of cos^2
Var vdot(Tape* t, const Var& a, const Var& b);            // full-tensor dot -> scalar

}  // namespace bf
