#include "schedule.hpp"

#include <cmath>

namespace bf {

double lambda_formula(const std::string& kind, double t) {
  if (kind == "linear") return t;
  if (kind == "cosine") return 0.5 * (1.0 - std::cos(M_PI * t));
  if (kind == "exponential") return 1.0 - std::exp(-5.0 * t);
  if (kind == "sqrt") return std::sqrt(t);
  throw error(ERR_CONFIG, "unknown schedule kind '" + kind + "'");
}

double lambda_at(uint64_t step, const JoinSchedule& s) {
  if (step < s.join_start_step) return 0.0;
  const uint64_t off = step - s.join_start_step;
  if (off >= s.warmup_steps) return 1.0;  // covers warmup_steps == 0 (instant)
  const double t = double(off) / double(s.warmup_steps);
  const double l = lambda_formula(s.kind, t);
  return std::min(std::max(l, 0.0), 1.0);
}

double rectified_scale(double lambda, size_t branches, size_t d_k) {
  return std::sqrt(1.0 + double(branches - 1) * lambda * lambda) * std::sqrt(double(d_k));
}

Var diversity_loss(Tape* t, const std::vector<Var>& branch_feats, bool* degenerate) {
  const size_t n = branch_feats.size();
  if (degenerate) *degenerate = n < 2;
  if (n < 2) return constant(Tensor::scalar(0.0));
  Var acc;
  size_t pairs = 0;
  for (size_t i = 0; i < n; ++i)
    for (size_t j = i + 1; j < n; ++j) {
      Var p = sqcos_mean(t, branch_feats[i], branch_feats[j]);
      acc = acc ? add(t, acc, p) : p;
      ++pairs;
    }
  return scale(t, acc, 1.0 / double(pairs));
}

}  // namespace bf
