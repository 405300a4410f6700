#pragma once
#include <cstdint>
#include <string>
#include <vector>

#include "autograd.hpp"

namespace bf {

// Ramp plan for the branch-mixing coefficient: zero until join_start_step,
// one of four ramp shapes across warmup_steps, then pinned at exactly 1 for
// adjust_steps and beyond.
struct JoinSchedule {
  std::string kind = "linear";  // linear | cosine | exponential | sqrt
  uint64_t join_start_step = 0;
  uint64_t warmup_steps = 0;
  uint64_t adjust_steps = 0;
};

// Raw ramp formula on normalized t in [0,1], before the end clamp.
double lambda_formula(const std::string& kind, double t);
double lambda_at(uint64_t step, const JoinSchedule& s);

// Pre-softmax divisor sqrt(1+(n-1)*lambda^2)*sqrt(d_k). Keeps the variance of
// mixed scores level with the unmixed case; applied nowhere else.
double rectified_scale(double lambda, size_t branches, size_t d_k);

struct DiversityConfig {
  double alpha = 0.05;
  bool enabled = false;
};

// Mean squared cosine between branch feature rows, averaged over all branch
// pairs and all (sample, token) rows. Differentiable. Fewer than two branches
// yields a constant 0 and sets *degenerate.
Var diversity_loss(Tape* t, const std::vector<Var>& branch_feats, bool* degenerate = nullptr);

}  // namespace bf
