#pragma once

#include <set>
#include <vector>

#include "evrb/math.hpp"
#include "evrb/vocab.hpp"

namespace evrb {

enum class RectifyMode {
  Bayesian,     // posterior / (prior + ε), renormalized over Φ'
  LogitAdjust,  // contrastive log-space subtraction, for comparison runs
};

// Posterior, prior, plausible set and rectified distribution of one step.
struct RectifiedStep {
  Vec posterior;
  Vec prior;
  std::set<TokenId> plausible_set;
  Vec rectified;
  double mu = 0.0;
  double epsilon = 0.0;
};

// Adaptive plausibility constraint: { t : posterior(t) > μ·max posterior },
// unioned with the argmax so the set is never empty (covers μ = 1, where the
// strict inequality alone would exclude everything). Throws on μ outside
// (0, 1].
std::set<TokenId> plausible_set(std::span<const double> posterior, double mu);

// Bayesian rectification: p'(t) = posterior(t) / (prior(t) + ε) for t in Φ',
// 0 elsewhere, normalized over Φ'. In LogitAdjust mode the ratio is replaced
// by exp(log posterior - log prior contrast) in log space, i.e. the
// subtraction rule used by contrastive-decoding baselines, under the same
// plausibility constraint.
RectifiedStep rectify(const Vec& posterior, const Vec& prior, double mu, double epsilon,
                      RectifyMode mode = RectifyMode::Bayesian);

// Argmax with ties broken by lowest TokenId.
TokenId greedy_select(std::span<const double> rectified);

}  // namespace evrb
