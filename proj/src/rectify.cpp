#include "evrb/rectify.hpp"

#include <cmath>
#include <stdexcept>

namespace evrb {

namespace {
// Contrast weight for LogitAdjust mode, matching the (1+a)·log p - a·log q
// rule of contrastive-decoding baselines.
constexpr double kContrastAlpha = 1.0;
}  // namespace

std::set<TokenId> plausible_set(std::span<const double> posterior, double mu) {
  if (!(mu > 0.0 && mu <= 1.0)) {
    throw std::invalid_argument("plausible_set: mu must be in (0, 1]");
  }
  const int top = argmax(posterior);
  const double cut = mu * posterior[static_cast<size_t>(top)];
  std::set<TokenId> phi;
  for (size_t t = 0; t < posterior.size(); ++t) {
    if (posterior[t] > cut) phi.insert(static_cast<TokenId>(t));
  }
  phi.insert(top);
  return phi;
}

RectifiedStep rectify(const Vec& posterior, const Vec& prior, double mu, double epsilon,
                      RectifyMode mode) {
  if (posterior.size() != prior.size()) {
    throw std::invalid_argument("rectify: posterior/prior length mismatch");
  }
  if (!(epsilon > 0.0) && mode == RectifyMode::Bayesian) {
    throw std::invalid_argument("rectify: epsilon must be > 0");
  }
  RectifiedStep step;
  step.posterior = posterior;
  step.prior = prior;
  step.mu = mu;
  step.epsilon = epsilon;
  step.plausible_set = plausible_set(posterior, mu);
  step.rectified.assign(posterior.size(), 0.0);

  double z = 0.0;
  if (mode == RectifyMode::Bayesian) {
    for (TokenId t : step.plausible_set) {
      const size_t i = static_cast<size_t>(t);
      step.rectified[i] = posterior[i] / (prior[i] + epsilon);
      z += step.rectified[i];
    }
  } else {
    // Log-space contrast; scores shifted by the max for stability.
    double mx = -1e300;
    for (TokenId t : step.plausible_set) {
      const size_t i = static_cast<size_t>(t);
      const double score = (1.0 + kContrastAlpha) * std::log(posterior[i] + epsilon) -
                           kContrastAlpha * std::log(prior[i] + epsilon);
      step.rectified[i] = score;
      mx = std::max(mx, score);
    }
    for (TokenId t : step.plausible_set) {
      const size_t i = static_cast<size_t>(t);
      step.rectified[i] = std::exp(step.rectified[i] - mx);
      z += step.rectified[i];
    }
  }
  if (!(z > 0.0)) {
    throw std::logic_error("rectify: zero mass on the plausible set");
  }
  for (TokenId t : step.plausible_set) {
    step.rectified[static_cast<size_t>(t)] /= z;
  }
  return step;
}

TokenId greedy_select(std::span<const double> rectified) {
  return static_cast<TokenId>(argmax(rectified));
}

}  // namespace evrb
