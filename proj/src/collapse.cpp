#include "evrb/collapse.hpp"

#include <cmath>
#include <stdexcept>

#include "evrb/visual_audit.hpp"

namespace evrb {

namespace {
constexpr double kJsEpsilon = 1e-12;
}

void CollapseTracker::record(const std::string& word, double js_at_emission) {
  auto it = entries_.find(word);
  if (it == entries_.end()) {
    entries_[word] = Entry{js_at_emission, js_at_emission};
  } else {
    it->second.js_last = js_at_emission;
  }
}

double CollapseTracker::mean_delta_js() const {
  if (entries_.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& [word, e] : entries_) {
    sum += std::max(e.js_first - e.js_last, 0.0);
  }
  return sum / static_cast<double>(entries_.size());
}

std::optional<AttentionProfile> vv_attention(const LayerHeadValues& text_value,
                                             const std::vector<LayerHeadValues>& visual_values) {
  const size_t n_visual = visual_values.size();
  if (n_visual == 0) return std::nullopt;

  const size_t layers = text_value.size();
  if (layers == 0 || text_value[0].empty()) {
    throw std::invalid_argument("vv_attention: empty value tensor");
  }
  const size_t heads = text_value[0].size();

  Vec averaged(n_visual, 0.0);
  Vec map_logits(n_visual);
  for (size_t l = 0; l < layers; ++l) {
    for (size_t h = 0; h < heads; ++h) {
      const Vec& tv = text_value[l][h];
      const double scale = 1.0 / std::sqrt(static_cast<double>(tv.size()));
      for (size_t j = 0; j < n_visual; ++j) {
        const Vec& vv = visual_values[j][l][h];
        if (vv.size() != tv.size()) {
          throw std::invalid_argument("vv_attention: inconsistent value dimensions");
        }
        map_logits[j] = dot(tv, vv) * scale;
      }
      Vec w = softmax(map_logits);
      for (size_t j = 0; j < n_visual; ++j) averaged[j] += w[j];
    }
  }
  const double norm = static_cast<double>(layers * heads);
  double z = 0.0;
  for (double& w : averaged) {
    w /= norm;
    z += w;
  }
  for (double& w : averaged) w /= z;

  AttentionProfile profile;
  profile.entropy = token_entropy(averaged);
  profile.weights = std::move(averaged);
  return profile;
}

RelevanceEvent relevance_step(const std::string& word, int step, double prev_entropy,
                              double cur_entropy, double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("relevance_step: delta must be positive");
  RelevanceEvent ev;
  ev.token_word = word;
  ev.step = step;
  ev.delta_entropy = cur_entropy - prev_entropy;
  ev.relevant = ev.delta_entropy < -delta;
  return ev;
}

double js_divergence(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("js_divergence: length mismatch");
  double js = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double m = std::max(0.5 * (a[i] + b[i]), kJsEpsilon);
    if (a[i] > 0.0) js += 0.5 * a[i] * std::log(a[i] / m);
    if (b[i] > 0.0) js += 0.5 * b[i] * std::log(b[i] / m);
  }
  return js < 0.0 ? 0.0 : js;
}

Vec scale_eos(const Vec& logits, TokenId eos_id, double lambda, double mean_delta_js,
              bool gate, bool monotone) {
  if (lambda < 0.0) throw std::invalid_argument("scale_eos: lambda must be >= 0");
  Vec out = logits;
  if (!gate || mean_delta_js == 0.0 || lambda == 0.0) return out;
  const size_t i = static_cast<size_t>(eos_id);
  const double factor = 1.0 + lambda * mean_delta_js;
  if (monotone) {
    out[i] = std::log(std::exp(out[i]) * factor);
  } else {
    out[i] *= factor;
  }
  return out;
}

}  // namespace evrb
