#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "evrb/math.hpp"
#include "evrb/model.hpp"

namespace evrb {

// Value-value attention of one text token against the clear visual
// positions, averaged across all layers and heads.
struct AttentionProfile {
  Vec weights;          // over clear visual positions, sums to 1
  double entropy = 0.0; // nats, in [0, ln(#clear)]
};

struct RelevanceEvent {
  std::string token_word;
  int step = 0;
  double delta_entropy = 0.0;
  bool relevant = false;
};

// Dynamic dictionary keyed by visual-relevant word: first and latest JS
// divergence between posterior and prior at the word's emission steps.
class CollapseTracker {
 public:
  // First occurrence sets both values; later occurrences overwrite only the
  // latest one.
  void record(const std::string& word, double js_at_emission);

  // max(JS_f - JS_l, 0), averaged over all entries; 0 when empty.
  double mean_delta_js() const;

  struct Entry {
    double js_first = 0.0;
    double js_last = 0.0;
  };
  const std::map<std::string, Entry>& entries() const { return entries_; }

 private:
  std::map<std::string, Entry> entries_;
};

// Per layer/head softmax of scaled dot products between the text token's
// value and the clear visual values (scale 1/sqrt(d_head)); the per-map
// weights are averaged over layers and heads, renormalized, and the entropy
// is computed on the averaged map. Returns nullopt when the clear set is
// empty (monitor disabled for the step, not fatal).
std::optional<AttentionProfile> vv_attention(const LayerHeadValues& text_value,
                                             const std::vector<LayerHeadValues>& visual_values);

// ΔE = cur - prev; relevant iff ΔE < -δ (strict). δ must be positive.
RelevanceEvent relevance_step(const std::string& word, int step, double prev_entropy,
                              double cur_entropy, double delta);

// Jensen-Shannon divergence between two probability vectors:
// ½KL(A‖M) + ½KL(B‖M) with M the midpoint, 0·log(0/x) := 0, and zero
// denominators guarded by ε_js. Result is clamped to [0, +inf) and bounded
// by ln 2 (+1e-9 numerical slack).
double js_divergence(std::span<const double> a, std::span<const double> b);

// Eq.-literal multiplicative EOS scaling: when the gate holds,
// logit_eos <- logit_eos · (1 + λ·ΔJS̄). With `monotone` set the scaling is
// applied to exp(logit_eos) instead, which increases EOS probability even
// for negative logits; default off reproduces the literal formula.
Vec scale_eos(const Vec& logits, TokenId eos_id, double lambda, double mean_delta_js,
              bool gate, bool monotone = false);

}  // namespace evrb
