#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <utility>

#include "evrb/model.hpp"
#include "evrb/scene.hpp"
#include "evrb/vocab.hpp"

namespace evrb {

// Deterministic, seeded, hand-constructed tiny multimodal transformer with
// explicit pathology knobs. All weights are a pure function of the seed
// (SplitMix64 stream, fixed layout: embeddings, then per-layer weights).
struct ToyConfig {
  int layers = 2;
  int heads = 2;
  int d = 32;
  std::uint64_t seed = 0;
  // Pathology knobs, all injected at the logit level on top of the
  // transformer output:
  //   logits += prior_bias_strength * b + visual_gain * collapse_decay^m * g
  // where b is a fixed frequency skew over object words, g the grounding
  // indicator of the branch cache, and m the branch's appended-token count.
  double prior_bias_strength = 0.0;  // beta_p >= 0
  double collapse_decay = 1.0;       // gamma in (0, 1]
  double background_ratio = 0.4;     // rho in [0, 1], scene-generator default
  double visual_gain = 35.0;         // beta_v >= 0
  Vocabulary vocab = default_vocabulary();

  void validate() const;  // throws std::invalid_argument on bad fields
};

// Fixed frequency-skew prior over object words (the biased language prior)
// plus the grounding indicator. b is fixed per model seed; g depends on the
// visual positions retained in a specific branch cache.
struct PathologyProfile {
  Vec bias;                        // |Φ|, nonzero only on object words
  std::vector<TokenId> favored;    // object words carrying the skew, by rank
};

// Weight views exposed for tests and independent oracles.
struct ToyWeights {
  std::vector<Vec> token_embedding;   // |Φ| × d, shared with patch embeddings
  std::vector<Vec> output_embedding;  // |Φ| × d, LM head rows
  // [layer][head]: d_head × d projections.
  std::vector<std::vector<std::vector<Vec>>> wq, wk, wv;
  // [layer][head]: d × d_head output blocks.
  std::vector<std::vector<std::vector<Vec>>> wo;
  // [layer][head][role]: additive attention bias per key role.
  std::vector<std::vector<std::array<double, 4>>> role_bias;
  // [layer][head]: additive attention bias per (query_pos - key_pos).
  std::vector<std::vector<std::map<int, double>>> rel_bias;
  // [layer]: FFN weights.
  std::vector<std::vector<Vec>> ffn_w1, ffn_w2;
};

class ToyBackend;

// Builds the seeded backend. Token embeddings are shared between object
// words and their patches; the background row is constructed near-orthogonal
// to every LM-head output direction so background patches predict with high
// entropy (Fig-1-style redundant tokens by construction).
std::unique_ptr<ToyBackend> build_toy_backend(const ToyConfig& config);

class ToyBackend final : public LanguageBackend {
 public:
  const Vocabulary& vocab() const override;
  ModelDims dims() const override;
  PrefillResult prefill(const std::vector<TokenId>& tokens,
                        const std::vector<SequenceRole>& roles) const override;
  std::unique_ptr<BranchCache> open_branch(
      const PrefillResult& prefill, const std::vector<int>& retained_positions) const override;
  StepResult decode_step(BranchCache& cache, TokenId token) const override;
  Vec lm_head(const Vec& hidden) const override;
  std::vector<LayerHeadValues> value_vectors(
      const BranchCache& cache, const std::vector<int>& positions) const override;

  // Toy-specific surface.
  const ToyConfig& config() const { return cfg_; }
  const ToyWeights& weights() const { return w_; }
  const PathologyProfile& pathology() const { return pathology_; }

  // One embedding per grid cell, row-major (object cells share the token
  // embedding table; background cells use the background row), plus the
  // scene's ground-truth object set.
  std::pair<std::vector<Vec>, std::set<TokenId>> encode_scene(const Scene& scene) const;

  // The logit-level pathology injector:
  //   base + beta_p * b + beta_v * gamma^m * g(cache).
  // g(w) counts retained visual positions carrying w's patch, normalized by
  // the total visual position count of the prompt; it is computed over the
  // positions retained in this branch, so a branch holding no object patches
  // receives no grounding.
  Vec final_logits(const Vec& base, const BranchCache& cache, int m) const;

  // Assembled model input for one position: table embedding + sinusoidal
  // position encoding + role segment marker.
  Vec input_vector(TokenId token, int position, SequenceRole role) const;

 private:
  friend std::unique_ptr<ToyBackend> build_toy_backend(const ToyConfig& config);
  ToyBackend() = default;

  ToyConfig cfg_;
  ToyWeights w_;
  PathologyProfile pathology_;
};

}  // namespace evrb
