#pragma once

#include <memory>
#include <span>
#include <vector>

#include "evrb/math.hpp"
#include "evrb/vocab.hpp"

namespace evrb {

// Role carried by every cached position. Prompt positions are System /
// Visual / Instruction; everything appended during decode is Generated.
enum class SequenceRole { System, Visual, Instruction, Generated };

// Value projections of one position: values[layer][head] is a d/heads vector,
// exactly the vectors used inside attention at that layer and head.
using LayerHeadValues = std::vector<std::vector<Vec>>;

struct ModelDims {
  int layers = 0;
  int heads = 0;
  int d = 0;
  int vocab_size = 0;
  int head_dim() const { return d / heads; }
};

// Opaque per-branch decode state. A branch views a subset of the shared
// prefill cache (retained positions keep their original position indices)
// and owns the key/value entries of every token appended to it since.
// Copying a branch is cheap relative to model work; prompt entries are
// shared, generated entries are duplicated.
class BranchCache {
 public:
  virtual ~BranchCache() = default;
  virtual std::unique_ptr<BranchCache> clone() const = 0;

  // Original position indices of retained prompt entries, ascending.
  virtual const std::vector<int>& retained_prompt_positions() const = 0;
  // Number of tokens appended via decode_step.
  virtual int generated_count() const = 0;
  // Original position index the next appended token will receive.
  virtual int next_position() const = 0;
};

// Backend-owned prompt-time KV state shared (read-only) by all branches.
class PrefillCache {
 public:
  virtual ~PrefillCache() = default;
  virtual int size() const = 0;  // total prefill length
};

struct PrefillResult {
  std::vector<Vec> last_hidden;    // one per input position
  std::vector<SequenceRole> roles; // aligned with last_hidden
  std::shared_ptr<const PrefillCache> cache;
};

struct StepResult {
  Vec logits;            // length |Φ|
  Vec new_hidden;        // last-layer hidden of the appended token
  LayerHeadValues value_vectors;  // value projections of the appended token
};

// Contract every language backend must satisfy so the decode engine can run
// prefill, dual-branch decoding, LM-head application, and value-projection
// access without knowing the model internals.
//
// Concurrency: backends are immutable after construction. Two branches may
// be stepped in any order (or concurrently); results are identical either
// way. All operations are deterministic given the model and inputs.
class LanguageBackend {
 public:
  virtual ~LanguageBackend() = default;

  virtual const Vocabulary& vocab() const = 0;
  virtual ModelDims dims() const = 0;

  // Processes the prompt in one pass and returns per-position last-layer
  // hidden states plus a cache from which position subsets can be selected
  // without recomputation. Throws std::invalid_argument on empty input or
  // a tokens/roles length mismatch.
  virtual PrefillResult prefill(const std::vector<TokenId>& tokens,
                                const std::vector<SequenceRole>& roles) const = 0;

  // Opens a decode branch over a retained subset of prefill positions.
  // Positions must be a subset of the prefill range; they keep their
  // original indices.
  virtual std::unique_ptr<BranchCache> open_branch(
      const PrefillResult& prefill, const std::vector<int>& retained_positions) const = 0;

  // Appends `token` to the branch and returns logits equal to those of a
  // from-scratch forward pass over (retained positions + appended tokens),
  // with every position keeping its original index. Throws
  // std::invalid_argument on a foreign cache handle or invalid token.
  virtual StepResult decode_step(BranchCache& cache, TokenId token) const = 0;

  // Pure linear map hidden -> |Φ| logits. Throws on dimension mismatch.
  virtual Vec lm_head(const Vec& hidden) const = 0;

  // Value projections (h W_V per layer and head) for the requested
  // positions of a branch, matching the values used inside attention.
  // Positions may name retained prompt entries or generated entries.
  // Throws std::invalid_argument if a position is not in the cache.
  virtual std::vector<LayerHeadValues> value_vectors(
      const BranchCache& cache, const std::vector<int>& positions) const = 0;
};

}  // namespace evrb
