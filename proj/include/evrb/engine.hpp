#pragma once

#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "evrb/collapse.hpp"
#include "evrb/model.hpp"
#include "evrb/rectify.hpp"
#include "evrb/scene.hpp"
#include "evrb/visual_audit.hpp"

namespace evrb {

// Entropy threshold, either in raw nats or as a fraction of ln|Φ| (the
// paper-scale value 7.48 is meaningful only relative to the backbone's
// vocabulary size; the default 0.721 ≈ 7.48 / ln 32000).
struct TauSpec {
  bool relative = true;
  double value = 0.721;
  double resolve(int vocab_size) const;
};

// Component mask: pruning / rectification / early stopping, each
// independently switchable.
struct AblationMask {
  bool pruning = true;
  bool rectification = true;
  bool early_stop = true;
  bool any() const { return pruning || rectification || early_stop; }
};

struct EngineConfig {
  TauSpec tau;
  double mu = 0.9;
  double epsilon = 1e-9;
  double delta = 0.05;
  double lambda = 1.5;
  int max_new_tokens = 512;
  AblationMask ablation;
  RectifyMode rectify_mode = RectifyMode::Bayesian;
  bool eos_monotone = false;
  bool scale_both_branches = false;

  void validate() const;
};

// Config for a component subset: disabled pruning forces tau = +inf (the
// prior branch then holds no visual tokens), disabled rectification passes
// the posterior through, disabled early stopping forces lambda = 0.
EngineConfig ablate(const AblationMask& mask, EngineConfig base = EngineConfig{});

enum class StopReason { Eos, MaxTokens };

struct StepTrace {
  int step = 0;
  TokenId input_token = -1;
  std::string input_word;
  double attn_entropy = std::numeric_limits<double>::quiet_NaN();
  double delta_entropy = std::numeric_limits<double>::quiet_NaN();
  bool relevant = false;
  double js = std::numeric_limits<double>::quiet_NaN();
  double mean_delta_js = 0.0;
  bool gated = false;
  double eos_before = 0.0;
  double eos_after = 0.0;
  std::vector<TokenId> plausible_set;
  TokenId selected = -1;
  double selected_prob = 0.0;
};

struct GenerationResult {
  std::vector<TokenId> tokens;  // selected tokens, including a final EOS
  std::string text;             // words joined by spaces, EOS excluded
  StopReason stop_reason = StopReason::MaxTokens;
  std::vector<StepTrace> trace;       // one record per generated token
  VisualAuditReport audit;
  CollapseTracker tracker;
  double prefill_seconds = 0.0;
  double decode_seconds = 0.0;
  std::vector<std::string> notes;  // degradation notices

  int length_tokens() const;  // generated length, EOS excluded
};

// Orchestrates the pipeline: shared prefill, entropy audit and cache
// partition, dual posterior/prior decode, per-step rectification, collapse
// monitoring, EOS scaling, greedy selection, termination.
//
// The prompt's last token is fed as the first decode-loop input (the loop
// always steps both branches with "the previously selected token", seeded by
// the prompt tail), so prefill covers prompt[0 .. n-2].
class Engine {
 public:
  Engine(const LanguageBackend& backend, EngineConfig config);

  GenerationResult generate(const Prompt& prompt) const;

  // Prefill + audit + partition, exposed for tests and the audit CLI.
  struct PrefillOutcome {
    PrefillResult prefill;
    VisualAuditReport audit;
    std::unique_ptr<BranchCache> posterior;
    std::unique_ptr<BranchCache> prior;
    TokenId first_input = -1;
    std::vector<std::string> notes;
  };
  PrefillOutcome run_prefill(const Prompt& prompt) const;

  const EngineConfig& config() const { return cfg_; }

 private:
  const LanguageBackend& backend_;
  EngineConfig cfg_;
};

}  // namespace evrb
