#include "evrb/engine.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

namespace evrb {

double TauSpec::resolve(int vocab_size) const {
  if (!relative) return value;
  return value * std::log(static_cast<double>(vocab_size));
}

void EngineConfig::validate() const {
  if (!(mu > 0.0 && mu <= 1.0)) throw std::invalid_argument("EngineConfig: mu must be in (0, 1]");
  if (!(epsilon > 0.0)) throw std::invalid_argument("EngineConfig: epsilon must be > 0");
  if (!(delta > 0.0)) throw std::invalid_argument("EngineConfig: delta must be > 0");
  if (lambda < 0.0) throw std::invalid_argument("EngineConfig: lambda must be >= 0");
  if (max_new_tokens < 1) throw std::invalid_argument("EngineConfig: max_new_tokens must be >= 1");
}

EngineConfig ablate(const AblationMask& mask, EngineConfig base) {
  base.ablation = mask;
  if (!mask.pruning) {
    base.tau.relative = false;
    base.tau.value = std::numeric_limits<double>::infinity();
  }
  if (!mask.early_stop) base.lambda = 0.0;
  return base;
}

int GenerationResult::length_tokens() const {
  int n = static_cast<int>(tokens.size());
  if (!tokens.empty() && stop_reason == StopReason::Eos) n -= 1;
  return n;
}

Engine::Engine(const LanguageBackend& backend, EngineConfig config)
    : backend_(backend), cfg_(config) {
  cfg_.validate();
}

Engine::PrefillOutcome Engine::run_prefill(const Prompt& prompt) const {
  if (prompt.tokens.size() != prompt.roles.size()) {
    throw std::invalid_argument("generate: prompt tokens/roles length mismatch");
  }
  if (prompt.tokens.size() < 2) {
    throw std::invalid_argument("generate: prompt must hold at least two tokens");
  }
  PrefillOutcome out;
  out.first_input = prompt.tokens.back();

  const std::vector<TokenId> head_tokens(prompt.tokens.begin(), prompt.tokens.end() - 1);
  const std::vector<SequenceRole> head_roles(prompt.roles.begin(), prompt.roles.end() - 1);
  out.prefill = backend_.prefill(head_tokens, head_roles);

  bool has_visual = false;
  for (SequenceRole r : head_roles) {
    if (r == SequenceRole::Visual) {
      has_visual = true;
      break;
    }
  }
  const double tau = cfg_.tau.resolve(backend_.vocab().size());
  if (!has_visual) {
    out.notes.push_back("no visual span in prompt; degrading to text-only vanilla decoding");
    out.audit.threshold = tau;
  } else {
    out.audit = audit_visual_tokens(backend_, out.prefill, tau);
  }

  // Posterior keeps System ∪ clear-Visual ∪ Instruction; prior keeps
  // System ∪ redundant-Visual ∪ Instruction. Partitioning selects subsets of
  // the one shared prefill cache; nothing is recomputed.
  std::vector<int> posterior_positions, prior_positions;
  size_t clear_idx = 0, redundant_idx = 0;
  for (int pos = 0; pos < static_cast<int>(head_tokens.size()); ++pos) {
    if (head_roles[static_cast<size_t>(pos)] != SequenceRole::Visual) {
      posterior_positions.push_back(pos);
      prior_positions.push_back(pos);
      continue;
    }
    if (clear_idx < out.audit.clear_positions.size() &&
        out.audit.clear_positions[clear_idx] == pos) {
      posterior_positions.push_back(pos);
      ++clear_idx;
    } else if (redundant_idx < out.audit.redundant_positions.size() &&
               out.audit.redundant_positions[redundant_idx] == pos) {
      prior_positions.push_back(pos);
      ++redundant_idx;
    }
  }
  out.posterior = backend_.open_branch(out.prefill, posterior_positions);
  out.prior = backend_.open_branch(out.prefill, prior_positions);
  return out;
}

GenerationResult Engine::generate(const Prompt& prompt) const {
  const auto t0 = std::chrono::steady_clock::now();
  PrefillOutcome pre = run_prefill(prompt);
  const auto t1 = std::chrono::steady_clock::now();

  GenerationResult result;
  result.audit = pre.audit;
  result.notes = pre.notes;

  const Vocabulary& vocab = backend_.vocab();
  const bool degraded_text_only = !pre.notes.empty();

  bool rectification_on = cfg_.ablation.rectification && !degraded_text_only;
  bool monitor_on = cfg_.ablation.early_stop && cfg_.lambda > 0.0 && !degraded_text_only;
  if (pre.audit.clear_positions.empty() && !degraded_text_only &&
      (rectification_on || monitor_on)) {
    // An empty clear set leaves value-value attention undefined and the
    // posterior without informative visual conditioning.
    result.notes.push_back("clear visual set is empty; collapse monitor and rectification "
                           "disabled for this sample");
    rectification_on = false;
    monitor_on = false;
  }
  const bool need_prior = rectification_on || monitor_on;

  CollapseTracker tracker;
  bool have_prev_entropy = false;
  double prev_entropy = 0.0;
  bool have_prev_js = false;
  double prev_js = 0.0;

  TokenId input = pre.first_input;
  for (int step = 0; step < cfg_.max_new_tokens; ++step) {
    StepResult post_step, prior_step;
    try {
      post_step = backend_.decode_step(*pre.posterior, input);
      if (need_prior) prior_step = backend_.decode_step(*pre.prior, input);
    } catch (const std::exception& e) {
      throw std::runtime_error("decode_loop: backend failure at step " + std::to_string(step) +
                               ": " + e.what());
    }

    StepTrace tr;
    tr.step = step;
    tr.input_token = input;
    tr.input_word = vocab.word(input);

    // Collapse monitoring: the token selected one step earlier has just
    // re-entered as input; its relevance is measured now and, when relevant,
    // the buffered JS of its emission step is recorded.
    if (monitor_on) {
      const int new_pos = pre.posterior->next_position() - 1;
      auto text_vals = backend_.value_vectors(*pre.posterior, {new_pos});
      auto vis_vals = backend_.value_vectors(*pre.posterior, pre.audit.clear_positions);
      auto profile = vv_attention(text_vals[0], vis_vals);
      if (profile.has_value()) {
        tr.attn_entropy = profile->entropy;
        if (have_prev_entropy) {
          RelevanceEvent ev = relevance_step(tr.input_word, step, prev_entropy, profile->entropy,
                                             cfg_.delta);
          tr.delta_entropy = ev.delta_entropy;
          tr.relevant = ev.relevant;
          if (ev.relevant && have_prev_js) tracker.record(ev.token_word, prev_js);
        }
        prev_entropy = profile->entropy;
        have_prev_entropy = true;
      }
    }

    // Punctuation gate and EOS scaling (posterior side; optionally both).
    const double mean_djs = tracker.mean_delta_js();
    const bool gate = monitor_on && vocab.is_punctuation(input);
    tr.mean_delta_js = mean_djs;
    tr.gated = gate;
    tr.eos_before = post_step.logits[static_cast<size_t>(vocab.eos_id)];
    Vec post_logits = monitor_on ? scale_eos(post_step.logits, vocab.eos_id, cfg_.lambda,
                                             mean_djs, gate, cfg_.eos_monotone)
                                 : post_step.logits;
    tr.eos_after = post_logits[static_cast<size_t>(vocab.eos_id)];

    Vec post_prob = softmax(post_logits);
    Vec prior_prob;
    if (need_prior) {
      Vec prior_logits = (monitor_on && cfg_.scale_both_branches)
                             ? scale_eos(prior_step.logits, vocab.eos_id, cfg_.lambda, mean_djs,
                                         gate, cfg_.eos_monotone)
                             : prior_step.logits;
      prior_prob = softmax(prior_logits);
      tr.js = js_divergence(post_prob, prior_prob);
      prev_js = tr.js;
      have_prev_js = true;
    }

    TokenId selected;
    if (rectification_on) {
      RectifiedStep rect = rectify(post_prob, prior_prob, cfg_.mu, cfg_.epsilon,
                                   cfg_.rectify_mode);
      selected = greedy_select(rect.rectified);
      tr.plausible_set.assign(rect.plausible_set.begin(), rect.plausible_set.end());
      tr.selected_prob = rect.rectified[static_cast<size_t>(selected)];
    } else {
      selected = greedy_select(post_prob);
      tr.selected_prob = post_prob[static_cast<size_t>(selected)];
    }
    tr.selected = selected;
    result.trace.push_back(std::move(tr));
    result.tokens.push_back(selected);

    if (selected == vocab.eos_id) {
      result.stop_reason = StopReason::Eos;
      break;
    }
    result.stop_reason = StopReason::MaxTokens;
    input = selected;
  }

  result.tracker = tracker;
  std::string text;
  for (TokenId t : result.tokens) {
    if (t == vocab.eos_id) continue;
    if (!text.empty()) text += ' ';
    text += vocab.word(t);
  }
  result.text = std::move(text);

  const auto t2 = std::chrono::steady_clock::now();
  result.prefill_seconds = std::chrono::duration<double>(t1 - t0).count();
  result.decode_seconds = std::chrono::duration<double>(t2 - t1).count();
  return result;
}

}  // namespace evrb
