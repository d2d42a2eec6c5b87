#include "evrb/toy_model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "evrb/rng.hpp"

namespace evrb {

namespace {

// ---------------------------------------------------------------------------
// Architecture constants. The residual stream is split into a 24-dim semantic
// block (object-word basis, positional encoding) and 8 reserved channels used
// by the sentence automaton and the visual evidence paths.
// ---------------------------------------------------------------------------
constexpr int kSemDim = 24;
constexpr int kDimSent = 24;      // "," state
constexpr int kDimPeriod = 25;    // "." state
constexpr int kDimQmark = 26;     // "?" state
constexpr int kDimRelay = 27;     // question state relayed one step forward
constexpr int kDimVis = 28;       // visual segment marker
constexpr int kDimBgVis = 29;     // background patch marker
constexpr int kDimObjType = 30;   // object-word type channel
constexpr int kDimAnsDone = 31;   // yes/no emitted

// Input embedding scales.
constexpr double kPosScale = 0.04;
constexpr double kBgSem = 0.05;
constexpr double kVisMark = 1.0;
constexpr double kBgMark = 1.0;
constexpr double kYesNoSem = 0.25;
constexpr double kInstrSem = 0.12;
constexpr double kFillerSem = 0.7;
constexpr double kMiscSem = 0.15;

// Attention head parameters.
constexpr double kCopyStrength = 0.75;   // retrieval head output gain
constexpr double kOffsetBias = 9.0;      // retrieval head, offsets 4 and 5
constexpr double kVisShun = -14.0;       // text-only heads ignore patches
constexpr double kPatchRoleBias = -2.0;  // patch-match visual key bias
constexpr double kMatchScale = 4.6;      // patch-match QK projection scale
constexpr double kPatchGain = 1.0;       // patch-match output gain
constexpr double kSelfBias = 9.0;        // self-cancel head, offset 0
constexpr double kSelfCancel = 1.0;
constexpr double kLocalBias = 5.0;       // local head, offsets 0 and 1
constexpr double kLocalCancel = 2.15;
constexpr double kRelayGain = 2.1;
constexpr double kQkNoise = 0.02;
constexpr double kVNoise = 0.02;

// FFN.
constexpr int kFfnDim = 48;
constexpr double kFfnOutScale = 0.06;

// LM head rows.
constexpr double kLmScale = 10.0;
constexpr double kCommaAfterObject = 14.0;
constexpr double kCommaRelayGuard = 8.0;
constexpr double kPeriodPressure = 2.0;
constexpr double kEosAfterPeriod = 3.0;
constexpr double kEosAtComma = 3.2;
constexpr double kEosAfterAnswer = 9.0;
constexpr double kYesRelay = 7.5;
constexpr double kYesEvidence = 5.0;
constexpr double kNoAtQmark = 3.6;
constexpr double kNoRelay = 7.0;
constexpr double kNoBgAnchor = 10.0;
constexpr double kMiscRow = 0.3;

// Fixed frequency skew carried by the six favored object words.
constexpr std::array<double, 6> kBiasRanks = {1.0, 0.9, 0.8, 0.7, 0.6, 0.5};

// Substream tags (fixed stream layout).
constexpr std::uint64_t kStreamEmbedding = 0;
constexpr std::uint64_t kStreamOutputRows = 1;
constexpr std::uint64_t kStreamLayerBase = 2;
constexpr std::uint64_t kStreamPathology = 40;

Vec random_unit_sem(SplitMix64& rng, int d) {
  Vec v(static_cast<size_t>(d), 0.0);
  double norm2 = 0.0;
  for (int i = 0; i < kSemDim; ++i) {
    v[static_cast<size_t>(i)] = rng.next_normal();
    norm2 += v[static_cast<size_t>(i)] * v[static_cast<size_t>(i)];
  }
  const double inv = 1.0 / std::sqrt(norm2);
  for (int i = 0; i < kSemDim; ++i) v[static_cast<size_t>(i)] *= inv;
  return v;
}

// Gram-Schmidt orthonormal basis of `count` vectors over the semantic block.
std::vector<Vec> orthonormal_sem_basis(SplitMix64& rng, int count, int d) {
  std::vector<Vec> basis;
  while (static_cast<int>(basis.size()) < count) {
    Vec v = random_unit_sem(rng, d);
    for (const Vec& b : basis) {
      const double proj = dot(v, b);
      axpy(-proj, b, v);
    }
    double norm2 = dot(v, v);
    if (norm2 < 1e-8) continue;  // redraw on near-dependence
    const double inv = 1.0 / std::sqrt(norm2);
    for (double& x : v) x *= inv;
    basis.push_back(std::move(v));
  }
  return basis;
}

Vec matvec(const std::vector<Vec>& rows, const Vec& x) {
  Vec y(rows.size());
  for (size_t r = 0; r < rows.size(); ++r) y[r] = dot(rows[r], x);
  return y;
}

struct KeyRef {
  const Vec* k = nullptr;
  const Vec* v = nullptr;
  SequenceRole role = SequenceRole::Generated;
  int pos = 0;
};

// Prompt-side KV entries, computed once at prefill. Prompt positions encode
// themselves independently (each attends only to itself), so every stored
// entry is valid for any retained subset without recomputation.
struct ToyPrefillCache final : public PrefillCache {
  int n = 0;
  int n_visual = 0;
  std::vector<SequenceRole> roles;
  std::vector<TokenId> tokens;
  // [layer][head][position] -> d_head vector.
  std::vector<std::vector<std::vector<Vec>>> k, v;
  int size() const override { return n; }
};

struct ToyBranchCache final : public BranchCache {
  const ToyBackend* owner = nullptr;
  std::shared_ptr<const ToyPrefillCache> base;
  std::vector<int> retained;
  std::vector<TokenId> gen_tokens;
  std::vector<std::vector<std::vector<Vec>>> gen_k, gen_v;  // [layer][head][idx]

  std::unique_ptr<BranchCache> clone() const override {
    return std::make_unique<ToyBranchCache>(*this);
  }
  const std::vector<int>& retained_prompt_positions() const override { return retained; }
  int generated_count() const override { return static_cast<int>(gen_tokens.size()); }
  int next_position() const override { return base->n + static_cast<int>(gen_tokens.size()); }
};

int role_index(SequenceRole role) { return static_cast<int>(role); }

}  // namespace

void ToyConfig::validate() const {
  if (layers < 1 || heads < 1 || d < 1) {
    throw std::invalid_argument("ToyConfig: layers, heads and d must be positive");
  }
  if (d % heads != 0) throw std::invalid_argument("ToyConfig: d must be divisible by heads");
  if (!(collapse_decay > 0.0 && collapse_decay <= 1.0)) {
    throw std::invalid_argument("ToyConfig: collapse_decay must be in (0, 1]");
  }
  if (!(background_ratio >= 0.0 && background_ratio <= 1.0)) {
    throw std::invalid_argument("ToyConfig: background_ratio must be in [0, 1]");
  }
  if (prior_bias_strength < 0.0) {
    throw std::invalid_argument("ToyConfig: prior_bias_strength must be >= 0");
  }
  if (visual_gain < 0.0) throw std::invalid_argument("ToyConfig: visual_gain must be >= 0");
  vocab.validate();
}

std::unique_ptr<ToyBackend> build_toy_backend(const ToyConfig& config) {
  config.validate();
  // The reference construction pins the default geometry; the channel layout
  // above is meaningful only for d=32, 2 layers, 2 heads.
  if (config.d != 32 || config.layers != 2 || config.heads != 2) {
    throw std::invalid_argument("build_toy_backend: construction requires d=32, layers=2, heads=2");
  }
  const Vocabulary& vocab = config.vocab;
  const int d = config.d;
  const int d_head = d / config.heads;
  const int n_vocab = vocab.size();

  auto backend = std::unique_ptr<ToyBackend>(new ToyBackend());
  backend->cfg_ = config;
  ToyWeights& w = backend->w_;

  SplitMix64 root(config.seed);

  // --- Embedding table (stream 0): object words first, then the rest. ---
  SplitMix64 emb_rng = root.substream(kStreamEmbedding);
  std::vector<TokenId> objects(vocab.object_word_ids.begin(), vocab.object_word_ids.end());
  std::vector<Vec> obj_basis =
      orthonormal_sem_basis(emb_rng, static_cast<int>(objects.size()), d);

  w.token_embedding.assign(static_cast<size_t>(n_vocab), Vec(static_cast<size_t>(d), 0.0));
  for (size_t i = 0; i < objects.size(); ++i) {
    Vec& e = w.token_embedding[static_cast<size_t>(objects[i])];
    e = obj_basis[i];
    e[kDimObjType] = 1.0;
  }
  auto set_structural = [&](const char* word, int dim) {
    const TokenId id = vocab.id_of(word);
    w.token_embedding[static_cast<size_t>(id)][static_cast<size_t>(dim)] = 1.0;
  };
  set_structural(",", kDimSent);
  set_structural(".", kDimPeriod);
  set_structural("?", kDimQmark);
  for (const char* word : {"yes", "no"}) {
    const TokenId id = vocab.id_of(word);
    Vec e = random_unit_sem(emb_rng, d);
    for (double& x : e) x *= kYesNoSem;
    e[kDimAnsDone] = 1.0;
    w.token_embedding[static_cast<size_t>(id)] = std::move(e);
  }
  {
    // Background row: near-orthogonal to every LM-head output direction
    // (tiny semantic component), marked as background, and cancelling the
    // visual segment marker so only content patches register on the
    // evidence channel.
    const TokenId bg = vocab.id_of("<bg>");
    Vec e = random_unit_sem(emb_rng, d);
    for (double& x : e) x *= kBgSem;
    e[kDimBgVis] = kBgMark;
    e[kDimVis] = -kVisMark;
    w.token_embedding[static_cast<size_t>(bg)] = std::move(e);
  }
  for (const char* word :
       {"is", "there", "a", "in", "the", "image", "please", "help", "me", "describe", "detail"}) {
    const TokenId id = vocab.id_of(word);
    Vec e = random_unit_sem(emb_rng, d);
    for (double& x : e) x *= kInstrSem;
    w.token_embedding[static_cast<size_t>(id)] = std::move(e);
  }
  for (const char* word : {"<eos>", "<sys>"}) {
    const TokenId id = vocab.id_of(word);
    Vec e = random_unit_sem(emb_rng, d);
    for (double& x : e) x *= kMiscSem;
    w.token_embedding[static_cast<size_t>(id)] = std::move(e);
  }
  for (TokenId id = 0; id < n_vocab; ++id) {
    Vec& e = w.token_embedding[static_cast<size_t>(id)];
    bool untouched = true;
    for (double x : e) {
      if (x != 0.0) {
        untouched = false;
        break;
      }
    }
    if (untouched) {  // filler words
      e = random_unit_sem(emb_rng, d);
      for (double& x : e) x *= kFillerSem;
    }
  }

  // --- LM head rows (stream 1). ---
  SplitMix64 out_rng = root.substream(kStreamOutputRows);
  w.output_embedding.assign(static_cast<size_t>(n_vocab), Vec(static_cast<size_t>(d), 0.0));
  for (size_t i = 0; i < objects.size(); ++i) {
    Vec& u = w.output_embedding[static_cast<size_t>(objects[i])];
    for (int j = 0; j < kSemDim; ++j) {
      u[static_cast<size_t>(j)] = kLmScale * obj_basis[i][static_cast<size_t>(j)];
    }
  }
  {
    Vec& comma = w.output_embedding[static_cast<size_t>(vocab.id_of(","))];
    comma[kDimObjType] = kCommaAfterObject;
    comma[kDimRelay] = -kCommaRelayGuard;
    Vec& period = w.output_embedding[static_cast<size_t>(vocab.id_of("."))];
    period[kDimSent] = kPeriodPressure;
    Vec& eos = w.output_embedding[static_cast<size_t>(vocab.eos_id)];
    eos[kDimPeriod] = kEosAfterPeriod;
    eos[kDimSent] = kEosAtComma;
    eos[kDimAnsDone] = kEosAfterAnswer;
    Vec& yes = w.output_embedding[static_cast<size_t>(vocab.id_of("yes"))];
    yes[kDimRelay] = kYesRelay;
    yes[kDimVis] = kYesEvidence;
    Vec& no = w.output_embedding[static_cast<size_t>(vocab.id_of("no"))];
    no[kDimQmark] = kNoAtQmark;
    no[kDimRelay] = kNoRelay;
    no[kDimBgVis] = -kNoBgAnchor;
  }
  for (TokenId id = 0; id < n_vocab; ++id) {
    Vec& u = w.output_embedding[static_cast<size_t>(id)];
    bool untouched = true;
    for (double x : u) {
      if (x != 0.0) {
        untouched = false;
        break;
      }
    }
    if (untouched) {  // instruction words, fillers, <sys>, <bg>, "?"
      u = random_unit_sem(out_rng, d);
      for (double& x : u) x *= kMiscRow;
    }
  }

  // --- Per-layer attention weights and FFN (streams 2 + layer). ---
  const int L = config.layers, H = config.heads;
  w.wq.assign(L, std::vector<std::vector<Vec>>(H));
  w.wk = w.wq;
  w.wv = w.wq;
  w.wo = w.wq;
  w.role_bias.assign(L, std::vector<std::array<double, 4>>(H, {0.0, 0.0, 0.0, 0.0}));
  w.rel_bias.assign(L, std::vector<std::map<int, double>>(H));
  w.ffn_w1.resize(L);
  w.ffn_w2.resize(L);

  for (int l = 0; l < L; ++l) {
    SplitMix64 layer_rng = root.substream(kStreamLayerBase + static_cast<std::uint64_t>(l));
    for (int h = 0; h < H; ++h) {
      auto noise_matrix = [&](int rows, int cols, double scale) {
        std::vector<Vec> m(static_cast<size_t>(rows), Vec(static_cast<size_t>(cols), 0.0));
        for (auto& row : m) {
          for (double& x : row) x = scale * layer_rng.next_normal();
        }
        return m;
      };
      // Near-identity value projection onto the head's slice.
      auto slice_identity = [&](double scale) {
        std::vector<Vec> m = noise_matrix(d_head, d, kVNoise);
        for (int r = 0; r < d_head; ++r) {
          m[static_cast<size_t>(r)][static_cast<size_t>(h * d_head + r)] += scale;
        }
        return m;
      };
      w.wq[l][h] = noise_matrix(d_head, d, kQkNoise);
      w.wk[l][h] = noise_matrix(d_head, d, kQkNoise);
      w.wv[l][h] = slice_identity(1.0);
      w.wo[l][h].assign(static_cast<size_t>(d), Vec(static_cast<size_t>(d_head), 0.0));

      auto& role_bias = w.role_bias[l][h];
      auto& rel_bias = w.rel_bias[l][h];
      auto& wo = w.wo[l][h];
      if (l == 0 && h == 0) {
        // Retrieval head: copies the text token 4-5 positions back (the
        // probe's query word; earlier mentions during captioning).
        rel_bias[4] = kOffsetBias;
        rel_bias[5] = kOffsetBias;
        role_bias[role_index(SequenceRole::Visual)] = kVisShun;
        for (int r = 0; r < d_head; ++r) {
          wo[static_cast<size_t>(r)][static_cast<size_t>(r)] = kCopyStrength;
        }
      } else if (l == 0 && h == 1) {
        // Patch matcher: content-addressed attention over the visual span
        // through an orthonormal projection of the semantic block.
        std::vector<Vec> proj = orthonormal_sem_basis(layer_rng, d_head, d);
        for (int r = 0; r < d_head; ++r) {
          for (int c = 0; c < d; ++c) {
            const double p = kMatchScale * proj[static_cast<size_t>(r)][static_cast<size_t>(c)];
            w.wq[l][h][static_cast<size_t>(r)][static_cast<size_t>(c)] += p;
            w.wk[l][h][static_cast<size_t>(r)][static_cast<size_t>(c)] += p;
          }
        }
        role_bias[role_index(SequenceRole::Visual)] = kPatchRoleBias;
        // Routes upper semantic content plus the visual/background markers
        // back into the stream; state channels stay untouched.
        for (int dim : {16, 17, 18, 19, 20, 21, 22, 23, kDimVis, kDimBgVis}) {
          wo[static_cast<size_t>(dim)][static_cast<size_t>(dim - d_head)] = kPatchGain;
        }
      } else if (l == 1 && h == 0) {
        // Self-cancel head: removes the lower semantic block of the current
        // token so the readout does not echo its own input.
        rel_bias[0] = kSelfBias;
        role_bias[role_index(SequenceRole::Visual)] = kVisShun;
        role_bias[role_index(SequenceRole::System)] = kVisShun;
        role_bias[role_index(SequenceRole::Instruction)] = kVisShun;
        for (int r = 0; r < d_head; ++r) {
          wo[static_cast<size_t>(r)][static_cast<size_t>(r)] = -kSelfCancel;
        }
      } else {
        // Local state head: cancels the upper semantic block of the current
        // and previous token and relays the question marker one step.
        rel_bias[0] = kLocalBias;
        rel_bias[1] = kLocalBias;
        role_bias[role_index(SequenceRole::Visual)] = kVisShun;
        role_bias[role_index(SequenceRole::System)] = kVisShun;
        role_bias[role_index(SequenceRole::Instruction)] = kVisShun;
        for (int dim = 16; dim < kSemDim; ++dim) {
          wo[static_cast<size_t>(dim)][static_cast<size_t>(dim - d_head)] = -kLocalCancel;
        }
        wo[kDimRelay][static_cast<size_t>(kDimQmark - d_head)] = kRelayGain;
      }
    }
    // FFN noise: small, seeded, shared across heads.
    w.ffn_w1[l].assign(kFfnDim, Vec(static_cast<size_t>(d), 0.0));
    for (auto& row : w.ffn_w1[l]) {
      for (double& x : row) x = layer_rng.next_normal() / std::sqrt(static_cast<double>(d));
    }
    w.ffn_w2[l].assign(static_cast<size_t>(d), Vec(kFfnDim, 0.0));
    for (auto& row : w.ffn_w2[l]) {
      for (double& x : row) {
        x = kFfnOutScale * layer_rng.next_normal() / std::sqrt(static_cast<double>(kFfnDim));
      }
    }
  }

  // --- Pathology profile (stream 40): seeded favored-object skew. ---
  SplitMix64 path_rng = root.substream(kStreamPathology);
  std::vector<TokenId> shuffled = objects;
  for (size_t i = shuffled.size(); i > 1; --i) {
    const size_t j = static_cast<size_t>(path_rng.next_u64() % i);
    std::swap(shuffled[i - 1], shuffled[j]);
  }
  backend->pathology_.bias.assign(static_cast<size_t>(n_vocab), 0.0);
  for (size_t r = 0; r < kBiasRanks.size() && r < shuffled.size(); ++r) {
    backend->pathology_.favored.push_back(shuffled[r]);
    backend->pathology_.bias[static_cast<size_t>(shuffled[r])] = kBiasRanks[r];
  }
  return backend;
}

const Vocabulary& ToyBackend::vocab() const { return cfg_.vocab; }

ModelDims ToyBackend::dims() const {
  return ModelDims{cfg_.layers, cfg_.heads, cfg_.d, cfg_.vocab.size()};
}

Vec ToyBackend::input_vector(TokenId token, int position, SequenceRole role) const {
  if (!cfg_.vocab.valid(token)) throw std::invalid_argument("input_vector: invalid token id");
  Vec x = w_.token_embedding[static_cast<size_t>(token)];
  for (int j = 0; j < kSemDim; ++j) {
    const double freq =
        std::pow(10000.0, -2.0 * static_cast<double>(j / 2) / static_cast<double>(kSemDim));
    const double angle = static_cast<double>(position) * freq;
    x[static_cast<size_t>(j)] += kPosScale * ((j % 2 == 0) ? std::sin(angle) : std::cos(angle));
  }
  if (role == SequenceRole::Visual) x[kDimVis] += kVisMark;
  return x;
}

namespace {

// One transformer stack pass for a single position. `keys[l][h]` lists the
// attendable cached entries for layer l, head h (the position's own K/V are
// appended internally). Every head additionally sees a zero-value sink key
// with logit 0. Returns the final hidden state; per-layer K/V of this
// position are written to `out_k` / `out_v`.
Vec forward_position(const ToyWeights& w, const ToyConfig& cfg, const Vec& input,
                     SequenceRole own_role, int own_pos,
                     const std::vector<std::vector<std::vector<KeyRef>>>& keys,
                     std::vector<std::vector<Vec>>& out_k, std::vector<std::vector<Vec>>& out_v) {
  const int L = cfg.layers, H = cfg.heads;
  const int d = cfg.d, d_head = d / H;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d_head));

  Vec x = input;
  out_k.assign(L, std::vector<Vec>(H));
  out_v.assign(L, std::vector<Vec>(H));
  std::vector<double> logits;
  for (int l = 0; l < L; ++l) {
    Vec attn_out(static_cast<size_t>(d), 0.0);
    for (int h = 0; h < H; ++h) {
      out_k[l][h] = matvec(w.wk[l][h], x);
      out_v[l][h] = matvec(w.wv[l][h], x);
      const Vec q = matvec(w.wq[l][h], x);
      const auto& head_keys = keys[static_cast<size_t>(l)][static_cast<size_t>(h)];
      const auto& role_bias = w.role_bias[l][h];
      const auto& rel_bias = w.rel_bias[l][h];
      auto rel = [&](int delta) {
        auto it = rel_bias.find(delta);
        return it == rel_bias.end() ? 0.0 : it->second;
      };
      logits.assign(head_keys.size() + 2, 0.0);
      for (size_t j = 0; j < head_keys.size(); ++j) {
        const KeyRef& kr = head_keys[j];
        logits[j] = dot(q, *kr.k) * scale + role_bias[static_cast<size_t>(role_index(kr.role))] +
                    rel(own_pos - kr.pos);
      }
      // Own entry, then the sink (logit 0, zero value).
      logits[head_keys.size()] = dot(q, out_k[l][h]) * scale +
                                 role_bias[static_cast<size_t>(role_index(own_role))] + rel(0);
      logits[head_keys.size() + 1] = 0.0;
      Vec weight = softmax(logits);
      Vec head_out(static_cast<size_t>(d_head), 0.0);
      for (size_t j = 0; j < head_keys.size(); ++j) {
        axpy(weight[j], *head_keys[j].v, head_out);
      }
      axpy(weight[head_keys.size()], out_v[l][h], head_out);
      // W_O block: accumulate into the residual stream.
      const auto& wo = w.wo[l][h];
      for (int r = 0; r < d; ++r) {
        attn_out[static_cast<size_t>(r)] += dot(wo[static_cast<size_t>(r)], head_out);
      }
    }
    for (int r = 0; r < d; ++r) x[static_cast<size_t>(r)] += attn_out[static_cast<size_t>(r)];

    Vec f1 = matvec(w.ffn_w1[l], x);
    for (double& t : f1) t = std::tanh(t);
    for (int r = 0; r < d; ++r) x[static_cast<size_t>(r)] += dot(w.ffn_w2[l][static_cast<size_t>(r)], f1);
  }
  return x;
}

const ToyBranchCache& as_toy_cache(const BranchCache& cache, const ToyBackend* self) {
  const auto* tc = dynamic_cast<const ToyBranchCache*>(&cache);
  if (tc == nullptr || tc->owner != self) {
    throw std::invalid_argument("toy backend: foreign or invalid branch cache handle");
  }
  return *tc;
}

}  // namespace

PrefillResult ToyBackend::prefill(const std::vector<TokenId>& tokens,
                                  const std::vector<SequenceRole>& roles) const {
  if (tokens.empty()) throw std::invalid_argument("prefill: empty token sequence");
  if (tokens.size() != roles.size()) {
    throw std::invalid_argument("prefill: tokens/roles length mismatch");
  }
  const int L = cfg_.layers, H = cfg_.heads;
  auto cache = std::make_shared<ToyPrefillCache>();
  cache->n = static_cast<int>(tokens.size());
  cache->roles = roles;
  cache->tokens = tokens;
  cache->k.assign(L, std::vector<std::vector<Vec>>(H, std::vector<Vec>(tokens.size())));
  cache->v = cache->k;

  PrefillResult result;
  result.roles = roles;
  result.last_hidden.resize(tokens.size());

  // Prompt positions encode themselves independently: the key set is empty,
  // so each position attends to itself (plus the sink) at every layer.
  const std::vector<std::vector<std::vector<KeyRef>>> no_keys(
      static_cast<size_t>(L), std::vector<std::vector<KeyRef>>(static_cast<size_t>(H)));
  std::vector<std::vector<Vec>> pos_k, pos_v;
  for (size_t i = 0; i < tokens.size(); ++i) {
    if (roles[i] == SequenceRole::Visual) cache->n_visual++;
    const Vec x = input_vector(tokens[i], static_cast<int>(i), roles[i]);
    result.last_hidden[i] =
        forward_position(w_, cfg_, x, roles[i], static_cast<int>(i), no_keys, pos_k, pos_v);
    for (int l = 0; l < L; ++l) {
      for (int h = 0; h < H; ++h) {
        cache->k[l][h][i] = std::move(pos_k[l][h]);
        cache->v[l][h][i] = std::move(pos_v[l][h]);
      }
    }
  }
  result.cache = cache;
  return result;
}

std::unique_ptr<BranchCache> ToyBackend::open_branch(
    const PrefillResult& prefill, const std::vector<int>& retained_positions) const {
  auto base = std::dynamic_pointer_cast<const ToyPrefillCache>(prefill.cache);
  if (!base) throw std::invalid_argument("open_branch: prefill cache is not a toy cache");
  auto branch = std::make_unique<ToyBranchCache>();
  branch->owner = this;
  branch->base = base;
  branch->retained = retained_positions;
  std::sort(branch->retained.begin(), branch->retained.end());
  for (int pos : branch->retained) {
    if (pos < 0 || pos >= base->n) {
      throw std::invalid_argument("open_branch: retained position out of prefill range");
    }
  }
  branch->gen_k.assign(cfg_.layers, std::vector<std::vector<Vec>>(cfg_.heads));
  branch->gen_v = branch->gen_k;
  return branch;
}

Vec ToyBackend::final_logits(const Vec& base, const BranchCache& cache, int m) const {
  const ToyBranchCache& tc = as_toy_cache(cache, this);
  Vec out = base;
  if (cfg_.prior_bias_strength > 0.0) {
    axpy(cfg_.prior_bias_strength, pathology_.bias, out);
  }
  if (cfg_.visual_gain > 0.0 && tc.base->n_visual > 0) {
    const double decay = std::pow(cfg_.collapse_decay, static_cast<double>(m));
    const double unit = cfg_.visual_gain * decay / static_cast<double>(tc.base->n_visual);
    if (unit != 0.0) {
      for (int pos : tc.retained) {
        const size_t p = static_cast<size_t>(pos);
        if (tc.base->roles[p] != SequenceRole::Visual) continue;
        const TokenId patch = tc.base->tokens[p];
        if (cfg_.vocab.is_object_word(patch)) {
          out[static_cast<size_t>(patch)] += unit;
        }
      }
    }
  }
  return out;
}

StepResult ToyBackend::decode_step(BranchCache& cache, TokenId token) const {
  const ToyBranchCache& probe = as_toy_cache(cache, this);
  (void)probe;
  auto& tc = static_cast<ToyBranchCache&>(cache);
  if (!cfg_.vocab.valid(token)) throw std::invalid_argument("decode_step: invalid token id");

  const int L = cfg_.layers, H = cfg_.heads;
  const int m_before = static_cast<int>(tc.gen_tokens.size());
  const int pos = tc.next_position();

  // Key lists: retained prompt entries first (ascending original position),
  // then previously generated entries.
  std::vector<std::vector<std::vector<KeyRef>>> keys(
      static_cast<size_t>(L), std::vector<std::vector<KeyRef>>(static_cast<size_t>(H)));
  for (int l = 0; l < L; ++l) {
    for (int h = 0; h < H; ++h) {
      auto& list = keys[static_cast<size_t>(l)][static_cast<size_t>(h)];
      list.reserve(tc.retained.size() + tc.gen_tokens.size());
      for (int p : tc.retained) {
        const size_t i = static_cast<size_t>(p);
        list.push_back(KeyRef{&tc.base->k[l][h][i], &tc.base->v[l][h][i], tc.base->roles[i],
                              p});
      }
      for (size_t g = 0; g < tc.gen_tokens.size(); ++g) {
        list.push_back(KeyRef{&tc.gen_k[l][h][g], &tc.gen_v[l][h][g], SequenceRole::Generated,
                              tc.base->n + static_cast<int>(g)});
      }
    }
  }

  const Vec x = input_vector(token, pos, SequenceRole::Generated);
  std::vector<std::vector<Vec>> new_k, new_v;
  StepResult step;
  step.new_hidden = forward_position(w_, cfg_, x, SequenceRole::Generated, pos, keys, new_k, new_v);

  tc.gen_tokens.push_back(token);
  for (int l = 0; l < L; ++l) {
    for (int h = 0; h < H; ++h) {
      tc.gen_k[l][h].push_back(std::move(new_k[l][h]));
      tc.gen_v[l][h].push_back(std::move(new_v[l][h]));
    }
  }
  step.value_vectors.assign(static_cast<size_t>(L), std::vector<Vec>(static_cast<size_t>(H)));
  for (int l = 0; l < L; ++l) {
    for (int h = 0; h < H; ++h) {
      step.value_vectors[static_cast<size_t>(l)][static_cast<size_t>(h)] = tc.gen_v[l][h].back();
    }
  }
  step.logits = final_logits(lm_head(step.new_hidden), tc, m_before);
  return step;
}

Vec ToyBackend::lm_head(const Vec& hidden) const {
  if (static_cast<int>(hidden.size()) != cfg_.d) {
    throw std::invalid_argument("lm_head: hidden dimension mismatch");
  }
  return matvec(w_.output_embedding, hidden);
}

std::vector<LayerHeadValues> ToyBackend::value_vectors(const BranchCache& cache,
                                                       const std::vector<int>& positions) const {
  const ToyBranchCache& tc = as_toy_cache(cache, this);
  const int L = cfg_.layers, H = cfg_.heads;
  std::vector<LayerHeadValues> out;
  out.reserve(positions.size());
  for (int pos : positions) {
    LayerHeadValues values(static_cast<size_t>(L), std::vector<Vec>(static_cast<size_t>(H)));
    if (pos >= 0 && pos < tc.base->n) {
      if (std::find(tc.retained.begin(), tc.retained.end(), pos) == tc.retained.end()) {
        throw std::invalid_argument("value_vectors: position not retained in this branch");
      }
      for (int l = 0; l < L; ++l) {
        for (int h = 0; h < H; ++h) {
          values[static_cast<size_t>(l)][static_cast<size_t>(h)] =
              tc.base->v[l][h][static_cast<size_t>(pos)];
        }
      }
    } else {
      const int g = pos - tc.base->n;
      if (g < 0 || g >= static_cast<int>(tc.gen_tokens.size())) {
        throw std::invalid_argument("value_vectors: position not in cache");
      }
      for (int l = 0; l < L; ++l) {
        for (int h = 0; h < H; ++h) {
          values[static_cast<size_t>(l)][static_cast<size_t>(h)] =
              tc.gen_v[l][h][static_cast<size_t>(g)];
        }
      }
    }
    out.push_back(std::move(values));
  }
  return out;
}

std::pair<std::vector<Vec>, std::set<TokenId>> ToyBackend::encode_scene(const Scene& scene) const {
  if (scene.grid.empty()) throw std::invalid_argument("encode_scene: empty scene");
  const TokenId bg = cfg_.vocab.id_of("<bg>");
  std::vector<Vec> embeddings;
  embeddings.reserve(scene.grid.size());
  for (TokenId cell : scene.grid) {
    const TokenId id = cell == Scene::kBackground ? bg : cell;
    embeddings.push_back(w_.token_embedding[static_cast<size_t>(id)]);
  }
  return {std::move(embeddings), scene.object_set()};
}

}  // namespace evrb
