#include <doctest.h>

#include <cmath>

#include "evrb/collapse.hpp"
#include "evrb/engine.hpp"
#include "evrb/rng.hpp"
#include "evrb/toy_model.hpp"
#include "evrb/visual_audit.hpp"

using namespace evrb;

namespace {
ToyConfig default_config(std::uint64_t seed = 0) {
  ToyConfig cfg;
  cfg.seed = seed;
  return cfg;
}
}  // namespace

TEST_CASE("build_model determinism and shared embedding table") {
  auto a = build_toy_backend(default_config(42));
  auto b = build_toy_backend(default_config(42));
  CHECK(a->weights().token_embedding == b->weights().token_embedding);  // bitwise
  CHECK(a->weights().output_embedding == b->weights().output_embedding);
  for (int l = 0; l < 2; ++l) {
    for (int h = 0; h < 2; ++h) {
      CHECK(a->weights().wq[l][h] == b->weights().wq[l][h]);
      CHECK(a->weights().wv[l][h] == b->weights().wv[l][h]);
    }
  }

  // Patch embeddings are the token embeddings.
  const Vocabulary& vocab = a->vocab();
  Scene scene;
  scene.height = 1;
  scene.width = 2;
  scene.grid = {vocab.id_of("cat"), Scene::kBackground};
  auto [embeddings, truth] = a->encode_scene(scene);
  CHECK(embeddings[0] == a->weights().token_embedding[static_cast<size_t>(vocab.id_of("cat"))]);
  CHECK(truth == std::set<TokenId>{vocab.id_of("cat")});

  CHECK_THROWS_AS(build_toy_backend([] {
                    ToyConfig bad;
                    bad.collapse_decay = 0.0;
                    return bad;
                  }()),
                  std::invalid_argument);
  CHECK_THROWS_AS(build_toy_backend([] {
                    ToyConfig bad;
                    bad.d = 33;
                    return bad;
                  }()),
                  std::invalid_argument);
}

TEST_CASE("encode_scene examples") {
  auto backend = build_toy_backend(default_config());
  const Vocabulary& vocab = backend->vocab();

  Scene scene;
  scene.height = 2;
  scene.width = 2;
  scene.grid = {vocab.id_of("cat"), Scene::kBackground, Scene::kBackground, vocab.id_of("bottle")};
  auto [embeddings, truth] = backend->encode_scene(scene);
  CHECK(embeddings.size() == 4);
  CHECK(truth == std::set<TokenId>{vocab.id_of("cat"), vocab.id_of("bottle")});

  Scene empty;
  empty.height = 1;
  empty.width = 3;
  empty.grid = {Scene::kBackground, Scene::kBackground, Scene::kBackground};
  CHECK(backend->encode_scene(empty).second.empty());
}

TEST_CASE("background patches predict with near-maximal entropy, object patches sharply") {
  const double ln_vocab = std::log(64.0);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    auto backend = build_toy_backend(default_config(seed));
    const Vocabulary& vocab = backend->vocab();
    Scene scene;
    scene.height = 3;
    scene.width = 4;
    scene.grid.assign(12, Scene::kBackground);
    scene.grid[1] = vocab.id_of("cat");
    scene.grid[6] = vocab.id_of("bottle");
    scene.grid[10] = vocab.id_of("horse");

    Prompt prompt = build_caption_prompt(scene, vocab);
    PrefillResult prefill = backend->prefill(prompt.tokens, prompt.roles);

    double min_bg = 1e300, max_obj = -1e300;
    for (size_t i = 0; i < prompt.tokens.size(); ++i) {
      if (prompt.roles[i] != SequenceRole::Visual) continue;
      Vec dist = visual_next_token_dist(*backend, prefill, static_cast<int>(i));
      const double entropy = token_entropy(dist);
      const TokenId cell = prompt.tokens[i];
      if (cell == vocab.id_of("<bg>")) {
        min_bg = std::min(min_bg, entropy);
        // near-uniform prediction
        CHECK(*std::max_element(dist.begin(), dist.end()) < 2.0 / 64.0);
      } else {
        max_obj = std::max(max_obj, entropy);
        CHECK(argmax(dist) == cell);  // shared-table alignment
      }
    }
    CHECK(min_bg >= 0.9 * ln_vocab);
    CHECK(max_obj < min_bg);  // strict separation per seed
    CHECK(max_obj < 0.5 * ln_vocab);
  }
}

TEST_CASE("visual_next_token_dist validates the role") {
  auto backend = build_toy_backend(default_config());
  Scene scene;
  scene.height = 1;
  scene.width = 4;
  scene.grid = {backend->vocab().id_of("cat"), Scene::kBackground, Scene::kBackground,
                Scene::kBackground};
  Prompt prompt = build_caption_prompt(scene, backend->vocab());
  PrefillResult prefill = backend->prefill(prompt.tokens, prompt.roles);
  CHECK_THROWS_AS(visual_next_token_dist(*backend, prefill, 0), std::invalid_argument);
  Vec p = visual_next_token_dist(*backend, prefill, 1);
  double sum = 0.0;
  for (double x : p) sum += x;
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("final_logits injector arithmetic") {
  ToyConfig cfg = default_config(9);
  cfg.prior_bias_strength = 0.0;
  cfg.visual_gain = 0.0;
  auto off = build_toy_backend(cfg);
  const Vocabulary& vocab = off->vocab();

  Scene scene;
  scene.height = 1;
  scene.width = 4;
  scene.grid = {vocab.id_of("cat"), vocab.id_of("cat"), Scene::kBackground, vocab.id_of("dog")};
  Prompt prompt = build_caption_prompt(scene, vocab);
  PrefillResult prefill = off->prefill(prompt.tokens, prompt.roles);
  std::vector<int> all;
  for (int i = 0; i < static_cast<int>(prompt.tokens.size()); ++i) all.push_back(i);

  SUBCASE("knobs off: injector is the identity") {
    auto cache = off->open_branch(prefill, all);
    Vec base(64, 0.5);
    CHECK(off->final_logits(base, *cache, 3) == base);
  }

  SUBCASE("grounding scales with collapse decay and retained patch counts") {
    ToyConfig on = cfg;
    on.visual_gain = 12.0;
    on.collapse_decay = 0.5;
    auto backend = build_toy_backend(on);
    PrefillResult pf = backend->prefill(prompt.tokens, prompt.roles);
    auto cache = backend->open_branch(pf, all);
    Vec base(64, 0.0);
    Vec out = backend->final_logits(base, *cache, 3);
    // gamma^3 = 0.125 exactly; grid has 4 visual cells, cat on 2, dog on 1.
    const double unit = 12.0 * 0.125 / 4.0;
    CHECK(out[static_cast<size_t>(vocab.id_of("cat"))] == doctest::Approx(2 * unit).epsilon(1e-12));
    CHECK(out[static_cast<size_t>(vocab.id_of("dog"))] == doctest::Approx(unit).epsilon(1e-12));
    CHECK(out[static_cast<size_t>(vocab.id_of("bottle"))] == 0.0);

    // A branch retaining only the background cell receives no grounding.
    std::vector<int> prior_positions;
    for (int i = 0; i < static_cast<int>(prompt.tokens.size()); ++i) {
      const bool is_visual = prompt.roles[static_cast<size_t>(i)] == SequenceRole::Visual;
      const bool is_bg = prompt.tokens[static_cast<size_t>(i)] == vocab.id_of("<bg>");
      if (!is_visual || is_bg) prior_positions.push_back(i);
    }
    auto prior = backend->open_branch(pf, prior_positions);
    Vec prior_out = backend->final_logits(base, *prior, 0);
    for (double x : prior_out) CHECK(x == 0.0);
  }

  SUBCASE("prior bias is a fixed skew over object words") {
    ToyConfig on = cfg;
    on.prior_bias_strength = 2.0;
    auto backend = build_toy_backend(on);
    PrefillResult pf = backend->prefill(prompt.tokens, prompt.roles);
    auto cache = backend->open_branch(pf, all);
    Vec out = backend->final_logits(Vec(64, 0.0), *cache, 0);
    const auto& favored = backend->pathology().favored;
    REQUIRE(!favored.empty());
    CHECK(out[static_cast<size_t>(favored[0])] == doctest::Approx(2.0));
    for (TokenId t = 0; t < 64; ++t) {
      if (out[static_cast<size_t>(t)] != 0.0) CHECK(vocab.is_object_word(t));
    }
  }
}

TEST_CASE("scene suite generation: determinism, balance, background statistics") {
  const Vocabulary vocab = default_vocabulary();

  SceneSuite a = generate_scene_suite(0, 2, 3, 4, 0.4, vocab);
  SceneSuite b = generate_scene_suite(0, 2, 3, 4, 0.4, vocab);
  REQUIRE(a.samples.size() == 2);
  for (size_t i = 0; i < a.samples.size(); ++i) {
    CHECK(a.samples[i].scene.grid == b.samples[i].scene.grid);  // bitwise replay
  }

  // Probes are balanced: one present and one absent probe per scene.
  for (const auto& s : a.samples) {
    REQUIRE(s.probes.size() == 2);
    CHECK(s.probes[0].expected_present);
    CHECK(s.ground_truth.count(s.probes[0].object) == 1);
    CHECK(!s.probes[1].expected_present);
    CHECK(s.ground_truth.count(s.probes[1].object) == 0);
  }

  // Ground truth matches an independent replay of the generator.
  SceneSuite c = generate_scene_suite(7, 5, 3, 4, 0.4, vocab);
  for (const auto& s : c.samples) {
    std::set<TokenId> replay;
    for (TokenId cell : s.scene.grid) {
      if (cell != Scene::kBackground) replay.insert(cell);
    }
    CHECK(replay == s.ground_truth);
  }

  // Mean background fraction approaches rho.
  SceneSuite big = generate_scene_suite(13, 100, 3, 4, 0.5, vocab);
  double bg_fraction = 0.0;
  for (const auto& s : big.samples) {
    int bg = 0;
    for (TokenId cell : s.scene.grid) {
      if (cell == Scene::kBackground) bg++;
    }
    bg_fraction += static_cast<double>(bg) / 12.0;
  }
  bg_fraction /= 100.0;
  CHECK(std::abs(bg_fraction - 0.5) < 0.05);
}

TEST_CASE("suite JSON round trip") {
  const Vocabulary vocab = default_vocabulary();
  SceneSuite suite = generate_scene_suite(3, 4, 3, 4, 0.4, vocab);
  const std::string path = "suite_roundtrip_test.json";
  write_suite_json(suite, vocab, path);
  SceneSuite loaded = read_suite_json(path, vocab);
  REQUIRE(loaded.samples.size() == suite.samples.size());
  for (size_t i = 0; i < suite.samples.size(); ++i) {
    CHECK(loaded.samples[i].scene.grid == suite.samples[i].scene.grid);
    CHECK(loaded.samples[i].ground_truth == suite.samples[i].ground_truth);
    REQUIRE(loaded.samples[i].probes.size() == suite.samples[i].probes.size());
    for (size_t j = 0; j < suite.samples[i].probes.size(); ++j) {
      CHECK(loaded.samples[i].probes[j].object == suite.samples[i].probes[j].object);
      CHECK(loaded.samples[i].probes[j].expected_present ==
            suite.samples[i].probes[j].expected_present);
    }
  }
  std::remove(path.c_str());
}

TEST_CASE("value-value attention of a generated object word lands on its patch") {
  auto backend = build_toy_backend(default_config(0));
  const Vocabulary& vocab = backend->vocab();
  SceneSuite suite = generate_scene_suite(21, 50, 3, 4, 0.4, vocab);

  int pairs = 0, aligned = 0;
  for (const auto& sample : suite.samples) {
    Prompt prompt = build_caption_prompt(sample.scene, vocab);
    Engine engine(*backend, EngineConfig{});
    auto pre = engine.run_prefill(prompt);
    if (pre.audit.clear_positions.empty()) continue;
    for (TokenId obj : sample.ground_truth) {
      auto cache = pre.posterior->clone();
      backend->decode_step(*cache, obj);
      const int new_pos = cache->next_position() - 1;
      auto text_vals = backend->value_vectors(*cache, {new_pos});
      auto vis_vals = backend->value_vectors(*cache, pre.audit.clear_positions);
      auto profile = vv_attention(text_vals[0], vis_vals);
      REQUIRE(profile.has_value());
      const int best = argmax(profile->weights);
      const int best_pos = pre.audit.clear_positions[static_cast<size_t>(best)];
      pairs++;
      if (prompt.tokens[static_cast<size_t>(best_pos)] == obj) aligned++;
    }
  }
  REQUIRE(pairs > 50);
  CHECK(static_cast<double>(aligned) / pairs >= 0.9);
}
