#include "evrb/scene.hpp"

#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "evrb/rng.hpp"

namespace evrb {

std::set<TokenId> Scene::object_set() const {
  std::set<TokenId> s;
  for (TokenId cell : grid) {
    if (cell != kBackground) s.insert(cell);
  }
  return s;
}

SceneSuite generate_scene_suite(std::uint64_t seed, int n, int grid_h, int grid_w, double rho,
                                const Vocabulary& vocab) {
  if (n < 1) throw std::invalid_argument("generate_scene_suite: n must be >= 1");
  if (!(rho >= 0.0 && rho <= 1.0)) {
    throw std::invalid_argument("generate_scene_suite: rho must be in [0, 1]");
  }
  std::vector<TokenId> objects(vocab.object_word_ids.begin(), vocab.object_word_ids.end());
  SceneSuite suite;
  suite.seed = seed;
  suite.rho = rho;
  suite.grid_h = grid_h;
  suite.grid_w = grid_w;

  SplitMix64 base(seed);
  for (int i = 0; i < n; ++i) {
    SplitMix64 rng = base.substream(static_cast<std::uint64_t>(i));
    SceneSample sample;
    sample.id = i;
    sample.scene.height = grid_h;
    sample.scene.width = grid_w;
    sample.scene.grid.resize(static_cast<size_t>(grid_h * grid_w));
    for (auto& cell : sample.scene.grid) {
      if (rng.next_uniform() < rho) {
        cell = Scene::kBackground;
      } else {
        cell = objects[rng.next_u64() % objects.size()];
      }
    }
    sample.ground_truth = sample.scene.object_set();

    std::vector<TokenId> present(sample.ground_truth.begin(), sample.ground_truth.end());
    std::vector<TokenId> absent;
    for (TokenId obj : objects) {
      if (!sample.ground_truth.count(obj)) absent.push_back(obj);
    }
    if (!present.empty()) {
      sample.probes.push_back({present[rng.next_u64() % present.size()], true});
    }
    if (!absent.empty()) {
      sample.probes.push_back({absent[rng.next_u64() % absent.size()], false});
    }
    suite.samples.push_back(std::move(sample));
  }
  return suite;
}

namespace {
Prompt assemble(const Scene& scene, const Vocabulary& vocab,
                const std::vector<std::string>& instruction) {
  Prompt p;
  const TokenId sys = vocab.id_of("<sys>");
  const TokenId bg = vocab.id_of("<bg>");
  p.tokens.push_back(sys);
  p.roles.push_back(SequenceRole::System);
  for (TokenId cell : scene.grid) {
    p.tokens.push_back(cell == Scene::kBackground ? bg : cell);
    p.roles.push_back(SequenceRole::Visual);
  }
  for (const auto& w : instruction) {
    const TokenId id = vocab.id_of(w);
    if (id < 0) throw std::logic_error("prompt word missing from vocabulary: " + w);
    p.tokens.push_back(id);
    p.roles.push_back(SequenceRole::Instruction);
  }
  return p;
}
}  // namespace

Prompt build_caption_prompt(const Scene& scene, const Vocabulary& vocab) {
  return assemble(scene, vocab,
                  {"please", "help", "me", "describe", "the", "image", "in", "detail", "."});
}

Prompt build_probe_prompt(const Scene& scene, TokenId object, const Vocabulary& vocab) {
  if (!vocab.is_object_word(object)) {
    throw std::invalid_argument("build_probe_prompt: probe target must be an object word");
  }
  return assemble(scene, vocab,
                  {"is", "there", "a", vocab.word(object), "in", "the", "image", "?"});
}

void write_suite_json(const SceneSuite& suite, const Vocabulary& vocab, const std::string& path) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["seed"] = suite.seed;
  j["rho"] = suite.rho;
  j["grid"] = {{"h", suite.grid_h}, {"w", suite.grid_w}};
  auto& scenes = j["scenes"] = nlohmann::json::array();
  for (const auto& s : suite.samples) {
    nlohmann::json js;
    js["id"] = s.id;
    auto& grid = js["grid"] = nlohmann::json::array();
    for (int r = 0; r < s.scene.height; ++r) {
      nlohmann::json row = nlohmann::json::array();
      for (int c = 0; c < s.scene.width; ++c) {
        const TokenId cell = s.scene.grid[static_cast<size_t>(r * s.scene.width + c)];
        if (cell == Scene::kBackground) {
          row.push_back(nullptr);
        } else {
          row.push_back(vocab.word(cell));
        }
      }
      grid.push_back(row);
    }
    auto& gt = js["ground_truth"] = nlohmann::json::array();
    for (TokenId obj : s.ground_truth) gt.push_back(vocab.word(obj));
    auto& probes = js["probes"] = nlohmann::json::array();
    for (const auto& probe : s.probes) {
      probes.push_back({{"object", vocab.word(probe.object)}, {"present", probe.expected_present}});
    }
    scenes.push_back(std::move(js));
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_suite_json: cannot open " + path);
  out << j.dump(2) << '\n';
}

SceneSuite read_suite_json(const std::string& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_suite_json: cannot open " + path);
  nlohmann::json j;
  in >> j;
  SceneSuite suite;
  suite.seed = j.value("seed", 0ULL);
  suite.rho = j.value("rho", 0.0);
  suite.grid_h = j["grid"]["h"].get<int>();
  suite.grid_w = j["grid"]["w"].get<int>();
  for (const auto& js : j["scenes"]) {
    SceneSample s;
    s.id = js["id"].get<int>();
    s.scene.height = suite.grid_h;
    s.scene.width = suite.grid_w;
    for (const auto& row : js["grid"]) {
      for (const auto& cell : row) {
        if (cell.is_null()) {
          s.scene.grid.push_back(Scene::kBackground);
        } else {
          const TokenId id = vocab.id_of(cell.get<std::string>());
          if (id < 0) throw std::runtime_error("read_suite_json: unknown word in grid");
          s.scene.grid.push_back(id);
        }
      }
    }
    if (static_cast<int>(s.scene.grid.size()) != suite.grid_h * suite.grid_w) {
      throw std::runtime_error("read_suite_json: grid size mismatch");
    }
    for (const auto& g : js["ground_truth"]) {
      s.ground_truth.insert(vocab.id_of(g.get<std::string>()));
    }
    for (const auto& probe : js["probes"]) {
      s.probes.push_back(
          {vocab.id_of(probe["object"].get<std::string>()), probe["present"].get<bool>()});
    }
    suite.samples.push_back(std::move(s));
  }
  return suite;
}

}  // namespace evrb
