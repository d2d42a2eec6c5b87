#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "evrb/model.hpp"
#include "evrb/vocab.hpp"

namespace evrb {

// H×W grid of cell contents; kBackground marks an empty cell, every other
// entry is an object-word token id.
struct Scene {
  static constexpr TokenId kBackground = -1;
  int height = 0;
  int width = 0;
  std::vector<TokenId> grid;  // row-major, height*width entries

  int cells() const { return height * width; }
  std::set<TokenId> object_set() const;
};

struct ProbeSpec {
  TokenId object = -1;
  bool expected_present = false;
};

struct SceneSample {
  int id = 0;
  Scene scene;
  std::set<TokenId> ground_truth;
  std::vector<ProbeSpec> probes;  // balanced: one present, one absent probe
};

struct SceneSuite {
  std::uint64_t seed = 0;
  double rho = 0.0;
  int grid_h = 0, grid_w = 0;
  std::vector<SceneSample> samples;
};

// Deterministic suite generation. Each cell is Background with probability
// rho, otherwise a uniformly drawn object word. Probes are balanced per
// scene: one uniformly chosen present object and one uniformly chosen
// absent object (scenes with no objects or no absent objects contribute
// fewer probes).
SceneSuite generate_scene_suite(std::uint64_t seed, int n, int grid_h, int grid_w, double rho,
                                const Vocabulary& vocab);

// Prompt assembly: [<sys>] + visual cells (row-major) + instruction words.
// The captioning instruction is "please help me describe the image in
// detail ."; probes use "is there a <object> in the image ?".
struct Prompt {
  std::vector<TokenId> tokens;
  std::vector<SequenceRole> roles;
};
Prompt build_caption_prompt(const Scene& scene, const Vocabulary& vocab);
Prompt build_probe_prompt(const Scene& scene, TokenId object, const Vocabulary& vocab);

// Suite (de)serialization for cross-implementation replay. Words are stored
// as strings; Background cells are null.
void write_suite_json(const SceneSuite& suite, const Vocabulary& vocab, const std::string& path);
SceneSuite read_suite_json(const std::string& path, const Vocabulary& vocab);

}  // namespace evrb
