#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "evrb/rng.hpp"
#include "evrb/visual_audit.hpp"

using namespace evrb;

namespace {
Vec random_prob(SplitMix64& rng, size_t n) {
  Vec p(n);
  double z = 0.0;
  for (double& x : p) {
    x = -std::log(rng.next_uniform() + 1e-300);
    z += x;
  }
  for (double& x : p) x /= z;
  return p;
}
}  // namespace

TEST_CASE("token_entropy unit values") {
  Vec one_hot(64, 0.0);
  one_hot[13] = 1.0;
  CHECK(token_entropy(one_hot) == 0.0);

  Vec uniform(64, 1.0 / 64.0);
  CHECK(token_entropy(uniform) == doctest::Approx(std::log(64.0)).epsilon(1e-12));

  Vec half{0.5, 0.5, 0.0, 0.0};
  CHECK(token_entropy(half) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("token_entropy is permutation invariant and mixing with uniform never decreases it") {
  SplitMix64 rng(41);
  for (int it = 0; it < 200; ++it) {
    Vec p = random_prob(rng, 16);
    Vec q = p;
    // rotate as a cheap permutation
    std::rotate(q.begin(), q.begin() + (it % 16), q.end());
    CHECK(token_entropy(p) == doctest::Approx(token_entropy(q)).epsilon(1e-12));

    const double alpha = rng.next_uniform();
    Vec mixed(p.size());
    for (size_t i = 0; i < p.size(); ++i) {
      mixed[i] = (1.0 - alpha) * p[i] + alpha / static_cast<double>(p.size());
    }
    CHECK(token_entropy(mixed) >= token_entropy(p) - 1e-12);
  }
}

TEST_CASE("partition_visual strict threshold and boundaries") {
  std::vector<std::pair<int, double>> entropies{{0, 1.0}, {1, 8.0}};
  std::vector<int> clear, redundant;

  partition_visual(entropies, 7.48, clear, redundant);
  CHECK(clear == std::vector<int>{0});
  CHECK(redundant == std::vector<int>{1});

  // boundary: E == tau is redundant
  partition_visual({{0, 7.48}}, 7.48, clear, redundant);
  CHECK(clear.empty());
  CHECK(redundant == std::vector<int>{0});

  partition_visual(entropies, std::numeric_limits<double>::infinity(), clear, redundant);
  CHECK(clear.size() == 2);
  CHECK(redundant.empty());

  partition_visual(entropies, 0.0, clear, redundant);
  CHECK(clear.empty());
  CHECK(redundant.size() == 2);
}

TEST_CASE("partition is exhaustive, exclusive, order preserving and monotone in tau") {
  SplitMix64 rng(7);
  std::vector<std::pair<int, double>> entropies;
  for (int i = 0; i < 40; ++i) entropies.emplace_back(i, 4.2 * rng.next_uniform());

  size_t prev_clear = 0;
  for (double tau = 0.0; tau <= 4.4; tau += 0.2) {
    std::vector<int> clear, redundant;
    partition_visual(entropies, tau, clear, redundant);
    CHECK(clear.size() + redundant.size() == entropies.size());
    CHECK(std::is_sorted(clear.begin(), clear.end()));
    CHECK(std::is_sorted(redundant.begin(), redundant.end()));
    CHECK(clear.size() >= prev_clear);  // raising tau never shrinks the clear set
    prev_clear = clear.size();
  }
}

TEST_CASE("build_histogram simple cases") {
  VisualAuditReport a;
  a.entropies = {{0, 0.1}, {1, 0.15}, {2, 0.12}};

  SUBCASE("single image, one populated bin") {
    auto hist = build_histogram({a}, 0.5, 4.0);
    CHECK(hist.per_image_counts.size() == 1);
    CHECK(hist.per_image_counts[0][0] == 3);
    int total = 0;
    for (int c : hist.per_image_counts[0]) total += c;
    CHECK(total == 3);
    for (size_t b = 1; b < hist.per_image_counts[0].size(); ++b) {
      CHECK(hist.per_image_counts[0][b] == 0);
    }
  }

  SUBCASE("two identical images: per-bin mean equals median equals the count") {
    auto hist = build_histogram({a, a}, 0.5, 4.0);
    CHECK(hist.stats[0].mean == doctest::Approx(3.0));
    CHECK(hist.stats[0].median == doctest::Approx(3.0));
    CHECK(hist.stats[0].p25 == doctest::Approx(3.0));
    CHECK(hist.stats[0].p75 == doctest::Approx(3.0));
  }

  SUBCASE("bin_width must be positive") {
    CHECK_THROWS_AS(build_histogram({a}, 0.0, 4.0), std::invalid_argument);
  }
}
