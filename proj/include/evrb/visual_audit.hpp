#pragma once

#include <string>
#include <vector>

#include "evrb/math.hpp"
#include "evrb/model.hpp"

namespace evrb {

// Scores every visual token by the entropy of its LM-head next-token
// prediction and splits the visual positions into a clear set (entropy
// strictly below the threshold) and a redundant set (at or above it).
struct VisualAuditReport {
  std::vector<std::pair<int, double>> entropies;  // (position, entropy in nats)
  std::vector<int> clear_positions;               // original order
  std::vector<int> redundant_positions;           // original order
  double threshold = 0.0;
};

// Per-bin counts of visual-token entropies across a set of images, with
// per-bin boxplot statistics over images.
struct EntropyHistogram {
  std::vector<double> bin_edges;                    // size bins+1, covers [0, ln|Φ|]
  std::vector<std::vector<int>> per_image_counts;   // [image][bin]
  struct BinStats {
    double mean = 0.0, median = 0.0, p25 = 0.0, p75 = 0.0;
  };
  std::vector<BinStats> stats;  // per bin, over images
};

// softmax(lm_head(last_hidden[position])). Throws std::invalid_argument if
// the position does not carry role Visual.
Vec visual_next_token_dist(const LanguageBackend& backend, const PrefillResult& prefill,
                           int position);

// Shannon entropy in nats, -Σ p log p with 0·log 0 := 0.
double token_entropy(std::span<const double> p);

// Strict split by entropy < tau, preserving position order.
void partition_visual(const std::vector<std::pair<int, double>>& entropies, double tau,
                      std::vector<int>& clear_out, std::vector<int>& redundant_out);

// Full audit of one prefill: entropy per visual position plus the partition.
VisualAuditReport audit_visual_tokens(const LanguageBackend& backend,
                                      const PrefillResult& prefill, double tau);

EntropyHistogram build_histogram(const std::vector<VisualAuditReport>& reports,
                                 double bin_width, double entropy_max);

// One row per (bin, image): bin_lo, bin_hi, image_id, count.
void write_histogram_csv(const EntropyHistogram& hist, const std::string& path);
// Per-bin quartile summary.
void write_histogram_json(const EntropyHistogram& hist, const std::string& path);

}  // namespace evrb
