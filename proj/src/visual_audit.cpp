#include "evrb/visual_audit.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace evrb {

Vec visual_next_token_dist(const LanguageBackend& backend, const PrefillResult& prefill,
                           int position) {
  if (position < 0 || position >= static_cast<int>(prefill.roles.size())) {
    throw std::invalid_argument("visual_next_token_dist: position out of range");
  }
  if (prefill.roles[static_cast<size_t>(position)] != SequenceRole::Visual) {
    throw std::invalid_argument("visual_next_token_dist: position does not carry role Visual");
  }
  return softmax(backend.lm_head(prefill.last_hidden[static_cast<size_t>(position)]));
}

double token_entropy(std::span<const double> p) {
  double h = 0.0;
  for (double pi : p) {
    if (pi > 0.0) h -= pi * std::log(pi);
  }
  return h < 0.0 ? 0.0 : h;
}

void partition_visual(const std::vector<std::pair<int, double>>& entropies, double tau,
                      std::vector<int>& clear_out, std::vector<int>& redundant_out) {
  clear_out.clear();
  redundant_out.clear();
  for (const auto& [pos, e] : entropies) {
    if (e < tau) {
      clear_out.push_back(pos);
    } else {
      redundant_out.push_back(pos);
    }
  }
}

VisualAuditReport audit_visual_tokens(const LanguageBackend& backend,
                                      const PrefillResult& prefill, double tau) {
  VisualAuditReport report;
  report.threshold = tau;
  for (size_t i = 0; i < prefill.roles.size(); ++i) {
    if (prefill.roles[i] != SequenceRole::Visual) continue;
    Vec p = visual_next_token_dist(backend, prefill, static_cast<int>(i));
    report.entropies.emplace_back(static_cast<int>(i), token_entropy(p));
  }
  partition_visual(report.entropies, tau, report.clear_positions, report.redundant_positions);
  return report;
}

namespace {
EntropyHistogram::BinStats bin_stats(std::vector<double> v) {
  EntropyHistogram::BinStats s;
  if (v.empty()) return s;
  double sum = 0.0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  std::sort(v.begin(), v.end());
  auto quantile = [&](double q) {
    const double idx = q * static_cast<double>(v.size() - 1);
    const size_t lo = static_cast<size_t>(idx);
    const size_t hi = std::min(lo + 1, v.size() - 1);
    const double frac = idx - static_cast<double>(lo);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
  };
  s.p25 = quantile(0.25);
  s.median = quantile(0.5);
  s.p75 = quantile(0.75);
  return s;
}
}  // namespace

EntropyHistogram build_histogram(const std::vector<VisualAuditReport>& reports,
                                 double bin_width, double entropy_max) {
  if (bin_width <= 0.0) throw std::invalid_argument("build_histogram: bin_width must be > 0");
  EntropyHistogram hist;
  const int bins = std::max(1, static_cast<int>(std::ceil(entropy_max / bin_width)));
  for (int b = 0; b <= bins; ++b) hist.bin_edges.push_back(bin_width * b);
  hist.per_image_counts.assign(reports.size(), std::vector<int>(bins, 0));
  for (size_t img = 0; img < reports.size(); ++img) {
    for (const auto& [pos, e] : reports[img].entropies) {
      int b = static_cast<int>(e / bin_width);
      b = std::clamp(b, 0, bins - 1);
      hist.per_image_counts[img][static_cast<size_t>(b)]++;
    }
  }
  hist.stats.resize(bins);
  for (int b = 0; b < bins; ++b) {
    std::vector<double> column;
    column.reserve(reports.size());
    for (const auto& row : hist.per_image_counts) {
      column.push_back(static_cast<double>(row[static_cast<size_t>(b)]));
    }
    hist.stats[static_cast<size_t>(b)] = bin_stats(std::move(column));
  }
  return hist;
}

void write_histogram_csv(const EntropyHistogram& hist, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_histogram_csv: cannot open " + path);
  out << "bin_lo,bin_hi,image_id,count\n";
  const size_t bins = hist.stats.size();
  for (size_t b = 0; b < bins; ++b) {
    for (size_t img = 0; img < hist.per_image_counts.size(); ++img) {
      out << hist.bin_edges[b] << ',' << hist.bin_edges[b + 1] << ',' << img << ','
          << hist.per_image_counts[img][b] << '\n';
    }
  }
}

void write_histogram_json(const EntropyHistogram& hist, const std::string& path) {
  nlohmann::json j;
  j["schema_version"] = 1;
  j["bin_edges"] = hist.bin_edges;
  auto& bins = j["bins"] = nlohmann::json::array();
  for (size_t b = 0; b < hist.stats.size(); ++b) {
    const auto& s = hist.stats[b];
    bins.push_back({{"bin_lo", hist.bin_edges[b]},
                    {"bin_hi", hist.bin_edges[b + 1]},
                    {"mean", s.mean},
                    {"median", s.median},
                    {"p25", s.p25},
                    {"p75", s.p75}});
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_histogram_json: cannot open " + path);
  out << j.dump(2) << '\n';
}

}  // namespace evrb
