#pragma once

#include <optional>
#include <string>
#include <vector>

#include "evrb/engine.hpp"
#include "evrb/metrics.hpp"
#include "evrb/scene.hpp"
#include "evrb/toy_model.hpp"

namespace evrb {

// Documented suite defaults: task-dependent truncation strength and the
// pathology knob settings that instantiate the bias and collapse failure
// modes on the toy model.
inline constexpr double kMuProbe = 0.1;
inline constexpr double kMuCaption = 0.9;
inline constexpr double kBiasSuiteBetaP = 2.6;
inline constexpr double kCollapseSuiteGamma = 0.93;
inline constexpr int kDefaultProbeScenes = 50;   // 2 balanced probes each
inline constexpr int kDefaultCaptionScenes = 50;
inline constexpr int kDefaultGridH = 3;
inline constexpr int kDefaultGridW = 4;

enum class ProbeSampling { Random, Popular };

struct ModeProbeReport {
  std::string label;
  ProbeMetrics metrics;
  std::vector<ProbeRecord> records;
  double wall_seconds = 0.0;
};

struct ModeCaptionReport {
  std::string label;
  CaptionMetrics metrics;
  std::vector<CaptionRecord> records;
  double wall_seconds = 0.0;
};

// Balanced yes/no probes over the suite. Popular sampling replaces each
// absent-object probe's target with a bias-favored absent object when one
// exists (the toy analog of POPE's popular split).
ModeProbeReport run_probe_suite(const ToyBackend& backend, const SceneSuite& suite,
                                EngineConfig config, const std::string& label,
                                ProbeSampling sampling = ProbeSampling::Random);

ModeCaptionReport run_caption_suite(const ToyBackend& backend, const SceneSuite& suite,
                                    EngineConfig config, const std::string& label);

struct AblationRow {
  std::string label;
  AblationMask mask;
  ProbeMetrics probe;
  CaptionMetrics caption;
  double wall_seconds = 0.0;
};

// One row per component mask in {∅, {P}, {R}, {S}, {P,R}, {P,R,S}}.
std::vector<AblationRow> run_ablation_matrix(const ToyBackend& backend, const SceneSuite& suite,
                                             EngineConfig base);

// Machine-readable JSON plus a tabular CSV, schema versioned. Returns the
// paths written.
struct ReportFiles {
  std::string json_path;
  std::string csv_path;
};
ReportFiles emit_probe_report(const std::vector<ModeProbeReport>& reports,
                              const std::string& dir, const std::string& stem);
ReportFiles emit_caption_report(const std::vector<ModeCaptionReport>& reports,
                                const std::string& dir, const std::string& stem);
ReportFiles emit_ablation_report(const std::vector<AblationRow>& rows, const std::string& dir,
                                 const std::string& stem);

// Step traces as JSON lines (one object per generated token).
void write_trace_jsonl(const GenerationResult& result, const Vocabulary& vocab,
                       const std::string& path, bool append);

}  // namespace evrb
