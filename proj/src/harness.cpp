#include "evrb/harness.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace evrb {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

TokenId popular_distractor(const ToyBackend& backend, const SceneSample& sample) {
  for (TokenId obj : backend.pathology().favored) {
    if (!sample.ground_truth.count(obj)) return obj;
  }
  return -1;
}

nlohmann::json probe_metrics_json(const ProbeMetrics& m) {
  return {{"accuracy", m.accuracy}, {"precision", m.precision}, {"recall", m.recall},
          {"f1", m.f1},             {"tp", m.tp},               {"fp", m.fp},
          {"tn", m.tn},             {"fn", m.fn},               {"flagged", m.flagged},
          {"total", m.total}};
}

nlohmann::json caption_metrics_json(const CaptionMetrics& m) {
  return {{"chair_s", m.chair_s},
          {"chair_i", m.chair_i},
          {"recall", m.recall},
          {"mean_length", m.mean_length}};
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  return out;
}

std::string join_dir(const std::string& dir, const std::string& file) {
  return (std::filesystem::path(dir) / file).string();
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create report directory " + dir + ": " + ec.message());
}

}  // namespace

ModeProbeReport run_probe_suite(const ToyBackend& backend, const SceneSuite& suite,
                                EngineConfig config, const std::string& label,
                                ProbeSampling sampling) {
  if (suite.samples.empty()) throw std::invalid_argument("run_probe_suite: empty suite");
  ModeProbeReport report;
  report.label = label;
  Engine engine(backend, config);
  const auto t0 = Clock::now();
  for (const auto& sample : suite.samples) {
    for (const auto& probe : sample.probes) {
      TokenId target = probe.object;
      if (sampling == ProbeSampling::Popular && !probe.expected_present) {
        const TokenId favored = popular_distractor(backend, sample);
        if (favored >= 0) target = favored;
      }
      const Prompt prompt = build_probe_prompt(sample.scene, target, backend.vocab());
      GenerationResult gen = engine.generate(prompt);
      report.records.push_back(score_probe(sample.id, target, probe.expected_present, gen.tokens,
                                           backend.vocab()));
    }
  }
  report.wall_seconds = seconds_since(t0);
  report.metrics = probe_metrics(report.records);
  return report;
}

ModeCaptionReport run_caption_suite(const ToyBackend& backend, const SceneSuite& suite,
                                    EngineConfig config, const std::string& label) {
  if (suite.samples.empty()) throw std::invalid_argument("run_caption_suite: empty suite");
  ModeCaptionReport report;
  report.label = label;
  Engine engine(backend, config);
  const auto t0 = Clock::now();
  for (const auto& sample : suite.samples) {
    const Prompt prompt = build_caption_prompt(sample.scene, backend.vocab());
    GenerationResult gen = engine.generate(prompt);
    report.records.push_back(
        score_caption(sample.id, gen.tokens, sample.ground_truth, backend.vocab()));
  }
  report.wall_seconds = seconds_since(t0);
  report.metrics = caption_metrics(report.records);
  return report;
}

std::vector<AblationRow> run_ablation_matrix(const ToyBackend& backend, const SceneSuite& suite,
                                             EngineConfig base) {
  const std::vector<std::pair<std::string, AblationMask>> masks = {
      {"none", {false, false, false}},  {"P", {true, false, false}},
      {"R", {false, true, false}},      {"S", {false, false, true}},
      {"P+R", {true, true, false}},     {"P+R+S", {true, true, true}},
  };
  std::vector<AblationRow> rows;
  for (const auto& [label, mask] : masks) {
    AblationRow row;
    row.label = label;
    row.mask = mask;
    const auto t0 = Clock::now();
    EngineConfig probe_cfg = ablate(mask, base);
    probe_cfg.mu = kMuProbe;
    row.probe = run_probe_suite(backend, suite, probe_cfg, label).metrics;
    EngineConfig caption_cfg = ablate(mask, base);
    caption_cfg.mu = kMuCaption;
    row.caption = run_caption_suite(backend, suite, caption_cfg, label).metrics;
    row.wall_seconds = seconds_since(t0);
    rows.push_back(std::move(row));
  }
  return rows;
}

ReportFiles emit_probe_report(const std::vector<ModeProbeReport>& reports,
                              const std::string& dir, const std::string& stem) {
  ensure_dir(dir);
  ReportFiles files{join_dir(dir, stem + ".json"), join_dir(dir, stem + ".csv")};
  nlohmann::json j;
  j["schema_version"] = 1;
  j["task"] = "pope";
  auto& modes = j["modes"] = nlohmann::json::array();
  for (const auto& r : reports) {
    nlohmann::json jm;
    jm["mode"] = r.label;
    jm["metrics"] = probe_metrics_json(r.metrics);
    jm["wall_seconds"] = r.wall_seconds;
    auto& records = jm["records"] = nlohmann::json::array();
    for (const auto& rec : r.records) {
      records.push_back({{"scene", rec.scene_id},
                         {"question", rec.question},
                         {"truth_present", rec.truth_present},
                         {"answer", rec.answer},
                         {"parsed", rec.parsed},
                         {"correct", rec.correct}});
    }
    modes.push_back(std::move(jm));
  }
  open_out(files.json_path) << j.dump(2) << '\n';

  auto csv = open_out(files.csv_path);
  csv << "mode,accuracy,precision,recall,f1,tp,fp,tn,fn,flagged,total,wall_seconds\n";
  for (const auto& r : reports) {
    const auto& m = r.metrics;
    csv << r.label << ',' << m.accuracy << ',' << m.precision << ',' << m.recall << ',' << m.f1
        << ',' << m.tp << ',' << m.fp << ',' << m.tn << ',' << m.fn << ',' << m.flagged << ','
        << m.total << ',' << r.wall_seconds << '\n';
  }
  return files;
}

ReportFiles emit_caption_report(const std::vector<ModeCaptionReport>& reports,
                                const std::string& dir, const std::string& stem) {
  ensure_dir(dir);
  ReportFiles files{join_dir(dir, stem + ".json"), join_dir(dir, stem + ".csv")};
  nlohmann::json j;
  j["schema_version"] = 1;
  j["task"] = "chair";
  auto& modes = j["modes"] = nlohmann::json::array();
  for (const auto& r : reports) {
    nlohmann::json jm;
    jm["mode"] = r.label;
    jm["metrics"] = caption_metrics_json(r.metrics);
    jm["wall_seconds"] = r.wall_seconds;
    auto& records = jm["records"] = nlohmann::json::array();
    for (const auto& rec : r.records) {
      records.push_back({{"scene", rec.scene_id},
                         {"caption", rec.caption},
                         {"mentioned", rec.mentioned},
                         {"hallucinated", rec.hallucinated},
                         {"length", rec.length}});
    }
    modes.push_back(std::move(jm));
  }
  open_out(files.json_path) << j.dump(2) << '\n';

  auto csv = open_out(files.csv_path);
  csv << "mode,chair_s,chair_i,recall,mean_length,wall_seconds\n";
  for (const auto& r : reports) {
    const auto& m = r.metrics;
    csv << r.label << ',' << m.chair_s << ',' << m.chair_i << ',' << m.recall << ','
        << m.mean_length << ',' << r.wall_seconds << '\n';
  }
  return files;
}

ReportFiles emit_ablation_report(const std::vector<AblationRow>& rows, const std::string& dir,
                                 const std::string& stem) {
  ensure_dir(dir);
  ReportFiles files{join_dir(dir, stem + ".json"), join_dir(dir, stem + ".csv")};
  nlohmann::json j;
  j["schema_version"] = 1;
  j["task"] = "ablation";
  auto& jrows = j["rows"] = nlohmann::json::array();
  for (const auto& row : rows) {
    jrows.push_back({{"mask", row.label},
                     {"pruning", row.mask.pruning},
                     {"rectification", row.mask.rectification},
                     {"early_stop", row.mask.early_stop},
                     {"probe", probe_metrics_json(row.probe)},
                     {"caption", caption_metrics_json(row.caption)},
                     {"wall_seconds", row.wall_seconds}});
  }
  open_out(files.json_path) << j.dump(2) << '\n';

  auto csv = open_out(files.csv_path);
  csv << "mask,probe_accuracy,probe_f1,chair_s,chair_i,caption_recall,mean_length,wall_seconds\n";
  for (const auto& row : rows) {
    csv << row.label << ',' << row.probe.accuracy << ',' << row.probe.f1 << ','
        << row.caption.chair_s << ',' << row.caption.chair_i << ',' << row.caption.recall << ','
        << row.caption.mean_length << ',' << row.wall_seconds << '\n';
  }
  return files;
}

void write_trace_jsonl(const GenerationResult& result, const Vocabulary& vocab,
                       const std::string& path, bool append) {
  std::ofstream out(path, append ? std::ios::app : std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open trace file: " + path);
  for (const auto& tr : result.trace) {
    nlohmann::json j;
    j["step"] = tr.step;
    j["word"] = tr.input_word;
    if (std::isfinite(tr.attn_entropy)) j["attn_entropy"] = tr.attn_entropy;
    if (std::isfinite(tr.delta_entropy)) j["delta_entropy"] = tr.delta_entropy;
    j["relevant"] = tr.relevant;
    if (std::isfinite(tr.js)) j["js"] = tr.js;
    j["mean_delta_js"] = tr.mean_delta_js;
    j["gated"] = tr.gated;
    j["eos_logit_before"] = tr.eos_before;
    j["eos_logit_after"] = tr.eos_after;
    j["plausible_set"] = tr.plausible_set;
    j["selected"] = vocab.word(tr.selected);
    j["selected_prob"] = tr.selected_prob;
    out << j.dump() << '\n';
  }
}

}  // namespace evrb
