#include "evrb/metrics.hpp"

namespace evrb {

ProbeRecord score_probe(int scene_id, TokenId question, bool truth_present,
                        const std::vector<TokenId>& generated, const Vocabulary& vocab) {
  ProbeRecord rec;
  rec.scene_id = scene_id;
  rec.question = question;
  rec.truth_present = truth_present;
  const TokenId yes = vocab.id_of("yes");
  const TokenId no = vocab.id_of("no");
  for (TokenId t : generated) {
    if (t == yes || t == no) {
      rec.parsed = true;
      rec.answer = vocab.word(t);
      rec.correct = (t == yes) == truth_present;
      break;
    }
  }
  return rec;
}

CaptionRecord score_caption(int scene_id, const std::vector<TokenId>& generated,
                            const std::set<TokenId>& ground_truth, const Vocabulary& vocab) {
  CaptionRecord rec;
  rec.scene_id = scene_id;
  rec.ground_truth = ground_truth;
  for (TokenId t : generated) {
    if (t == vocab.eos_id) continue;
    rec.length++;
    if (!rec.caption.empty()) rec.caption += ' ';
    rec.caption += vocab.word(t);
    if (vocab.is_object_word(t)) rec.mentioned.insert(t);
  }
  for (TokenId t : rec.mentioned) {
    if (!ground_truth.count(t)) rec.hallucinated.insert(t);
  }
  return rec;
}

ProbeMetrics probe_metrics(const std::vector<ProbeRecord>& records) {
  ProbeMetrics m;
  m.total = static_cast<int>(records.size());
  for (const auto& r : records) {
    const bool predicted_yes = r.parsed ? (r.answer == "yes") : !r.truth_present;
    if (!r.parsed) m.flagged++;
    if (predicted_yes && r.truth_present) m.tp++;
    if (predicted_yes && !r.truth_present) m.fp++;
    if (!predicted_yes && !r.truth_present) m.tn++;
    if (!predicted_yes && r.truth_present) m.fn++;
  }
  if (m.total > 0) {
    m.accuracy = static_cast<double>(m.tp + m.tn) / static_cast<double>(m.total);
  }
  if (m.tp + m.fp > 0) m.precision = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fp);
  if (m.tp + m.fn > 0) m.recall = static_cast<double>(m.tp) / static_cast<double>(m.tp + m.fn);
  if (m.precision + m.recall > 0.0) {
    m.f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
  }
  return m;
}

CaptionMetrics caption_metrics(const std::vector<CaptionRecord>& records) {
  CaptionMetrics m;
  if (records.empty()) return m;
  int hallucinated_captions = 0;
  int mention_count = 0, hallucinated_count = 0;
  int gt_count = 0, covered_count = 0;
  double length_sum = 0.0;
  for (const auto& r : records) {
    if (!r.hallucinated.empty()) hallucinated_captions++;
    mention_count += static_cast<int>(r.mentioned.size());
    hallucinated_count += static_cast<int>(r.hallucinated.size());
    gt_count += static_cast<int>(r.ground_truth.size());
    for (TokenId t : r.mentioned) {
      if (r.ground_truth.count(t)) covered_count++;
    }
    length_sum += static_cast<double>(r.length);
  }
  m.chair_s = static_cast<double>(hallucinated_captions) / static_cast<double>(records.size());
  m.chair_i = mention_count > 0
                  ? static_cast<double>(hallucinated_count) / static_cast<double>(mention_count)
                  : 0.0;
  m.recall = gt_count > 0 ? static_cast<double>(covered_count) / static_cast<double>(gt_count)
                          : 1.0;  // nothing to recall
  m.mean_length = length_sum / static_cast<double>(records.size());
  return m;
}

}  // namespace evrb
