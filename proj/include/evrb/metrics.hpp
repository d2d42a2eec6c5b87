#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "evrb/vocab.hpp"

namespace evrb {

struct ProbeRecord {
  int scene_id = 0;
  TokenId question = -1;
  bool truth_present = false;
  std::string answer;   // "yes", "no", or empty when unparseable
  bool parsed = false;  // false -> counted incorrect and flagged
  bool correct = false;
};

struct CaptionRecord {
  int scene_id = 0;
  std::string caption;
  std::set<TokenId> mentioned;     // unique object words in the caption
  std::set<TokenId> hallucinated;  // mentioned \ ground truth
  std::set<TokenId> ground_truth;
  int length = 0;  // generated tokens, EOS excluded
};

struct ProbeMetrics {
  double accuracy = 0.0, precision = 0.0, recall = 0.0, f1 = 0.0;
  int tp = 0, fp = 0, tn = 0, fn = 0;
  int flagged = 0;  // unparseable answers
  int total = 0;
};

struct CaptionMetrics {
  double chair_s = 0.0;     // captions with >= 1 hallucinated object / captions
  double chair_i = 0.0;     // hallucinated object mentions / object mentions
  double recall = 0.0;      // covered ground-truth objects / ground-truth objects
  double mean_length = 0.0;
};

// Extracts the probe answer: the first generated token among {yes, no} wins;
// anything else leaves the record unparsed (incorrect and flagged; an
// unparsed record is scored as the wrong class in the confusion counts so
// accuracy and the counts stay consistent).
ProbeRecord score_probe(int scene_id, TokenId question, bool truth_present,
                        const std::vector<TokenId>& generated, const Vocabulary& vocab);

// Object extraction by exact token match against object_word_ids.
CaptionRecord score_caption(int scene_id, const std::vector<TokenId>& generated,
                            const std::set<TokenId>& ground_truth, const Vocabulary& vocab);

// Yes is the positive class.
ProbeMetrics probe_metrics(const std::vector<ProbeRecord>& records);
CaptionMetrics caption_metrics(const std::vector<CaptionRecord>& records);

}  // namespace evrb
