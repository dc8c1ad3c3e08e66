#pragma once

#include <cstdint>
#include <vector>

#include "model.hpp"

namespace eager::infer {

struct BeamHypothesis {
  std::vector<int32_t> digits;  // valid trie prefix
  double logprob = 0.0;
};

struct ScoredCode {
  codes::ItemCode code;
  double logprob = 0.0;
};

// Fused, deduplicated top-k item list. Scores ascend; lower scores mean more
// confidence.
struct RankedList {
  struct Entry {
    int64_t item = -1;
    double score = 0.0;
  };
  std::vector<Entry> entries;
  int64_t k = 0;
};

// Level-synchronous trie-constrained beam search. At each level only digits
// in valid_next_digits are expanded; the beam keeps the top beam_size
// hypotheses by cumulative log-probability (ties broken by lexicographic
// digit order). Returns the top min(topk, leaves) completed codes.
std::vector<ScoredCode> beam_search(model::EagerModel& model, int64_t stream,
                                    nn::Tape& tape, nn::Value enc_h, int64_t enc_len,
                                    int64_t beam_size, int64_t topk);

// Teacher-forced full-sequence log-probability of one code.
double code_logprob(model::EagerModel& model, int64_t stream, nn::Tape& tape,
                    nn::Value enc_h, int64_t enc_len, const codes::ItemCode& code);

// Exhaustive ranking of every item by full-sequence log-probability; the
// reference the beam is checked against (selfcheck, tests).
std::vector<ScoredCode> exhaustive_ranking(model::EagerModel& model, int64_t stream,
                                           nn::Tape& tape, nn::Value enc_h,
                                           int64_t enc_len);

// Length-normalized negative log-likelihood; lower = more confident.
double confidence_score(double code_logprob, int64_t code_len);

// Merge per-stream (item, score) lists: deduplicate items keeping the
// minimum score, sort ascending by (score, stream priority, item index),
// truncate to k. Input lists must already be sorted ascending by score.
RankedList fuse_rankings(const std::vector<std::vector<std::pair<int64_t, double>>>& per_stream,
                         int64_t k);

// Encode once, beam-search every stream, convert log-probabilities to
// confidence scores, fuse. History is truncated to the most recent
// max_history items.
RankedList recommend_topk(model::EagerModel& model, const std::vector<int32_t>& history,
                          int64_t k, int64_t beam_size);

}  // namespace eager::infer
