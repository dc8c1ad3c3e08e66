#include "infer.hpp"

#include <algorithm>
#include <map>

#include "error.hpp"

namespace eager::infer {
namespace {

bool lex_less(const std::vector<int32_t>& a, const std::vector<int32_t>& b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

// Higher logprob first; lexicographically smaller digits on ties.
bool hypothesis_before(const BeamHypothesis& a, const BeamHypothesis& b) {
  if (a.logprob != b.logprob) return a.logprob > b.logprob;
  return lex_less(a.digits, b.digits);
}

}  // namespace

std::vector<ScoredCode> beam_search(model::EagerModel& model, int64_t stream,
                                    nn::Tape& tape, nn::Value enc_h, int64_t enc_len,
                                    int64_t beam_size, int64_t topk) {
  require(topk >= 1, EAGER_ERR_INVALID_ARG, "topk must be >= 1");
  require(beam_size >= topk, EAGER_ERR_INVALID_ARG,
          "beam size must be at least topk");
  const codes::CodeTree& tree = *model.stream(stream).tree;
  const int32_t depth = tree.depth;

  std::vector<BeamHypothesis> beam = {BeamHypothesis{}};
  for (int32_t level = 0; level < depth; ++level) {
    const int64_t batch = static_cast<int64_t>(beam.size());
    std::vector<int32_t> flat;
    const int64_t t_len =
        static_cast<int64_t>(model.prefix_tokens(stream, beam[0].digits).size());
    flat.reserve(static_cast<size_t>(batch * t_len));
    for (const auto& hyp : beam) {
      auto tokens = model.prefix_tokens(stream, hyp.digits);
      flat.insert(flat.end(), tokens.begin(), tokens.end());
    }
    nn::Value states = model.decoder_states(tape, stream, flat, batch, t_len, enc_h,
                                            enc_len);
    std::vector<int32_t> last_rows(static_cast<size_t>(batch));
    for (int64_t b = 0; b < batch; ++b) {
      last_rows[static_cast<size_t>(b)] = static_cast<int32_t>(b * t_len + t_len - 1);
    }
    nn::Value logits = model.level_logits(tape, stream, level,
                                          tape.gather_rows(states, last_rows));
    const nn::Tensor& logit_values = tape.value(logits);

    std::vector<BeamHypothesis> candidates;
    for (int64_t b = 0; b < batch; ++b) {
      std::vector<double> row(logit_values.v.begin() + b * logit_values.cols,
                              logit_values.v.begin() + (b + 1) * logit_values.cols);
      std::vector<double> logp = nn::log_softmax(row);
      for (int32_t digit : codes::valid_next_digits(tree, beam[static_cast<size_t>(b)].digits)) {
        BeamHypothesis next;
        next.digits = beam[static_cast<size_t>(b)].digits;
        next.digits.push_back(digit);
        next.logprob = beam[static_cast<size_t>(b)].logprob +
                       logp[static_cast<size_t>(digit)];
        candidates.push_back(std::move(next));
      }
    }
    std::sort(candidates.begin(), candidates.end(), hypothesis_before);
    if (static_cast<int64_t>(candidates.size()) > beam_size) {
      candidates.resize(static_cast<size_t>(beam_size));
    }
    beam = std::move(candidates);
  }

  std::vector<ScoredCode> out;
  int64_t keep = std::min<int64_t>(topk, static_cast<int64_t>(beam.size()));
  out.reserve(static_cast<size_t>(keep));
  for (int64_t i = 0; i < keep; ++i) {
    out.push_back({codes::ItemCode{beam[static_cast<size_t>(i)].digits},
                   beam[static_cast<size_t>(i)].logprob});
  }
  return out;
}

double code_logprob(model::EagerModel& model, int64_t stream, nn::Tape& tape,
                    nn::Value enc_h, int64_t enc_len, const codes::ItemCode& code) {
  const codes::CodeTree& tree = *model.stream(stream).tree;
  auto tokens = model.prefix_tokens(stream, code.digits);
  const int64_t t_len = static_cast<int64_t>(tokens.size());
  nn::Value states = model.decoder_states(tape, stream, tokens, 1, t_len, enc_h, enc_len);
  // Row predicting level j sits just before the token that carries digit j.
  const int64_t gen_offset = t_len - tree.depth - 1;
  double total = 0.0;
  for (int32_t level = 0; level < tree.depth; ++level) {
    nn::Value logits = model.level_logits(
        tape, stream, level, tape.slice_rows(states, gen_offset + level, 1));
    const nn::Tensor& lv = tape.value(logits);
    std::vector<double> logp = nn::log_softmax(lv.v);
    total += logp[static_cast<size_t>(code.digits[static_cast<size_t>(level)])];
  }
  return total;
}

std::vector<ScoredCode> exhaustive_ranking(model::EagerModel& model, int64_t stream,
                                           nn::Tape& tape, nn::Value enc_h,
                                           int64_t enc_len) {
  const codes::CodeTree& tree = *model.stream(stream).tree;
  std::vector<ScoredCode> out;
  out.reserve(static_cast<size_t>(tree.num_items));
  for (int64_t item = 0; item < tree.num_items; ++item) {
    codes::ItemCode code = codes::item_to_code(tree, item);
    double lp = code_logprob(model, stream, tape, enc_h, enc_len, code);
    out.push_back({std::move(code), lp});
  }
  std::sort(out.begin(), out.end(), [](const ScoredCode& a, const ScoredCode& b) {
    if (a.logprob != b.logprob) return a.logprob > b.logprob;
    return lex_less(a.code.digits, b.code.digits);
  });
  return out;
}

double confidence_score(double logprob, int64_t code_len) {
  require(code_len >= 1, EAGER_ERR_INVALID_ARG, "code length must be >= 1");
  return -logprob / static_cast<double>(code_len);
}

RankedList fuse_rankings(
    const std::vector<std::vector<std::pair<int64_t, double>>>& per_stream, int64_t k) {
  struct Best {
    double score;
    int64_t stream;
  };
  std::map<int64_t, Best> best;
  for (size_t s = 0; s < per_stream.size(); ++s) {
    for (const auto& [item, score] : per_stream[s]) {
      auto it = best.find(item);
      if (it == best.end() || score < it->second.score) {
        best[item] = {score, static_cast<int64_t>(s)};
      }
    }
  }
  struct Row {
    int64_t item;
    double score;
    int64_t stream;
  };
  std::vector<Row> rows;
  rows.reserve(best.size());
  for (const auto& [item, b] : best) rows.push_back({item, b.score, b.stream});
  std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    if (a.score != b.score) return a.score < b.score;
    if (a.stream != b.stream) return a.stream < b.stream;
    return a.item < b.item;
  });

  RankedList out;
  out.k = k;
  int64_t keep = std::min<int64_t>(k, static_cast<int64_t>(rows.size()));
  out.entries.reserve(static_cast<size_t>(keep));
  for (int64_t i = 0; i < keep; ++i) {
    out.entries.push_back({rows[static_cast<size_t>(i)].item,
                           rows[static_cast<size_t>(i)].score});
  }
  return out;
}

RankedList recommend_topk(model::EagerModel& model, const std::vector<int32_t>& history,
                          int64_t k, int64_t beam_size) {
  require(!history.empty(), EAGER_ERR_INVALID_ARG, "history must be non-empty");
  require(k >= 1, EAGER_ERR_INVALID_ARG, "k must be >= 1");
  require(beam_size >= k, EAGER_ERR_INVALID_ARG, "beam size must be at least k");

  std::vector<int32_t> capped = history;
  const int64_t max_hist = model.config().max_history;
  if (static_cast<int64_t>(capped.size()) > max_hist) {
    capped.assign(history.end() - max_hist, history.end());
  }

  nn::Tape tape(false);
  nn::Value enc_h = model.encode_history(tape, capped);
  const int64_t enc_len = static_cast<int64_t>(capped.size());

  std::vector<std::vector<std::pair<int64_t, double>>> per_stream;
  per_stream.reserve(static_cast<size_t>(model.num_streams()));
  for (int64_t s = 0; s < model.num_streams(); ++s) {
    const codes::CodeTree& tree = *model.stream(s).tree;
    auto scored = beam_search(model, s, tape, enc_h, enc_len, beam_size, k);
    std::vector<std::pair<int64_t, double>> list;
    list.reserve(scored.size());
    for (const auto& sc : scored) {
      auto item = codes::code_to_item(tree, sc.code);
      require(item.has_value(), EAGER_ERR_INTERNAL,
              "beam produced a code that resolves to no item");
      list.emplace_back(*item, confidence_score(sc.logprob, tree.depth));
    }
    std::sort(list.begin(), list.end(), [](const auto& a, const auto& b) {
      if (a.second != b.second) return a.second < b.second;
      return a.first < b.first;
    });
    per_stream.push_back(std::move(list));
  }
  return fuse_rankings(per_stream, k);
}

}  // namespace eager::infer
