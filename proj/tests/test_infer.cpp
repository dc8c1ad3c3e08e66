#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>

#include "core/error.hpp"
#include "core/infer.hpp"
#include "core/model.hpp"
#include "core/nn.hpp"
#include "core/rng.hpp"

using namespace eager;
using namespace eager::infer;

namespace {

struct SilenceLogs {
  SilenceLogs() { setenv("EAGER_LOG", "0", 0); }
} silence_logs;

struct Fixture {
  std::vector<embed::EmbeddingMatrix> embeds;
  std::vector<codes::CodeTree> trees;
  std::unique_ptr<model::EagerModel> net;

  explicit Fixture(uint64_t seed = 42, int64_t n = 20, int32_t branch_k = 3,
                   model::ModelConfig cfg = {}) {
    for (int s = 0; s < 2; ++s) {
      embed::EmbeddingMatrix m;
      m.source_tag = "file";
      m.matrix = nn::Tensor(n, 4);
      Rng rng(derive_seed(seed, "emb", static_cast<uint64_t>(s)));
      for (auto& x : m.matrix.v) x = rng.normal();
      embeds.push_back(std::move(m));
    }
    trees.push_back(codes::build_code_tree(embeds[0], branch_k, seed, "behavior"));
    trees.push_back(codes::build_code_tree(embeds[1], branch_k, seed + 9, "semantic"));
    cfg.hidden = 16;
    cfg.enc_layers = 1;
    cfg.dec_layers = 2;
    cfg.heads = 2;
    cfg.ffn_mult = 2;
    cfg.dropout = 0.0;
    cfg.max_history = 6;
    cfg.infonce_negatives = 2;
    net = std::make_unique<model::EagerModel>(
        cfg, n,
        std::vector<model::StreamSpec>{{"behavior", &trees[0], &embeds[0]},
                                       {"semantic", &trees[1], &embeds[1]}},
        seed);
  }
};

// Independent oracle: teacher-forced scoring of every item, written directly
// against the decoder primitives rather than any infer:: helper.
std::vector<ScoredCode> oracle_ranking(model::EagerModel& m, int64_t stream,
                                       const std::vector<int32_t>& history) {
  const codes::CodeTree& tree = *m.stream(stream).tree;
  std::vector<ScoredCode> out;
  for (int64_t item = 0; item < tree.num_items; ++item) {
    auto code = codes::item_to_code(tree, item);
    nn::Tape tape;
    nn::Value h = m.encode_history(tape, history);
    auto tokens = m.prefix_tokens(stream, code.digits);
    nn::Value states = m.decoder_states(tape, stream, tokens, 1,
                                        static_cast<int64_t>(tokens.size()), h,
                                        static_cast<int64_t>(history.size()));
    int64_t offset = static_cast<int64_t>(tokens.size()) - tree.depth - 1;
    double lp = 0.0;
    for (int32_t lv = 0; lv < tree.depth; ++lv) {
      nn::Value logits =
          m.level_logits(tape, stream, lv, tape.slice_rows(states, offset + lv, 1));
      auto logp = nn::log_softmax(tape.value(logits).v);
      lp += logp[static_cast<size_t>(code.digits[static_cast<size_t>(lv)])];
    }
    out.push_back({code, lp});
  }
  std::sort(out.begin(), out.end(), [](const ScoredCode& a, const ScoredCode& b) {
    if (a.logprob != b.logprob) return a.logprob > b.logprob;
    return std::lexicographical_compare(a.code.digits.begin(), a.code.digits.end(),
                                        b.code.digits.begin(), b.code.digits.end());
  });
  return out;
}

}  // namespace

TEST_CASE("full-width beam equals exhaustive enumeration") {
  for (uint64_t seed : {1ull, 2ull, 3ull}) {
    Fixture f(seed);
    Rng rng(seed * 31);
    model::randomize_parameters(*f.net, rng, 0.25);
    std::vector<int32_t> history = {static_cast<int32_t>(rng.uniform_int(20)),
                                    static_cast<int32_t>(rng.uniform_int(20))};
    for (int64_t s = 0; s < 2; ++s) {
      const auto& tree = *f.net->stream(s).tree;
      int64_t full = 1;
      for (int32_t lv = 0; lv < tree.depth; ++lv) full *= tree.branch_k;

      nn::Tape tape;
      nn::Value h = f.net->encode_history(tape, history);
      auto beam = beam_search(*f.net, s, tape, h, 2, full, tree.num_items);
      auto oracle = oracle_ranking(*f.net, s, history);
      REQUIRE(beam.size() == oracle.size());
      for (size_t i = 0; i < beam.size(); ++i) {
        CHECK(beam[i].code.digits == oracle[i].code.digits);
        CHECK(std::abs(beam[i].logprob - oracle[i].logprob) < 1e-9);
      }

      // The product's own exhaustive path agrees too.
      auto product_oracle = exhaustive_ranking(*f.net, s, tape, h, 2);
      REQUIRE(product_oracle.size() == oracle.size());
      for (size_t i = 0; i < oracle.size(); ++i) {
        CHECK(product_oracle[i].code.digits == oracle[i].code.digits);
        CHECK(std::abs(product_oracle[i].logprob - oracle[i].logprob) < 1e-12);
      }
    }
  }
}

TEST_CASE("every beam result resolves through the trie") {
  Fixture f(7);
  Rng rng(77);
  model::randomize_parameters(*f.net, rng, 0.3);
  nn::Tape tape;
  nn::Value h = f.net->encode_history(tape, {1, 2, 3});
  for (int64_t s = 0; s < 2; ++s) {
    auto beam = beam_search(*f.net, s, tape, h, 3, 8, 8);
    CHECK(!beam.empty());
    for (const auto& sc : beam) {
      CHECK(codes::code_to_item(*f.net->stream(s).tree, sc.code).has_value());
      CHECK(sc.logprob <= 1e-12);
    }
  }
}

TEST_CASE("beam_search rejects beam smaller than topk") {
  Fixture f(8);
  nn::Tape tape;
  nn::Value h = f.net->encode_history(tape, {0});
  CHECK_THROWS_AS(beam_search(*f.net, 0, tape, h, 1, 3, 5), Error);
}

TEST_CASE("top-1 logprob is non-decreasing in beam width") {
  Fixture f(9);
  Rng rng(99);
  model::randomize_parameters(*f.net, rng, 0.4);
  nn::Tape tape;
  nn::Value h = f.net->encode_history(tape, {4, 5});
  double prev = -1e300;
  for (int64_t width : {1, 2, 4, 9, 27}) {
    auto beam = beam_search(*f.net, 0, tape, h, 2, width, 1);
    REQUIRE(!beam.empty());
    CHECK(beam[0].logprob >= prev - 1e-12);
    prev = beam[0].logprob;
  }
}

TEST_CASE("confidence_score is length-normalized NLL") {
  CHECK(confidence_score(2.0 * std::log(0.5), 2) ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(confidence_score(0.0, 3) == 0.0);
  // Monotone transform: score order is the reverse of per-token logprob order.
  double a = confidence_score(-1.0, 2);
  double b = confidence_score(-3.0, 2);
  CHECK(a < b);
}

TEST_CASE("fuse_rankings deduplicates by minimum score") {
  std::vector<std::vector<std::pair<int64_t, double>>> streams = {
      {{1, 0.2}, {2, 0.5}},
      {{2, 0.3}, {3, 0.4}},
  };
  auto fused = fuse_rankings(streams, 3);
  REQUIRE(fused.entries.size() == 3);
  CHECK(fused.entries[0].item == 1);
  CHECK(fused.entries[0].score == 0.2);
  CHECK(fused.entries[1].item == 2);
  CHECK(fused.entries[1].score == 0.3);
  CHECK(fused.entries[2].item == 3);
  CHECK(fused.entries[2].score == 0.4);
}

TEST_CASE("fusing with an empty stream returns the other stream") {
  std::vector<std::vector<std::pair<int64_t, double>>> streams = {
      {},
      {{5, 0.1}, {9, 0.7}, {2, 0.9}},
  };
  auto fused = fuse_rankings(streams, 2);
  REQUIRE(fused.entries.size() == 2);
  CHECK(fused.entries[0].item == 5);
  CHECK(fused.entries[1].item == 9);
}

TEST_CASE("fusion matches a brute-force concatenate/group-min/sort oracle") {
  Rng rng(123);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<std::vector<std::pair<int64_t, double>>> streams(
        1 + rng.uniform_int(3));
    for (auto& s : streams) {
      int64_t len = static_cast<int64_t>(rng.uniform_int(8));
      for (int64_t i = 0; i < len; ++i) {
        s.emplace_back(static_cast<int64_t>(rng.uniform_int(10)),
                       std::round(rng.uniform() * 8.0) / 8.0);  // force ties
      }
      std::sort(s.begin(), s.end(),
                [](const auto& a, const auto& b) { return a.second < b.second; });
    }
    int64_t k = 1 + static_cast<int64_t>(rng.uniform_int(6));
    auto fused = fuse_rankings(streams, k);

    // Oracle: concatenate with stream tags, group by item keeping the
    // (score, stream) minimum, sort by (score, stream, item), truncate.
    struct Row {
      int64_t item;
      double score;
      int64_t stream;
    };
    std::map<int64_t, Row> grouped;
    for (size_t s = 0; s < streams.size(); ++s) {
      for (const auto& [item, score] : streams[s]) {
        auto it = grouped.find(item);
        if (it == grouped.end() || score < it->second.score ||
            (score == it->second.score && static_cast<int64_t>(s) < it->second.stream)) {
          grouped[item] = {item, score, static_cast<int64_t>(s)};
        }
      }
    }
    std::vector<Row> rows;
    for (const auto& [item, row] : grouped) rows.push_back(row);
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
      if (a.score != b.score) return a.score < b.score;
      if (a.stream != b.stream) return a.stream < b.stream;
      return a.item < b.item;
    });
    if (static_cast<int64_t>(rows.size()) > k) rows.resize(static_cast<size_t>(k));

    REQUIRE(fused.entries.size() == rows.size());
    for (size_t i = 0; i < rows.size(); ++i) {
      CHECK(fused.entries[i].item == rows[i].item);
      CHECK(fused.entries[i].score == rows[i].score);
    }
  }
}

TEST_CASE("fusion is idempotent on a single stream") {
  std::vector<std::vector<std::pair<int64_t, double>>> one = {
      {{4, 0.1}, {2, 0.2}, {9, 0.3}, {1, 0.4}}};
  auto once = fuse_rankings(one, 3);
  std::vector<std::vector<std::pair<int64_t, double>>> again = {{}};
  for (const auto& e : once.entries) again[0].emplace_back(e.item, e.score);
  auto twice = fuse_rankings(again, 3);
  REQUIRE(once.entries.size() == twice.entries.size());
  for (size_t i = 0; i < once.entries.size(); ++i) {
    CHECK(once.entries[i].item == twice.entries[i].item);
    CHECK(once.entries[i].score == twice.entries[i].score);
  }
}

TEST_CASE("recommend_topk caps at the catalog and is deterministic") {
  Fixture f(10);
  Rng rng(5);
  model::randomize_parameters(*f.net, rng, 0.3);
  auto a = recommend_topk(*f.net, {1, 2, 3}, 500, 500);
  CHECK(static_cast<int64_t>(a.entries.size()) == f.net->num_items());
  std::map<int64_t, int> seen;
  for (const auto& e : a.entries) CHECK(++seen[e.item] == 1);
  for (size_t i = 1; i < a.entries.size(); ++i) {
    CHECK(a.entries[i].score >= a.entries[i - 1].score);
  }

  auto b = recommend_topk(*f.net, {1, 2, 3}, 500, 500);
  REQUIRE(b.entries.size() == a.entries.size());
  for (size_t i = 0; i < a.entries.size(); ++i) {
    CHECK(a.entries[i].item == b.entries[i].item);
    CHECK(a.entries[i].score == b.entries[i].score);
  }

  CHECK_THROWS_AS(recommend_topk(*f.net, {1}, 5, 4), Error);
  CHECK_THROWS_AS(recommend_topk(*f.net, {}, 5, 10), Error);
}

TEST_CASE("histories longer than max_history use the most recent items") {
  Fixture f(11);
  Rng rng(6);
  model::randomize_parameters(*f.net, rng, 0.3);
  // max_history = 6; items beyond the cap must not matter.
  std::vector<int32_t> long_hist = {9, 9, 9, 1, 2, 3, 4, 5, 6};
  std::vector<int32_t> capped(long_hist.end() - 6, long_hist.end());
  auto a = recommend_topk(*f.net, long_hist, 5, 10);
  auto b = recommend_topk(*f.net, capped, 5, 10);
  REQUIRE(a.entries.size() == b.entries.size());
  for (size_t i = 0; i < a.entries.size(); ++i) {
    CHECK(a.entries[i].item == b.entries[i].item);
    CHECK(a.entries[i].score == b.entries[i].score);
  }
}
