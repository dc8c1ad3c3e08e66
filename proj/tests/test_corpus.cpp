#include "doctest.h"

#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "core/corpus.hpp"
#include "core/error.hpp"
#include "core/io.hpp"
#include "core/rng.hpp"
#include "helpers.hpp"

using namespace eager;
using namespace eager::corpus;

namespace {

std::vector<Interaction> toy(const std::vector<std::tuple<std::string, std::string, int64_t>>& rows) {
  std::vector<Interaction> out;
  for (const auto& [u, i, t] : rows) out.push_back({u, i, t});
  return out;
}

// Independent fixpoint pruner: repeatedly drop users/items below k by
// recounting from scratch, order-independent.
std::vector<Interaction> oracle_k_core(std::vector<Interaction> rows, int64_t k) {
  while (true) {
    std::map<std::string, int64_t> uc, ic;
    for (const auto& r : rows) {
      ++uc[r.user_id];
      ++ic[r.item_id];
    }
    std::vector<Interaction> kept;
    for (const auto& r : rows) {
      if (uc[r.user_id] >= k && ic[r.item_id] >= k) kept.push_back(r);
    }
    if (kept.size() == rows.size()) return rows;
    rows = std::move(kept);
  }
}

}  // namespace

TEST_CASE("load_interactions parses and groups") {
  TempDir dir;
  auto path = dir.write("x.csv", "u1,i1,10\nu1,i2,20\nu2,i1,5\n");
  auto rows = load_interactions(path, ',');
  REQUIRE(rows.size() == 3);
  CHECK(rows[0].user_id == "u1");
  CHECK(rows[2].timestamp == 5);
  std::set<std::string> users;
  for (const auto& r : rows) users.insert(r.user_id);
  CHECK(users.size() == 2);
}

TEST_CASE("load_interactions collapses duplicate triples") {
  TempDir dir;
  auto path = dir.write("x.csv", "u1,i1,10\nu1,i1,10\nu1,i2,20\n");
  auto rows = load_interactions(path, ',');
  CHECK(rows.size() == 2);
}

TEST_CASE("load_interactions reports the offending line") {
  TempDir dir;
  auto path = dir.write("x.csv", "u1,i1,10\nu1,i2,not_a_time\n");
  try {
    load_interactions(path, ',');
    FAIL("expected parse error");
  } catch (const Error& e) {
    CHECK(e.status() == EAGER_ERR_PARSE);
    CHECK(std::string(e.what()).find(":2") != std::string::npos);
  }
}

TEST_CASE("load_interactions rejects an empty file") {
  TempDir dir;
  auto path = dir.write("x.csv", "\n\n");
  CHECK_THROWS_AS(load_interactions(path, ','), Error);
}

TEST_CASE("k_core_filter with k=1 keeps everything") {
  auto rows = toy({{"u1", "a", 1}, {"u1", "b", 2}, {"u2", "a", 1}});
  auto ds = k_core_filter(rows, 1);
  CHECK(ds.num_interactions == 3);
  CHECK(ds.num_users() == 2);
  CHECK(ds.num_items() == 2);
}

TEST_CASE("k_core_filter drops a thin user and item") {
  std::vector<Interaction> rows;
  for (int t = 0; t < 5; ++t) rows.push_back({"u1", "a", t});
  rows.push_back({"u2", "b", 0});
  auto ds = k_core_filter(rows, 5);
  CHECK(ds.num_users() == 1);
  CHECK(ds.num_items() == 1);
  CHECK(ds.users[0].user_id == "u1");
  CHECK(ds.users[0].items.size() == 5);
}

TEST_CASE("k_core_filter empty result is an error") {
  auto rows = toy({{"u1", "a", 1}, {"u2", "b", 2}});
  CHECK_THROWS_AS(k_core_filter(rows, 5), Error);
}

TEST_CASE("k_core_filter matches the brute-force pruner on a synthetic log") {
  // 100 users over 40 popular items, plus 10 rare items with 3 interactions.
  Rng rng(123);
  std::vector<Interaction> rows;
  for (int u = 0; u < 100; ++u) {
    int len = 5 + static_cast<int>(rng.uniform_int(6));
    for (int t = 0; t < len; ++t) {
      rows.push_back({"u" + std::to_string(u),
                      "i" + std::to_string(rng.uniform_int(40)), t});
    }
  }
  for (int r = 0; r < 10; ++r) {
    for (int t = 0; t < 3; ++t) {
      rows.push_back({"u" + std::to_string(r), "rare" + std::to_string(r), 100 + t});
    }
  }
  // Deduplicate the generated triples the same way the loader would.
  std::set<std::tuple<std::string, std::string, int64_t>> seen;
  std::vector<Interaction> unique_rows;
  for (const auto& r : rows) {
    if (seen.emplace(r.user_id, r.item_id, r.timestamp).second) unique_rows.push_back(r);
  }

  auto ds = k_core_filter(unique_rows, 5);
  auto oracle = oracle_k_core(unique_rows, 5);
  CHECK(ds.num_interactions == static_cast<int64_t>(oracle.size()));

  std::set<std::string> oracle_items;
  for (const auto& r : oracle) oracle_items.insert(r.item_id);
  CHECK(ds.num_items() == static_cast<int64_t>(oracle_items.size()));
  for (int r = 0; r < 10; ++r) {
    CHECK(ds.item_index.find("rare" + std::to_string(r)) == ds.item_index.end());
  }

  // Fixpoint invariant: minimum user and item degree >= 5.
  std::map<int32_t, int64_t> item_deg;
  for (const auto& u : ds.users) {
    CHECK(u.items.size() >= 5);
    for (int32_t it : u.items) ++item_deg[it];
  }
  for (const auto& [item, deg] : item_deg) CHECK(deg >= 5);
  CHECK(static_cast<int64_t>(item_deg.size()) == ds.num_items());
}

TEST_CASE("leave_one_out_split follows the protocol") {
  Dataset ds;
  ds.item_vocab = {"a", "b", "c", "d", "e"};
  for (int i = 0; i < 5; ++i) ds.item_index[ds.item_vocab[i]] = i;
  ds.users.push_back({"u", {0, 1, 2, 3, 4}});
  ds.num_interactions = 5;
  auto sp = leave_one_out_split(ds);
  CHECK(sp.users[0].train_seq == std::vector<int32_t>{0, 1, 2});
  CHECK(sp.users[0].valid_target == 3);
  CHECK(sp.users[0].test_target == 4);
  CHECK(sp.users[0].has_eval);
}

TEST_CASE("leave_one_out_split minimum case") {
  Dataset ds;
  ds.item_vocab = {"a", "b", "c"};
  for (int i = 0; i < 3; ++i) ds.item_index[ds.item_vocab[i]] = i;
  ds.users.push_back({"u", {0, 1, 2}});
  auto sp = leave_one_out_split(ds);
  CHECK(sp.users[0].train_seq == std::vector<int32_t>{0});
  CHECK(sp.users[0].valid_target == 1);
  CHECK(sp.users[0].test_target == 2);
}

TEST_CASE("leave_one_out_split excludes short users without dropping them") {
  Dataset ds;
  ds.item_vocab = {"a", "b"};
  ds.item_index = {{"a", 0}, {"b", 1}};
  ds.users.push_back({"u", {0, 1}});
  auto sp = leave_one_out_split(ds);
  CHECK(sp.num_excluded == 1);
  CHECK_FALSE(sp.users[0].has_eval);
  CHECK(sp.users[0].train_seq == std::vector<int32_t>{0, 1});
}

TEST_CASE("leave_one_out_split counting identity over 1000 synthetic users") {
  Rng rng(7);
  Dataset ds;
  ds.item_vocab = {"x"};
  ds.item_index = {{"x", 0}};
  int64_t total = 0;
  for (int u = 0; u < 1000; ++u) {
    int len = 3 + static_cast<int>(rng.uniform_int(10));
    std::vector<int32_t> seq(len, 0);
    ds.users.push_back({"u" + std::to_string(u), seq});
    total += len;
  }
  auto sp = leave_one_out_split(ds);
  int64_t train_total = 0;
  for (size_t u = 0; u < sp.users.size(); ++u) {
    train_total += static_cast<int64_t>(sp.users[u].train_seq.size());
    // Reassembly: train + valid + test reproduces the sequence.
    std::vector<int32_t> rebuilt = sp.users[u].train_seq;
    rebuilt.push_back(sp.users[u].valid_target);
    rebuilt.push_back(sp.users[u].test_target);
    CHECK(rebuilt == ds.users[u].items);
  }
  CHECK(train_total + 2 * 1000 == total);
}

TEST_CASE("make_training_examples enumerates prefixes") {
  Split sp;
  sp.users.push_back({{5, 7, 9}, -1, -1, false});
  auto ex = make_training_examples(sp, 20);
  REQUIRE(ex.size() == 2);
  CHECK(ex[0].history == std::vector<int32_t>{5});
  CHECK(ex[0].target == 7);
  CHECK(ex[1].history == std::vector<int32_t>{5, 7});
  CHECK(ex[1].target == 9);
}

TEST_CASE("make_training_examples caps history at 20") {
  Split sp;
  std::vector<int32_t> seq(25);
  for (int i = 0; i < 25; ++i) seq[static_cast<size_t>(i)] = i;
  sp.users.push_back({seq, -1, -1, false});
  auto ex = make_training_examples(sp, 20);
  REQUIRE(ex.size() == 24);
  CHECK(ex.back().history.size() == 20);
  CHECK(ex.back().history.front() == 4);
  CHECK(ex.back().target == 24);
}

TEST_CASE("make_training_examples count matches the direct formula") {
  Rng rng(99);
  Split sp;
  int64_t expected = 0;
  for (int u = 0; u < 50; ++u) {
    int len = static_cast<int>(rng.uniform_int(8));  // includes empty train_seq
    std::vector<int32_t> seq(len, 1);
    sp.users.push_back({seq, -1, -1, false});
    expected += std::max(len - 1, 0);
  }
  CHECK(static_cast<int64_t>(make_training_examples(sp, 20).size()) == expected);
}

TEST_CASE("no training example leaks a valid or test target position") {
  Rng rng(5);
  Dataset ds;
  ds.item_vocab = {"x"};
  ds.item_index = {{"x", 0}};
  for (int u = 0; u < 20; ++u) {
    int len = 4 + static_cast<int>(rng.uniform_int(6));
    std::vector<int32_t> seq;
    for (int t = 0; t < len; ++t) seq.push_back(static_cast<int32_t>(t));
    ds.users.push_back({"u" + std::to_string(u), seq});
  }
  auto sp = leave_one_out_split(ds);
  auto ex = make_training_examples(sp, 20);
  // Examples enumerate train_seq positions only; the held-out valid/test
  // positions never appear as targets.
  size_t at = 0;
  for (const auto& us : sp.users) {
    size_t count = us.train_seq.size() - 1;
    for (size_t i = 0; i < count; ++i) {
      CHECK(ex[at + i].target == us.train_seq[i + 1]);
    }
    at += count;
  }
  CHECK(at == ex.size());
}

TEST_CASE("dataset serialization is deterministic and round-trips") {
  TempDir dir1, dir2;
  auto rows = toy({{"u1", "a", 1}, {"u1", "b", 2}, {"u1", "c", 3},
                   {"u2", "a", 1}, {"u2", "b", 2}, {"u2", "c", 3},
                   {"u3", "a", 5}, {"u3", "c", 4}, {"u3", "b", 6}});
  auto ds = k_core_filter(rows, 1);
  auto sp = leave_one_out_split(ds);
  write_dataset(ds, sp, dir1.path());
  write_dataset(ds, sp, dir2.path());
  for (const char* name : {"manifest.txt", "vocab.txt", "users.txt", "sequences.txt",
                           "split.txt"}) {
    CHECK(read_text_file(dir1.file(name)) == read_text_file(dir2.file(name)));
  }

  auto back = load_dataset(dir1.path());
  CHECK(back.num_users() == ds.num_users());
  CHECK(back.num_items() == ds.num_items());
  CHECK(back.num_interactions == ds.num_interactions);
  for (size_t u = 0; u < ds.users.size(); ++u) {
    CHECK(back.users[u].user_id == ds.users[u].user_id);
    CHECK(back.users[u].items == ds.users[u].items);
  }
  auto sp_back = load_split(back, dir1.path());
  for (size_t u = 0; u < sp.users.size(); ++u) {
    CHECK(sp_back.users[u].train_seq == sp.users[u].train_seq);
    CHECK(sp_back.users[u].valid_target == sp.users[u].valid_target);
    CHECK(sp_back.users[u].test_target == sp.users[u].test_target);
  }
}

TEST_CASE("timestamp ties keep file order") {
  auto rows = toy({{"u", "a", 7}, {"u", "b", 7}, {"u", "c", 7}});
  auto ds = k_core_filter(rows, 1);
  CHECK(ds.users[0].items == std::vector<int32_t>{0, 1, 2});
}
