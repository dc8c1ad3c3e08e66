#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace eager::corpus {

struct Interaction {
  std::string user_id;
  std::string item_id;
  int64_t timestamp = 0;
};

struct UserRecord {
  std::string user_id;
  std::vector<int32_t> items;  // chronological dense item indices
};

struct Dataset {
  std::vector<UserRecord> users;
  std::vector<std::string> item_vocab;  // dense index -> item_id
  std::unordered_map<std::string, int32_t> item_index;
  int64_t num_interactions = 0;

  int64_t num_users() const { return static_cast<int64_t>(users.size()); }
  int64_t num_items() const { return static_cast<int64_t>(item_vocab.size()); }
};

// Per-user leave-one-out partition. Users with fewer than 3 items keep all
// items in train_seq and are excluded from evaluation.
struct UserSplit {
  std::vector<int32_t> train_seq;
  int32_t valid_target = -1;
  int32_t test_target = -1;
  bool has_eval = false;
};

struct Split {
  std::vector<UserSplit> users;  // aligned with Dataset.users
  int64_t num_excluded = 0;
};

struct TrainingExample {
  std::vector<int32_t> history;  // at most max_history most recent items
  int32_t target = -1;
};

struct ColumnSpec {
  int user = 0;
  int item = 1;
  int timestamp = 2;
};

// Parses one interaction per line; exact duplicate triples are collapsed
// (first occurrence wins), all other rows keep file order.
std::vector<Interaction> load_interactions(const std::string& path, char delimiter,
                                           const ColumnSpec& columns = {});

// Iteratively drops users and items with fewer than k interactions until a
// fixpoint, then builds dense item indices in first-appearance order and
// per-user chronological sequences (timestamp ties keep file order).
Dataset k_core_filter(const std::vector<Interaction>& interactions, int64_t k = 5);

Split leave_one_out_split(const Dataset& dataset);

std::vector<TrainingExample> make_training_examples(const Split& split,
                                                    int64_t max_history = 20);

// Artifact files under dir: manifest.txt, vocab.txt, users.txt,
// sequences.txt, split.txt.
void write_dataset(const Dataset& dataset, const Split& split, const std::string& dir);
Dataset load_dataset(const std::string& dir);
Split load_split(const Dataset& dataset, const std::string& dir);

}  // namespace eager::corpus
