#include "corpus.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "error.hpp"
#include "io.hpp"

namespace eager::corpus {
namespace {

struct TripleHash {
  size_t operator()(const std::tuple<std::string, std::string, int64_t>& t) const {
    std::hash<std::string> hs;
    std::hash<int64_t> hi;
    size_t h = hs(std::get<0>(t));
    h = h * 1000003u ^ hs(std::get<1>(t));
    h = h * 1000003u ^ hi(std::get<2>(t));
    return h;
  }
};

}  // namespace

std::vector<Interaction> load_interactions(const std::string& path, char delimiter,
                                           const ColumnSpec& columns) {
  std::string text = read_text_file(path);
  int max_col = std::max({columns.user, columns.item, columns.timestamp});

  std::vector<Interaction> out;
  std::unordered_set<std::tuple<std::string, std::string, int64_t>, TripleHash> seen;
  size_t lineno = 0;
  for (const auto& raw_line : split(text, '\n')) {
    ++lineno;
    std::string_view line = trim(raw_line);
    if (line.empty()) continue;
    auto fields = split(line, delimiter);
    require(static_cast<int>(fields.size()) > max_col, EAGER_ERR_PARSE,
            path + ":" + std::to_string(lineno) + ": expected at least " +
                std::to_string(max_col + 1) + " fields, got " +
                std::to_string(fields.size()));
    std::string user(trim(fields[columns.user]));
    std::string item(trim(fields[columns.item]));
    auto ts = parse_int(fields[columns.timestamp]);
    require(!user.empty() && !item.empty(), EAGER_ERR_PARSE,
            path + ":" + std::to_string(lineno) + ": empty user or item id");
    require(ts.has_value(), EAGER_ERR_PARSE,
            path + ":" + std::to_string(lineno) + ": bad timestamp '" +
                fields[columns.timestamp] + "'");
    if (!seen.emplace(user, item, *ts).second) continue;  // duplicate triple
    out.push_back({std::move(user), std::move(item), *ts});
  }
  require(!out.empty(), EAGER_ERR_EMPTY_DATASET, "no interactions in " + path);
  return out;
}

Dataset k_core_filter(const std::vector<Interaction>& interactions, int64_t k) {
  require(k >= 1, EAGER_ERR_INVALID_ARG, "k-core threshold must be >= 1");

  std::vector<char> alive(interactions.size(), 1);
  bool changed = true;
  while (changed) {
    changed = false;
    std::unordered_map<std::string, int64_t> user_count;
    std::unordered_map<std::string, int64_t> item_count;
    for (size_t i = 0; i < interactions.size(); ++i) {
      if (!alive[i]) continue;
      ++user_count[interactions[i].user_id];
      ++item_count[interactions[i].item_id];
    }
    for (size_t i = 0; i < interactions.size(); ++i) {
      if (!alive[i]) continue;
      if (user_count[interactions[i].user_id] < k ||
          item_count[interactions[i].item_id] < k) {
        alive[i] = 0;
        changed = true;
      }
    }
  }

  Dataset ds;
  std::unordered_map<std::string, size_t> user_slot;
  struct Row {
    int32_t item;
    int64_t timestamp;
    size_t order;  // original file order, breaks timestamp ties
  };
  std::vector<std::vector<Row>> rows_per_user;

  for (size_t i = 0; i < interactions.size(); ++i) {
    if (!alive[i]) continue;
    const auto& inter = interactions[i];
    auto [item_it, item_inserted] =
        ds.item_index.emplace(inter.item_id, static_cast<int32_t>(ds.item_vocab.size()));
    if (item_inserted) ds.item_vocab.push_back(inter.item_id);
    auto [user_it, user_inserted] = user_slot.emplace(inter.user_id, rows_per_user.size());
    if (user_inserted) {
      rows_per_user.emplace_back();
      ds.users.push_back({inter.user_id, {}});
    }
    rows_per_user[user_it->second].push_back({item_it->second, inter.timestamp, i});
    ++ds.num_interactions;
  }
  require(ds.num_interactions > 0, EAGER_ERR_EMPTY_DATASET,
          "k-core filtering removed every interaction (k=" + std::to_string(k) + ")");

  for (size_t u = 0; u < rows_per_user.size(); ++u) {
    auto& rows = rows_per_user[u];
    std::sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
      if (a.timestamp != b.timestamp) return a.timestamp < b.timestamp;
      return a.order < b.order;
    });
    auto& seq = ds.users[u].items;
    seq.reserve(rows.size());
    for (const auto& row : rows) seq.push_back(row.item);
  }
  return ds;
}

Split leave_one_out_split(const Dataset& dataset) {
  Split split;
  split.users.resize(dataset.users.size());
  for (size_t u = 0; u < dataset.users.size(); ++u) {
    const auto& seq = dataset.users[u].items;
    auto& us = split.users[u];
    if (seq.size() < 3) {
      us.train_seq = seq;
      ++split.num_excluded;
      continue;
    }
    us.train_seq.assign(seq.begin(), seq.end() - 2);
    us.valid_target = seq[seq.size() - 2];
    us.test_target = seq[seq.size() - 1];
    us.has_eval = true;
  }
  return split;
}

std::vector<TrainingExample> make_training_examples(const Split& split,
                                                    int64_t max_history) {
  require(max_history >= 1, EAGER_ERR_INVALID_ARG, "max_history must be >= 1");
  std::vector<TrainingExample> out;
  for (const auto& us : split.users) {
    const auto& seq = us.train_seq;
    for (size_t p = 1; p < seq.size(); ++p) {
      size_t start = p > static_cast<size_t>(max_history) ? p - max_history : 0;
      TrainingExample ex;
      ex.history.assign(seq.begin() + start, seq.begin() + p);
      ex.target = seq[p];
      out.push_back(std::move(ex));
    }
  }
  return out;
}

void write_dataset(const Dataset& dataset, const Split& split, const std::string& dir) {
  ensure_directory(dir);

  std::ostringstream manifest;
  manifest << "num_users=" << dataset.num_users() << "\n";
  manifest << "num_items=" << dataset.num_items() << "\n";
  manifest << "num_interactions=" << dataset.num_interactions << "\n";
  manifest << "num_eval_excluded=" << split.num_excluded << "\n";
  manifest << "vocab_file=vocab.txt\n";
  manifest << "users_file=users.txt\n";
  manifest << "sequences_file=sequences.txt\n";
  manifest << "split_file=split.txt\n";
  write_text_file(path_join(dir, "manifest.txt"), manifest.str());

  std::ostringstream vocab;
  for (const auto& item : dataset.item_vocab) vocab << item << "\n";
  write_text_file(path_join(dir, "vocab.txt"), vocab.str());

  std::ostringstream users;
  std::ostringstream sequences;
  for (const auto& user : dataset.users) {
    users << user.user_id << "\n";
    for (size_t i = 0; i < user.items.size(); ++i) {
      if (i) sequences << ' ';
      sequences << user.items[i];
    }
    sequences << "\n";
  }
  write_text_file(path_join(dir, "users.txt"), users.str());
  write_text_file(path_join(dir, "sequences.txt"), sequences.str());

  std::ostringstream sp;
  for (const auto& us : split.users) {
    sp << us.train_seq.size() << ' ' << us.valid_target << ' ' << us.test_target << "\n";
  }
  write_text_file(path_join(dir, "split.txt"), sp.str());
}

Dataset load_dataset(const std::string& dir) {
  Dataset ds;
  std::string vocab_text = read_text_file(path_join(dir, "vocab.txt"));
  for (const auto& line : split(vocab_text, '\n')) {
    std::string item(trim(line));
    if (item.empty()) continue;
    ds.item_index.emplace(item, static_cast<int32_t>(ds.item_vocab.size()));
    ds.item_vocab.push_back(item);
  }

  auto user_lines = split(read_text_file(path_join(dir, "users.txt")), '\n');
  auto seq_lines = split(read_text_file(path_join(dir, "sequences.txt")), '\n');
  while (!user_lines.empty() && trim(user_lines.back()).empty()) user_lines.pop_back();
  while (!seq_lines.empty() && trim(seq_lines.back()).empty()) seq_lines.pop_back();
  require(user_lines.size() == seq_lines.size(), EAGER_ERR_PARSE,
          dir + ": users.txt and sequences.txt disagree on user count");

  for (size_t u = 0; u < user_lines.size(); ++u) {
    UserRecord rec;
    rec.user_id = std::string(trim(user_lines[u]));
    for (const auto& tok : split_ws(seq_lines[u])) {
      auto idx = parse_int(tok);
      require(idx.has_value() && *idx >= 0 && *idx < ds.num_items(), EAGER_ERR_PARSE,
              dir + ": sequences.txt has bad item index '" + tok + "'");
      rec.items.push_back(static_cast<int32_t>(*idx));
      ++ds.num_interactions;
    }
    ds.users.push_back(std::move(rec));
  }
  require(!ds.users.empty(), EAGER_ERR_EMPTY_DATASET, dir + ": dataset is empty");
  return ds;
}

Split load_split(const Dataset& dataset, const std::string& dir) {
  auto lines = split(read_text_file(path_join(dir, "split.txt")), '\n');
  while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  require(lines.size() == dataset.users.size(), EAGER_ERR_PARSE,
          dir + ": split.txt user count mismatch");

  Split sp;
  sp.users.resize(lines.size());
  for (size_t u = 0; u < lines.size(); ++u) {
    auto fields = split_ws(lines[u]);
    require(fields.size() == 3, EAGER_ERR_PARSE, dir + ": split.txt bad line");
    auto n_train = parse_int(fields[0]);
    auto valid = parse_int(fields[1]);
    auto test = parse_int(fields[2]);
    require(n_train && valid && test, EAGER_ERR_PARSE, dir + ": split.txt bad line");
    auto& us = sp.users[u];
    const auto& seq = dataset.users[u].items;
    require(*n_train <= static_cast<int64_t>(seq.size()), EAGER_ERR_PARSE,
            dir + ": split.txt train length exceeds sequence");
    us.train_seq.assign(seq.begin(), seq.begin() + *n_train);
    us.valid_target = static_cast<int32_t>(*valid);
    us.test_target = static_cast<int32_t>(*test);
    us.has_eval = us.valid_target >= 0 && us.test_target >= 0;
    if (!us.has_eval) ++sp.num_excluded;
  }
  return sp;
}

}  // namespace eager::corpus
