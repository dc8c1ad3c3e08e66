#include "eval.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "error.hpp"
#include "io.hpp"

namespace eager::eval {

double recall_at_k(const infer::RankedList& ranked, int64_t target, int64_t k) {
  int64_t limit = std::min<int64_t>(k, static_cast<int64_t>(ranked.entries.size()));
  for (int64_t i = 0; i < limit; ++i) {
    if (ranked.entries[static_cast<size_t>(i)].item == target) return 1.0;
  }
  return 0.0;
}

double ndcg_at_k(const infer::RankedList& ranked, int64_t target, int64_t k) {
  int64_t limit = std::min<int64_t>(k, static_cast<int64_t>(ranked.entries.size()));
  for (int64_t i = 0; i < limit; ++i) {
    if (ranked.entries[static_cast<size_t>(i)].item == target) {
      return 1.0 / std::log2(static_cast<double>(i + 2));
    }
  }
  return 0.0;
}

MetricsReport evaluate_leave_one_out(model::EagerModel& model,
                                     const corpus::Split& split,
                                     const std::vector<int64_t>& ks,
                                     TargetField target_field, int64_t beam_size,
                                     int64_t max_users) {
  require(!ks.empty(), EAGER_ERR_INVALID_ARG, "no cutoffs requested");
  int64_t max_k = *std::max_element(ks.begin(), ks.end());

  MetricsReport report;
  report.ks = ks;
  std::sort(report.ks.begin(), report.ks.end());
  for (int64_t k : report.ks) {
    report.recall[k] = 0.0;
    report.ndcg[k] = 0.0;
  }

  const int64_t max_history = model.config().max_history;
  for (const auto& user : split.users) {
    if (!user.has_eval) continue;
    if (max_users > 0 && report.num_eval_users >= max_users) break;

    std::vector<int32_t> history = user.train_seq;
    int64_t target = user.valid_target;
    if (target_field == TargetField::Test) {
      history.push_back(user.valid_target);
      target = user.test_target;
    }
    if (static_cast<int64_t>(history.size()) > max_history) {
      history.assign(history.end() - max_history, history.end());
    }
    if (history.empty()) continue;

    infer::RankedList ranked = infer::recommend_topk(model, history, max_k, beam_size);
    for (int64_t k : report.ks) {
      report.recall[k] += recall_at_k(ranked, target, k);
      report.ndcg[k] += ndcg_at_k(ranked, target, k);
    }
    ++report.num_eval_users;
  }

  if (report.num_eval_users > 0) {
    for (int64_t k : report.ks) {
      report.recall[k] /= static_cast<double>(report.num_eval_users);
      report.ndcg[k] /= static_cast<double>(report.num_eval_users);
    }
  }
  return report;
}

std::string format_table(const MetricsReport& report) {
  std::ostringstream ss;
  char line[128];
  std::snprintf(line, sizeof(line), "%-8s %12s %12s\n", "K", "Recall@K", "NDCG@K");
  ss << line;
  for (int64_t k : report.ks) {
    std::snprintf(line, sizeof(line), "%-8lld %12.6f %12.6f\n",
                  static_cast<long long>(k), report.recall.at(k), report.ndcg.at(k));
    ss << line;
  }
  std::snprintf(line, sizeof(line), "users    %12lld\n",
                static_cast<long long>(report.num_eval_users));
  ss << line;
  return ss.str();
}

void write_report(const MetricsReport& report, const std::string& path) {
  std::ostringstream ss;
  for (int64_t k : report.ks) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "recall@%lld=%.6f\n", static_cast<long long>(k),
                  report.recall.at(k));
    ss << buf;
    std::snprintf(buf, sizeof(buf), "ndcg@%lld=%.6f\n", static_cast<long long>(k),
                  report.ndcg.at(k));
    ss << buf;
  }
  ss << "num_eval_users=" << report.num_eval_users << "\n";
  write_text_file(path, ss.str());
}

}  // namespace eager::eval
