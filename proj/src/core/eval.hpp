#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "infer.hpp"
#include "model.hpp"

namespace eager::eval {

struct MetricsReport {
  std::vector<int64_t> ks;
  std::map<int64_t, double> recall;
  std::map<int64_t, double> ndcg;
  int64_t num_eval_users = 0;
};

enum class TargetField { Valid, Test };

// 1 iff target sits among the first k entries.
double recall_at_k(const infer::RankedList& ranked, int64_t target, int64_t k);

// 1/log2(rank + 1) for the single relevant item, 0 on a miss.
double ndcg_at_k(const infer::RankedList& ranked, int64_t target, int64_t k);

// Leave-one-out evaluation: per user the history is train_seq (plus the
// validation item when scoring test), truncated to the most recent
// max_history items; metrics are averaged over evaluable users.
// max_users = 0 evaluates everyone.
MetricsReport evaluate_leave_one_out(model::EagerModel& model,
                                     const corpus::Split& split,
                                     const std::vector<int64_t>& ks,
                                     TargetField target_field, int64_t beam_size,
                                     int64_t max_users = 0);

std::string format_table(const MetricsReport& report);
void write_report(const MetricsReport& report, const std::string& path);

}  // namespace eager::eval
