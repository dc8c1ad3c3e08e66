#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "corpus.hpp"
#include "model.hpp"

namespace eager::train {

struct TrainConfig {
  int64_t batch_size = 256;
  int64_t epochs = 200;
  double lr = 0.001;
  int64_t warmup_steps = 1000;
  uint64_t seed = 42;
  int64_t eval_every = 0;   // steps between validations; 0 = once per epoch
  int64_t patience = 20;    // evals without NDCG@10 improvement before stopping
  int64_t max_steps = 0;    // 0 = unlimited
  int64_t valid_users = 0;  // cap validation users; 0 = all
  int64_t beam = 100;       // validation beam size
  std::string checkpoint_dir;  // best checkpoint location ("" = keep in memory only)
  std::string log_path;        // tab-separated progress log ("" = none)
};

struct EvalPoint {
  int64_t step = 0;
  model::LossBreakdown loss;  // mean since the previous eval
  double recall10 = 0.0;
  double ndcg10 = 0.0;
};

struct TrainReport {
  std::vector<model::LossBreakdown> steps;  // one entry per optimizer step
  std::vector<EvalPoint> evals;
  int64_t best_eval = -1;  // index into evals of the retained checkpoint
  double best_ndcg10 = -1.0;
  int64_t steps_executed = 0;
};

// Mask/replace position sampling for the transfer task: ceil(ratio * l)
// distinct positions each, drawn independently.
model::Corruption sample_corruptions(Rng& rng, int64_t code_len, double mask_ratio,
                                     double replace_ratio);

// Multi-task training over all prefix-expansion examples from the split.
// On return the model holds the best-validation-NDCG@10 parameters.
TrainReport train(model::EagerModel& model, const corpus::Split& split,
                  const TrainConfig& config);

}  // namespace eager::train
