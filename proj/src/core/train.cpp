#include "train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "error.hpp"
#include "eval.hpp"
#include "io.hpp"
#include "log.hpp"

namespace eager::train {

model::Corruption sample_corruptions(Rng& rng, int64_t code_len, double mask_ratio,
                                     double replace_ratio) {
  require(code_len >= 1, EAGER_ERR_INVALID_ARG, "code length must be >= 1");
  model::Corruption out;
  auto pick = [&](double ratio) {
    int64_t count = static_cast<int64_t>(
        std::ceil(ratio * static_cast<double>(code_len)));
    count = std::clamp<int64_t>(count, 0, code_len);
    std::vector<int32_t> positions;
    for (size_t p : rng.sample_without_replacement(static_cast<size_t>(code_len),
                                                   static_cast<size_t>(count))) {
      positions.push_back(static_cast<int32_t>(p));
    }
    std::sort(positions.begin(), positions.end());
    return positions;
  };
  out.mask_positions = pick(mask_ratio);
  out.replace_positions = pick(replace_ratio);
  return out;
}

namespace {

struct ParamSnapshot {
  std::vector<nn::Tensor> values;

  static ParamSnapshot capture(const model::EagerModel& m) {
    ParamSnapshot s;
    for (const nn::Param* p : m.params().all()) s.values.push_back(p->value);
    return s;
  }

  void restore(model::EagerModel& m) const {
    auto& all = m.params().all();
    for (size_t i = 0; i < all.size(); ++i) all[i]->value = values[i];
  }
};

}  // namespace

TrainReport train(model::EagerModel& model, const corpus::Split& split,
                  const TrainConfig& config) {
  require(config.batch_size >= 1, EAGER_ERR_INVALID_ARG, "batch_size must be >= 1");

  auto examples = corpus::make_training_examples(split, model.config().max_history);
  require(!examples.empty(), EAGER_ERR_EMPTY_DATASET, "no training examples");

  nn::AdamConfig adam_config;
  adam_config.lr = config.lr;
  adam_config.warmup_steps = config.warmup_steps;
  nn::Adam adam(model.params(), adam_config);

  std::string log_text;
  auto append_log = [&](const EvalPoint& pt) {
    char line[256];
    std::snprintf(line, sizeof(line),
                  "%lld\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\n",
                  static_cast<long long>(pt.step), pt.loss.gen, pt.loss.con,
                  pt.loss.recon, pt.loss.recog, pt.loss.total, pt.recall10, pt.ndcg10);
    log_text += line;
    if (!config.log_path.empty()) write_text_file(config.log_path, log_text);
  };

  TrainReport report;
  ParamSnapshot best;
  model::LossBreakdown window_sum;
  int64_t window_count = 0;
  int64_t evals_since_best = 0;
  bool stop = false;

  auto run_eval = [&](int64_t step) {
    EvalPoint pt;
    pt.step = step;
    if (window_count > 0) {
      pt.loss.gen = window_sum.gen / window_count;
      pt.loss.con = window_sum.con / window_count;
      pt.loss.recon = window_sum.recon / window_count;
      pt.loss.recog = window_sum.recog / window_count;
      pt.loss.total = window_sum.total / window_count;
    }
    window_sum = {};
    window_count = 0;

    // Validation ranks at k=10, so the beam must be at least that wide.
    auto metrics = eval::evaluate_leave_one_out(model, split, {10},
                                                eval::TargetField::Valid,
                                                std::max<int64_t>(config.beam, 10),
                                                config.valid_users);
    pt.recall10 = metrics.recall.at(10);
    pt.ndcg10 = metrics.ndcg.at(10);
    report.evals.push_back(pt);
    append_log(pt);

    if (pt.ndcg10 > report.best_ndcg10) {
      report.best_ndcg10 = pt.ndcg10;
      report.best_eval = static_cast<int64_t>(report.evals.size()) - 1;
      best = ParamSnapshot::capture(model);
      if (!config.checkpoint_dir.empty()) model.save_checkpoint(config.checkpoint_dir);
      evals_since_best = 0;
    } else {
      ++evals_since_best;
      if (config.patience > 0 && evals_since_best >= config.patience) stop = true;
    }
  };

  int64_t step = 0;
  for (int64_t epoch = 0; epoch < config.epochs && !stop; ++epoch) {
    std::vector<size_t> order(examples.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(config.seed, "shuffle", static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(order);

    for (size_t at = 0; at < order.size() && !stop; at += config.batch_size) {
      size_t batch_end = std::min(order.size(), at + config.batch_size);
      int64_t batch_n = static_cast<int64_t>(batch_end - at);
      ++step;

      Rng step_rng(derive_seed(config.seed, "step", static_cast<uint64_t>(step)));
      model.params().zero_grads();

      model::LossBreakdown batch_parts;
      for (size_t e = at; e < batch_end; ++e) {
        const auto& example = examples[order[e]];
        std::vector<model::Corruption> corruption;
        for (int64_t s = 0; s < model.num_streams(); ++s) {
          corruption.push_back(sample_corruptions(step_rng, model.stream(s).tree->depth,
                                                  model.config().mask_ratio,
                                                  model.config().replace_ratio));
        }
        nn::Tape tape(true, &step_rng);
        auto loss = model.total_loss(tape, example, corruption, step_rng);
        if (!std::isfinite(loss.parts.total)) {
          fail(EAGER_ERR_NUMERIC,
               "non-finite loss at step " + std::to_string(step) + " (gen=" +
                   std::to_string(loss.parts.gen) + ", con=" +
                   std::to_string(loss.parts.con) + ", recon=" +
                   std::to_string(loss.parts.recon) + ", recog=" +
                   std::to_string(loss.parts.recog) + ")");
        }
        tape.backward(tape.scale(loss.total, 1.0 / static_cast<double>(batch_n)));
        batch_parts.gen += loss.parts.gen;
        batch_parts.con += loss.parts.con;
        batch_parts.recon += loss.parts.recon;
        batch_parts.recog += loss.parts.recog;
        batch_parts.total += loss.parts.total;
      }
      batch_parts.gen /= batch_n;
      batch_parts.con /= batch_n;
      batch_parts.recon /= batch_n;
      batch_parts.recog /= batch_n;
      batch_parts.total /= batch_n;

      adam.step();
      report.steps.push_back(batch_parts);
      report.steps_executed = step;
      window_sum.gen += batch_parts.gen;
      window_sum.con += batch_parts.con;
      window_sum.recon += batch_parts.recon;
      window_sum.recog += batch_parts.recog;
      window_sum.total += batch_parts.total;
      ++window_count;

      if (config.eval_every > 0 && step % config.eval_every == 0) run_eval(step);
      if (config.max_steps > 0 && step >= config.max_steps) stop = true;
    }
    if (!stop && config.eval_every == 0) run_eval(step);
  }

  if (report.evals.empty()) run_eval(step);
  if (report.best_eval >= 0) best.restore(model);
  log_info("training finished after " + std::to_string(report.steps_executed) +
           " steps, best NDCG@10 " + std::to_string(report.best_ndcg10));
  return report;
}

}  // namespace eager::train
