#pragma once

#include <memory>
#include <string>
#include <vector>

#include "codes.hpp"
#include "config.hpp"
#include "corpus.hpp"
#include "embed.hpp"
#include "infer.hpp"
#include "model.hpp"

namespace eager::pipeline {

// Artifact locations inside out_dir.
std::string embeddings_path(const PipelineConfig& cfg, const std::string& stream);
std::string codes_path(const PipelineConfig& cfg, const std::string& stream);
std::string checkpoint_dir(const PipelineConfig& cfg);

void run_prepare(const PipelineConfig& cfg);
void run_embed(const PipelineConfig& cfg, const std::string& stream /* "" = all */);
void run_codes(const PipelineConfig& cfg, const std::string& stream /* "" = all */);
void run_train(const PipelineConfig& cfg);
void run_eval(const PipelineConfig& cfg, const std::string& checkpoint /* "" = default */);
void run_recommend(const PipelineConfig& cfg, const std::string& histories_path,
                   const std::string& out_path);
void run_selfcheck(const PipelineConfig& cfg);

// Loaded artifacts for serving; owns everything the model points at.
class Session {
public:
  static std::unique_ptr<Session> open(const PipelineConfig& cfg,
                                       const std::string& checkpoint = "");

  struct Recommendation {
    std::string item_id;
    double score = 0.0;
  };
  std::vector<Recommendation> recommend(const std::vector<std::string>& item_ids,
                                        int64_t k, int64_t beam);

  const corpus::Dataset& dataset() const { return dataset_; }
  model::EagerModel& model() { return *model_; }

private:
  Session() = default;

  corpus::Dataset dataset_;
  std::vector<codes::CodeTree> trees_;
  std::vector<embed::EmbeddingMatrix> embeds_;
  std::unique_ptr<model::EagerModel> model_;
};

// Model assembly shared by train/eval/serving. The StreamSpec pointers refer
// into `trees` and `embeds`, which must outlive the model.
std::unique_ptr<model::EagerModel> build_model(const PipelineConfig& cfg,
                                               const corpus::Dataset& dataset,
                                               const std::vector<codes::CodeTree>& trees,
                                               const std::vector<embed::EmbeddingMatrix>& embeds);

}  // namespace eager::pipeline
