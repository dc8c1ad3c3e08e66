#pragma once

/*
 * model — the two-stream generative recommender network: a shared history
 * encoder, one causal transformer decoder per code stream with a learnable
 * summary token, a projection head distilled toward frozen item embeddings,
 * and a bidirectional transfer decoder that reconstructs masked guided-stream
 * codes and recognizes corrupted ones while cross-attending to the guiding
 * stream's summary state.
 */

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "codes.hpp"
#include "corpus.hpp"
#include "embed.hpp"
#include "nn.hpp"

namespace eager::model {

enum class SummaryPosition { Head, Mean, Tail };
enum class ContrastiveMetric { SmoothL1, Cosine, InfoNce };

SummaryPosition summary_position_from(const std::string& s);
ContrastiveMetric contrastive_metric_from(const std::string& s);

struct ModelConfig {
  int64_t hidden = 128;
  int64_t enc_layers = 1;
  int64_t dec_layers = 4;
  int64_t transfer_layers = 1;
  int64_t heads = 4;
  int64_t ffn_mult = 4;
  double dropout = 0.1;
  int64_t max_history = 20;
  SummaryPosition summary_position = SummaryPosition::Tail;
  ContrastiveMetric metric = ContrastiveMetric::SmoothL1;
  double lambda1 = 1.0;
  double lambda2 = 1.0;
  double mask_ratio = 0.5;
  double replace_ratio = 0.5;
  int64_t infonce_negatives = 32;   // J in the reconstruction objective
  double infonce_temperature = 0.07;
  int32_t guide_stream = 1;   // stream whose summary guides the transfer task
  int32_t guided_stream = 0;  // stream whose codes are reconstructed/recognized
  bool enable_gct = true;
  bool enable_stt = true;
};

// Per-stream wiring: the code tree defines the token alphabet, the frozen
// embedding matrix is the distillation target.
struct StreamSpec {
  std::string name;
  const codes::CodeTree* tree = nullptr;
  const embed::EmbeddingMatrix* distill = nullptr;
};

struct LossBreakdown {
  double gen = 0.0;
  double con = 0.0;
  double recon = 0.0;
  double recog = 0.0;
  double total = 0.0;
};

struct Corruption {
  std::vector<int32_t> mask_positions;
  std::vector<int32_t> replace_positions;
};

class EagerModel {
public:
  EagerModel(ModelConfig config, int64_t num_items, std::vector<StreamSpec> streams,
             uint64_t seed);

  const ModelConfig& config() const { return config_; }
  int64_t num_items() const { return num_items_; }
  int64_t num_streams() const { return static_cast<int64_t>(streams_.size()); }
  const StreamSpec& stream(int64_t s) const { return streams_[static_cast<size_t>(s)]; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  // Token ids inside a stream's decoder vocabulary. Digits live in
  // level-specific slices so levels can never alias.
  int32_t digit_token(int64_t s, int32_t level, int32_t digit) const;
  int32_t sos_token(int64_t s) const;
  int32_t summary_token(int64_t s) const;

  // --- forward pieces -------------------------------------------------

  // Encoded history H, shape [T, hidden]. History must be non-empty and
  // already truncated to max_history items.
  nn::Value encode_history(nn::Tape& tape, const std::vector<int32_t>& history);

  // Causal decoder states for `batch` packed token sequences of length
  // t_len, cross-attending to enc_h ([enc_len, hidden], shared).
  nn::Value decoder_states(nn::Tape& tape, int64_t s,
                           const std::vector<int32_t>& tokens, int64_t batch,
                           int64_t t_len, nn::Value enc_h, int64_t enc_len);

  // Level head logits for the given decoder states (one row per sequence).
  nn::Value level_logits(nn::Tape& tape, int64_t s, int32_t level, nn::Value states);

  // Beam-search decoder input for a digit prefix (layout matches training).
  std::vector<int32_t> prefix_tokens(int64_t s,
                                     const std::vector<int32_t>& prefix) const;

  // Teacher-forced pass over a full code (decoder input includes the summary
  // token according to the configured summary position).
  struct StreamPass {
    nn::Value states;  // [t_len, hidden]
    int64_t t_len = 0;
    codes::ItemCode code;
  };
  StreamPass stream_forward(nn::Tape& tape, int64_t s, const codes::ItemCode& code,
                            nn::Value enc_h, int64_t enc_len);

  // Cross-entropy summed over the l code positions (summary excluded).
  nn::Value generation_loss(nn::Tape& tape, int64_t s, const StreamPass& pass);
  nn::Value generation_loss(nn::Tape& tape, int64_t s, nn::Value enc_h,
                            int64_t enc_len, const codes::ItemCode& code);

  // Summary hidden state ([1, hidden], before projection).
  nn::Value summary_state(nn::Tape& tape, int64_t s, const StreamPass& pass);
  // Projected summary ([1, distill_dim]) used for contrastive distillation.
  nn::Value summary_embedding(nn::Tape& tape, int64_t s, const StreamPass& pass);

  // Positive-only (or InfoNCE) distillation toward the frozen embedding row
  // of target_item.
  nn::Value contrastive_loss(nn::Tape& tape, int64_t s, nn::Value summary,
                             int64_t target_item);

  // --- transfer task ---------------------------------------------------

  // Bidirectional pass over [CLS, code tokens]; masked positions are
  // replaced by the MASK embedding; cross-attention keys/values are the
  // single guide summary state. Exactly one corruption mode per call.
  nn::Value transfer_forward(nn::Tape& tape, const codes::ItemCode& guided_code,
                             nn::Value guide_summary,
                             const std::vector<int32_t>& mask_positions,
                             const std::vector<std::pair<int32_t, int32_t>>& replacements);

  // Masked-position InfoNCE against the true token embedding and J sampled
  // same-level negatives; mean over masked positions.
  nn::Value reconstruction_loss(nn::Tape& tape, const codes::ItemCode& guided_code,
                                nn::Value guide_summary,
                                const std::vector<int32_t>& mask_positions, Rng& rng);

  // Binary classification of clean vs digit-corrupted codes from the CLS
  // state: loss = -[ln s+ + ln(1 - s-)].
  nn::Value recognition_loss(nn::Tape& tape, const codes::ItemCode& guided_code,
                             nn::Value guide_summary,
                             const std::vector<int32_t>& replace_positions, Rng& rng);

  // --- combined objective ----------------------------------------------

  // Single-example multi-task loss; the scalar Value carries gradients for
  // all enabled terms, the breakdown reports each component's value.
  struct ExampleLoss {
    nn::Value total;
    LossBreakdown parts;
  };
  ExampleLoss total_loss(nn::Tape& tape, const corpus::TrainingExample& example,
                         const std::vector<Corruption>& corruption_per_stream,
                         Rng& rng);

  // Replacement digits for the recognition corruption: uniform over the
  // same level's alphabet excluding the original digit, preferring digits
  // that keep a valid trie prefix.
  std::vector<std::pair<int32_t, int32_t>> corrupt_code(
      int64_t s, const codes::ItemCode& code,
      const std::vector<int32_t>& replace_positions, Rng& rng) const;

  // Standalone InfoNCE over raw dot products (first candidate is the
  // positive); exposed for direct verification of the loss formula.
  static nn::Value infonce_from_candidates(nn::Tape& tape, nn::Value query,
                                           nn::Value candidates);

  // --- checkpointing -----------------------------------------------------

  void save_checkpoint(const std::string& dir) const;
  void load_checkpoint(const std::string& dir);

private:
  struct LayerNames;

  nn::Value transformer_block(nn::Tape& tape, nn::Value x, const std::string& prefix,
                              int64_t batch, int64_t t_len, bool causal,
                              nn::Value cross_kv, int64_t kv_len, bool bidirectional);

  int64_t vocab_rows(int64_t s) const;
  int64_t guide_index() const { return config_.guide_stream; }
  int64_t guided_index() const { return config_.guided_stream; }

  ModelConfig config_;
  int64_t num_items_ = 0;
  std::vector<StreamSpec> streams_;
  nn::ParamStore params_;
  // Row-normalized distillation matrices (transposed), built lazily for the
  // InfoNCE metric.
  mutable std::vector<nn::Tensor> infonce_targets_t_;
};

// Test/diagnostic helper: re-draw every parameter from N(0, scale^2).
void randomize_parameters(EagerModel& model, Rng& rng, double scale);

}  // namespace eager::model
