#include "model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <sstream>

#include "error.hpp"
#include "io.hpp"

namespace eager::model {

using nn::Param;
using nn::ParamStore;
using nn::Tape;
using nn::Tensor;
using nn::Value;

SummaryPosition summary_position_from(const std::string& s) {
  if (s == "head") return SummaryPosition::Head;
  if (s == "mean") return SummaryPosition::Mean;
  if (s == "tail") return SummaryPosition::Tail;
  fail(EAGER_ERR_CONFIG, "unknown summary_position: " + s);
}

ContrastiveMetric contrastive_metric_from(const std::string& s) {
  if (s == "smooth_l1") return ContrastiveMetric::SmoothL1;
  if (s == "cosine") return ContrastiveMetric::Cosine;
  if (s == "infonce") return ContrastiveMetric::InfoNce;
  fail(EAGER_ERR_CONFIG, "unknown contrastive metric: " + s);
}

namespace {

nn::AttentionWeights attention_weights(ParamStore& params, const std::string& prefix) {
  nn::AttentionWeights w;
  w.wq = &params.get(prefix + ".wq");
  w.bq = &params.get(prefix + ".bq");
  w.wk = &params.get(prefix + ".wk");
  w.bk = &params.get(prefix + ".bk");
  w.wv = &params.get(prefix + ".wv");
  w.bv = &params.get(prefix + ".bv");
  w.wo = &params.get(prefix + ".wo");
  w.bo = &params.get(prefix + ".bo");
  return w;
}

void create_attention(ParamStore& params, const std::string& prefix, int64_t dim) {
  using Init = ParamStore::Init;
  params.create(prefix + ".wq", dim, dim, Init::Normal);
  params.create(prefix + ".bq", 1, dim, Init::Zero);
  params.create(prefix + ".wk", dim, dim, Init::Normal);
  params.create(prefix + ".bk", 1, dim, Init::Zero);
  params.create(prefix + ".wv", dim, dim, Init::Normal);
  params.create(prefix + ".bv", 1, dim, Init::Zero);
  params.create(prefix + ".wo", dim, dim, Init::Normal);
  params.create(prefix + ".bo", 1, dim, Init::Zero);
}

void create_layer_norm(ParamStore& params, const std::string& prefix, int64_t dim) {
  Param& g = params.create(prefix + ".g", 1, dim, ParamStore::Init::Zero);
  g.value.fill(1.0);
  params.create(prefix + ".b", 1, dim, ParamStore::Init::Zero);
}

void create_block(ParamStore& params, const std::string& prefix, int64_t dim,
                  int64_t ffn, bool cross) {
  using Init = ParamStore::Init;
  create_layer_norm(params, prefix + ".ln1", dim);
  create_attention(params, prefix + ".attn", dim);
  if (cross) {
    create_layer_norm(params, prefix + ".lnx", dim);
    create_attention(params, prefix + ".xattn", dim);
  }
  create_layer_norm(params, prefix + ".ln2", dim);
  params.create(prefix + ".ffn.w1", dim, ffn, Init::Normal);
  params.create(prefix + ".ffn.b1", 1, ffn, Init::Zero);
  params.create(prefix + ".ffn.w2", ffn, dim, Init::Normal);
  params.create(prefix + ".ffn.b2", 1, dim, Init::Zero);
}

std::vector<int32_t> position_ids(int64_t batch, int64_t t_len) {
  std::vector<int32_t> ids;
  ids.reserve(static_cast<size_t>(batch * t_len));
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t t = 0; t < t_len; ++t) ids.push_back(static_cast<int32_t>(t));
  }
  return ids;
}

}  // namespace

EagerModel::EagerModel(ModelConfig config, int64_t num_items,
                       std::vector<StreamSpec> streams, uint64_t seed)
    : config_(config), num_items_(num_items), streams_(std::move(streams)),
      params_(seed) {
  require(!streams_.empty(), EAGER_ERR_INVALID_ARG, "model needs at least one stream");
  for (const auto& s : streams_) {
    require(s.tree != nullptr && s.distill != nullptr, EAGER_ERR_INVALID_ARG,
            "stream spec missing tree or distill target");
    require(s.tree->num_items == num_items_, EAGER_ERR_SHAPE,
            "code tree item count mismatch for stream " + s.name);
    require(s.distill->items() == num_items_, EAGER_ERR_SHAPE,
            "distill matrix item count mismatch for stream " + s.name);
  }
  if (num_streams() >= 2 && config_.enable_stt) {
    require(config_.guide_stream >= 0 && config_.guide_stream < num_streams() &&
                config_.guided_stream >= 0 && config_.guided_stream < num_streams() &&
                config_.guide_stream != config_.guided_stream,
            EAGER_ERR_CONFIG, "transfer guidance streams misconfigured");
  }

  using Init = ParamStore::Init;
  const int64_t dim = config_.hidden;
  const int64_t ffn = config_.ffn_mult * dim;

  params_.create("item_emb", num_items_, dim, Init::Normal);
  params_.create("enc_pos", config_.max_history, dim, Init::Normal);
  for (int64_t i = 0; i < config_.enc_layers; ++i) {
    create_block(params_, "enc" + std::to_string(i), dim, ffn, false);
  }
  create_layer_norm(params_, "enc.ln_f", dim);

  for (const auto& s : streams_) {
    const int64_t depth = s.tree->depth;
    const int64_t vocab = static_cast<int64_t>(depth) * s.tree->branch_k + 2;
    params_.create(s.name + ".tok_emb", vocab, dim, Init::Normal);
    params_.create(s.name + ".dec_pos", depth + 2, dim, Init::Normal);
    for (int64_t i = 0; i < config_.dec_layers; ++i) {
      create_block(params_, s.name + ".dec" + std::to_string(i), dim, ffn, true);
    }
    create_layer_norm(params_, s.name + ".dec.ln_f", dim);
    for (int64_t lv = 0; lv < depth; ++lv) {
      // Zero-initialized heads make an untrained model exactly uniform.
      params_.create(s.name + ".head" + std::to_string(lv) + ".w", dim,
                     s.tree->branch_k, Init::Zero);
      params_.create(s.name + ".head" + std::to_string(lv) + ".b", 1,
                     s.tree->branch_k, Init::Zero);
    }
    params_.create(s.name + ".proj.w", dim, s.distill->dim(), Init::Normal);
    params_.create(s.name + ".proj.b", 1, s.distill->dim(), Init::Zero);
  }

  if (num_streams() >= 2) {
    const int64_t depth = streams_[static_cast<size_t>(guided_index())].tree->depth;
    params_.create("transfer.cls", 1, dim, Init::Normal);
    params_.create("transfer.mask", 1, dim, Init::Normal);
    params_.create("transfer.pos", depth + 1, dim, Init::Normal);
    for (int64_t i = 0; i < config_.transfer_layers; ++i) {
      create_block(params_, "transfer.dec" + std::to_string(i), dim, ffn, true);
    }
    create_layer_norm(params_, "transfer.ln_f", dim);
    params_.create("transfer.tok_head.w", dim, dim, Init::Normal);
    params_.create("transfer.tok_head.b", 1, dim, Init::Zero);
    params_.create("transfer.recog.w", dim, 1, Init::Zero);
    params_.create("transfer.recog.b", 1, 1, Init::Zero);
  }

  if (config_.metric == ContrastiveMetric::InfoNce) {
    for (const auto& s : streams_) {
      const Tensor& e = s.distill->matrix;
      Tensor t(e.cols, e.rows);
      for (int64_t i = 0; i < e.rows; ++i) {
        double norm = 0.0;
        for (int64_t j = 0; j < e.cols; ++j) norm += e.at(i, j) * e.at(i, j);
        norm = std::sqrt(norm);
        for (int64_t j = 0; j < e.cols; ++j) t.at(j, i) = e.at(i, j) / norm;
      }
      infonce_targets_t_.push_back(std::move(t));
    }
  }
}

int64_t EagerModel::vocab_rows(int64_t s) const {
  const auto& spec = streams_[static_cast<size_t>(s)];
  return static_cast<int64_t>(spec.tree->depth) * spec.tree->branch_k + 2;
}

int32_t EagerModel::digit_token(int64_t s, int32_t level, int32_t digit) const {
  const auto& spec = streams_[static_cast<size_t>(s)];
  require(level >= 0 && level < spec.tree->depth, EAGER_ERR_INVALID_ARG,
          "code level out of range");
  require(digit >= 0 && digit < spec.tree->branch_k, EAGER_ERR_INVALID_ARG,
          "code digit out of range for level " + std::to_string(level));
  return level * spec.tree->branch_k + digit;
}

int32_t EagerModel::sos_token(int64_t s) const {
  return static_cast<int32_t>(vocab_rows(s) - 2);
}

int32_t EagerModel::summary_token(int64_t s) const {
  return static_cast<int32_t>(vocab_rows(s) - 1);
}

Value EagerModel::transformer_block(Tape& tape, Value x, const std::string& prefix,
                                    int64_t batch, int64_t t_len, bool causal,
                                    Value cross_kv, int64_t kv_len,
                                    bool bidirectional) {
  nn::AttentionShape self_shape;
  self_shape.batch = batch;
  self_shape.q_len = t_len;
  self_shape.kv_len = t_len;
  self_shape.kv_batch = batch;
  self_shape.heads = config_.heads;
  self_shape.causal = causal && !bidirectional;

  Value h = tape.layer_norm(x, tape.param(params_.get(prefix + ".ln1.g")),
                            tape.param(params_.get(prefix + ".ln1.b")));
  Value attn = nn::multi_head_attention(tape, h, h,
                                        attention_weights(params_, prefix + ".attn"),
                                        self_shape);
  x = tape.add(x, tape.dropout(attn, config_.dropout));

  if (cross_kv.valid()) {
    nn::AttentionShape cross_shape;
    cross_shape.batch = batch;
    cross_shape.q_len = t_len;
    cross_shape.kv_len = kv_len;
    cross_shape.kv_batch = 1;
    cross_shape.heads = config_.heads;
    cross_shape.causal = false;
    Value hx = tape.layer_norm(x, tape.param(params_.get(prefix + ".lnx.g")),
                               tape.param(params_.get(prefix + ".lnx.b")));
    Value xattn = nn::multi_head_attention(
        tape, hx, cross_kv, attention_weights(params_, prefix + ".xattn"), cross_shape);
    x = tape.add(x, tape.dropout(xattn, config_.dropout));
  }

  Value h2 = tape.layer_norm(x, tape.param(params_.get(prefix + ".ln2.g")),
                             tape.param(params_.get(prefix + ".ln2.b")));
  Value inner = nn::linear(tape, h2, params_.get(prefix + ".ffn.w1"),
                           params_.get(prefix + ".ffn.b1"));
  inner = tape.relu(inner);
  inner = tape.dropout(inner, config_.dropout);
  Value out = nn::linear(tape, inner, params_.get(prefix + ".ffn.w2"),
                         params_.get(prefix + ".ffn.b2"));
  return tape.add(x, tape.dropout(out, config_.dropout));
}

Value EagerModel::encode_history(Tape& tape, const std::vector<int32_t>& history) {
  require(!history.empty(), EAGER_ERR_INVALID_ARG, "history must be non-empty");
  require(static_cast<int64_t>(history.size()) <= config_.max_history,
          EAGER_ERR_INVALID_ARG, "history longer than max_history");
  for (int32_t item : history) {
    require(item >= 0 && item < num_items_, EAGER_ERR_INVALID_ARG,
            "history item index out of range");
  }
  int64_t t_len = static_cast<int64_t>(history.size());
  // Right-aligned positions: the most recent item always receives the last
  // position id, so evaluation histories longer than any training history
  // still hit trained embeddings where it matters.
  std::vector<int32_t> pos(history.size());
  for (size_t t = 0; t < history.size(); ++t) {
    pos[t] = static_cast<int32_t>(config_.max_history - t_len + static_cast<int64_t>(t));
  }
  Value x = tape.add(tape.gather_rows(tape.param(params_.get("item_emb")), history),
                     tape.gather_rows(tape.param(params_.get("enc_pos")), pos));
  for (int64_t i = 0; i < config_.enc_layers; ++i) {
    x = transformer_block(tape, x, "enc" + std::to_string(i), 1, t_len,
                          /*causal=*/false, Value{}, 0, /*bidirectional=*/true);
  }
  return tape.layer_norm(x, tape.param(params_.get("enc.ln_f.g")),
                         tape.param(params_.get("enc.ln_f.b")));
}

Value EagerModel::decoder_states(Tape& tape, int64_t s,
                                 const std::vector<int32_t>& tokens, int64_t batch,
                                 int64_t t_len, Value enc_h, int64_t enc_len) {
  require(static_cast<int64_t>(tokens.size()) == batch * t_len, EAGER_ERR_SHAPE,
          "token count must equal batch * t_len");
  const auto& name = streams_[static_cast<size_t>(s)].name;
  Value x = tape.add(
      tape.gather_rows(tape.param(params_.get(name + ".tok_emb")), tokens),
      tape.gather_rows(tape.param(params_.get(name + ".dec_pos")),
                       position_ids(batch, t_len)));
  for (int64_t i = 0; i < config_.dec_layers; ++i) {
    x = transformer_block(tape, x, name + ".dec" + std::to_string(i), batch, t_len,
                          /*causal=*/true, enc_h, enc_len, /*bidirectional=*/false);
  }
  return tape.layer_norm(x, tape.param(params_.get(name + ".dec.ln_f.g")),
                         tape.param(params_.get(name + ".dec.ln_f.b")));
}

Value EagerModel::level_logits(Tape& tape, int64_t s, int32_t level, Value states) {
  const auto& name = streams_[static_cast<size_t>(s)].name;
  require(level >= 0 && level < streams_[static_cast<size_t>(s)].tree->depth,
          EAGER_ERR_INVALID_ARG, "level out of range");
  return nn::linear(tape, states,
                    params_.get(name + ".head" + std::to_string(level) + ".w"),
                    params_.get(name + ".head" + std::to_string(level) + ".b"));
}

std::vector<int32_t> EagerModel::prefix_tokens(int64_t s,
                                               const std::vector<int32_t>& prefix) const {
  std::vector<int32_t> tokens;
  if (config_.summary_position == SummaryPosition::Head) {
    tokens.push_back(summary_token(s));
  }
  tokens.push_back(sos_token(s));
  for (size_t lv = 0; lv < prefix.size(); ++lv) {
    tokens.push_back(digit_token(s, static_cast<int32_t>(lv), prefix[lv]));
  }
  return tokens;
}

EagerModel::StreamPass EagerModel::stream_forward(Tape& tape, int64_t s,
                                                  const codes::ItemCode& code,
                                                  Value enc_h, int64_t enc_len) {
  const auto& spec = streams_[static_cast<size_t>(s)];
  const int64_t depth = spec.tree->depth;
  require(static_cast<int64_t>(code.digits.size()) == depth, EAGER_ERR_INVALID_ARG,
          "code length must equal tree depth");

  std::vector<int32_t> tokens;
  switch (config_.summary_position) {
    case SummaryPosition::Tail:
      tokens.push_back(sos_token(s));
      for (int64_t lv = 0; lv < depth; ++lv) {
        tokens.push_back(digit_token(s, static_cast<int32_t>(lv),
                                     code.digits[static_cast<size_t>(lv)]));
      }
      tokens.push_back(summary_token(s));
      break;
    case SummaryPosition::Head:
      tokens.push_back(summary_token(s));
      tokens.push_back(sos_token(s));
      for (int64_t lv = 0; lv + 1 < depth; ++lv) {
        tokens.push_back(digit_token(s, static_cast<int32_t>(lv),
                                     code.digits[static_cast<size_t>(lv)]));
      }
      break;
    case SummaryPosition::Mean:
      tokens.push_back(sos_token(s));
      for (int64_t lv = 0; lv < depth; ++lv) {
        tokens.push_back(digit_token(s, static_cast<int32_t>(lv),
                                     code.digits[static_cast<size_t>(lv)]));
      }
      break;
  }

  StreamPass pass;
  pass.t_len = static_cast<int64_t>(tokens.size());
  pass.code = code;
  pass.states = decoder_states(tape, s, tokens, 1, pass.t_len, enc_h, enc_len);
  return pass;
}

Value EagerModel::generation_loss(Tape& tape, int64_t s, const StreamPass& pass) {
  const auto& spec = streams_[static_cast<size_t>(s)];
  const int64_t depth = spec.tree->depth;
  const int64_t gen_offset = config_.summary_position == SummaryPosition::Head ? 1 : 0;

  Value total{};
  for (int64_t lv = 0; lv < depth; ++lv) {
    Value state = tape.slice_rows(pass.states, gen_offset + lv, 1);
    Value logits = level_logits(tape, s, static_cast<int32_t>(lv), state);
    Value ce = tape.cross_entropy(logits, {pass.code.digits[static_cast<size_t>(lv)]},
                                  Tape::Reduction::Sum);
    total = total.valid() ? tape.add(total, ce) : ce;
  }
  return total;
}

Value EagerModel::generation_loss(Tape& tape, int64_t s, Value enc_h, int64_t enc_len,
                                  const codes::ItemCode& code) {
  StreamPass pass = stream_forward(tape, s, code, enc_h, enc_len);
  return generation_loss(tape, s, pass);
}

Value EagerModel::summary_state(Tape& tape, int64_t s, const StreamPass& pass) {
  const int64_t depth = streams_[static_cast<size_t>(s)].tree->depth;
  switch (config_.summary_position) {
    case SummaryPosition::Tail:
      return tape.slice_rows(pass.states, depth + 1, 1);
    case SummaryPosition::Head:
      return tape.slice_rows(pass.states, 0, 1);
    case SummaryPosition::Mean:
      return tape.mean_rows(tape.slice_rows(pass.states, 1, depth));
  }
  fail(EAGER_ERR_INTERNAL, "unreachable");
}

Value EagerModel::summary_embedding(Tape& tape, int64_t s, const StreamPass& pass) {
  const auto& name = streams_[static_cast<size_t>(s)].name;
  return nn::linear(tape, summary_state(tape, s, pass), params_.get(name + ".proj.w"),
                    params_.get(name + ".proj.b"));
}

Value EagerModel::contrastive_loss(Tape& tape, int64_t s, Value summary,
                                   int64_t target_item) {
  const auto& spec = streams_[static_cast<size_t>(s)];
  require(target_item >= 0 && target_item < num_items_, EAGER_ERR_INVALID_ARG,
          "target item out of range");
  const Tensor& e = spec.distill->matrix;

  switch (config_.metric) {
    case ContrastiveMetric::SmoothL1:
    case ContrastiveMetric::Cosine: {
      Tensor row(1, e.cols);
      for (int64_t j = 0; j < e.cols; ++j) row.at(0, j) = e.at(target_item, j);
      Value target = tape.constant(std::move(row));
      if (config_.metric == ContrastiveMetric::SmoothL1) {
        return tape.huber_mean(summary, target);
      }
      return tape.cosine_distance(summary, target);
    }
    case ContrastiveMetric::InfoNce: {
      // Cosine similarities against every row of E, temperature-scaled.
      Value ns2 = tape.sum_all(tape.mul(summary, summary));
      Tensor tiny(1, 1);
      tiny.v[0] = 1e-24;
      Value ns = tape.sqrt(tape.add_const(ns2, tiny));
      Tensor ones(1, e.cols);
      ones.fill(1.0);
      Value ns_row = tape.matmul(ns, tape.constant(std::move(ones)));
      Value shat = tape.div(summary, ns_row);
      Value sims = tape.matmul(shat,
                               tape.constant(infonce_targets_t_[static_cast<size_t>(s)]));
      Value scaled = tape.scale(sims, 1.0 / config_.infonce_temperature);
      return tape.cross_entropy(scaled, {static_cast<int32_t>(target_item)},
                                Tape::Reduction::Mean);
    }
  }
  fail(EAGER_ERR_INTERNAL, "unreachable");
}

Value EagerModel::transfer_forward(Tape& tape, const codes::ItemCode& guided_code,
                                   Value guide_summary,
                                   const std::vector<int32_t>& mask_positions,
                                   const std::vector<std::pair<int32_t, int32_t>>& replacements) {
  require(num_streams() >= 2, EAGER_ERR_STATE, "transfer task needs two streams");
  require(mask_positions.empty() || replacements.empty(), EAGER_ERR_INVALID_ARG,
          "transfer pass cannot mask and replace in one call");
  const int64_t s = guided_index();
  const auto& spec = streams_[static_cast<size_t>(s)];
  const int64_t depth = spec.tree->depth;
  require(static_cast<int64_t>(guided_code.digits.size()) == depth, EAGER_ERR_INVALID_ARG,
          "guided code length mismatch");

  std::vector<int32_t> digits = guided_code.digits;
  for (const auto& [pos, digit] : replacements) {
    require(pos >= 0 && pos < depth, EAGER_ERR_INVALID_ARG, "replace position out of range");
    digits[static_cast<size_t>(pos)] = digit;
  }
  std::vector<char> masked(static_cast<size_t>(depth), 0);
  for (int32_t pos : mask_positions) {
    require(pos >= 0 && pos < depth, EAGER_ERR_INVALID_ARG, "mask position out of range");
    masked[static_cast<size_t>(pos)] = 1;
  }

  Value tok_table = tape.param(params_.get(spec.name + ".tok_emb"));
  std::vector<Value> rows;
  rows.push_back(tape.param(params_.get("transfer.cls")));
  for (int64_t i = 0; i < depth; ++i) {
    if (masked[static_cast<size_t>(i)]) {
      rows.push_back(tape.param(params_.get("transfer.mask")));
    } else {
      rows.push_back(tape.gather_rows(
          tok_table, {digit_token(s, static_cast<int32_t>(i),
                                  digits[static_cast<size_t>(i)])}));
    }
  }
  Value x = tape.add(tape.concat_rows(rows),
                     tape.gather_rows(tape.param(params_.get("transfer.pos")),
                                      position_ids(1, depth + 1)));
  for (int64_t i = 0; i < config_.transfer_layers; ++i) {
    x = transformer_block(tape, x, "transfer.dec" + std::to_string(i), 1, depth + 1,
                          /*causal=*/false, guide_summary, 1, /*bidirectional=*/true);
  }
  return tape.layer_norm(x, tape.param(params_.get("transfer.ln_f.g")),
                         tape.param(params_.get("transfer.ln_f.b")));
}

Value EagerModel::infonce_from_candidates(Tape& tape, Value query, Value candidates) {
  Value logits = tape.matmul(query, tape.transpose(candidates));
  return tape.cross_entropy(logits, {0}, Tape::Reduction::Mean);
}

Value EagerModel::reconstruction_loss(Tape& tape, const codes::ItemCode& guided_code,
                                      Value guide_summary,
                                      const std::vector<int32_t>& mask_positions,
                                      Rng& rng) {
  require(!mask_positions.empty(), EAGER_ERR_INVALID_ARG,
          "reconstruction needs at least one masked position");
  const int64_t s = guided_index();
  const auto& spec = streams_[static_cast<size_t>(s)];
  const int64_t j_negatives = config_.infonce_negatives;
  require(j_negatives >= 1 && j_negatives < spec.tree->branch_k, EAGER_ERR_INVALID_ARG,
          "negative count must be below the level vocabulary size");

  Value states = transfer_forward(tape, guided_code, guide_summary, mask_positions, {});
  Value tok_table = tape.param(params_.get(spec.name + ".tok_emb"));

  Value total{};
  for (int32_t pos : mask_positions) {
    Value r = tape.slice_rows(states, 1 + pos, 1);
    Value p = nn::linear(tape, r, params_.get("transfer.tok_head.w"),
                         params_.get("transfer.tok_head.b"));
    int32_t true_digit = guided_code.digits[static_cast<size_t>(pos)];
    std::vector<int32_t> cand_tokens = {digit_token(s, pos, true_digit)};
    auto picks = rng.sample_without_replacement(
        static_cast<size_t>(spec.tree->branch_k - 1), static_cast<size_t>(j_negatives));
    for (size_t v : picks) {
      int32_t digit = static_cast<int32_t>(v) < true_digit ? static_cast<int32_t>(v)
                                                           : static_cast<int32_t>(v) + 1;
      cand_tokens.push_back(digit_token(s, pos, digit));
    }
    Value candidates = tape.gather_rows(tok_table, cand_tokens);
    Value loss = infonce_from_candidates(tape, p, candidates);
    total = total.valid() ? tape.add(total, loss) : loss;
  }
  return tape.scale(total, 1.0 / static_cast<double>(mask_positions.size()));
}

std::vector<std::pair<int32_t, int32_t>> EagerModel::corrupt_code(
    int64_t s, const codes::ItemCode& code, const std::vector<int32_t>& replace_positions,
    Rng& rng) const {
  const auto& spec = streams_[static_cast<size_t>(s)];
  require(spec.tree->branch_k >= 2, EAGER_ERR_INVALID_ARG,
          "cannot corrupt codes over a single-digit alphabet");
  std::vector<int32_t> positions = replace_positions;
  std::sort(positions.begin(), positions.end());

  std::vector<int32_t> working = code.digits;
  std::vector<std::pair<int32_t, int32_t>> out;
  for (int32_t pos : positions) {
    int32_t original = code.digits[static_cast<size_t>(pos)];
    // Prefer replacements that keep the (possibly already corrupted) prefix
    // on a valid trie path.
    std::vector<int32_t> prefix(working.begin(), working.begin() + pos);
    std::vector<int32_t> preferred;
    for (int32_t digit : codes::valid_next_digits(*spec.tree, prefix)) {
      if (digit != original) preferred.push_back(digit);
    }
    int32_t chosen;
    if (!preferred.empty()) {
      chosen = preferred[static_cast<size_t>(rng.uniform_int(preferred.size()))];
    } else {
      int64_t v = static_cast<int64_t>(rng.uniform_int(
          static_cast<uint64_t>(spec.tree->branch_k - 1)));
      chosen = static_cast<int32_t>(v) < original ? static_cast<int32_t>(v)
                                                  : static_cast<int32_t>(v) + 1;
    }
    working[static_cast<size_t>(pos)] = chosen;
    out.emplace_back(pos, chosen);
  }
  return out;
}

Value EagerModel::recognition_loss(Tape& tape, const codes::ItemCode& guided_code,
                                   Value guide_summary,
                                   const std::vector<int32_t>& replace_positions,
                                   Rng& rng) {
  require(!replace_positions.empty(), EAGER_ERR_INVALID_ARG,
          "recognition needs at least one replaced position");
  auto replacements = corrupt_code(guided_index(), guided_code, replace_positions, rng);

  Value clean = transfer_forward(tape, guided_code, guide_summary, {}, {});
  Value corrupted = transfer_forward(tape, guided_code, guide_summary, {}, replacements);

  Param& w = params_.get("transfer.recog.w");
  Param& b = params_.get("transfer.recog.b");
  Value logit_pos = nn::linear(tape, tape.slice_rows(clean, 0, 1), w, b);
  Value logit_neg = nn::linear(tape, tape.slice_rows(corrupted, 0, 1), w, b);

  // -[ln s+ + ln(1 - s-)] written stably with softplus.
  return tape.add(tape.softplus(tape.scale(logit_pos, -1.0)), tape.softplus(logit_neg));
}

EagerModel::ExampleLoss EagerModel::total_loss(
    Tape& tape, const corpus::TrainingExample& example,
    const std::vector<Corruption>& corruption_per_stream, Rng& rng) {
  require(static_cast<int64_t>(corruption_per_stream.size()) == num_streams(),
          EAGER_ERR_INVALID_ARG, "need one corruption plan per stream");

  Value enc_h = encode_history(tape, example.history);
  int64_t enc_len = static_cast<int64_t>(example.history.size());

  Value gen{};
  Value con{};
  std::vector<StreamPass> passes;
  passes.reserve(static_cast<size_t>(num_streams()));
  for (int64_t s = 0; s < num_streams(); ++s) {
    codes::ItemCode code = codes::item_to_code(*streams_[static_cast<size_t>(s)].tree,
                                               example.target);
    StreamPass pass = stream_forward(tape, s, code, enc_h, enc_len);
    Value g = generation_loss(tape, s, pass);
    gen = gen.valid() ? tape.add(gen, g) : g;
    if (config_.enable_gct) {
      Value summary = summary_embedding(tape, s, pass);
      Value c = contrastive_loss(tape, s, summary, example.target);
      con = con.valid() ? tape.add(con, c) : c;
    }
    passes.push_back(std::move(pass));
  }

  Value recon{};
  Value recog{};
  if (config_.enable_stt && num_streams() >= 2) {
    const auto& corruption = corruption_per_stream[static_cast<size_t>(guided_index())];
    Value guide = summary_state(tape, guide_index(),
                                passes[static_cast<size_t>(guide_index())]);
    const codes::ItemCode& guided_code = passes[static_cast<size_t>(guided_index())].code;
    recon = reconstruction_loss(tape, guided_code, guide, corruption.mask_positions, rng);
    recog = recognition_loss(tape, guided_code, guide, corruption.replace_positions, rng);
  }

  ExampleLoss out;
  out.parts.gen = tape.value(gen).v[0];
  Value total = gen;
  if (con.valid()) {
    out.parts.con = tape.value(con).v[0];
    total = tape.add(total, tape.scale(con, config_.lambda1));
  }
  if (recon.valid()) {
    out.parts.recon = tape.value(recon).v[0];
    out.parts.recog = tape.value(recog).v[0];
    total = tape.add(total, tape.scale(tape.add(recon, recog), config_.lambda2));
  }
  out.total = total;
  out.parts.total = tape.value(total).v[0];
  return out;
}

void EagerModel::save_checkpoint(const std::string& dir) const {
  ensure_directory(dir);
  std::ostringstream manifest;
  manifest << "eager-checkpoint 1\n";
  std::vector<uint8_t> blob;
  int64_t offset = 0;
  for (const Param* p : params_.all()) {
    manifest << "tensor " << p->name << ' ' << p->value.rows << ' ' << p->value.cols
             << " f64 " << offset << "\n";
    size_t bytes = static_cast<size_t>(p->value.size()) * sizeof(double);
    size_t at = blob.size();
    blob.resize(at + bytes);
    std::memcpy(blob.data() + at, p->value.v.data(), bytes);
    offset += static_cast<int64_t>(bytes);
  }
  write_text_file(path_join(dir, "manifest.txt"), manifest.str());
  write_binary_file(path_join(dir, "params.bin"), blob.data(), blob.size());
}

void EagerModel::load_checkpoint(const std::string& dir) {
  auto lines = split(read_text_file(path_join(dir, "manifest.txt")), '\n');
  require(!lines.empty() && trim(lines[0]) == "eager-checkpoint 1", EAGER_ERR_PARSE,
          dir + ": not a checkpoint manifest");
  struct Entry {
    int64_t rows, cols, offset;
  };
  std::map<std::string, Entry> entries;
  for (size_t i = 1; i < lines.size(); ++i) {
    auto fields = split_ws(lines[i]);
    if (fields.empty()) continue;
    require(fields.size() == 6 && fields[0] == "tensor" && fields[4] == "f64",
            EAGER_ERR_PARSE, dir + ": bad manifest line " + std::to_string(i + 1));
    auto rows = parse_int(fields[2]);
    auto cols = parse_int(fields[3]);
    auto offset = parse_int(fields[5]);
    require(rows && cols && offset, EAGER_ERR_PARSE, dir + ": bad manifest numbers");
    entries[fields[1]] = {*rows, *cols, *offset};
  }
  auto blob = read_binary_file(path_join(dir, "params.bin"));
  require(entries.size() == params_.all().size(), EAGER_ERR_SHAPE,
          dir + ": checkpoint has " + std::to_string(entries.size()) +
              " tensors, model expects " + std::to_string(params_.all().size()));
  for (Param* p : params_.all()) {
    auto it = entries.find(p->name);
    require(it != entries.end(), EAGER_ERR_SHAPE,
            dir + ": checkpoint missing tensor " + p->name);
    require(it->second.rows == p->value.rows && it->second.cols == p->value.cols,
            EAGER_ERR_SHAPE,
            dir + ": shape mismatch for tensor " + p->name + " (checkpoint " +
                std::to_string(it->second.rows) + "x" + std::to_string(it->second.cols) +
                ", model " + std::to_string(p->value.rows) + "x" +
                std::to_string(p->value.cols) + ")");
    size_t bytes = static_cast<size_t>(p->value.size()) * sizeof(double);
    require(static_cast<size_t>(it->second.offset) + bytes <= blob.size(),
            EAGER_ERR_PARSE, dir + ": blob too small for tensor " + p->name);
    std::memcpy(p->value.v.data(), blob.data() + it->second.offset, bytes);
  }
}

void randomize_parameters(EagerModel& model, Rng& rng, double scale) {
  for (Param* p : model.params().all()) {
    for (auto& x : p->value.v) x = scale * rng.normal();
  }
}

}  // namespace eager::model
