#include "pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "error.hpp"
#include "eval.hpp"
#include "io.hpp"
#include "log.hpp"
#include "train.hpp"

namespace eager::pipeline {
namespace {

char delimiter_of(const PipelineConfig& cfg) {
  const std::string& d = cfg.get("data_delimiter");
  if (d == "tab" || d == "\\t") return '\t';
  if (d == "space") return ' ';
  require(d.size() == 1, EAGER_ERR_CONFIG,
          "data_delimiter must be one character, 'tab' or 'space'");
  return d[0];
}

corpus::ColumnSpec columns_of(const PipelineConfig& cfg) {
  auto cols = cfg.get_int_list("data_columns");
  require(cols.size() == 3, EAGER_ERR_CONFIG,
          "data_columns must list user,item,timestamp indices");
  corpus::ColumnSpec spec;
  spec.user = static_cast<int>(cols[0]);
  spec.item = static_cast<int>(cols[1]);
  spec.timestamp = static_cast<int>(cols[2]);
  return spec;
}

std::string out_dir(const PipelineConfig& cfg) {
  require(cfg.has("out_dir"), EAGER_ERR_CONFIG, "out_dir is not set");
  return cfg.get("out_dir");
}

int64_t stream_embed_dim(const PipelineConfig& cfg, const std::string& stream,
                         int64_t num_items) {
  if (cfg.has(stream + "_embed_dim")) {
    int64_t d = cfg.get_int(stream + "_embed_dim");
    require(d >= 1, EAGER_ERR_CONFIG, stream + "_embed_dim must be >= 1");
    return d;
  }
  return std::min<int64_t>(128, num_items);
}

int64_t stream_embed_window(const PipelineConfig& cfg, const std::string& stream) {
  if (cfg.has(stream + "_embed_window")) return cfg.get_int(stream + "_embed_window");
  return 5;
}

// Item texts keyed by raw id: "item_id<TAB>free text" (or whitespace).
std::vector<std::string> load_item_texts(const std::string& path,
                                         const corpus::Dataset& dataset) {
  std::vector<std::string> texts(static_cast<size_t>(dataset.num_items()));
  std::string content = read_text_file(path);
  size_t lineno = 0;
  int64_t matched = 0;
  for (const auto& raw : split(content, '\n')) {
    ++lineno;
    std::string_view line = trim(raw);
    if (line.empty()) continue;
    size_t sep = line.find_first_of("\t ");
    std::string id(line.substr(0, sep));
    std::string text(sep == std::string_view::npos ? "" : trim(line.substr(sep + 1)));
    auto it = dataset.item_index.find(id);
    if (it == dataset.item_index.end()) {
      log_info(path + ":" + std::to_string(lineno) + ": unknown item id '" + id + "'");
      continue;
    }
    texts[static_cast<size_t>(it->second)] = text;
    ++matched;
  }
  require(matched > 0, EAGER_ERR_EMPTY_DATASET,
          path + ": no line matches a dataset item");
  return texts;
}

std::vector<std::vector<int32_t>> train_sequences(const corpus::Split& split) {
  std::vector<std::vector<int32_t>> out;
  out.reserve(split.users.size());
  for (const auto& u : split.users) out.push_back(u.train_seq);
  return out;
}

void build_one_embedding(const PipelineConfig& cfg, const std::string& stream,
                         const corpus::Dataset& dataset, const corpus::Split& split) {
  const std::string source = cfg.get(stream + "_embed_source");
  const uint64_t seed = derive_seed(static_cast<uint64_t>(cfg.get_int("seed")),
                                    "embed:" + stream);
  embed::EmbeddingMatrix matrix;
  if (source == "file") {
    require(cfg.has(stream + "_embed_path"), EAGER_ERR_CONFIG,
            "missing " + stream + "_embed_path for file-sourced embeddings");
    matrix = embed::load_embeddings(cfg.get(stream + "_embed_path"), dataset.num_items());
  } else if (source == "cooc") {
    matrix = embed::cooccurrence_behavior_embeddings(
        train_sequences(split), dataset.num_items(),
        stream_embed_dim(cfg, stream, dataset.num_items()),
        stream_embed_window(cfg, stream), seed);
  } else {  // "text"
    require(cfg.has(stream + "_embed_path"), EAGER_ERR_CONFIG,
            "missing " + stream + "_embed_path (item text file) for text embeddings");
    auto texts = load_item_texts(cfg.get(stream + "_embed_path"), dataset);
    matrix = embed::text_semantic_embeddings(
        texts, stream_embed_dim(cfg, stream, dataset.num_items()), seed);
  }
  embed::save_embeddings(matrix, embeddings_path(cfg, stream));
  log_info("stream " + stream + ": built " + std::to_string(matrix.items()) + "x" +
           std::to_string(matrix.dim()) + " embeddings (" + matrix.source_tag + ")");
}

struct Artifacts {
  corpus::Dataset dataset;
  corpus::Split split;
  std::vector<codes::CodeTree> trees;
  std::vector<embed::EmbeddingMatrix> embeds;
};

Artifacts load_artifacts(const PipelineConfig& cfg, bool need_streams) {
  Artifacts a;
  a.dataset = corpus::load_dataset(out_dir(cfg));
  a.split = corpus::load_split(a.dataset, out_dir(cfg));
  if (!need_streams) return a;
  auto streams = cfg.streams();
  a.trees.reserve(streams.size());
  a.embeds.reserve(streams.size());
  for (const auto& name : streams) {
    a.embeds.push_back(embed::load_embeddings(embeddings_path(cfg, name),
                                              a.dataset.num_items()));
    a.trees.push_back(codes::load_code_tree(codes_path(cfg, name)));
    require(a.trees.back().num_items == a.dataset.num_items(), EAGER_ERR_SHAPE,
            "code tree for stream " + name + " does not match the dataset");
  }
  return a;
}

}  // namespace

std::string embeddings_path(const PipelineConfig& cfg, const std::string& stream) {
  return path_join(out_dir(cfg), stream + "_embeddings." + cfg.get("embed_format"));
}

std::string codes_path(const PipelineConfig& cfg, const std::string& stream) {
  return path_join(out_dir(cfg), stream + "_codes.txt");
}

std::string checkpoint_dir(const PipelineConfig& cfg) {
  if (cfg.has("checkpoint")) return cfg.get("checkpoint");
  return path_join(out_dir(cfg), "checkpoint");
}

std::unique_ptr<model::EagerModel> build_model(
    const PipelineConfig& cfg, const corpus::Dataset& dataset,
    const std::vector<codes::CodeTree>& trees,
    const std::vector<embed::EmbeddingMatrix>& embeds) {
  auto stream_names = cfg.streams();
  require(trees.size() == stream_names.size() && embeds.size() == stream_names.size(),
          EAGER_ERR_SHAPE, "stream artifact count mismatch");

  model::ModelConfig mc;
  mc.hidden = cfg.get_int("hidden");
  mc.enc_layers = cfg.get_int("enc_layers");
  mc.dec_layers = cfg.get_int("dec_layers");
  mc.transfer_layers = cfg.get_int("transfer_layers");
  mc.heads = cfg.get_int("heads");
  mc.ffn_mult = cfg.get_int("ffn_mult");
  mc.dropout = cfg.get_double("dropout");
  mc.max_history = cfg.get_int("max_history");
  mc.summary_position = model::summary_position_from(cfg.get("summary_position"));
  mc.metric = model::contrastive_metric_from(cfg.get("metric"));
  mc.lambda1 = cfg.get_double("lambda1");
  mc.lambda2 = cfg.get_double("lambda2");
  mc.mask_ratio = cfg.get_double("mask_ratio");
  mc.replace_ratio = cfg.get_double("replace_ratio");
  mc.infonce_negatives = cfg.get_int("infonce_negatives");
  mc.infonce_temperature = cfg.get_double("infonce_temperature");
  mc.enable_gct = cfg.get_bool("enable_gct") && !cfg.get_bool("tsg_only");
  mc.enable_stt = cfg.get_bool("enable_stt") && !cfg.get_bool("tsg_only");

  if (stream_names.size() < 2 && mc.enable_stt) {
    log_warn("transfer task disabled: it needs at least two streams");
    mc.enable_stt = false;
  }
  if (stream_names.size() >= 2 && mc.enable_stt) {
    const std::string direction = cfg.get("direction");
    size_t sep = direction.find("_to_");
    require(sep != std::string::npos, EAGER_ERR_CONFIG,
            "direction must look like '<guide>_to_<guided>'");
    std::string guide = direction.substr(0, sep);
    std::string guided = direction.substr(sep + 4);
    auto index_of = [&](const std::string& name) {
      for (size_t i = 0; i < stream_names.size(); ++i) {
        if (stream_names[i] == name) return static_cast<int32_t>(i);
      }
      fail(EAGER_ERR_CONFIG, "direction names unknown stream '" + name + "'");
    };
    mc.guide_stream = index_of(guide);
    mc.guided_stream = index_of(guided);
  }

  std::vector<model::StreamSpec> specs;
  specs.reserve(stream_names.size());
  for (size_t s = 0; s < stream_names.size(); ++s) {
    specs.push_back({stream_names[s], &trees[s], &embeds[s]});
  }
  return std::make_unique<model::EagerModel>(mc, dataset.num_items(), std::move(specs),
                                             static_cast<uint64_t>(cfg.get_int("seed")));
}

void run_prepare(const PipelineConfig& cfg) {
  cfg.validate();
  require(cfg.has("data_interactions"), EAGER_ERR_CONFIG, "data_interactions is not set");
  DirLock lock(out_dir(cfg));

  auto interactions = corpus::load_interactions(cfg.get("data_interactions"),
                                                delimiter_of(cfg), columns_of(cfg));
  auto dataset = corpus::k_core_filter(interactions, cfg.get_int("k_core"));
  auto split = corpus::leave_one_out_split(dataset);
  corpus::write_dataset(dataset, split, out_dir(cfg));

  std::printf("users=%lld items=%lld interactions=%lld eval_excluded=%lld\n",
              static_cast<long long>(dataset.num_users()),
              static_cast<long long>(dataset.num_items()),
              static_cast<long long>(dataset.num_interactions),
              static_cast<long long>(split.num_excluded));
}

void run_embed(const PipelineConfig& cfg, const std::string& stream) {
  cfg.validate();
  DirLock lock(out_dir(cfg));
  auto artifacts = load_artifacts(cfg, /*need_streams=*/false);
  for (const auto& name : cfg.streams()) {
    if (!stream.empty() && name != stream) continue;
    build_one_embedding(cfg, name, artifacts.dataset, artifacts.split);
  }
}

void run_codes(const PipelineConfig& cfg, const std::string& stream) {
  cfg.validate();
  DirLock lock(out_dir(cfg));
  auto artifacts = load_artifacts(cfg, /*need_streams=*/false);
  const uint64_t seed = static_cast<uint64_t>(cfg.get_int("seed"));
  const int32_t branch_k = static_cast<int32_t>(cfg.get_int("branch_k"));
  for (const auto& name : cfg.streams()) {
    if (!stream.empty() && name != stream) continue;
    auto matrix = embed::load_embeddings(embeddings_path(cfg, name),
                                         artifacts.dataset.num_items());
    auto tree = codes::build_code_tree(matrix, branch_k, seed, name,
                                       cfg.get_bool("normalize_embeddings"));
    // Bijection and balance self-check before writing.
    for (int64_t item = 0; item < tree.num_items; ++item) {
      auto back = codes::code_to_item(tree, codes::item_to_code(tree, item));
      require(back.has_value() && *back == item, EAGER_ERR_INTERNAL,
              "code bijection violated for item " + std::to_string(item));
    }
    save_code_tree(tree, codes_path(cfg, name));
    std::printf("stream=%s items=%lld branch_k=%d depth=%d bijection=ok\n", name.c_str(),
                static_cast<long long>(tree.num_items), tree.branch_k, tree.depth);
  }
}

void run_train(const PipelineConfig& cfg) {
  cfg.validate();
  DirLock lock(out_dir(cfg));
  auto artifacts = load_artifacts(cfg, /*need_streams=*/true);
  auto model = build_model(cfg, artifacts.dataset, artifacts.trees, artifacts.embeds);

  train::TrainConfig tc;
  tc.batch_size = cfg.get_int("batch_size");
  tc.epochs = cfg.get_int("epochs");
  tc.lr = cfg.get_double("lr");
  tc.warmup_steps = cfg.get_int("warmup_steps");
  tc.seed = static_cast<uint64_t>(cfg.get_int("seed"));
  tc.eval_every = cfg.get_int("eval_every");
  tc.patience = cfg.get_int("patience");
  tc.max_steps = cfg.get_int("max_steps");
  tc.valid_users = cfg.get_int("valid_users");
  tc.beam = cfg.get_int("beam");
  tc.checkpoint_dir = checkpoint_dir(cfg);
  tc.log_path = path_join(out_dir(cfg), "train_log.tsv");

  auto report = train::train(*model, artifacts.split, tc);
  std::printf("steps=%lld best_ndcg10=%.6f checkpoint=%s\n",
              static_cast<long long>(report.steps_executed), report.best_ndcg10,
              tc.checkpoint_dir.c_str());
}

void run_eval(const PipelineConfig& cfg, const std::string& checkpoint) {
  cfg.validate();
  auto artifacts = load_artifacts(cfg, /*need_streams=*/true);
  auto model = build_model(cfg, artifacts.dataset, artifacts.trees, artifacts.embeds);
  model->load_checkpoint(checkpoint.empty() ? checkpoint_dir(cfg) : checkpoint);

  auto ks = cfg.get_int_list("ks");
  // Ranking at cutoff k needs a beam at least that wide.
  int64_t beam = cfg.get_int("beam");
  for (int64_t k : ks) beam = std::max(beam, k);
  auto valid = eval::evaluate_leave_one_out(*model, artifacts.split, ks,
                                            eval::TargetField::Valid, beam);
  auto test = eval::evaluate_leave_one_out(*model, artifacts.split, ks,
                                           eval::TargetField::Test, beam);
  eval::write_report(valid, path_join(out_dir(cfg), "metrics_valid.txt"));
  eval::write_report(test, path_join(out_dir(cfg), "metrics_test.txt"));
  std::printf("validation targets\n%s", eval::format_table(valid).c_str());
  std::printf("test targets\n%s", eval::format_table(test).c_str());
}

void run_recommend(const PipelineConfig& cfg, const std::string& histories_path,
                   const std::string& out_path) {
  cfg.validate();
  const int64_t k = cfg.get_int("topk");
  const int64_t beam = cfg.get_int("beam");
  require(beam >= k, EAGER_ERR_INVALID_ARG, "beam must be >= topk");

  auto session = Session::open(cfg);
  std::string content = read_text_file(histories_path);
  std::ostringstream out;
  size_t lineno = 0;
  for (const auto& raw : split(content, '\n')) {
    ++lineno;
    std::string_view line = trim(raw);
    if (line.empty()) continue;
    auto fields = split_ws(line);
    if (fields.size() < 2) {
      std::fprintf(stderr, "[eager] %s:%zu: expected 'user_id item...'\n",
                   histories_path.c_str(), lineno);
      continue;
    }
    std::vector<std::string> items(fields.begin() + 1, fields.end());
    try {
      auto recs = session->recommend(items, k, beam);
      out << fields[0];
      for (const auto& r : recs) {
        char buf[64];
        std::snprintf(buf, sizeof(buf), ":%.6f", r.score);
        out << ' ' << r.item_id << buf;
      }
      out << "\n";
    } catch (const Error& e) {
      std::fprintf(stderr, "[eager] %s:%zu: %s\n", histories_path.c_str(), lineno,
                   e.what());
    }
  }
  write_text_file(out_path, out.str());
}

std::unique_ptr<Session> Session::open(const PipelineConfig& cfg,
                                       const std::string& checkpoint) {
  cfg.validate();
  auto artifacts = load_artifacts(cfg, /*need_streams=*/true);
  std::unique_ptr<Session> s(new Session());
  s->dataset_ = std::move(artifacts.dataset);
  s->trees_ = std::move(artifacts.trees);
  s->embeds_ = std::move(artifacts.embeds);
  s->model_ = build_model(cfg, s->dataset_, s->trees_, s->embeds_);
  s->model_->load_checkpoint(checkpoint.empty() ? checkpoint_dir(cfg) : checkpoint);
  return s;
}

std::vector<Session::Recommendation> Session::recommend(
    const std::vector<std::string>& item_ids, int64_t k, int64_t beam) {
  require(!item_ids.empty(), EAGER_ERR_INVALID_ARG, "history must be non-empty");
  std::vector<int32_t> history;
  history.reserve(item_ids.size());
  for (const auto& id : item_ids) {
    auto it = dataset_.item_index.find(id);
    require(it != dataset_.item_index.end(), EAGER_ERR_INVALID_ARG,
            "unknown item id: " + id);
    history.push_back(it->second);
  }
  auto ranked = infer::recommend_topk(*model_, history, k, beam);
  std::vector<Recommendation> out;
  out.reserve(ranked.entries.size());
  for (const auto& e : ranked.entries) {
    out.push_back({dataset_.item_vocab[static_cast<size_t>(e.item)], e.score});
  }
  return out;
}

void run_selfcheck(const PipelineConfig& cfg) {
  cfg.validate();
  const uint64_t seed = static_cast<uint64_t>(cfg.get_int("seed"));
  Rng rng(derive_seed(seed, "selfcheck"));

  // Small synthetic fixture: random embeddings, a tree per stream, a model
  // with randomized parameters.
  const int64_t n = 24;
  const int64_t d = 8;
  auto make_embed = [&](uint64_t salt) {
    embed::EmbeddingMatrix m;
    m.source_tag = "file";
    m.matrix = nn::Tensor(n, d);
    Rng r(derive_seed(seed, "selfcheck-embed", salt));
    for (auto& x : m.matrix.v) x = r.normal();
    return m;
  };
  std::vector<embed::EmbeddingMatrix> embeds = {make_embed(0), make_embed(1)};
  std::vector<codes::CodeTree> trees = {
      codes::build_code_tree(embeds[0], 4, seed, "behavior"),
      codes::build_code_tree(embeds[1], 4, seed, "semantic")};

  model::ModelConfig mc;
  mc.hidden = 16;
  mc.enc_layers = 1;
  mc.dec_layers = 2;
  mc.transfer_layers = 1;
  mc.heads = 2;
  mc.ffn_mult = 2;
  mc.dropout = 0.0;
  mc.max_history = 8;
  mc.infonce_negatives = 2;
  model::EagerModel m(mc, n, {{"behavior", &trees[0], &embeds[0]},
                              {"semantic", &trees[1], &embeds[1]}},
                      seed);
  model::randomize_parameters(m, rng, 0.1);

  // Gradient suite: full multi-task loss against finite differences.
  corpus::TrainingExample example;
  example.history = {1, 5, 9, 2};
  example.target = 7;
  std::vector<model::Corruption> corruption;
  for (int64_t s = 0; s < m.num_streams(); ++s) {
    Rng crng(derive_seed(seed, "selfcheck-corrupt", static_cast<uint64_t>(s)));
    corruption.push_back(train::sample_corruptions(crng, m.stream(s).tree->depth, 0.5, 0.5));
  }
  auto build = [&](nn::Tape& tape) {
    Rng local(derive_seed(seed, "selfcheck-loss"));
    return m.total_loss(tape, example, corruption, local).total;
  };
  std::vector<nn::Param*> sampled;
  for (nn::Param* p : m.params().all()) {
    if (p->name == "item_emb" || p->name.find("head0") != std::string::npos ||
        p->name.find("proj") != std::string::npos ||
        p->name.find("transfer") != std::string::npos ||
        p->name.find("attn.wq") != std::string::npos ||
        p->name.find("ffn.w1") != std::string::npos ||
        p->name.find("ln1.g") != std::string::npos ||
        p->name.find("tok_emb") != std::string::npos) {
      sampled.push_back(p);
    }
  }
  auto fd = nn::finite_difference_check(build, sampled, 1e-4, 4, rng);
  std::printf("selfcheck gradient: %s (max rel err %.3e over %lld coords)\n",
              fd.pass ? "PASS" : "FAIL", fd.max_rel_error,
              static_cast<long long>(fd.coords_checked));

  // Beam suite: full-width beam must equal exhaustive enumeration.
  bool beam_ok = true;
  for (int trial = 0; trial < 5 && beam_ok; ++trial) {
    Rng trial_rng(derive_seed(seed, "selfcheck-beam", static_cast<uint64_t>(trial)));
    model::randomize_parameters(m, trial_rng, 0.2);
    std::vector<int32_t> history;
    for (int i = 0; i < 4; ++i) {
      history.push_back(static_cast<int32_t>(trial_rng.uniform_int(n)));
    }
    for (int64_t s = 0; s < m.num_streams(); ++s) {
      nn::Tape tape(false);
      nn::Value enc = m.encode_history(tape, history);
      const auto& tree = *m.stream(s).tree;
      int64_t full = 1;
      for (int32_t lv = 0; lv < tree.depth; ++lv) full *= tree.branch_k;
      auto beam = infer::beam_search(m, s, tape, enc,
                                     static_cast<int64_t>(history.size()), full, n);
      auto oracle = infer::exhaustive_ranking(m, s, tape, enc,
                                              static_cast<int64_t>(history.size()));
      if (beam.size() != oracle.size()) beam_ok = false;
      for (size_t i = 0; beam_ok && i < beam.size(); ++i) {
        if (beam[i].code.digits != oracle[i].code.digits ||
            std::abs(beam[i].logprob - oracle[i].logprob) > 1e-9) {
          beam_ok = false;
        }
      }
    }
  }
  std::printf("selfcheck beam-oracle: %s\n", beam_ok ? "PASS" : "FAIL");
  require(fd.pass && beam_ok, EAGER_ERR_NUMERIC, "selfcheck failed");
}

}  // namespace eager::pipeline
