#include "config.hpp"

#include <algorithm>
#include <array>
#include <set>

#include "error.hpp"
#include "io.hpp"
#include "log.hpp"

namespace eager {
namespace {

// Static keys and their defaults. Stream-scoped keys are handled by pattern.
const std::vector<std::pair<std::string, std::string>>& default_entries() {
  static const std::vector<std::pair<std::string, std::string>> defaults = {
      {"data_interactions", ""},
      {"data_delimiter", ","},
      {"data_columns", "0,1,2"},
      {"out_dir", ""},
      {"checkpoint", ""},
      {"k_core", "5"},
      {"max_history", "20"},
      {"streams", "behavior,semantic"},
      {"embed_format", "txt"},
      {"branch_k", "256"},
      {"normalize_embeddings", "0"},
      {"hidden", "128"},
      {"enc_layers", "1"},
      {"dec_layers", "4"},
      {"transfer_layers", "1"},
      {"heads", "4"},
      {"ffn_mult", "4"},
      {"dropout", "0.1"},
      {"summary_position", "tail"},
      {"metric", "smooth_l1"},
      {"lambda1", "1"},
      {"lambda2", "1"},
      {"mask_ratio", "0.5"},
      {"replace_ratio", "0.5"},
      {"direction", "semantic_to_behavior"},
      {"infonce_negatives", "32"},
      {"infonce_temperature", "0.07"},
      {"batch_size", "256"},
      {"epochs", "200"},
      {"lr", "0.001"},
      {"warmup_steps", "1000"},
      {"eval_every", "0"},
      {"patience", "20"},
      {"enable_gct", "1"},
      {"enable_stt", "1"},
      {"tsg_only", "0"},
      {"max_steps", "0"},
      {"valid_users", "0"},
      {"beam", "100"},
      {"topk", "20"},
      {"ks", "5,10,20"},
      {"seed", "42"},
  };
  return defaults;
}

const std::set<std::string>& static_keys() {
  static const std::set<std::string> keys = [] {
    std::set<std::string> s;
    for (const auto& [k, v] : default_entries()) s.insert(k);
    return s;
  }();
  return keys;
}

const std::array<std::string, 4> kStreamSuffixes = {
    "_embed_source", "_embed_dim", "_embed_window", "_embed_path"};

// Returns the stream prefix if the key has a stream-scoped shape.
std::string stream_key_prefix(const std::string& key) {
  for (const auto& suffix : kStreamSuffixes) {
    if (key.size() > suffix.size() &&
        key.compare(key.size() - suffix.size(), suffix.size(), suffix) == 0) {
      return key.substr(0, key.size() - suffix.size());
    }
  }
  return "";
}

void check_enum(const std::string& key, const std::string& value,
                std::initializer_list<const char*> allowed) {
  for (const char* a : allowed) {
    if (value == a) return;
  }
  std::string msg = "invalid value '" + value + "' for " + key + " (expected one of:";
  for (const char* a : allowed) msg += std::string(" ") + a;
  fail(EAGER_ERR_CONFIG, msg + ")");
}

}  // namespace

PipelineConfig::PipelineConfig() {
  for (const auto& [k, v] : default_entries()) values_[k] = v;
  // Default embedding sources for the canonical two-stream setup.
  values_["behavior_embed_source"] = "cooc";
  values_["semantic_embed_source"] = "text";
}

PipelineConfig PipelineConfig::load(const std::string& path) {
  PipelineConfig cfg;
  std::string text = read_text_file(path);
  size_t lineno = 0;
  for (const auto& raw_line : split(text, '\n')) {
    ++lineno;
    std::string_view line = trim(raw_line);
    if (line.empty() || line.front() == '#') continue;
    size_t eq = line.find('=');
    require(eq != std::string_view::npos, EAGER_ERR_PARSE,
            path + ":" + std::to_string(lineno) + ": expected key=value");
    std::string key(trim(line.substr(0, eq)));
    std::string value(trim(line.substr(eq + 1)));
    cfg.set(key, value);
  }
  return cfg;
}

void PipelineConfig::set(const std::string& key, const std::string& value) {
  if (!static_keys().count(key) && stream_key_prefix(key).empty()) {
    fail(EAGER_ERR_CONFIG, "unknown config key: " + key);
  }
  values_[key] = value;
}

bool PipelineConfig::has(const std::string& key) const {
  auto it = values_.find(key);
  return it != values_.end() && !it->second.empty();
}

const std::string& PipelineConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  require(it != values_.end(), EAGER_ERR_CONFIG, "unknown config key: " + key);
  return it->second;
}

int64_t PipelineConfig::get_int(const std::string& key) const {
  auto v = parse_int(get(key));
  require(v.has_value(), EAGER_ERR_CONFIG, "config key " + key + " is not an integer");
  return *v;
}

double PipelineConfig::get_double(const std::string& key) const {
  auto v = parse_double(get(key));
  require(v.has_value(), EAGER_ERR_CONFIG, "config key " + key + " is not a number");
  return *v;
}

bool PipelineConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "1" || v == "true" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "no") return false;
  fail(EAGER_ERR_CONFIG, "config key " + key + " is not a boolean: " + v);
}

std::vector<std::string> PipelineConfig::get_list(const std::string& key) const {
  std::vector<std::string> out;
  for (const auto& part : split(get(key), ',')) {
    std::string item(trim(part));
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<int64_t> PipelineConfig::get_int_list(const std::string& key) const {
  std::vector<int64_t> out;
  for (const auto& part : get_list(key)) {
    auto v = parse_int(part);
    require(v.has_value(), EAGER_ERR_CONFIG,
            "config key " + key + " has non-integer element: " + part);
    out.push_back(*v);
  }
  return out;
}

std::vector<std::string> PipelineConfig::streams() const { return get_list("streams"); }

void PipelineConfig::validate() const {
  auto stream_names = streams();
  require(!stream_names.empty(), EAGER_ERR_CONFIG, "streams must list at least one stream");
  std::set<std::string> stream_set(stream_names.begin(), stream_names.end());
  require(stream_set.size() == stream_names.size(), EAGER_ERR_CONFIG,
          "streams contains duplicates");

  for (const auto& [key, value] : values_) {
    std::string prefix = stream_key_prefix(key);
    if (prefix.empty()) continue;
    // Keys for unlisted streams stay inert so one config file can drive
    // single-stream ablation runs; still worth flagging.
    if (!stream_set.count(prefix)) {
      log_warn("config key " + key + " refers to stream '" + prefix +
               "' which is not in streams; ignored");
    }
  }
  for (const auto& name : stream_names) {
    std::string source_key = name + "_embed_source";
    require(has(source_key), EAGER_ERR_CONFIG, "missing config key: " + source_key);
    check_enum(source_key, get(source_key), {"cooc", "text", "file"});
  }

  check_enum("summary_position", get("summary_position"), {"tail", "head", "mean"});
  check_enum("metric", get("metric"), {"smooth_l1", "cosine", "infonce"});
  check_enum("embed_format", get("embed_format"), {"txt", "bin"});

  require(get_int("k_core") >= 1, EAGER_ERR_CONFIG, "k_core must be >= 1");
  require(get_int("max_history") >= 1, EAGER_ERR_CONFIG, "max_history must be >= 1");
  require(get_int("branch_k") >= 2, EAGER_ERR_CONFIG, "branch_k must be >= 2");
  require(get_int("hidden") >= 1, EAGER_ERR_CONFIG, "hidden must be >= 1");
  require(get_int("heads") >= 1 && get_int("hidden") % get_int("heads") == 0,
          EAGER_ERR_CONFIG, "hidden must be divisible by heads");
  require(get_int("batch_size") >= 1, EAGER_ERR_CONFIG, "batch_size must be >= 1");
  require(get_int("beam") >= 1, EAGER_ERR_CONFIG, "beam must be >= 1");
  require(get_int("topk") >= 1, EAGER_ERR_CONFIG, "topk must be >= 1");
  double mask_ratio = get_double("mask_ratio");
  require(mask_ratio > 0.0 && mask_ratio <= 1.0, EAGER_ERR_CONFIG,
          "mask_ratio must be in (0, 1]");
  double replace_ratio = get_double("replace_ratio");
  require(replace_ratio > 0.0 && replace_ratio <= 1.0, EAGER_ERR_CONFIG,
          "replace_ratio must be in (0, 1]");

  if (stream_names.size() >= 2 && get_bool("enable_stt") && !get_bool("tsg_only")) {
    // direction has the form "<guide>_to_<guided>" over stream names.
    std::string direction = get("direction");
    size_t sep = direction.find("_to_");
    require(sep != std::string::npos, EAGER_ERR_CONFIG,
            "direction must look like '<guide>_to_<guided>': " + direction);
    std::string guide = direction.substr(0, sep);
    std::string guided = direction.substr(sep + 4);
    require(stream_set.count(guide) && stream_set.count(guided) && guide != guided,
            EAGER_ERR_CONFIG, "direction names unknown streams: " + direction);
  }
}

}  // namespace eager
