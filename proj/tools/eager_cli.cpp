// eager CLI: thin argv wrapper over the shared-library C API.
//
//   eager <command> [--config FILE] [--<key> <value>]... [command options]
//
// Commands: prepare, embed, codes, train, eval, recommend, selfcheck.
// Any --<key> matching a pipeline config key overrides the config file.

#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "eager/eager.h"

namespace {

void usage(FILE* out) {
  std::fprintf(out,
               "usage: eager <command> [options]\n"
               "\n"
               "commands:\n"
               "  prepare    ingest interactions, k-core filter, write dataset artifacts\n"
               "  embed      build frozen per-stream item embeddings\n"
               "  codes      build per-stream hierarchical k-means code trees\n"
               "  train      multi-task training, keeps the best checkpoint\n"
               "  eval       leave-one-out Recall@K / NDCG@K for valid and test\n"
               "  recommend  batch top-k recommendations for a histories file\n"
               "  selfcheck  gradient and beam-search verification suites\n"
               "\n"
               "options:\n"
               "  --config FILE        pipeline config (key=value lines)\n"
               "  --<key> <value>      override any config key (e.g. --seed 7)\n"
               "  --stream NAME        restrict embed/codes to one stream\n"
               "  --checkpoint DIR     checkpoint for eval\n"
               "  --histories FILE     input for recommend (user_id item...)\n"
               "  --out FILE           output for recommend\n");
}

int fail_with(eager_status status) {
  std::fprintf(stderr, "eager: %s: %s\n", eager_status_name(status), eager_last_error());
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    usage(stderr);
    return 2;
  }
  std::string command = argv[1];
  if (command == "-h" || command == "--help" || command == "help") {
    usage(stdout);
    return 0;
  }

  std::string config_path;
  std::string stream;
  std::string checkpoint;
  std::string histories;
  std::string out_path;
  std::vector<std::pair<std::string, std::string>> overrides;

  for (int i = 2; i < argc; ++i) {
    std::string arg = argv[i];
    if (arg.rfind("--", 0) != 0 || i + 1 >= argc) {
      std::fprintf(stderr, "eager: expected '--key value' pairs, got '%s'\n",
                   arg.c_str());
      return 2;
    }
    std::string key = arg.substr(2);
    std::string value = argv[++i];
    if (key == "config") {
      config_path = value;
    } else if (key == "stream") {
      stream = value;
    } else if (key == "checkpoint") {
      checkpoint = value;
    } else if (key == "histories") {
      histories = value;
    } else if (key == "out") {
      out_path = value;
    } else {
      overrides.emplace_back(key, value);
    }
  }

  eager_config* cfg = nullptr;
  eager_status status = config_path.empty() ? eager_config_create(&cfg)
                                            : eager_config_load(config_path.c_str(), &cfg);
  if (status != EAGER_OK) return fail_with(status);

  for (const auto& [key, value] : overrides) {
    status = eager_config_set(cfg, key.c_str(), value.c_str());
    if (status != EAGER_OK) {
      eager_config_destroy(cfg);
      return fail_with(status);
    }
  }
  if (!checkpoint.empty() && command != "eval") {
    status = eager_config_set(cfg, "checkpoint", checkpoint.c_str());
    if (status != EAGER_OK) {
      eager_config_destroy(cfg);
      return fail_with(status);
    }
  }

  if (command == "prepare") {
    status = eager_run_prepare(cfg);
  } else if (command == "embed") {
    status = eager_run_embed(cfg, stream.empty() ? nullptr : stream.c_str());
  } else if (command == "codes") {
    status = eager_run_codes(cfg, stream.empty() ? nullptr : stream.c_str());
  } else if (command == "train") {
    status = eager_run_train(cfg);
  } else if (command == "eval") {
    status = eager_run_eval(cfg, checkpoint.empty() ? nullptr : checkpoint.c_str());
  } else if (command == "recommend") {
    if (histories.empty() || out_path.empty()) {
      std::fprintf(stderr, "eager: recommend needs --histories and --out\n");
      eager_config_destroy(cfg);
      return 2;
    }
    status = eager_run_recommend(cfg, histories.c_str(), out_path.c_str());
  } else if (command == "selfcheck") {
    status = eager_run_selfcheck(cfg);
  } else {
    std::fprintf(stderr, "eager: unknown command '%s'\n", command.c_str());
    usage(stderr);
    eager_config_destroy(cfg);
    return 2;
  }

  eager_config_destroy(cfg);
  return status == EAGER_OK ? 0 : fail_with(status);
}
