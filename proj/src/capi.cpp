// extern "C" boundary: exceptions from the core become (status, message)
// pairs; everything behind a handle is owned by the library.

#include "eager/eager.h"

#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "core/config.hpp"
#include "core/error.hpp"
#include "core/pipeline.hpp"

namespace {

thread_local std::string g_last_error;

eager_status capture(const std::function<void()>& fn) {
  try {
    fn();
    g_last_error.clear();
    return EAGER_OK;
  } catch (const eager::Error& e) {
    g_last_error = e.what();
    return e.status();
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return EAGER_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return EAGER_ERR_INTERNAL;
  }
}

}  // namespace

struct eager_config {
  eager::PipelineConfig impl;
};

struct eager_session {
  std::unique_ptr<eager::pipeline::Session> impl;
};

struct eager_reclist {
  std::vector<eager::pipeline::Session::Recommendation> entries;
};

extern "C" {

const char* eager_last_error(void) { return g_last_error.c_str(); }

const char* eager_status_name(eager_status status) {
  switch (status) {
    case EAGER_OK: return "EAGER_OK";
    case EAGER_ERR_INVALID_ARG: return "EAGER_ERR_INVALID_ARG";
    case EAGER_ERR_IO: return "EAGER_ERR_IO";
    case EAGER_ERR_PARSE: return "EAGER_ERR_PARSE";
    case EAGER_ERR_CONFIG: return "EAGER_ERR_CONFIG";
    case EAGER_ERR_EMPTY_DATASET: return "EAGER_ERR_EMPTY_DATASET";
    case EAGER_ERR_SHAPE: return "EAGER_ERR_SHAPE";
    case EAGER_ERR_NUMERIC: return "EAGER_ERR_NUMERIC";
    case EAGER_ERR_STATE: return "EAGER_ERR_STATE";
    case EAGER_ERR_LOCKED: return "EAGER_ERR_LOCKED";
    default: return "EAGER_ERR_INTERNAL";
  }
}

const char* eager_version(void) { return "0.1.0"; }

eager_status eager_config_create(eager_config** out) {
  if (out == nullptr) {
    g_last_error = "out must not be NULL";
    return EAGER_ERR_INVALID_ARG;
  }
  return capture([&] { *out = new eager_config(); });
}

eager_status eager_config_load(const char* path, eager_config** out) {
  if (path == nullptr || out == nullptr) {
    g_last_error = "path and out must not be NULL";
    return EAGER_ERR_INVALID_ARG;
  }
  return capture([&] {
    auto cfg = std::make_unique<eager_config>();
    cfg->impl = eager::PipelineConfig::load(path);
    *out = cfg.release();
  });
}

eager_status eager_config_set(eager_config* cfg, const char* key, const char* value) {
  if (cfg == nullptr || key == nullptr || value == nullptr) {
    g_last_error = "cfg, key and value must not be NULL";
    return EAGER_ERR_INVALID_ARG;
  }
  return capture([&] { cfg->impl.set(key, value); });
}

eager_status eager_config_get(const eager_config* cfg, const char* key, char* buf,
                              size_t buflen) {
  if (cfg == nullptr || key == nullptr || buf == nullptr || buflen == 0) {
    g_last_error = "cfg, key and buf must not be NULL";
    return EAGER_ERR_INVALID_ARG;
  }
  return capture([&] {
    const std::string& v = cfg->impl.get(key);
    size_t n = std::min(buflen - 1, v.size());
    std::memcpy(buf, v.data(), n);
    buf[n] = '\0';
  });
}

void eager_config_destroy(eager_config* cfg) { delete cfg; }

eager_status eager_run_prepare(const eager_config* cfg) {
  if (cfg == nullptr) {
    g_last_error = "cfg must not be NULL";
    return EAGER_ERR_INVALID_ARG;
  }
  return capture([&] { eager::pipeline::run_prepare(cfg->impl); });
}

eager_status eager_run_embed(const eager_config* cfg, const char* stream) {
  if (cfg == nullptr) {
    g_last_error = "cfg must not be NULL";
    return EAGER_ERR_INVALID_ARG;
  }
  return capture([&] {
    eager::pipeline::run_embed(cfg->impl, stream == nullptr ? "" : stream);
  });
}

eager_status eager_run_codes(const eager_config* cfg, const char* stream) {
  if (cfg == nullptr) {
    g_last_error = "cfg must not be NULL";
    return EAGER_ERR_INVALID_ARG;
  }
  return capture([&] {
    eager::pipeline::run_codes(cfg->impl, stream == nullptr ? "" : stream);
  });
}

eager_status eager_run_train(const eager_config* cfg) {
  if (cfg == nullptr) {
    g_last_error = "cfg must not be NULL";
    return EAGER_ERR_INVALID_ARG;
  }
  return capture([&] { eager::pipeline::run_train(cfg->impl); });
}

eager_status eager_run_eval(const eager_config* cfg, const char* checkpoint) {
  if (cfg == nullptr) {
    g_last_error = "cfg must not be NULL";
    return EAGER_ERR_INVALID_ARG;
  }
  return capture([&] {
    eager::pipeline::run_eval(cfg->impl, checkpoint == nullptr ? "" : checkpoint);
  });
}

eager_status eager_run_recommend(const eager_config* cfg, const char* histories_path,
                                 const char* out_path) {
  if (cfg == nullptr || histories_path == nullptr || out_path == nullptr) {
    g_last_error = "cfg, histories_path and out_path must not be NULL";
    return EAGER_ERR_INVALID_ARG;
  }
  return capture([&] {
    eager::pipeline::run_recommend(cfg->impl, histories_path, out_path);
  });
}

eager_status eager_run_selfcheck(const eager_config* cfg) {
  if (cfg == nullptr) {
    g_last_error = "cfg must not be NULL";
    return EAGER_ERR_INVALID_ARG;
  }
  return capture([&] { eager::pipeline::run_selfcheck(cfg->impl); });
}

eager_status eager_session_open(const eager_config* cfg, eager_session** out) {
  if (cfg == nullptr || out == nullptr) {
    g_last_error = "cfg and out must not be NULL";
    return EAGER_ERR_INVALID_ARG;
  }
  return capture([&] {
    auto session = std::make_unique<eager_session>();
    session->impl = eager::pipeline::Session::open(cfg->impl);
    *out = session.release();
  });
}

eager_status eager_session_recommend(eager_session* session,
                                     const char* const* item_ids, size_t history_len,
                                     int32_t k, int32_t beam, eager_reclist** out) {
  if (session == nullptr || item_ids == nullptr || out == nullptr) {
    g_last_error = "session, item_ids and out must not be NULL";
    return EAGER_ERR_INVALID_ARG;
  }
  return capture([&] {
    std::vector<std::string> ids;
    ids.reserve(history_len);
    for (size_t i = 0; i < history_len; ++i) {
      eager::require(item_ids[i] != nullptr, EAGER_ERR_INVALID_ARG,
                     "item_ids entries must not be NULL");
      ids.emplace_back(item_ids[i]);
    }
    auto list = std::make_unique<eager_reclist>();
    list->entries = session->impl->recommend(ids, k, beam);
    *out = list.release();
  });
}

void eager_session_destroy(eager_session* session) { delete session; }

size_t eager_reclist_size(const eager_reclist* list) {
  return list == nullptr ? 0 : list->entries.size();
}

const char* eager_reclist_item(const eager_reclist* list, size_t i) {
  if (list == nullptr || i >= list->entries.size()) return nullptr;
  return list->entries[i].item_id.c_str();
}

double eager_reclist_score(const eager_reclist* list, size_t i) {
  if (list == nullptr || i >= list->entries.size()) return 0.0;
  return list->entries[i].score;
}

void eager_reclist_destroy(eager_reclist* list) { delete list; }

}  // extern "C"
