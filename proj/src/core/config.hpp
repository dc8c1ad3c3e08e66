#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

namespace eager {

// Flat key=value pipeline configuration. One file drives every command;
// command-line overrides arrive through set(). Unknown keys are rejected so
// that ablation sweeps fail loudly on typos.
class PipelineConfig {
public:
  PipelineConfig();

  static PipelineConfig load(const std::string& path);

  // Validates the key (and enum values where cheap). Stream-scoped keys
  // ("<stream>_embed_*") are checked against the streams list in validate().
  void set(const std::string& key, const std::string& value);

  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;

  int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<std::string> get_list(const std::string& key) const;
  std::vector<int64_t> get_int_list(const std::string& key) const;

  std::vector<std::string> streams() const;

  // Full consistency check: stream-scoped keys resolve, enums valid,
  // numeric ranges sane. Called by every pipeline command.
  void validate() const;

  const std::map<std::string, std::string>& entries() const { return values_; }

private:
  std::map<std::string, std::string> values_;
};

}  // namespace eager
