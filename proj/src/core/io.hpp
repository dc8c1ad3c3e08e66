#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace eager {

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

std::vector<uint8_t> read_binary_file(const std::string& path);
void write_binary_file(const std::string& path, const void* data, size_t size);

bool file_exists(const std::string& path);
void ensure_directory(const std::string& path);

// Splits on a single-character delimiter; keeps empty fields.
std::vector<std::string> split(std::string_view text, char delim);

// Splits on runs of whitespace; drops empty fields.
std::vector<std::string> split_ws(std::string_view text);

std::string_view trim(std::string_view text);

// Strict integer / real parsing: the whole field must be consumed.
std::optional<int64_t> parse_int(std::string_view text);
std::optional<double> parse_double(std::string_view text);

// Shortest decimal form that round-trips a double exactly.
std::string format_double_exact(double v);

std::string path_join(const std::string& dir, const std::string& name);

// Advisory lock on an output directory; creating the lock file fails if one
// is already present. Released (file removed) on destruction.
class DirLock {
public:
  explicit DirLock(const std::string& dir);
  ~DirLock();
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

private:
  std::string path_;
};

}  // namespace eager
