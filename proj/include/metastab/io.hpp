#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace metastab {

/// Shortest round-trip decimal form; NaN renders as an empty field.
std::string fmt_num(double x);

std::string read_file(const std::filesystem::path& path);

/// Writes through a temporary file in the same directory, then renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view content);

std::string sha256_hex(std::string_view bytes);

struct ManifestEntry {
  std::string path;
  std::string sha256;
  std::size_t bytes = 0;
};

/// Reproducibility envelope written next to every command's outputs.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::vector<std::string> config_paths;
  std::vector<std::uint64_t> seeds;
  std::string tool_version;
  double wall_seconds = 0.0;
  std::vector<ManifestEntry> outputs;

  /// Writes `content` atomically to `path` and records its hash.
  void write_output(const std::filesystem::path& path, std::string_view content);
  std::string to_json() const;
};

}  // namespace metastab
