#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace gsmap {

std::string sha1_hex(std::span<const unsigned char> bytes);
/// Git blob hash: sha1("blob <size>\0" + content).
std::string git_blob_sha1(const std::filesystem::path& path);

/// Provenance record written next to every CLI command's outputs.
struct RunManifest {
  std::string command;
  std::string config_json;  // flag snapshot, already serialized
  uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> inputs;  // path, blob sha1
  std::vector<std::string> outputs;
  double wall_clock_seconds = 0;
};

/// Serializes to JSON and renames into place so readers never observe a
/// partial file.
void write_manifest_atomic(const RunManifest& manifest,
                           const std::filesystem::path& path);

}  // namespace gsmap
