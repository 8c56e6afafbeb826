#include "gsmap/manifest.hpp"

#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>

#include "gsmap/common.hpp"

namespace gsmap {

namespace {

uint32_t rotl(uint32_t v, int bits) { return (v << bits) | (v >> (32 - bits)); }

}  // namespace

std::string sha1_hex(std::span<const unsigned char> bytes) {
  uint32_t h0 = 0x67452301, h1 = 0xEFCDAB89, h2 = 0x98BADCFE, h3 = 0x10325476,
           h4 = 0xC3D2E1F0;

  const uint64_t bit_len = static_cast<uint64_t>(bytes.size()) * 8;
  std::vector<unsigned char> msg(bytes.begin(), bytes.end());
  msg.push_back(0x80);
  while (msg.size() % 64 != 56) msg.push_back(0x00);
  for (int i = 7; i >= 0; --i)
    msg.push_back(static_cast<unsigned char>((bit_len >> (8 * i)) & 0xff));

  uint32_t w[80];
  for (std::size_t chunk = 0; chunk < msg.size(); chunk += 64) {
    for (int i = 0; i < 16; ++i)
      w[i] = (static_cast<uint32_t>(msg[chunk + 4 * i]) << 24) |
             (static_cast<uint32_t>(msg[chunk + 4 * i + 1]) << 16) |
             (static_cast<uint32_t>(msg[chunk + 4 * i + 2]) << 8) |
             static_cast<uint32_t>(msg[chunk + 4 * i + 3]);
    for (int i = 16; i < 80; ++i)
      w[i] = rotl(w[i - 3] ^ w[i - 8] ^ w[i - 14] ^ w[i - 16], 1);

    uint32_t a = h0, b = h1, c = h2, d = h3, e = h4;
    for (int i = 0; i < 80; ++i) {
      uint32_t f, k;
      if (i < 20) {
        f = (b & c) | ((~b) & d);
        k = 0x5A827999;
      } else if (i < 40) {
        f = b ^ c ^ d;
        k = 0x6ED9EBA1;
      } else if (i < 60) {
        f = (b & c) | (b & d) | (c & d);
        k = 0x8F1BBCDC;
      } else {
        f = b ^ c ^ d;
        k = 0xCA62C1D6;
      }
      const uint32_t tmp = rotl(a, 5) + f + e + k + w[i];
      e = d;
      d = c;
      c = rotl(b, 30);
      b = a;
      a = tmp;
    }
    h0 += a;
    h1 += b;
    h2 += c;
    h3 += d;
    h4 += e;
  }

  char out[41];
  std::snprintf(out, sizeof(out), "%08x%08x%08x%08x%08x", h0, h1, h2, h3, h4);
  return std::string(out, 40);
}

std::string git_blob_sha1(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw input_error("git_blob_sha1: cannot open " + path.string());
  std::vector<unsigned char> content((std::istreambuf_iterator<char>(is)),
                                     std::istreambuf_iterator<char>());
  const std::string header = "blob " + std::to_string(content.size());
  std::vector<unsigned char> blob(header.begin(), header.end());
  blob.push_back(0);
  blob.insert(blob.end(), content.begin(), content.end());
  return sha1_hex(blob);
}

void write_manifest_atomic(const RunManifest& manifest,
                           const std::filesystem::path& path) {
  nlohmann::json j;
  j["command"] = manifest.command;
  j["config"] = nlohmann::json::parse(manifest.config_json.empty()
                                          ? std::string("{}")
                                          : manifest.config_json);
  j["seed"] = manifest.seed;
  j["inputs"] = nlohmann::json::array();
  for (const auto& [p, hash] : manifest.inputs)
    j["inputs"].push_back({{"path", p}, {"sha1", hash}});
  j["outputs"] = manifest.outputs;
  j["wall_clock_seconds"] = manifest.wall_clock_seconds;

  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp);
    if (!os) throw input_error("write_manifest_atomic: cannot open " + tmp.string());
    os << j.dump(2) << "\n";
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace gsmap
