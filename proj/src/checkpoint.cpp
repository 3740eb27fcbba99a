// SPDX-License-Identifier: Apache-2.0

#include "carnet/checkpoint.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace carnet {

namespace fs = std::filesystem;

namespace {

std::string shape_token(const Shape& s) {
  if (s.empty()) return "-";
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

Shape parse_shape_token(const std::string& t) {
  Shape s;
  if (t == "-") return s;
  std::stringstream ss(t);
  std::string d;
  while (std::getline(ss, d, 'x')) s.push_back(std::stoul(d));
  return s;
}

void put_le32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) out.push_back(static_cast<unsigned char>(v >> (8 * k)));
}

std::uint32_t get_le32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

std::uint32_t crc_of(const unsigned char* p, std::size_t n) {
  return std::uint32_t(::crc32(::crc32(0L, Z_NULL, 0), p, uInt(n)));
}

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

}  // namespace

bool CheckpointManifest::has(const std::string& key) const {
  return std::any_of(config.begin(), config.end(), [&](const auto& kv) { return kv.first == key; });
}

const std::string& CheckpointManifest::get(const std::string& key) const {
  for (const auto& [k, v] : config)
    if (k == key) return v;
  throw CheckpointError("checkpoint manifest has no config key '" + key + "'");
}

void save_checkpoint(const fs::path& dir, const std::string& kind, const ConfigEcho& config,
                     const std::vector<StateEntry<float>>& state) {
  fs::create_directories(dir);
  std::vector<unsigned char> payload;
  std::ostringstream entries;
  for (const auto& e : state) {
    const std::size_t offset = payload.size();
    for (float v : e.tensor->data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_le32(payload, bits);
    }
    const std::size_t bytes = payload.size() - offset;
    entries << "tensor " << e.name << " f32 " << shape_token(e.tensor->shape()) << " " << offset << " " << bytes << " "
            << hex32(crc_of(payload.data() + offset, bytes)) << "\n";
  }
  std::ofstream m(dir / "manifest.txt", std::ios::binary);
  if (!m) throw CheckpointError("cannot write " + (dir / "manifest.txt").string());
  m << "format = carnet-checkpoint\n"
    << "version = " << kCheckpointVersion << "\n"
    << "kind = " << kind << "\n";
  for (const auto& [k, v] : config) m << "config " << k << " = " << v << "\n";
  m << "tensors = " << state.size() << "\n" << entries.str();
  std::ofstream p(dir / "payload.bin", std::ios::binary);
  p.write(reinterpret_cast<const char*>(payload.data()), std::streamsize(payload.size()));
  if (!m || !p) throw CheckpointError("write failed under " + dir.string());
}

CheckpointManifest read_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.txt");
  if (!in) throw CheckpointError("not a checkpoint (missing manifest.txt): " + dir.string());
  CheckpointManifest man;
  bool format_seen = false, version_seen = false;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("tensor ", 0) == 0) {
      std::istringstream ss(line.substr(7));
      CheckpointEntry e;
      std::string shape, crc;
      if (!(ss >> e.name >> e.dtype >> shape >> e.offset >> e.bytes >> crc))
        throw CheckpointError("malformed manifest line: " + line);
      if (e.dtype != "f32") throw CheckpointError("unsupported dtype '" + e.dtype + "' for " + e.name);
      e.shape = parse_shape_token(shape);
      e.crc32 = std::uint32_t(std::stoul(crc, nullptr, 16));
      man.entries.push_back(std::move(e));
      continue;
    }
    const bool is_config = line.rfind("config ", 0) == 0;
    const std::string body = is_config ? line.substr(7) : line;
    const auto eq = body.find(" = ");
    if (eq == std::string::npos) throw CheckpointError("malformed manifest line: " + line);
    const std::string key = body.substr(0, eq), val = body.substr(eq + 3);
    if (is_config) {
      man.config.emplace_back(key, val);
    } else if (key == "format") {
      if (val != "carnet-checkpoint") throw CheckpointError("unknown checkpoint format '" + val + "'");
      format_seen = true;
    } else if (key == "version") {
      man.version = std::stoi(val);
      if (man.version != kCheckpointVersion)
        throw CheckpointError("checkpoint version " + val + " is not supported (expected " +
                              std::to_string(kCheckpointVersion) + ")");
      version_seen = true;
    } else if (key == "kind") {
      man.kind = val;
    }
  }
  if (!format_seen || !version_seen) throw CheckpointError("manifest lacks format/version header: " + dir.string());
  return man;
}

CheckpointManifest load_checkpoint(const fs::path& dir, const std::vector<StateEntry<float>>& state) {
  CheckpointManifest man = read_manifest(dir);
  std::ifstream p(dir / "payload.bin", std::ios::binary);
  if (!p) throw CheckpointError("missing payload.bin in " + dir.string());
  const std::vector<unsigned char> payload((std::istreambuf_iterator<char>(p)), std::istreambuf_iterator<char>());

  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& e : man.entries) by_name[e.name] = &e;
  if (man.entries.size() != state.size()) {
    for (const auto& e : man.entries) {
      const bool known = std::any_of(state.begin(), state.end(), [&](const auto& s) { return s.name == e.name; });
      if (!known) throw CheckpointError("checkpoint tensor '" + e.name + "' does not exist in the model");
    }
  }
  for (const auto& s : state) {
    const auto it = by_name.find(s.name);
    if (it == by_name.end()) throw CheckpointError("checkpoint has no tensor '" + s.name + "'");
    const CheckpointEntry& e = *it->second;
    if (e.shape != s.tensor->shape())
      throw CheckpointError("shape mismatch for '" + s.name + "': checkpoint " + to_string(e.shape) + " vs model " +
                            to_string(s.tensor->shape()));
    if (e.bytes != 4 * s.tensor->size()) throw CheckpointError("byte count mismatch for '" + s.name + "'");
    if (e.offset + e.bytes > payload.size())
      throw CheckpointError("truncated payload: '" + s.name + "' needs bytes up to " +
                            std::to_string(e.offset + e.bytes) + ", file has " + std::to_string(payload.size()));
    const unsigned char* src = payload.data() + e.offset;
    if (crc_of(src, e.bytes) != e.crc32) throw CheckpointError("checksum mismatch for parameter '" + s.name + "'");
    auto dst = s.tensor->data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      const std::uint32_t bits = get_le32(src + 4 * i);
      std::memcpy(&dst[i], &bits, 4);
    }
  }
  return man;
}

}  // namespace carnet
