// SPDX-License-Identifier: Apache-2.0
//
// Plain-text run configuration: `key = value` lines, `#` comments, checked
// against a per-command key list.

#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "carnet/checkpoint.hpp"
#include "carnet/model.hpp"

namespace carnet {

/// Invalid or incomplete configuration (the CLI maps this to exit code 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct KeySpec {
  std::string key;
  std::string default_value;  // empty and !required: optional with no value
  std::string help;
  bool required = false;
};

/// Parses config text into (key, value) pairs in file order.
ConfigEcho parse_config_text(const std::string& text, const std::string& origin = "config");

class Config {
 public:
  explicit Config(std::vector<KeySpec> schema);

  void load_file(const std::filesystem::path& path);
  /// Throws ConfigError listing the valid keys when `key` is unknown.
  void set(const std::string& key, const std::string& value);
  /// Throws ConfigError naming the first required key without a value.
  void check_required() const;

  bool has(const std::string& key) const;  // non-empty value
  const std::string& str(const std::string& key) const;
  std::size_t size(const std::string& key) const;
  std::uint64_t u64(const std::string& key) const;
  double real(const std::string& key) const;
  bool flag(const std::string& key) const;

  const std::vector<KeySpec>& schema() const { return schema_; }
  /// Every key in schema order with its effective value.
  ConfigEcho echo() const;
  void write(const std::filesystem::path& path) const;

 private:
  std::size_t index(const std::string& key) const;
  std::vector<KeySpec> schema_;
  std::vector<std::string> values_;
};

/// Model keys shared by commands that build a backbone.
std::vector<KeySpec> model_keys();
/// Preset named by `model` with the overrides from the other model keys.
CarnetConfig model_config(const Config& cfg);

/// Model fields as `model.*` pairs, and back.
ConfigEcho model_echo(const CarnetConfig& m);
CarnetConfig model_from_echo(const ConfigEcho& echo);

}  // namespace carnet
