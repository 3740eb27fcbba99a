// SPDX-License-Identifier: Apache-2.0

#include "carnet/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

#include "carnet/env.hpp"

namespace carnet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string join_sizes(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

template <typename T>
T parse_number(const std::string& key, const std::string& v, const char* what) {
  T out{};
  const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size())
    throw ConfigError("key '" + key + "': expected " + what + ", got '" + v + "'");
  return out;
}

}  // namespace

ConfigEcho parse_config_text(const std::string& text, const std::string& origin) {
  ConfigEcho out;
  std::istringstream in(text);
  std::string line;
  for (std::size_t lineno = 1; std::getline(in, line); ++lineno) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError(origin + ":" + std::to_string(lineno) + ": expected 'key = value', got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError(origin + ":" + std::to_string(lineno) + ": empty key");
    out.emplace_back(key, trim(line.substr(eq + 1)));
  }
  return out;
}

Config::Config(std::vector<KeySpec> schema) : schema_(std::move(schema)) {
  for (const auto& k : schema_) values_.push_back(k.default_value);
}

std::size_t Config::index(const std::string& key) const {
  for (std::size_t i = 0; i < schema_.size(); ++i)
    if (schema_[i].key == key) return i;
  std::string valid;
  for (const auto& k : schema_) valid += (valid.empty() ? "" : ", ") + k.key;
  throw ConfigError("unknown config key '" + key + "'; valid keys: " + valid);
}

void Config::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  for (const auto& [k, v] : parse_config_text(ss.str(), path.string())) set(k, v);
}

void Config::set(const std::string& key, const std::string& value) { values_[index(key)] = value; }

void Config::check_required() const {
  for (std::size_t i = 0; i < schema_.size(); ++i)
    if (schema_[i].required && values_[i].empty())
      throw ConfigError("missing required key '" + schema_[i].key + "' (" + schema_[i].help + ")");
}

bool Config::has(const std::string& key) const { return !values_[index(key)].empty(); }

const std::string& Config::str(const std::string& key) const { return values_[index(key)]; }

std::size_t Config::size(const std::string& key) const {
  return parse_number<std::size_t>(key, str(key), "a non-negative integer");
}

std::uint64_t Config::u64(const std::string& key) const {
  return parse_number<std::uint64_t>(key, str(key), "a non-negative integer");
}

double Config::real(const std::string& key) const { return parse_number<double>(key, str(key), "a number"); }

bool Config::flag(const std::string& key) const {
  const std::string& v = str(key);
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError("key '" + key + "': expected a boolean (0/1, true/false), got '" + v + "'");
}

ConfigEcho Config::echo() const {
  ConfigEcho out;
  for (std::size_t i = 0; i < schema_.size(); ++i) out.emplace_back(schema_[i].key, values_[i]);
  return out;
}

void Config::write(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "# effective configuration\n";
  for (std::size_t i = 0; i < schema_.size(); ++i) out << schema_[i].key << " = " << values_[i] << "\n";
}

std::vector<KeySpec> model_keys() {
  return {
      {"model", "desk", "architecture preset: desk, full or tiny"},
      {"latent_size", "", "latent width; empty keeps the preset's"},
      {"sensors", "0", "fuse the 3 sensor readings into the recurrent state"},
      {"actions", "0", "condition the recurrent transition on the one-hot action"},
      {"attention", "0", "local self-attention before the first encoder block"},
      {"relative_attention", "0", "add relative position terms to the attention logits"},
      {"attention_extent", "3", "attention neighborhood side"},
  };
}

CarnetConfig model_config(const Config& cfg) {
  const std::string& preset = cfg.str("model");
  CarnetConfig m;
  if (preset == "desk")
    m = CarnetConfig::desk();
  else if (preset == "full")
    m = CarnetConfig::full();
  else if (preset == "tiny")
    m = CarnetConfig::tiny();
  else
    throw ConfigError("key 'model': expected desk, full or tiny, got '" + preset + "'");
  if (cfg.has("latent_size")) m.latent_size = cfg.size("latent_size");
  m.sensor_dim = cfg.flag("sensors") ? 3 : 0;
  m.action_dim = cfg.flag("actions") ? kActionCount : 0;
  m.use_attention = cfg.flag("attention");
  m.relative_attention = cfg.flag("relative_attention");
  m.attention_extent = cfg.size("attention_extent");
  try {
    m.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("invalid model configuration: ") + e.what());
  }
  return m;
}

ConfigEcho model_echo(const CarnetConfig& m) {
  return {
      {"model.input_size", std::to_string(m.input_size)},
      {"model.latent_size", std::to_string(m.latent_size)},
      {"model.window", std::to_string(m.window)},
      {"model.sensor_dim", std::to_string(m.sensor_dim)},
      {"model.sensor_embed", std::to_string(m.sensor_embed)},
      {"model.action_dim", std::to_string(m.action_dim)},
      {"model.use_attention", m.use_attention ? "1" : "0"},
      {"model.relative_attention", m.relative_attention ? "1" : "0"},
      {"model.attention_extent", std::to_string(m.attention_extent)},
      {"model.attention_channels", std::to_string(m.attention_channels)},
      {"model.channels", join_sizes(m.channels)},
  };
}

CarnetConfig model_from_echo(const ConfigEcho& echo) {
  auto get = [&](const std::string& k) -> const std::string& {
    for (const auto& [key, v] : echo)
      if (key == k) return v;
    throw ConfigError("checkpoint config lacks '" + k + "'");
  };
  auto num = [&](const std::string& k) { return parse_number<std::size_t>(k, get(k), "a non-negative integer"); };
  CarnetConfig m;
  m.input_size = num("model.input_size");
  m.latent_size = num("model.latent_size");
  m.window = num("model.window");
  m.sensor_dim = num("model.sensor_dim");
  m.sensor_embed = num("model.sensor_embed");
  m.action_dim = num("model.action_dim");
  m.use_attention = get("model.use_attention") == "1";
  m.relative_attention = get("model.relative_attention") == "1";
  m.attention_extent = num("model.attention_extent");
  m.attention_channels = num("model.attention_channels");
  m.channels.clear();
  std::stringstream ss(get("model.channels"));
  std::string c;
  while (std::getline(ss, c, ',')) m.channels.push_back(parse_number<std::size_t>("model.channels", c, "integers"));
  m.validate();
  return m;
}

}  // namespace carnet
