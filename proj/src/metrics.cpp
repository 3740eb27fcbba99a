// SPDX-License-Identifier: Apache-2.0

#include "carnet/metrics.hpp"

#include <charconv>
#include <sstream>
#include <stdexcept>

namespace carnet {

const std::vector<std::string>& metrics_columns() {
  static const std::vector<std::string> cols{
      "schema_version", "run_id",      "phase",       "epoch",    "step",        "loss_total",
      "loss_recon",     "loss_pred",   "loss_latent", "loss_sensor", "accuracy", "reward_mean",
      "reward_std",     "lr",          "wallclock_s"};
  return cols;
}

std::string format_number(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

namespace {

template <typename T>
std::string cell(const std::optional<T>& v) {
  if (!v) return "";
  if constexpr (std::is_floating_point_v<T>)
    return format_number(*v);
  else
    return std::to_string(*v);
}

std::optional<double> opt_double(const std::string& s) {
  if (s.empty()) return std::nullopt;
  double v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::runtime_error("bad number in metrics: " + s);
  return v;
}

std::optional<std::size_t> opt_size(const std::string& s) {
  if (s.empty()) return std::nullopt;
  std::size_t v = 0;
  const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw std::runtime_error("bad integer in metrics: " + s);
  return v;
}

}  // namespace

std::vector<std::string> MetricsRow::cells() const {
  return {std::to_string(kMetricsSchemaVersion),
          run_id,
          phase,
          cell(epoch),
          cell(step),
          cell(loss_total),
          cell(loss_recon),
          cell(loss_pred),
          cell(loss_latent),
          cell(loss_sensor),
          cell(accuracy),
          cell(reward_mean),
          cell(reward_std),
          cell(lr),
          cell(wallclock_s)};
}

MetricsRow MetricsRow::from_cells(const std::vector<std::string>& c) {
  if (c.size() != metrics_columns().size())
    throw std::runtime_error("metrics row has " + std::to_string(c.size()) + " fields, expected " +
                             std::to_string(metrics_columns().size()));
  if (c[0] != std::to_string(kMetricsSchemaVersion))
    throw std::runtime_error("metrics schema version " + c[0] + " is not supported");
  MetricsRow r;
  r.run_id = c[1];
  r.phase = c[2];
  r.epoch = opt_size(c[3]);
  r.step = opt_size(c[4]);
  r.loss_total = opt_double(c[5]);
  r.loss_recon = opt_double(c[6]);
  r.loss_pred = opt_double(c[7]);
  r.loss_latent = opt_double(c[8]);
  r.loss_sensor = opt_double(c[9]);
  r.accuracy = opt_double(c[10]);
  r.reward_mean = opt_double(c[11]);
  r.reward_std = opt_double(c[12]);
  r.lr = opt_double(c[13]);
  r.wallclock_s = opt_double(c[14]);
  return r;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

std::string csv_line(const std::vector<std::string>& cells) {
  std::string out;
  for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + csv_escape(cells[i]);
  return out + "\r\n";
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false, row_open = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += ch;
      }
      continue;
    }
    row_open = true;
    if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      row.push_back(std::move(field));
      field.clear();
    } else if (ch == '\r' || ch == '\n') {
      if (ch == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      row.push_back(std::move(field));
      field.clear();
      rows.push_back(std::move(row));
      row.clear();
      row_open = false;
    } else {
      field += ch;
    }
  }
  if (quoted) throw std::runtime_error("csv: unterminated quoted field");
  if (row_open) {
    row.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

MetricsWriter::MetricsWriter(const std::filesystem::path& path, std::string run_id, bool wallclock)
    : out_(path, std::ios::binary), run_id_(std::move(run_id)), wallclock_(wallclock),
      start_(std::chrono::steady_clock::now()) {
  if (!out_) throw std::runtime_error("cannot write " + path.string());
  out_ << csv_line(metrics_columns());
  out_.flush();
}

void MetricsWriter::write(MetricsRow row) {
  if (row.run_id.empty()) row.run_id = run_id_;
  if (wallclock_)
    row.wallclock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  else
    row.wallclock_s.reset();
  out_ << csv_line(row.cells());
  out_.flush();
  if (!out_) throw std::runtime_error("metrics write failed");
}

std::vector<MetricsRow> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const auto rows = parse_csv(ss.str());
  if (rows.empty() || rows[0] != metrics_columns())
    throw std::runtime_error(path.string() + ": header does not match metrics schema version " +
                             std::to_string(kMetricsSchemaVersion));
  std::vector<MetricsRow> out;
  for (std::size_t i = 1; i < rows.size(); ++i) out.push_back(MetricsRow::from_cells(rows[i]));
  return out;
}

}  // namespace carnet
