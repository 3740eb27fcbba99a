// SPDX-License-Identifier: Apache-2.0
//
// Metrics CSV: fixed, versioned header; one row per logging event; absent
// values are left blank.

#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace carnet {

inline constexpr int kMetricsSchemaVersion = 1;

/// Column names in file order.
const std::vector<std::string>& metrics_columns();

struct MetricsRow {
  std::string run_id;
  std::string phase;
  std::optional<std::size_t> epoch, step;
  std::optional<double> loss_total, loss_recon, loss_pred, loss_latent, loss_sensor;
  std::optional<double> accuracy, reward_mean, reward_std;
  std::optional<double> lr;
  std::optional<double> wallclock_s;

  std::vector<std::string> cells() const;
  static MetricsRow from_cells(const std::vector<std::string>& cells);
};

/// RFC-4180 quoting, applied only when needed.
std::string csv_escape(const std::string& s);
std::string csv_line(const std::vector<std::string>& cells);
/// Parses RFC-4180 CSV text (quoted fields, doubled quotes, CRLF or LF).
std::vector<std::vector<std::string>> parse_csv(const std::string& text);

/// Shortest round-trip text for a double.
std::string format_number(double v);

class MetricsWriter {
 public:
  /// Wall-clock time is recorded only when `wallclock` is set; leaving it
  /// off keeps seeded runs byte-identical.
  MetricsWriter(const std::filesystem::path& path, std::string run_id, bool wallclock = false);
  void write(MetricsRow row);

 private:
  std::ofstream out_;
  std::string run_id_;
  bool wallclock_;
  std::chrono::steady_clock::time_point start_;
};

/// Reads a metrics file, checking the header against the current schema.
std::vector<MetricsRow> read_metrics(const std::filesystem::path& path);

}  // namespace carnet
