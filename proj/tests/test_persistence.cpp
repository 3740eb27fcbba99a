#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "carnet/checkpoint.hpp"
#include "carnet/config.hpp"
#include "carnet/metrics.hpp"

using namespace carnet;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("carnet_test_" + name);
  fs::remove_all(p);
  return p;
}

template <typename F>
std::string error_of(F&& f) {
  try {
    f();
  } catch (const std::exception& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto dir = scratch("ckpt_a"), dir2 = scratch("ckpt_b");
  Rng rng(1);
  Carnet<float> m(CarnetConfig::desk(), rng);
  const ConfigEcho cfg = model_echo(m.config());
  save_checkpoint(dir, "ae", cfg, m.state());

  Rng other(2);
  Carnet<float> n(CarnetConfig::desk(), other);
  const auto man = load_checkpoint(dir, n.state());
  EXPECT_EQ(man.kind, "ae");
  EXPECT_EQ(man.version, kCheckpointVersion);
  EXPECT_EQ(model_from_echo(man.config).channels, m.config().channels);
  const auto a = m.state(), b = n.state();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(*a[i].tensor, *b[i].tensor) << a[i].name;

  save_checkpoint(dir2, "ae", man.config, n.state());
  EXPECT_EQ(slurp(dir / "manifest.txt"), slurp(dir2 / "manifest.txt"));
  EXPECT_EQ(slurp(dir / "payload.bin"), slurp(dir2 / "payload.bin"));
  fs::remove_all(dir);
  fs::remove_all(dir2);
}

TEST(Checkpoint, CorruptByteNamesTheParameter) {
  const auto dir = scratch("ckpt_corrupt");
  Rng rng(1);
  Carnet<float> m(CarnetConfig::tiny(), rng);
  save_checkpoint(dir, "carnet", {}, m.state());
  const auto man = read_manifest(dir);
  const auto& victim = man.entries.at(3);
  {
    std::fstream f(dir / "payload.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekg(std::streamoff(victim.offset + 1));
    char c = 0;
    f.read(&c, 1);
    c = char(c ^ 0x5a);
    f.seekp(std::streamoff(victim.offset + 1));
    f.write(&c, 1);
  }
  const auto msg = error_of([&] { load_checkpoint(dir, m.state()); });
  EXPECT_NE(msg.find("checksum"), std::string::npos) << msg;
  EXPECT_NE(msg.find(victim.name), std::string::npos) << msg;
  fs::remove_all(dir);
}

TEST(Checkpoint, ShapeMismatchNamesBothShapes) {
  const auto dir = scratch("ckpt_shape");
  Rng rng(1);
  Carnet<float> m(CarnetConfig::desk(), rng);
  save_checkpoint(dir, "ae", {}, m.state());
  auto cfg = CarnetConfig::desk();
  cfg.latent_size = 16;
  Carnet<float> small(cfg, rng);
  const auto msg = error_of([&] { load_checkpoint(dir, small.state()); });
  EXPECT_NE(msg.find("shape mismatch"), std::string::npos) << msg;
  EXPECT_NE(msg.find("(32,"), std::string::npos) << msg;
  EXPECT_NE(msg.find("(16,"), std::string::npos) << msg;
  fs::remove_all(dir);
}

TEST(Checkpoint, TruncatedPayloadAndVersionMismatch) {
  const auto dir = scratch("ckpt_trunc");
  Rng rng(1);
  Carnet<float> m(CarnetConfig::tiny(), rng);
  save_checkpoint(dir, "carnet", {}, m.state());
  const auto size = fs::file_size(dir / "payload.bin");
  fs::resize_file(dir / "payload.bin", size - 8);
  EXPECT_NE(error_of([&] { load_checkpoint(dir, m.state()); }).find("truncated"), std::string::npos);

  save_checkpoint(dir, "carnet", {}, m.state());
  std::string manifest = slurp(dir / "manifest.txt");
  manifest.replace(manifest.find("version = 1"), 11, "version = 2");
  std::ofstream(dir / "manifest.txt", std::ios::binary) << manifest;
  EXPECT_THROW(read_manifest(dir), CheckpointError);
  fs::remove_all(dir);
}

TEST(Checkpoint, MissingAndExtraTensors) {
  const auto dir = scratch("ckpt_missing");
  Rng rng(1);
  Carnet<float> m(CarnetConfig::tiny(), rng);
  const auto full = m.state();
  auto partial = full;
  partial.pop_back();
  save_checkpoint(dir, "carnet", {}, partial);
  EXPECT_NE(error_of([&] { load_checkpoint(dir, full); }).find("no tensor"), std::string::npos);
  save_checkpoint(dir, "carnet", {}, full);
  EXPECT_NE(error_of([&] { load_checkpoint(dir, partial); }).find("does not exist"), std::string::npos);
  fs::remove_all(dir);
}

TEST(Config, ParsesCommentsAndRejectsUnknownKeys) {
  const auto echo = parse_config_text("# header\nseed = 7  # trailing\n\nout= runs/a\n", "t.cfg");
  ASSERT_EQ(echo.size(), 2u);
  EXPECT_EQ(echo[0], (std::pair<std::string, std::string>{"seed", "7"}));
  EXPECT_EQ(echo[1].second, "runs/a");
  EXPECT_THROW(parse_config_text("just words\n", "t.cfg"), ConfigError);

  Config cfg({{"seed", "0", "seed"}, {"dataset", "", "dataset directory", true}});
  const auto msg = error_of([&] { cfg.set("sede", "1"); });
  EXPECT_NE(msg.find("sede"), std::string::npos);
  EXPECT_NE(msg.find("valid keys: seed, dataset"), std::string::npos);
  const auto missing = error_of([&] { cfg.check_required(); });
  EXPECT_NE(missing.find("dataset"), std::string::npos);
  cfg.set("seed", "x");
  EXPECT_THROW(cfg.u64("seed"), ConfigError);
}

TEST(Config, ModelPresetsAndEchoRoundTrip) {
  auto keys = model_keys();
  Config cfg(keys);
  cfg.set("latent_size", "16");
  cfg.set("sensors", "1");
  const auto m = model_config(cfg);
  EXPECT_EQ(m.latent_size, 16u);
  EXPECT_EQ(m.sensor_dim, 3u);
  const auto back = model_from_echo(model_echo(m));
  EXPECT_EQ(back.latent_size, m.latent_size);
  EXPECT_EQ(back.channels, m.channels);
  EXPECT_EQ(back.sensor_dim, m.sensor_dim);
  cfg.set("model", "huge");
  EXPECT_THROW(model_config(cfg), ConfigError);
}

TEST(Metrics, CsvEscapingAndParsing) {
  EXPECT_EQ(csv_escape("plain"), "plain");
  EXPECT_EQ(csv_escape("a,b"), "\"a,b\"");
  EXPECT_EQ(csv_escape("say \"hi\""), "\"say \"\"hi\"\"\"");
  const auto rows = parse_csv("a,\"b,c\",\"d\"\"e\"\r\n1,,3\n\"multi\nline\",x,y\r\n");
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0], (std::vector<std::string>{"a", "b,c", "d\"e"}));
  EXPECT_EQ(rows[1][1], "");
  EXPECT_EQ(rows[2][0], "multi\nline");
}

TEST(Metrics, RowsRoundTripWithBlanks) {
  const auto path = fs::temp_directory_path() / "carnet_test_metrics.csv";
  {
    MetricsWriter w(path, "run,1");
    MetricsRow r;
    r.phase = "il.s0.train";
    r.epoch = 3;
    r.loss_total = 0.1;
    r.accuracy = 0.9375;
    w.write(r);
    MetricsRow q;
    q.phase = "rl.train";
    q.step = 1000;
    q.reward_mean = -12.5;
    w.write(q);
  }
  const auto text = slurp(path);
  const auto table = parse_csv(text);
  ASSERT_EQ(table.size(), 3u);
  EXPECT_EQ(table[0], metrics_columns());
  const auto rows = read_metrics(path);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].run_id, "run,1");
  EXPECT_EQ(rows[0].loss_total, 0.1);
  EXPECT_FALSE(rows[0].loss_recon.has_value());
  EXPECT_FALSE(rows[0].wallclock_s.has_value());
  EXPECT_EQ(rows[1].step, 1000u);
  EXPECT_FALSE(rows[1].epoch.has_value());
  for (const auto& cell : table[2])
    if (!cell.empty()) EXPECT_NE(cell, "0") << "blank fields are never zero-filled";
  fs::remove(path);
}

TEST(Metrics, ShortestRoundTripNumbers) {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 12345678.0}) EXPECT_EQ(std::stod(format_number(v)), v);
  EXPECT_EQ(format_number(0.5), "0.5");
}
