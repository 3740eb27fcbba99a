#include <gtest/gtest.h>
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace {

int cli(const std::string& args) {
  const std::string cmd = std::string("'") + CARNET_CLI + "' " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return rc == -1 ? -1 : WEXITSTATUS(rc);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Cli, ConfigErrorsExitWithTwo) {
  EXPECT_EQ(cli("pretrain-ae --out /tmp/carnet_cli_x"), 2);                       // dataset missing
  EXPECT_EQ(cli("generate-data --out /tmp/carnet_cli_x --stesp 10"), 2);          // unknown key
  EXPECT_EQ(cli("generate-data --out /tmp/carnet_cli_x --device cuda"), 2);
  EXPECT_EQ(cli("train-il --dataset /nonexistent --out /tmp/carnet_cli_x"), 2);
  EXPECT_EQ(cli("--help"), 0);
  fs::remove_all("/tmp/carnet_cli_x");
}

TEST(Cli, ConfigFileKeysAreChecked) {
  const fs::path cfg = fs::temp_directory_path() / "carnet_cli_bad.cfg";
  std::ofstream(cfg) << "steps = 50\nsteeps = 3\n";
  EXPECT_EQ(cli("generate-data --out /tmp/carnet_cli_y --config '" + cfg.string() + "'"), 2);
  fs::remove(cfg);
  fs::remove_all("/tmp/carnet_cli_y");
}

TEST(Cli, GenerateDataIsReproducible) {
  const fs::path base = fs::temp_directory_path() / "carnet_cli_gen";
  fs::remove_all(base);
  ASSERT_EQ(cli("generate-data --steps 120 --seed 9 --out '" + (base / "run").string() + "'"), 0);
  fs::rename(base / "run", base / "a");
  ASSERT_EQ(cli("generate-data --steps 120 --seed 9 --out '" + (base / "run").string() + "'"), 0);
  for (const auto& e : fs::recursive_directory_iterator(base / "a")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), base / "a");
    EXPECT_EQ(slurp(e.path()), slurp(base / "run" / rel)) << rel;
  }
  EXPECT_TRUE(fs::exists(base / "a" / "metrics.csv"));
  fs::remove_all(base);
}
