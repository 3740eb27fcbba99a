// SPDX-License-Identifier: Apache-2.0
//
// carnet: dataset generation, training, evaluation and metrics export.
//
// Every subcommand reads `key = value` settings from --config, then applies
// per-key flag overrides (--epochs 5, --seed 3, ...). Exit status: 0 ok,
// 2 configuration error, 1 runtime failure.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>

#include "carnet/checkpoint.hpp"
#include "carnet/config.hpp"
#include "carnet/dataset.hpp"
#include "carnet/metrics.hpp"
#include "carnet/training.hpp"

namespace fs = std::filesystem;
using namespace carnet;

namespace {

// Keys every subcommand accepts.
std::vector<KeySpec> common_keys(bool out_required = true) {
  return {
      {"out", "", "output directory", out_required},
      {"seed", "0", "base random seed"},
      {"run_id", "", "identifier written to every metrics row; defaults to <command>-s<seed>"},
      {"wallclock", "0", "record wall-clock seconds in metrics (breaks byte-identical reruns)"},
  };
}

std::vector<KeySpec> concat(std::vector<KeySpec> a, const std::vector<KeySpec>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

struct Command {
  std::string name;
  std::string help;
  std::vector<KeySpec> keys;
  std::function<void(const Config&)> run;
};

std::string run_id(const Config& c, const std::string& command) {
  return c.has("run_id") ? c.str("run_id") : command + "-s" + c.str("seed");
}

fs::path prepare_out(const Config& c) {
  const fs::path out = c.str("out");
  fs::create_directories(out);
  c.write(out / "config.txt");
  return out;
}

Dataset load_dataset(const Config& c) {
  const fs::path dir = c.str("dataset");
  if (!fs::exists(dir / "dataset.txt")) throw ConfigError("key 'dataset': no dataset at " + dir.string());
  return read_dataset(dir);
}

ConfigEcho checkpoint_echo(const Config& c, const CarnetConfig& m) {
  ConfigEcho e = c.echo();
  for (auto& kv : model_echo(m)) e.push_back(kv);
  return e;
}

// A checkpoint's backbone plus its controller head when it has one.
struct Bundle {
  CheckpointManifest manifest;
  Carnet<float> model;
  std::optional<Controller<float>> head;
};

Bundle load_bundle(const fs::path& dir) {
  Bundle b;
  const CheckpointManifest man = read_manifest(dir);
  Rng rng(0);
  b.model = Carnet<float>(model_from_echo(man.config), rng);
  auto state = b.model.state();
  if (man.kind == "il" || man.kind == "rl") {
    b.head.emplace(b.model.config().latent_size, rng);
    for (auto& e : b.head->state()) state.push_back(e);
  }
  b.manifest = load_checkpoint(dir, state);
  return b;
}

std::vector<StateEntry<float>> bundle_state(Carnet<float>& model, Controller<float>& head) {
  auto s = model.state();
  for (auto& e : head.state()) s.push_back(e);
  return s;
}

TrainConfig train_config(const Config& c, const std::string& cap_key) {
  TrainConfig t;
  t.epochs = c.size("epochs");
  t.batch_size = c.size("batch_size");
  t.lr = c.real("lr");
  t.lr_patience = c.size("lr_patience");
  t.early_stop = c.size("early_stop");
  t.max_windows = c.size(cap_key);
  t.seed = c.u64("seed");
  const std::string& loss = c.str("image_loss");
  if (loss == "mse")
    t.loss.image_loss = ImageLoss::mse;
  else if (loss != "ms_ssim")
    throw ConfigError("key 'image_loss': expected ms_ssim or mse, got '" + loss + "'");
  if (t.batch_size == 0) throw ConfigError("key 'batch_size' must be positive");
  return t;
}

std::vector<KeySpec> optimizer_keys(const std::string& epochs, const std::string& cap_key, const std::string& cap) {
  return {
      {"epochs", epochs, "training epochs"},
      {"batch_size", "64", "windows (or frames) per step"},
      {"lr", "0.001", "Adam learning rate"},
      {"lr_patience", "5", "epochs without validation improvement before the rate halves"},
      {"early_stop", "0", "epochs without improvement before stopping; 0 disables"},
      {cap_key, cap, "cap on training samples per epoch; 0 uses all"},
      {"image_loss", "ms_ssim", "reconstruction loss: ms_ssim or mse"},
  };
}

// ---------------------------------------------------------------------------

void cmd_generate(const Config& c) {
  DataConfig d;
  d.total_steps = c.size("steps");
  d.episode_steps = c.size("episode_steps");
  d.explore_prob = c.real("explore_prob");
  d.window = c.size("window");
  d.train_frac = c.real("train_frac");
  d.val_frac = c.real("val_frac");
  d.env.obstacle_prob = c.real("obstacle_prob");
  d.env.max_curvature = c.real("max_curvature");
  if (d.train_frac < 0 || d.val_frac < 0 || d.train_frac + d.val_frac > 1)
    throw ConfigError("train_frac and val_frac must be non-negative and sum to at most 1");
  if (d.total_steps < d.window) throw ConfigError("key 'steps' must be at least 'window'");
  const fs::path out = prepare_out(c);
  const Dataset data = generate_dataset(d, c.u64("seed"));
  write_dataset(data, out);
  MetricsWriter m(out / "metrics.csv", run_id(c, "generate-data"), c.flag("wallclock"));
  for (Split s : {Split::train, Split::val, Split::test}) {
    MetricsRow r;
    r.phase = std::string("generate.") + split_name(s) + ".majority";
    r.step = data.indices(s).size();
    r.accuracy = majority_baseline(data, s);
    m.write(r);
  }
  std::printf("wrote %zu episodes, %zu steps, %zu windows to %s\n", data.episodes.size(), data.steps(),
              data.windows.size(), out.string().c_str());
}

void log_epoch(MetricsWriter& m, const std::string& phase, const EpochStats& s) {
  MetricsRow r;
  r.phase = phase + ".train";
  r.epoch = s.epoch;
  r.loss_total = s.total;
  r.loss_recon = s.recon;
  r.loss_pred = s.pred;
  r.loss_latent = s.latent;
  r.loss_sensor = s.sensor;
  r.accuracy = s.accuracy;
  r.lr = s.lr;
  m.write(r);
  if (s.val_total) {
    MetricsRow v;
    v.phase = phase + ".val";
    v.epoch = s.epoch;
    if (s.accuracy)
      v.accuracy = 1.0 - *s.val_total;
    else
      v.loss_total = s.val_total;
    m.write(v);
  }
  std::printf("%s epoch %zu loss %.5f%s\n", phase.c_str(), s.epoch, s.total,
              s.val_total ? (" val " + format_number(*s.val_total)).c_str() : "");
  std::fflush(stdout);
}

Carnet<float> initial_model(const Config& c, const Dataset& data, const std::string& init_key) {
  if (c.has(init_key)) {
    Bundle b = load_bundle(c.str(init_key));
    if (b.model.config().window != data.window || b.model.config().input_size != data.image_size)
      throw ConfigError("key '" + init_key + "': checkpoint window/input size does not match the dataset");
    return std::move(b.model);
  }
  CarnetConfig mc = model_config(c);
  mc.window = data.window;
  if (mc.input_size != data.image_size)
    throw ConfigError("model input size " + std::to_string(mc.input_size) + " does not match dataset frames of " +
                      std::to_string(data.image_size));
  Rng rng(c.u64("seed"), 0x6d6f64656c /* "model" */);
  return Carnet<float>(mc, rng);
}

void cmd_pretrain(const Config& c) {
  const TrainConfig t = train_config(c, "max_frames");
  const Dataset data = load_dataset(c);
  Carnet<float> model = initial_model(c, data, "init");
  const fs::path out = prepare_out(c);
  MetricsWriter m(out / "metrics.csv", run_id(c, "pretrain-ae"), c.flag("wallclock"));
  pretrain_autoencoder(model, data, t, [&](const EpochStats& s) { log_epoch(m, "pretrain-ae", s); });
  save_checkpoint(out / "checkpoint", "ae", checkpoint_echo(c, model.config()), model.state());
}

void cmd_train_carnet(const Config& c) {
  const TrainConfig t = train_config(c, "max_windows");
  const Dataset data = load_dataset(c);
  Carnet<float> model = initial_model(c, data, "init");
  const fs::path out = prepare_out(c);
  MetricsWriter m(out / "metrics.csv", run_id(c, "train-carnet"), c.flag("wallclock"));
  train_ensemble(model, data, data.indices(Split::train), data.indices(Split::val), t,
                 [&](const EpochStats& s) { log_epoch(m, "train-carnet", s); });
  save_checkpoint(out / "checkpoint", "carnet", checkpoint_echo(c, model.config()), model.state());
}

void cmd_train_il(const Config& c) {
  ImitationConfig ic;
  ic.arm = [&] {
    try {
      return parse_il_arm(c.str("arm"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("key 'arm': ") + e.what());
    }
  }();
  ic.epochs = c.size("epochs");
  ic.batch_size = c.size("batch_size");
  ic.lr = c.real("lr");
  ic.lr_patience = c.size("lr_patience");
  ic.max_windows = c.size("max_windows");
  if (ic.batch_size == 0) throw ConfigError("key 'batch_size' must be positive");
  if (ic.arm == IlArm::frozen_ae && !c.has("backbone"))
    throw ConfigError("missing required key 'backbone' (arm frozen_ae needs a pretrained autoencoder checkpoint)");
  const std::size_t seeds = c.size("seeds");
  if (seeds == 0) throw ConfigError("key 'seeds' must be positive");
  const Dataset data = load_dataset(c);
  const Carnet<float> backbone = initial_model(c, data, "backbone");
  const fs::path out = prepare_out(c);
  MetricsWriter m(out / "metrics.csv", run_id(c, "train-il"), c.flag("wallclock"));
  std::vector<double> acc;
  for (std::size_t k = 0; k < seeds; ++k) {
    ic.seed = c.u64("seed") + k;
    const std::string phase = "il.s" + std::to_string(ic.seed);
    ImitationResult r = train_imitation(backbone, data, ic, [&](const EpochStats& s) { log_epoch(m, phase, s); });
    MetricsRow row;
    row.phase = phase + ".test";
    row.accuracy = r.test_accuracy;
    m.write(row);
    acc.push_back(r.test_accuracy);
    std::printf("seed %llu test accuracy %.4f\n", static_cast<unsigned long long>(ic.seed), r.test_accuracy);
    ConfigEcho echo = checkpoint_echo(c, r.backbone.config());
    echo.emplace_back("il.seed", std::to_string(ic.seed));
    save_checkpoint(out / ("seed_" + std::to_string(k)) / "checkpoint", "il", echo,
                    bundle_state(r.backbone, r.controller));
  }
  std::vector<double> pct;
  for (double a : acc) pct.push_back(100.0 * a);
  const MeanStd s = mean_std(pct);
  MetricsRow row;
  row.phase = "il.summary";
  row.accuracy = s.mean / 100.0;
  m.write(row);
  std::printf("arm %s test accuracy %s %% over %zu seeds (majority baseline %.2f %%)\n", il_arm_name(ic.arm),
              format_mean_std(s).c_str(), seeds, 100.0 * majority_baseline(data, Split::test));
}

DqnConfig dqn_config(const Config& c) {
  DqnConfig d;
  d.training_steps = c.size("steps");
  d.buffer_size = c.size("buffer");
  d.lr = c.real("lr");
  d.batch_size = c.size("batch_size");
  d.n_step = c.size("n_step");
  d.prioritized = c.flag("prioritized");
  d.alpha = c.real("alpha");
  d.beta0 = c.real("beta0");
  d.gamma = c.real("gamma");
  d.eps_start = c.real("eps_start");
  d.eps_end = c.real("eps_end");
  d.eps_fraction = c.real("eps_fraction");
  d.target_sync = c.size("target_sync");
  d.learning_starts = c.size("learning_starts");
  d.reward_scale = c.real("reward_scale");
  d.eval_episodes = c.size("eval_episodes");
  d.select_every = c.size("select_every");
  d.select_episodes = c.size("select_episodes");
  d.seed = c.u64("seed");
  if (d.n_step != 1) throw ConfigError("key 'n_step': only 1-step targets are supported");
  if (d.buffer_size == 0 || d.batch_size == 0 || d.target_sync == 0)
    throw ConfigError("buffer, batch_size and target_sync must be positive");
  return d;
}

void write_rewards(MetricsWriter& m, const std::string& phase, const EpisodeStats& st) {
  const MeanStd s = st.summary();
  MetricsRow r;
  r.phase = phase;
  r.step = st.rewards.size();
  r.reward_mean = s.mean;
  r.reward_std = s.std;
  m.write(r);
}

void cmd_train_rl(const Config& c) {
  const DqnConfig d = dqn_config(c);
  Bundle b = load_bundle(c.str("backbone"));
  RewardConfig reward;
  reward.negate_lateral = c.flag("negate_lateral");
  EnvConfig env;
  if (b.model.config().input_size != env.image_size)
    throw ConfigError("backbone input size does not match the environment's frames");
  const fs::path out = prepare_out(c);
  MetricsWriter m(out / "metrics.csv", run_id(c, "train-rl"), c.flag("wallclock"));
  DqnResult r = train_dqn(b.model, env, reward, d, [&](std::size_t step, double td, double ep) {
    MetricsRow row;
    row.phase = "rl.train";
    row.step = step;
    row.loss_total = td;
    row.reward_mean = ep;
    m.write(row);
    std::printf("step %zu td %.5f last episode reward %.2f\n", step, td, ep);
    std::fflush(stdout);
  });
  for (const auto& [step, value] : r.selection) {
    MetricsRow row;
    row.phase = step == r.selected_step ? "rl.select.best" : "rl.select";
    row.step = step;
    row.reward_mean = value;
    m.write(row);
  }
  write_rewards(m, "rl.eval.greedy", r.greedy);
  write_rewards(m, "rl.eval.random", r.random);
  std::printf("greedy reward %s, random reward %s over %zu episodes\n", format_mean_std(r.greedy.summary()).c_str(),
              format_mean_std(r.random.summary()).c_str(), d.eval_episodes);
  save_checkpoint(out / "checkpoint", "rl", checkpoint_echo(c, b.model.config()), bundle_state(b.model, r.q));
}

// A directory holding one checkpoint, or seed_* subdirectories of them.
std::vector<fs::path> checkpoint_dirs(const fs::path& p) {
  if (fs::exists(p / "manifest.txt")) return {p};
  if (fs::exists(p / "checkpoint" / "manifest.txt")) return {p / "checkpoint"};
  std::vector<fs::path> out;
  if (fs::is_directory(p))
    for (const auto& e : fs::directory_iterator(p))
      if (e.is_directory() && e.path().filename().string().rfind("seed_", 0) == 0 &&
          fs::exists(e.path() / "checkpoint" / "manifest.txt"))
        out.push_back(e.path() / "checkpoint");
  std::sort(out.begin(), out.end());
  if (out.empty()) throw ConfigError("key 'checkpoint': no checkpoint found at " + p.string());
  return out;
}

void cmd_eval(const Config& c) {
  const auto dirs = checkpoint_dirs(c.str("checkpoint"));
  const Split split = [&] {
    try {
      return parse_split(c.str("split"));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("key 'split': ") + e.what());
    }
  }();
  std::optional<MetricsWriter> m;
  if (c.has("out")) {
    const fs::path out = prepare_out(c);
    m.emplace(out / "metrics.csv", run_id(c, "eval"), c.flag("wallclock"));
  }
  std::optional<Dataset> data;
  auto need_data = [&]() -> const Dataset& {
    if (!data) {
      if (!c.has("dataset")) throw ConfigError("missing required key 'dataset' (needed to evaluate this checkpoint)");
      data = load_dataset(c);
    }
    return *data;
  };

  std::vector<double> values;
  std::string kind;
  for (const auto& dir : dirs) {
    Bundle b = load_bundle(dir);
    if (!kind.empty() && b.manifest.kind != kind) throw ConfigError("checkpoints of mixed kinds under one path");
    kind = b.manifest.kind;
    MetricsRow row;
    row.phase = "eval." + kind + "." + dir.parent_path().filename().string();
    if (kind == "il") {
      const Dataset& d = need_data();
      const IlArm arm = parse_il_arm(b.manifest.get("arm"));
      const double acc = imitation_accuracy(b.model, *b.head, d, d.indices(split), arm);
      values.push_back(100.0 * acc);
      row.accuracy = acc;
    } else if (kind == "rl") {
      RewardConfig reward;
      reward.negate_lateral = b.manifest.get("negate_lateral") == "1";
      Controller<float>& q = *b.head;
      const EpisodeStats st = run_episodes(
          b.model, [&](const std::vector<float>& f, Rng&) { return greedy_action(q, f); }, EnvConfig{}, reward,
          c.size("episodes"), mix64(c.u64("seed") ^ 0x6576616cULL));
      const MeanStd s = st.summary();
      values.push_back(s.mean);
      row.reward_mean = s.mean;
      row.reward_std = s.std;
    } else {
      if (kind != "carnet") throw ConfigError("cannot evaluate a checkpoint of kind '" + kind + "'");
      const Dataset& d = need_data();
      const EpochStats s = evaluate_ensemble(b.model, d, d.indices(split), TrainConfig{});
      values.push_back(s.total);
      row.loss_total = s.total;
      row.loss_recon = s.recon;
      row.loss_pred = s.pred;
      row.loss_latent = s.latent;
      row.loss_sensor = s.sensor;
    }
    if (m) m->write(row);
  }
  const MeanStd s = mean_std(values);
  if (kind == "il")
    std::printf("accuracy %s %% (n=%zu, split=%s)\n", format_mean_std(s).c_str(), values.size(), split_name(split));
  else if (kind == "rl")
    std::printf("reward %s (n=%zu checkpoints, %zu episodes each)\n", format_mean_std(s).c_str(), values.size(),
                c.size("episodes"));
  else
    std::printf("loss %s (n=%zu, split=%s)\n", format_mean_std(s, 5).c_str(), values.size(), split_name(split));
}

void cmd_export(const Config& c) {
  std::vector<fs::path> files;
  std::stringstream ss(c.str("inputs"));
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    const fs::path p = item;
    if (fs::is_directory(p)) {
      std::vector<fs::path> found;
      for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file() && e.path().filename() == "metrics.csv") found.push_back(e.path());
      std::sort(found.begin(), found.end());
      files.insert(files.end(), found.begin(), found.end());
    } else if (fs::exists(p)) {
      files.push_back(p);
    } else {
      throw ConfigError("key 'inputs': no such file or directory: " + item);
    }
  }
  if (files.empty()) throw ConfigError("key 'inputs': no metrics files found");
  const fs::path out = c.str("out");
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  std::ofstream o(out, std::ios::binary);
  if (!o) throw std::runtime_error("cannot write " + out.string());
  o << csv_line(metrics_columns());
  std::size_t rows = 0;
  for (const auto& f : files)
    for (const auto& r : read_metrics(f)) {
      if (c.has("phase") && r.phase.rfind(c.str("phase"), 0) != 0) continue;
      o << csv_line(r.cells());
      ++rows;
    }
  std::printf("exported %zu rows from %zu files to %s\n", rows, files.size(), out.string().c_str());
}

std::vector<Command> commands() {
  std::vector<Command> cmds;
  cmds.push_back({"generate-data", "Roll out the autopilot and write an episode dataset",
                  concat(common_keys(),
                         {
                             {"steps", "20000", "total environment steps"},
                             {"episode_steps", "250", "maximum steps per episode"},
                             {"explore_prob", "0.2", "chance of applying a random action instead of the autopilot's"},
                             {"window", "4", "window length T"},
                             {"train_frac", "0.7", "share of windows in the train split"},
                             {"val_frac", "0.15", "share of windows in the val split"},
                             {"obstacle_prob", "0.05", "obstacle chance per road segment"},
                             {"max_curvature", "0.02", "largest road curvature (1/m)"},
                         }),
                  cmd_generate});
  cmds.push_back({"pretrain-ae", "Train encoder and decoder on single frames",
                  concat(concat(concat(common_keys(), {{"dataset", "", "dataset directory", true},
                                                       {"init", "", "checkpoint to start from"}}),
                                optimizer_keys("10", "max_frames", "4000")),
                         model_keys()),
                  cmd_pretrain});
  cmds.push_back({"train-carnet", "Jointly train autoencoder and GRU on windows",
                  concat(concat(concat(common_keys(), {{"dataset", "", "dataset directory", true},
                                                       {"init", "", "checkpoint to start from (e.g. pretrain-ae)"}}),
                                optimizer_keys("20", "max_windows", "0")),
                         model_keys()),
                  cmd_train_carnet});
  cmds.push_back({"train-il", "Imitation learning of the controller over several seeds",
                  concat(concat(common_keys(),
                                {
                                    {"dataset", "", "dataset directory", true},
                                    {"backbone", "", "checkpoint providing the backbone; empty trains from scratch"},
                                    {"arm", "joint", "joint, head_only or frozen_ae"},
                                    {"seeds", "5", "number of consecutive seeds starting at 'seed'"},
                                    {"epochs", "20", "training epochs"},
                                    {"batch_size", "32", "windows per step"},
                                    {"lr", "0.002", "Adam learning rate"},
                                    {"lr_patience", "3", "epochs without validation gain before the rate halves"},
                                    {"max_windows", "5000", "training windows used; 0 uses all"},
                                }),
                         model_keys()),
                  cmd_train_il});
  cmds.push_back({"train-rl", "DQN on frozen backbone features",
                  concat(common_keys(),
                         {
                             {"backbone", "", "sensor- and action-conditioned carnet checkpoint", true},
                             {"steps", "50000", "environment steps"},
                             {"buffer", "5000", "replay capacity"},
                             {"lr", "0.005", "Adam learning rate"},
                             {"batch_size", "64", "transitions per update"},
                             {"n_step", "1", "TD horizon (only 1 is supported)"},
                             {"prioritized", "1", "proportional prioritized replay"},
                             {"alpha", "0.6", "priority exponent"},
                             {"beta0", "0.4", "initial importance-sampling exponent"},
                             {"gamma", "0.99", "discount"},
                             {"eps_start", "1.0", "initial exploration rate"},
                             {"eps_end", "0.05", "final exploration rate"},
                             {"eps_fraction", "0.2", "share of steps over which exploration decays"},
                             {"target_sync", "1000", "steps between target network copies"},
                             {"learning_starts", "1000", "steps collected before updates begin"},
                             {"reward_scale", "0.1", "reward multiplier inside the TD target"},
                             {"eval_episodes", "20", "greedy and random evaluation episodes"},
                             {"select_every", "5000", "steps between greedy checks that pick the kept Q-network; 0 keeps the last"},
                             {"select_episodes", "5", "episodes per greedy check, on seeds disjoint from evaluation"},
                             {"negate_lateral", "0", "flip the sign of the lateral-acceleration reward term"},
                         }),
                  cmd_train_rl});
  cmds.push_back({"eval", "Evaluate checkpoints (seed_* directories are pooled)",
                  concat(common_keys(false),
                         {
                             {"checkpoint", "", "checkpoint directory or a train-il output directory", true},
                             {"dataset", "", "dataset directory (imitation and carnet checkpoints)"},
                             {"split", "test", "train, val or test"},
                             {"episodes", "20", "episodes per rl checkpoint"},
                         }),
                  cmd_eval});
  cmds.push_back({"export-metrics", "Merge metrics files into one CSV with the fixed header",
                  {
                      {"inputs", "", "comma-separated metrics files or run directories", true},
                      {"out", "", "output CSV path", true},
                      {"phase", "", "keep only rows whose phase starts with this prefix"},
                  },
                  cmd_export});
  return cmds;
}

int threads_from_env() {
  const char* v = std::getenv("CARNET_THREADS");
  if (!v || !*v) return 1;
  char* end = nullptr;
  const long n = std::strtol(v, &end, 10);
  if (*end || n < 1) throw ConfigError(std::string("CARNET_THREADS must be a positive integer, got '") + v + "'");
  return int(n);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CARNet: dynamic autoencoder, driving data and training harnesses"};
  app.require_subcommand(1);
  const auto cmds = commands();
  std::string config_path, device = "cpu";
  std::map<std::string, std::map<std::string, std::optional<std::string>>> flags;
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const auto& cmd : cmds) {
    CLI::App* sub = app.add_subcommand(cmd.name, cmd.help);
    sub->add_option("--config", config_path, "key = value settings file");
    sub->add_option("--device", device, "compute device (only cpu)");
    auto& f = flags[cmd.name];
    for (const auto& k : cmd.keys) {
      f[k.key];
      sub->add_option("--" + k.key, f[k.key], k.help + (k.default_value.empty() ? "" : " [" + k.default_value + "]"));
    }
    subs.emplace_back(sub, &cmd);
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    if (code == 0) return 0;
    for (const auto& [sub, cmd] : subs)
      if (sub->parsed()) {
        std::string valid;
        for (const auto& k : cmd->keys) valid += (valid.empty() ? "" : ", ") + k.key;
        std::fprintf(stderr, "valid keys for %s: %s\n", cmd->name.c_str(), valid.c_str());
      }
    return 2;
  }
  for (const auto& [sub, cmd] : subs) {
    if (!sub->parsed()) continue;
    try {
      if (device != "cpu") throw ConfigError("--device: only 'cpu' is supported, got '" + device + "'");
      threads_from_env();  // validated; training runs on one thread
      Config cfg(cmd->keys);
      if (!config_path.empty()) cfg.load_file(config_path);
      for (const auto& [k, v] : flags[cmd->name])
        if (v) cfg.set(k, *v);
      cfg.check_required();
      cmd->run(cfg);
    } catch (const ConfigError& e) {
      std::fprintf(stderr, "carnet %s: config error: %s\n", cmd->name.c_str(), e.what());
      return 2;
    } catch (const std::exception& e) {
      std::fprintf(stderr, "carnet %s: error: %s\n", cmd->name.c_str(), e.what());
      return 1;
    }
  }
  return 0;
}
