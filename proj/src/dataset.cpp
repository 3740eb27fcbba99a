// SPDX-License-Identifier: Apache-2.0

#include "carnet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace carnet {

namespace fs = std::filesystem;

const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + s + "' (expected train, val or test)");
}

std::uint8_t quantize_pixel(float v) {
  return std::uint8_t(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

std::size_t Dataset::steps() const {
  std::size_t n = 0;
  for (const auto& e : episodes) n += e.length;
  return n;
}

std::vector<std::size_t> Dataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < windows.size(); ++i)
    if (windows[i].split == s) out.push_back(i);
  return out;
}

int Dataset::window_label(std::size_t w) const {
  const auto& r = windows.at(w);
  return episodes[r.episode].labels[r.start + window - 1];
}

std::array<std::size_t, kActionCount> Dataset::label_counts(Split s) const {
  std::array<std::size_t, kActionCount> c{};
  for (std::size_t i = 0; i < windows.size(); ++i)
    if (windows[i].split == s) ++c[std::size_t(window_label(i))];
  return c;
}

WindowBatch<float> Dataset::batch(const std::vector<std::size_t>& ids, bool sensors, bool actions) const {
  const std::size_t B = ids.size(), T = window, S = image_size, plane = S * S;
  WindowBatch<float> b;
  b.frames = Tensor<float>(Shape{B, T, 1, S, S});
  if (sensors) b.sensors = Tensor<float>(Shape{B, T, 3});
  if (actions) b.actions = Tensor<float>(Shape{B, T, kActionCount});
  auto f = b.frames.data();
  for (std::size_t i = 0; i < B; ++i) {
    const auto& r = windows.at(ids[i]);
    const Episode& e = episodes[r.episode];
    for (std::size_t t = 0; t < T; ++t) {
      const std::size_t step = r.start + t;
      const std::uint8_t* src = e.frames.data() + step * plane;
      float* dst = f.data() + (i * T + t) * plane;
      for (std::size_t p = 0; p < plane; ++p) dst[p] = float(src[p]) / 255.0f;
      if (sensors)
        for (std::size_t k = 0; k < 3; ++k) (*b.sensors)[(i * T + t) * 3 + k] = e.sensors[step][k];
      if (actions) (*b.actions)[(i * T + t) * kActionCount + std::size_t(e.actions[step])] = 1.0f;
    }
    b.autopilot_class.push_back(e.labels[r.start + T - 1]);
  }
  return b;
}

void index_windows(Dataset& d, double train_frac, double val_frac) {
  d.windows.clear();
  for (std::size_t e = 0; e < d.episodes.size(); ++e) {
    const std::size_t len = d.episodes[e].length;
    for (std::size_t s = 0; s + d.window <= len; ++s) d.windows.push_back({std::uint32_t(e), std::uint32_t(s)});
  }
  const std::size_t n = d.windows.size();
  const std::size_t n_train = std::size_t(std::llround(train_frac * double(n)));
  const std::size_t n_val = std::size_t(std::llround(val_frac * double(n)));
  for (std::size_t i = 0; i < n; ++i)
    d.windows[i].split = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
}

Dataset generate_dataset(const DataConfig& cfg, std::uint64_t seed) {
  if (cfg.total_steps < cfg.window) throw std::invalid_argument("generate_dataset: total_steps must be >= window");
  Dataset d;
  d.image_size = cfg.env.image_size;
  d.window = cfg.window;
  const std::size_t plane = d.image_size * d.image_size;
  Rng explore(seed, 0x6578706c /* "expl" */);
  Env env(cfg.env);
  std::size_t produced = 0;
  for (std::uint64_t ep = 0; produced < cfg.total_steps; ++ep) {
    Observation obs = env.reset(mix64(seed * 0x9e3779b97f4a7c15ULL + ep));
    Episode e;
    while (produced < cfg.total_steps && e.length < cfg.episode_steps) {
      const int label = autopilot(env.state(), cfg.autopilot).class_index();
      const int taken = explore.bernoulli(cfg.explore_prob) ? int(explore.below(kActionCount)) : label;
      for (std::size_t p = 0; p < plane; ++p) e.frames.push_back(quantize_pixel(obs.frame[p]));
      e.sensors.push_back(obs.sensors);
      e.actions.push_back(taken);
      e.labels.push_back(label);
      ++e.length;
      ++produced;
      const StepResult r = env.step(Action::from_class(taken));
      if (r.done) break;
      obs = r.obs;
    }
    d.episodes.push_back(std::move(e));
  }
  index_windows(d, cfg.train_frac, cfg.val_frac);
  return d;
}

// ---------------------------------------------------------------------------
// Files

void write_pgm(const fs::path& path, const std::uint8_t* pixels, std::size_t width, std::size_t height) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "P5\n" << width << " " << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(pixels), std::streamsize(width * height));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

std::vector<std::uint8_t> read_pgm(const fs::path& path, std::size_t& width, std::size_t& height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string magic;
  int maxval = 0;
  in >> magic >> width >> height >> maxval;
  if (magic != "P5" || maxval != 255) throw std::runtime_error(path.string() + ": not an 8-bit binary PGM");
  in.get();
  std::vector<std::uint8_t> px(width * height);
  in.read(reinterpret_cast<char*>(px.data()), std::streamsize(px.size()));
  if (in.gcount() != std::streamsize(px.size())) throw std::runtime_error(path.string() + ": truncated PGM");
  return px;
}

namespace {

std::string episode_dir(std::size_t e) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "ep_%04zu", e);
  return buf;
}

std::string frame_name(std::size_t t) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%04zu.pgm", t);
  return buf;
}

std::string fmt(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", double(v));
  return buf;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    rows.push_back(std::move(cells));
  }
  return rows;
}

}  // namespace

void write_dataset(const Dataset& d, const fs::path& dir) {
  fs::create_directories(dir);
  const std::size_t plane = d.image_size * d.image_size;
  {
    std::ofstream meta(dir / "dataset.txt");
    meta << "format = carnet-episodes-1\n"
         << "image_size = " << d.image_size << "\n"
         << "window = " << d.window << "\n"
         << "episodes = " << d.episodes.size() << "\n"
         << "steps = " << d.steps() << "\n";
  }
  for (std::size_t e = 0; e < d.episodes.size(); ++e) {
    const Episode& ep = d.episodes[e];
    const fs::path ed = dir / episode_dir(e);
    fs::create_directories(ed);
    for (std::size_t t = 0; t < ep.length; ++t)
      write_pgm(ed / frame_name(t), ep.frames.data() + t * plane, d.image_size, d.image_size);
    std::ofstream s(ed / "sensors.csv"), a(ed / "actions.csv"), l(ed / "labels.csv");
    s << "step,steer,throttle,brake\n";
    a << "step,steer,accel,class\n";
    l << "step,class\n";
    for (std::size_t t = 0; t < ep.length; ++t) {
      const auto& r = ep.sensors[t];
      s << t << "," << fmt(r[0]) << "," << fmt(r[1]) << "," << fmt(r[2]) << "\n";
      const Action act = Action::from_class(ep.actions[t]);
      a << t << "," << act.steer << "," << act.accel << "," << ep.actions[t] << "\n";
      l << t << "," << ep.labels[t] << "\n";
    }
  }
  std::ofstream idx(dir / "index.csv");
  idx << "window,episode,start,split\n";
  for (std::size_t w = 0; w < d.windows.size(); ++w)
    idx << w << "," << d.windows[w].episode << "," << d.windows[w].start << "," << split_name(d.windows[w].split)
        << "\n";
}

Dataset read_dataset(const fs::path& dir) {
  std::ifstream meta(dir / "dataset.txt");
  if (!meta) throw std::runtime_error("not a dataset directory (missing dataset.txt): " + dir.string());
  Dataset d;
  std::size_t n_episodes = 0;
  std::string line;
  while (std::getline(meta, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(0, eq), val = line.substr(eq + 1);
    key.erase(key.find_last_not_of(' ') + 1);
    val.erase(0, val.find_first_not_of(' '));
    if (key == "format" && val != "carnet-episodes-1") throw std::runtime_error("unsupported dataset format " + val);
    if (key == "image_size") d.image_size = std::stoul(val);
    if (key == "window") d.window = std::stoul(val);
    if (key == "episodes") n_episodes = std::stoul(val);
  }
  for (std::size_t e = 0; e < n_episodes; ++e) {
    const fs::path ed = dir / episode_dir(e);
    Episode ep;
    const auto sensors = read_csv(ed / "sensors.csv");
    const auto actions = read_csv(ed / "actions.csv");
    const auto labels = read_csv(ed / "labels.csv");
    ep.length = labels.size();
    if (sensors.size() != ep.length || actions.size() != ep.length)
      throw std::runtime_error(ed.string() + ": inconsistent table lengths");
    for (std::size_t t = 0; t < ep.length; ++t) {
      std::size_t w = 0, h = 0;
      const auto px = read_pgm(ed / frame_name(t), w, h);
      if (w != d.image_size || h != d.image_size) throw std::runtime_error(ed.string() + ": frame size mismatch");
      ep.frames.insert(ep.frames.end(), px.begin(), px.end());
      ep.sensors.push_back({std::stof(sensors[t].at(1)), std::stof(sensors[t].at(2)), std::stof(sensors[t].at(3))});
      ep.actions.push_back(std::stoi(actions[t].at(3)));
      ep.labels.push_back(std::stoi(labels[t].at(1)));
    }
    d.episodes.push_back(std::move(ep));
  }
  for (const auto& row : read_csv(dir / "index.csv")) {
    WindowRef r;
    r.episode = std::uint32_t(std::stoul(row.at(1)));
    r.start = std::uint32_t(std::stoul(row.at(2)));
    r.split = parse_split(row.at(3));
    if (r.episode >= d.episodes.size() || r.start + d.window > d.episodes[r.episode].length)
      throw std::runtime_error("index.csv: window outside its episode");
    d.windows.push_back(r);
  }
  return d;
}

}  // namespace carnet
