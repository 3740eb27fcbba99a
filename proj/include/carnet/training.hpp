// SPDX-License-Identifier: Apache-2.0
//
// Training regimes: autoencoder pretraining, joint (ensemble) training of
// the autoencoder and GRU, imitation learning of the controller, and DQN.

#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "carnet/adam.hpp"
#include "carnet/dataset.hpp"
#include "carnet/losses.hpp"
#include "carnet/model.hpp"

namespace carnet {

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  std::size_t lr_patience = 5;     // epochs without improvement before halving
  std::size_t early_stop = 0;      // epochs without improvement before stopping; 0 = never
  std::size_t max_windows = 0;     // cap on training windows (or frames); 0 = all
  std::uint64_t seed = 0;
  TotalLossOptions loss;
};

/// One logging event. Unset fields are absent from the metrics row.
struct EpochStats {
  std::size_t epoch = 0;
  double total = 0;
  std::optional<double> recon, pred, latent, sensor;
  std::optional<double> val_total;
  std::optional<double> accuracy;
  double lr = 0;
};
using EpochCallback = std::function<void(const EpochStats&)>;

/// Tracks the best monitored value; halves the learning rate after
/// `patience` epochs without improvement.
class PlateauSchedule {
 public:
  PlateauSchedule(double lr, std::size_t patience, std::size_t early_stop);
  /// Returns the learning rate for the next epoch.
  double update(double monitored);
  bool should_stop() const;
  double lr() const { return lr_; }

 private:
  double lr_;
  std::size_t patience_, early_stop_;
  double best_ = 0;
  bool has_best_ = false;
  std::size_t since_best_ = 0, since_cut_ = 0;
};

/// Deterministic in-place shuffle.
void shuffle_indices(std::vector<std::size_t>& v, Rng& rng);

/// Throws std::runtime_error if `loss` is not finite.
void check_finite(double loss, const std::string& where);

/// Encoder/decoder on reconstruction loss alone, over single frames of the
/// train split; validation frames from the val split.
std::vector<EpochStats> pretrain_autoencoder(Carnet<float>& model, const Dataset& data, const TrainConfig& cfg,
                                             const EpochCallback& log = {});

/// Joint training of every backbone parameter on the windowed objective.
std::vector<EpochStats> train_ensemble(Carnet<float>& model, const Dataset& data,
                                       const std::vector<std::size_t>& train_ids,
                                       const std::vector<std::size_t>& val_ids, const TrainConfig& cfg,
                                       const EpochCallback& log = {});

/// Mean windowed loss parts over `ids` (eval-mode batch norm).
EpochStats evaluate_ensemble(Carnet<float>& model, const Dataset& data, const std::vector<std::size_t>& ids,
                             const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Imitation

enum class IlArm {
  joint,      // controller and backbone trained together on cross-entropy
  head_only,  // backbone frozen, controller on (ℓ_{T−1}, ℓ_{T|T−1})
  frozen_ae,  // pretrained encoder frozen, controller on (ℓ_{T−2}, ℓ_{T−1})
};
const char* il_arm_name(IlArm a);
IlArm parse_il_arm(const std::string& s);

struct ImitationConfig {
  IlArm arm = IlArm::joint;
  std::size_t epochs = 8;
  std::size_t batch_size = 64;
  double lr = 1e-3;
  std::size_t lr_patience = 5;
  std::size_t max_windows = 5000;
  std::uint64_t seed = 0;
  CrossEntropyConfig ce;
};

struct ImitationResult {
  double val_accuracy = 0;
  double test_accuracy = 0;
  std::vector<EpochStats> epochs;
  Controller<float> controller;
  Carnet<float> backbone;
};

/// Controller inputs for a batch of windows, as (prev, next) latents.
std::pair<Var<float>, Var<float>> controller_features(Carnet<float>& model, Tape<float>& tape,
                                                      const WindowBatch<float>& batch, IlArm arm, bool training);

ImitationResult train_imitation(const Carnet<float>& backbone, const Dataset& data, const ImitationConfig& cfg,
                                const EpochCallback& log = {});

/// Top-1 accuracy of controller + backbone on a list of windows.
double imitation_accuracy(Carnet<float>& backbone, Controller<float>& controller, const Dataset& data,
                          const std::vector<std::size_t>& ids, IlArm arm, std::size_t batch_size = 256);

/// Share of the most frequent label among the windows of a split.
double majority_baseline(const Dataset& data, Split split);

struct MeanStd {
  double mean = 0;
  double std = 0;  // sample standard deviation
};
MeanStd mean_std(const std::vector<double>& v);
std::string format_mean_std(const MeanStd& m, int decimals = 2);

// ---------------------------------------------------------------------------
// Reinforcement learning

struct DqnConfig {
  std::size_t training_steps = 50000;
  std::size_t buffer_size = 5000;
  double lr = 5e-3;
  std::size_t batch_size = 64;
  std::size_t n_step = 1;
  bool prioritized = true;
  double alpha = 0.6;
  double beta0 = 0.4;
  double gamma = 0.99;
  double eps_start = 1.0;
  double eps_end = 0.05;
  double eps_fraction = 0.2;
  std::size_t target_sync = 1000;
  std::size_t learning_starts = 1000;
  double reward_scale = 0.1;   // applied to rewards inside the TD target only
  double priority_eps = 1e-3;
  std::size_t eval_episodes = 20;
  // Greedy checks on held-out episode seeds once exploration has decayed;
  // the best-scoring Q-network is kept. select_every = 0 keeps the last one.
  std::size_t select_every = 5000;
  std::size_t select_episodes = 5;
  std::uint64_t seed = 0;
};

/// Linear decay from eps_start to eps_end over the first eps_fraction of
/// training, then constant.
double epsilon_at(std::size_t step, const DqnConfig& cfg);
/// Linear anneal from beta0 to 1 over training.
double beta_at(std::size_t step, const DqnConfig& cfg);

/// Proportional prioritized replay over a fixed-capacity ring buffer.
class PrioritizedReplay {
 public:
  struct Transition {
    std::vector<float> state, next_state;
    int action = 0;
    float reward = 0;
    bool done = false;
  };
  struct Sample {
    std::vector<std::size_t> indices;
    std::vector<double> weights;  // importance weights, max-normalized
  };

  PrioritizedReplay(std::size_t capacity, double alpha, double eps);
  /// New transitions enter at the current maximum priority.
  void add(Transition t);
  Sample sample(std::size_t n, double beta, Rng& rng) const;
  void update(const std::vector<std::size_t>& indices, const std::vector<double>& td_errors);

  std::size_t size() const { return size_; }
  std::size_t capacity() const { return capacity_; }
  const Transition& at(std::size_t i) const { return data_.at(i); }
  double priority(std::size_t i) const { return tree_[leaves_ + i]; }
  double total() const { return tree_[1]; }

 private:
  void set(std::size_t i, double p);

  std::size_t capacity_, leaves_;
  double alpha_, eps_;
  double max_priority_ = 1.0;
  std::vector<double> tree_;  // sum tree, root at 1, leaves at [leaves_, 2·leaves_)
  std::vector<Transition> data_;
  std::size_t size_ = 0, next_ = 0;
};

/// Runs the frozen backbone alongside an episode: (ℓ_t, ℓ_{t|t−1}).
class LatentTracker {
 public:
  explicit LatentTracker(Carnet<float>& backbone) : model_(&backbone) {}
  std::vector<float> reset(const Observation& obs);
  /// Advance with the action just taken and the observation it produced.
  std::vector<float> step(int action, const Observation& obs);
  std::size_t feature_size() const { return 2 * model_->config().latent_size; }

 private:
  std::vector<float> features() const;
  Carnet<float>* model_;
  Tensor<float> latent_, hidden_;
  std::array<float, 3> sensors_{};
};

struct EpisodeStats {
  std::vector<double> rewards;
  std::vector<std::size_t> lengths;
  MeanStd summary() const { return mean_std(rewards); }
};

using Policy = std::function<int(const std::vector<float>& features, Rng& rng)>;

/// Runs whole episodes with seeds derived from `seed`.
EpisodeStats run_episodes(Carnet<float>& backbone, const Policy& policy, const EnvConfig& env,
                          const RewardConfig& reward, std::size_t episodes, std::uint64_t seed);

struct DqnResult {
  Controller<float> q;
  std::vector<double> train_episode_rewards;
  std::vector<std::pair<std::size_t, double>> selection;  // (step, mean greedy reward)
  std::size_t selected_step = 0;
  EpisodeStats greedy;
  EpisodeStats random;
};

/// `log` fires every 1000 steps with the mean TD loss since the last call
/// and the most recent finished episode's reward.
DqnResult train_dqn(Carnet<float>& backbone, const EnvConfig& env, const RewardConfig& reward, const DqnConfig& cfg,
                    const std::function<void(std::size_t step, double td_loss, double episode_reward)>& log = {});

/// Greedy action of a Q-network for one feature vector.
int greedy_action(Controller<float>& q, const std::vector<float>& features);

}  // namespace carnet
