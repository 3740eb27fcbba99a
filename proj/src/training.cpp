// SPDX-License-Identifier: Apache-2.0

#include "carnet/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>

namespace carnet {

PlateauSchedule::PlateauSchedule(double lr, std::size_t patience, std::size_t early_stop)
    : lr_(lr), patience_(patience), early_stop_(early_stop) {}

double PlateauSchedule::update(double monitored) {
  if (!has_best_ || monitored < best_) {
    best_ = monitored;
    has_best_ = true;
    since_best_ = since_cut_ = 0;
    return lr_;
  }
  ++since_best_;
  if (patience_ > 0 && ++since_cut_ >= patience_) {
    lr_ *= 0.5;
    since_cut_ = 0;
  }
  return lr_;
}

bool PlateauSchedule::should_stop() const { return early_stop_ > 0 && since_best_ >= early_stop_; }

void shuffle_indices(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

void check_finite(double loss, const std::string& where) {
  if (!std::isfinite(loss))
    throw std::runtime_error(where + ": loss diverged (non-finite value " + std::to_string(loss) +
                             "); try a lower learning rate");
}

namespace {

std::vector<std::size_t> capped(std::vector<std::size_t> ids, std::size_t cap, std::uint64_t seed) {
  if (cap == 0 || ids.size() <= cap) return ids;
  Rng rng(seed, 0x73756273 /* "subs" */);
  shuffle_indices(ids, rng);
  ids.resize(cap);
  std::sort(ids.begin(), ids.end());
  return ids;
}

std::vector<std::vector<std::size_t>> batches_of(const std::vector<std::size_t>& ids, std::size_t size) {
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < ids.size(); i += size)
    out.emplace_back(ids.begin() + std::ptrdiff_t(i), ids.begin() + std::ptrdiff_t(std::min(ids.size(), i + size)));
  return out;
}

// First frame of each listed window, as (N,1,S,S).
Tensor<float> frame_batch(const Dataset& d, const std::vector<std::size_t>& ids) {
  const std::size_t S = d.image_size, plane = S * S;
  Tensor<float> out(Shape{ids.size(), 1, S, S});
  auto dst = out.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto& r = d.windows.at(ids[i]);
    const std::uint8_t* src = d.episodes[r.episode].frames.data() + std::size_t(r.start) * plane;
    for (std::size_t p = 0; p < plane; ++p) dst[i * plane + p] = float(src[p]) / 255.0f;
  }
  return out;
}

Var<float> image_loss(Var<float> a, Var<float> b, const TotalLossOptions& o) {
  return o.image_loss == ImageLoss::ms_ssim ? ms_ssim_loss(a, b, o.ms_ssim) : mse_loss(a, b);
}

double scalar(Var<float> v) { return double(v.value()[0]); }

TotalLossOptions loss_options_for(const Carnet<float>& m, TotalLossOptions o) {
  o.sensors = m.config().sensor_dim > 0;
  return o;
}

}  // namespace

// ---------------------------------------------------------------------------
// Autoencoder and ensemble

std::vector<EpochStats> pretrain_autoencoder(Carnet<float>& model, const Dataset& data, const TrainConfig& cfg,
                                             const EpochCallback& log) {
  std::vector<std::size_t> train = capped(data.indices(Split::train), cfg.max_windows, cfg.seed);
  const std::vector<std::size_t> val = capped(data.indices(Split::val), 512, cfg.seed);
  ParamList<float> params = model.encoder_parameters();
  for (auto* p : model.decoder_parameters()) params.push_back(p);
  Adam<float> opt(params, AdamOptions{cfg.lr});
  PlateauSchedule sched(cfg.lr, cfg.lr_patience, cfg.early_stop);
  Rng rng(cfg.seed, 0x70726574 /* "pret" */);
  std::vector<EpochStats> history;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_indices(train, rng);
    double sum = 0;
    for (const auto& b : batches_of(train, cfg.batch_size)) {
      Tape<float> tape;
      const Var<float> x = tape.constant(frame_batch(data, b));
      const Var<float> loss = image_loss(model.decode(tape, model.encode(tape, x, true), true), x, cfg.loss);
      check_finite(scalar(loss), "pretrain-ae");
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
      sum += scalar(loss) * double(b.size());
    }
    EpochStats s;
    s.epoch = epoch;
    s.total = s.recon.emplace(sum / double(std::max<std::size_t>(1, train.size())));
    s.lr = opt.lr();
    if (!val.empty()) {
      double vs = 0;
      for (const auto& b : batches_of(val, 128)) {
        Tape<float> tape;
        const Var<float> x = tape.constant(frame_batch(data, b));
        vs += scalar(image_loss(model.decode(tape, model.encode(tape, x, false), false), x, cfg.loss)) * double(b.size());
      }
      s.val_total = vs / double(val.size());
    }
    history.push_back(s);
    if (log) log(s);
    opt.set_lr(sched.update(s.val_total.value_or(s.total)));
    if (sched.should_stop()) break;
  }
  return history;
}

EpochStats evaluate_ensemble(Carnet<float>& model, const Dataset& data, const std::vector<std::size_t>& ids,
                             const TrainConfig& cfg) {
  const TotalLossOptions opts = loss_options_for(model, cfg.loss);
  const bool sensors = model.config().sensor_dim > 0, actions = model.config().action_dim > 0;
  EpochStats s;
  double total = 0;
  std::vector<double> parts(4, 0.0);
  std::size_t n_parts = 0;
  for (const auto& b : batches_of(ids, std::max<std::size_t>(cfg.batch_size, 64))) {
    Tape<float> tape;
    const WindowBatch<float> wb = data.batch(b, sensors, actions);
    const TotalLoss<float> L = carnet_total_loss(model.rollout(tape, wb, false), wb, opts);
    total += scalar(L.total) * double(b.size());
    n_parts = L.parts.size();
    for (std::size_t k = 0; k < L.parts.size(); ++k) parts[k] += scalar(L.parts[k].second) * double(b.size());
  }
  const double n = double(std::max<std::size_t>(1, ids.size()));
  s.total = total / n;
  s.recon = parts[0] / n;
  s.pred = parts[1] / n;
  s.latent = parts[2] / n;
  if (n_parts == 4) s.sensor = parts[3] / n;
  return s;
}

std::vector<EpochStats> train_ensemble(Carnet<float>& model, const Dataset& data,
                                       const std::vector<std::size_t>& train_ids,
                                       const std::vector<std::size_t>& val_ids, const TrainConfig& cfg,
                                       const EpochCallback& log) {
  const TotalLossOptions opts = loss_options_for(model, cfg.loss);
  const bool sensors = model.config().sensor_dim > 0, actions = model.config().action_dim > 0;
  std::vector<std::size_t> train = capped(train_ids, cfg.max_windows, cfg.seed);
  Adam<float> opt(model.parameters(), AdamOptions{cfg.lr});
  PlateauSchedule sched(cfg.lr, cfg.lr_patience, cfg.early_stop);
  Rng rng(cfg.seed, 0x656e7365 /* "ense" */);
  std::vector<EpochStats> history;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_indices(train, rng);
    double total = 0;
    std::vector<double> parts(4, 0.0);
    for (const auto& b : batches_of(train, cfg.batch_size)) {
      Tape<float> tape;
      const WindowBatch<float> wb = data.batch(b, sensors, actions);
      const TotalLoss<float> L = carnet_total_loss(model.rollout(tape, wb, true), wb, opts);
      check_finite(scalar(L.total), "train-carnet");
      opt.zero_grad();
      tape.backward(L.total);
      opt.step();
      total += scalar(L.total) * double(b.size());
      for (std::size_t k = 0; k < L.parts.size(); ++k) parts[k] += scalar(L.parts[k].second) * double(b.size());
    }
    const double n = double(std::max<std::size_t>(1, train.size()));
    EpochStats s;
    s.epoch = epoch;
    s.total = total / n;
    s.recon = parts[0] / n;
    s.pred = parts[1] / n;
    s.latent = parts[2] / n;
    if (opts.sensors) s.sensor = parts[3] / n;
    s.lr = opt.lr();
    if (!val_ids.empty()) s.val_total = evaluate_ensemble(model, data, val_ids, cfg).total;
    history.push_back(s);
    if (log) log(s);
    opt.set_lr(sched.update(s.val_total.value_or(s.total)));
    if (sched.should_stop()) break;
  }
  return history;
}

// ---------------------------------------------------------------------------
// Imitation

const char* il_arm_name(IlArm a) {
  switch (a) {
    case IlArm::joint: return "joint";
    case IlArm::head_only: return "head_only";
    case IlArm::frozen_ae: return "frozen_ae";
  }
  return "?";
}

IlArm parse_il_arm(const std::string& s) {
  if (s == "joint") return IlArm::joint;
  if (s == "head_only") return IlArm::head_only;
  if (s == "frozen_ae") return IlArm::frozen_ae;
  throw std::invalid_argument("unknown imitation arm '" + s + "' (expected joint, head_only or frozen_ae)");
}

std::pair<Var<float>, Var<float>> controller_features(Carnet<float>& model, Tape<float>& tape,
                                                      const WindowBatch<float>& batch, IlArm arm, bool training) {
  const std::size_t B = batch.batch(), T = batch.steps(), S = model.config().input_size;
  const Var<float> frames = tape.constant(time_major(batch.frames).reshaped(Shape{T * B, 1, S, S}));
  const bool train_backbone = training && arm == IlArm::joint;
  const Var<float> latents = model.encode(tape, frames, train_backbone);
  const Var<float> last = slice(latents, 0, (T - 1) * B, T * B);
  if (arm == IlArm::frozen_ae) return {slice(latents, 0, (T - 2) * B, (T - 1) * B), last};
  std::optional<Var<float>> sensors, actions;
  if (model.config().sensor_dim) sensors = tape.constant(time_major(*batch.sensors));
  if (model.config().action_dim) actions = tape.constant(time_major(*batch.actions));
  const auto hs = model.unroll(tape, latents, B, T, sensors, actions);
  return {last, model.latent_slice(hs.back())};
}

namespace {

struct FeatureSet {
  Tensor<float> prev, next;  // (N, L)
  std::vector<int> labels;
};

FeatureSet precompute_features(Carnet<float>& model, const Dataset& data, const std::vector<std::size_t>& ids,
                               IlArm arm) {
  const std::size_t L = model.config().latent_size;
  const bool sensors = model.config().sensor_dim > 0, actions = model.config().action_dim > 0;
  FeatureSet f{Tensor<float>(Shape{ids.size(), L}), Tensor<float>(Shape{ids.size(), L}), {}};
  std::size_t row = 0;
  for (const auto& b : batches_of(ids, 256)) {
    Tape<float> tape;
    const WindowBatch<float> wb = data.batch(b, sensors, actions);
    const auto [p, n] = controller_features(model, tape, wb, arm, false);
    std::copy(p.value().data().begin(), p.value().data().end(), f.prev.data().begin() + std::ptrdiff_t(row * L));
    std::copy(n.value().data().begin(), n.value().data().end(), f.next.data().begin() + std::ptrdiff_t(row * L));
    f.labels.insert(f.labels.end(), wb.autopilot_class.begin(), wb.autopilot_class.end());
    row += b.size();
  }
  return f;
}

Tensor<float> gather_rows(const Tensor<float>& x, const std::vector<std::size_t>& rows) {
  const std::size_t w = x.dim(1);
  Tensor<float> out(Shape{rows.size(), w});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.data().begin() + std::ptrdiff_t(rows[i] * w), w, out.data().begin() + std::ptrdiff_t(i * w));
  return out;
}

std::size_t count_correct(const Tensor<float>& logits, const std::vector<int>& labels) {
  const std::size_t K = logits.dim(1);
  std::size_t c = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const float* row = logits.data().data() + i * K;
    if (int(std::max_element(row, row + K) - row) == labels[i]) ++c;
  }
  return c;
}

double feature_accuracy(Controller<float>& ctrl, const FeatureSet& f) {
  if (f.labels.empty()) return 0;
  Tape<float> tape;
  const Var<float> logits = ctrl.forward(tape, tape.constant(f.prev), tape.constant(f.next));
  return double(count_correct(logits.value(), f.labels)) / double(f.labels.size());
}

}  // namespace

double imitation_accuracy(Carnet<float>& backbone, Controller<float>& controller, const Dataset& data,
                          const std::vector<std::size_t>& ids, IlArm arm, std::size_t batch_size) {
  if (ids.empty()) return 0;
  std::size_t correct = 0;
  const bool sensors = backbone.config().sensor_dim > 0, actions = backbone.config().action_dim > 0;
  for (const auto& b : batches_of(ids, batch_size)) {
    Tape<float> tape;
    const WindowBatch<float> wb = data.batch(b, sensors, actions);
    const auto [p, n] = controller_features(backbone, tape, wb, arm, false);
    correct += count_correct(controller.forward(tape, p, n).value(), wb.autopilot_class);
  }
  return double(correct) / double(ids.size());
}

double majority_baseline(const Dataset& data, Split split) {
  const auto c = data.label_counts(split);
  const std::size_t total = std::accumulate(c.begin(), c.end(), std::size_t(0));
  return total ? double(*std::max_element(c.begin(), c.end())) / double(total) : 0.0;
}

ImitationResult train_imitation(const Carnet<float>& backbone, const Dataset& data, const ImitationConfig& cfg,
                                const EpochCallback& log) {
  ImitationResult res;
  res.backbone = backbone;
  Carnet<float>& model = res.backbone;
  Rng rng(cfg.seed, 0x696d6974 /* "imit" */);
  Controller<float> ctrl(model.config().latent_size, rng);
  // The window subset is shared by every seed and arm; only initialization
  // and batch order depend on the seed.
  std::vector<std::size_t> train = capped(data.indices(Split::train), cfg.max_windows, 0);
  const std::vector<std::size_t> val = capped(data.indices(Split::val), 1000, 0);
  const std::vector<std::size_t> test = data.indices(Split::test);

  const bool joint = cfg.arm == IlArm::joint;
  ParamList<float> params = ctrl.parameters();
  if (joint) {
    for (auto* p : model.encoder_parameters()) params.push_back(p);
    for (auto* p : model.recurrent_parameters()) params.push_back(p);
  }
  Adam<float> opt(params, AdamOptions{cfg.lr});
  PlateauSchedule sched(cfg.lr, cfg.lr_patience, 0);

  std::optional<FeatureSet> train_f, val_f;
  if (!joint) {
    train_f = precompute_features(model, data, train, cfg.arm);
    val_f = precompute_features(model, data, val, cfg.arm);
  }
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);

  double best_val = -1;
  Controller<float> best_ctrl = ctrl;
  Carnet<float> best_model;
  const bool sensors = model.config().sensor_dim > 0, actions = model.config().action_dim > 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_indices(order, rng);
    double loss_sum = 0;
    std::size_t correct = 0;
    for (const auto& b : batches_of(order, cfg.batch_size)) {
      Tape<float> tape;
      Var<float> prev, next;
      std::vector<int> labels;
      if (joint) {
        std::vector<std::size_t> ids;
        for (auto i : b) ids.push_back(train[i]);
        const WindowBatch<float> wb = data.batch(ids, sensors, actions);
        std::tie(prev, next) = controller_features(model, tape, wb, cfg.arm, true);
        labels = wb.autopilot_class;
      } else {
        prev = tape.constant(gather_rows(train_f->prev, b));
        next = tape.constant(gather_rows(train_f->next, b));
        for (auto i : b) labels.push_back(train_f->labels[i]);
      }
      const Var<float> logits = ctrl.forward(tape, prev, next);
      const Var<float> loss = cross_entropy(logits, labels, cfg.ce);
      check_finite(scalar(loss), "train-il");
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
      loss_sum += scalar(loss) * double(b.size());
      correct += count_correct(logits.value(), labels);
    }
    const double val_acc =
        joint ? imitation_accuracy(model, ctrl, data, val, cfg.arm) : feature_accuracy(ctrl, *val_f);
    EpochStats s;
    s.epoch = epoch;
    s.total = loss_sum / double(std::max<std::size_t>(1, train.size()));
    s.accuracy = double(correct) / double(std::max<std::size_t>(1, train.size()));
    s.val_total = 1.0 - val_acc;
    s.lr = opt.lr();
    res.epochs.push_back(s);
    if (log) log(s);
    if (val_acc > best_val) {
      best_val = val_acc;
      best_ctrl = ctrl;
      if (joint) best_model = model;
    }
    opt.set_lr(sched.update(1.0 - val_acc));
  }
  res.controller = best_ctrl;
  if (joint && best_val >= 0) model = best_model;
  res.val_accuracy = best_val;
  res.test_accuracy = imitation_accuracy(model, res.controller, data, test, cfg.arm);
  return res;
}

MeanStd mean_std(const std::vector<double>& v) {
  MeanStd m;
  if (v.empty()) return m;
  m.mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / double(v.size() - 1));
  }
  return m;
}

std::string format_mean_std(const MeanStd& m, int decimals) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(decimals);
  os << m.mean << " ± " << m.std;
  return os.str();
}

// ---------------------------------------------------------------------------
// DQN

double epsilon_at(std::size_t step, const DqnConfig& cfg) {
  const double horizon = cfg.eps_fraction * double(cfg.training_steps);
  if (horizon <= 0 || double(step) >= horizon) return cfg.eps_end;
  return cfg.eps_start + (cfg.eps_end - cfg.eps_start) * double(step) / horizon;
}

double beta_at(std::size_t step, const DqnConfig& cfg) {
  if (cfg.training_steps <= 1) return 1.0;
  const double f = std::min(1.0, double(step) / double(cfg.training_steps - 1));
  return cfg.beta0 + (1.0 - cfg.beta0) * f;
}

PrioritizedReplay::PrioritizedReplay(std::size_t capacity, double alpha, double eps)
    : capacity_(capacity), leaves_(1), alpha_(alpha), eps_(eps) {
  if (capacity == 0) throw std::invalid_argument("replay: capacity must be positive");
  while (leaves_ < capacity) leaves_ <<= 1;
  tree_.assign(2 * leaves_, 0.0);
  data_.resize(capacity);
}

void PrioritizedReplay::set(std::size_t i, double p) {
  std::size_t k = leaves_ + i;
  const double delta = p - tree_[k];
  for (; k >= 1; k >>= 1) tree_[k] += delta;
}

void PrioritizedReplay::add(Transition t) {
  data_[next_] = std::move(t);
  set(next_, std::pow(max_priority_, alpha_));
  next_ = (next_ + 1) % capacity_;
  size_ = std::min(size_ + 1, capacity_);
}

PrioritizedReplay::Sample PrioritizedReplay::sample(std::size_t n, double beta, Rng& rng) const {
  if (size_ == 0) throw std::runtime_error("replay: cannot sample from an empty buffer");
  Sample s;
  const double total = tree_[1];
  // Stratified: one draw per equal-mass segment.
  for (std::size_t j = 0; j < n; ++j) {
    double u = (double(j) + rng.uniform()) * total / double(n);
    std::size_t k = 1;
    while (k < leaves_) {
      if (u < tree_[2 * k] || tree_[2 * k + 1] <= 0) {
        k = 2 * k;
      } else {
        u -= tree_[2 * k];
        k = 2 * k + 1;
      }
    }
    std::size_t idx = std::min(k - leaves_, size_ - 1);
    s.indices.push_back(idx);
  }
  double max_w = 0;
  for (auto idx : s.indices) {
    const double p = tree_[leaves_ + idx] / total;
    const double w = std::pow(double(size_) * p, -beta);
    s.weights.push_back(w);
    max_w = std::max(max_w, w);
  }
  for (auto& w : s.weights) w /= max_w;
  return s;
}

void PrioritizedReplay::update(const std::vector<std::size_t>& indices, const std::vector<double>& td_errors) {
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const double p = std::abs(td_errors[j]) + eps_;
    max_priority_ = std::max(max_priority_, p);
    set(indices[j], std::pow(p, alpha_));
  }
}

std::vector<float> LatentTracker::features() const {
  const std::size_t L = model_->config().latent_size;
  std::vector<float> f(latent_.data().begin(), latent_.data().end());
  f.insert(f.end(), hidden_.data().begin(), hidden_.data().begin() + std::ptrdiff_t(L));
  return f;
}

std::vector<float> LatentTracker::reset(const Observation& obs) {
  const std::size_t S = model_->config().input_size;
  latent_ = encode_frames(*model_, obs.frame.reshaped(Shape{1, 1, S, S}));
  hidden_ = Tensor<float>(Shape{1, model_->config().rnn_hidden()});
  sensors_ = obs.sensors;
  return features();
}

std::vector<float> LatentTracker::step(int action, const Observation& obs) {
  const auto& c = model_->config();
  {
    Tape<float> tape;
    std::optional<Var<float>> s, a;
    if (c.sensor_dim) s = tape.constant(Tensor<float>(Shape{1, 3}, std::vector<float>(sensors_.begin(), sensors_.end())));
    if (c.action_dim) {
      Tensor<float> oh(Shape{1, c.action_dim});
      oh[std::size_t(action)] = 1.0f;
      a = tape.constant(oh);
    }
    hidden_ = model_->transition(tape, tape.constant(hidden_), tape.constant(latent_), s, a).value();
  }
  latent_ = encode_frames(*model_, obs.frame.reshaped(Shape{1, 1, c.input_size, c.input_size}));
  sensors_ = obs.sensors;
  return features();
}

namespace {

std::pair<Tensor<float>, Tensor<float>> split_features(const std::vector<const std::vector<float>*>& rows,
                                                       std::size_t L) {
  Tensor<float> a(Shape{rows.size(), L}), b(Shape{rows.size(), L});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(rows[i]->begin(), L, a.data().begin() + std::ptrdiff_t(i * L));
    std::copy_n(rows[i]->begin() + std::ptrdiff_t(L), L, b.data().begin() + std::ptrdiff_t(i * L));
  }
  return {std::move(a), std::move(b)};
}

// Σ_i w_i·huber(pred_i,a_i − y_i) / B, gradient only into the chosen action.
Var<float> weighted_td_loss(Var<float> q, const std::vector<int>& actions, const std::vector<float>& targets,
                            const std::vector<double>& weights, std::vector<double>& td) {
  const std::size_t B = actions.size(), K = q.shape()[1];
  const auto qv = q.value().data();
  td.assign(B, 0.0);
  double acc = 0;
  for (std::size_t i = 0; i < B; ++i) {
    const double d = double(qv[i * K + std::size_t(actions[i])]) - double(targets[i]);
    td[i] = d;
    const double ad = std::abs(d);
    acc += weights[i] * (ad < 1.0 ? 0.5 * d * d : ad - 0.5);
  }
  const std::size_t iq = q.id;
  std::vector<double> grads(B);
  for (std::size_t i = 0; i < B; ++i) grads[i] = weights[i] * std::clamp(td[i], -1.0, 1.0) / double(B);
  return q.tape->record(OpKind::smooth_l1, {iq}, Tensor<float>::scalar(float(acc / double(B))),
                        [=](Tape<float>& t, std::size_t self) {
                          const float up = t.upstream(self)[0];
                          float* g = t.grad_buffer(iq).data().data();
                          for (std::size_t i = 0; i < B; ++i) g[i * K + std::size_t(actions[i])] += up * float(grads[i]);
                        });
}

std::uint64_t episode_seed(std::uint64_t base, std::uint64_t i) { return mix64(base * 0x9e3779b97f4a7c15ULL + i); }

}  // namespace

int greedy_action(Controller<float>& q, const std::vector<float>& features) {
  const std::size_t L = features.size() / 2;
  Tape<float> tape;
  const auto [a, b] = split_features({&features}, L);
  const Tensor<float> out = q.forward(tape, tape.constant(a), tape.constant(b)).value();
  const auto v = out.data();
  return int(std::max_element(v.begin(), v.end()) - v.begin());
}

EpisodeStats run_episodes(Carnet<float>& backbone, const Policy& policy, const EnvConfig& env_cfg,
                          const RewardConfig& reward, std::size_t episodes, std::uint64_t seed) {
  EpisodeStats st;
  Env env(env_cfg, reward);
  LatentTracker tracker(backbone);
  Rng rng(seed, 0x706f6c69 /* "poli" */);
  for (std::size_t e = 0; e < episodes; ++e) {
    std::vector<float> f = tracker.reset(env.reset(episode_seed(seed, e)));
    double total = 0;
    while (!env.done()) {
      const int a = policy(f, rng);
      const StepResult r = env.step(Action::from_class(a));
      total += r.reward;
      if (!r.done) f = tracker.step(a, r.obs);
    }
    st.rewards.push_back(total);
    st.lengths.push_back(env.steps());
  }
  return st;
}

DqnResult train_dqn(Carnet<float>& backbone, const EnvConfig& env_cfg, const RewardConfig& reward,
                    const DqnConfig& cfg,
                    const std::function<void(std::size_t, double, double)>& log) {
  if (cfg.n_step != 1) throw std::invalid_argument("dqn: only 1-step targets are supported");
  const std::size_t L = backbone.config().latent_size;
  Rng rng(cfg.seed, 0x64716e /* "dqn" */);
  DqnResult res;
  res.q = Controller<float>(L, rng);
  Controller<float> target = res.q;
  Adam<float> opt(res.q.parameters(), AdamOptions{cfg.lr});
  PrioritizedReplay replay(cfg.buffer_size, cfg.prioritized ? cfg.alpha : 0.0, cfg.priority_eps);

  Env env(env_cfg, reward);
  LatentTracker tracker(backbone);
  const std::uint64_t train_seed = mix64(cfg.seed ^ 0x747261696eULL);
  std::size_t episode = 0;
  std::vector<float> f = tracker.reset(env.reset(episode_seed(train_seed, episode)));
  double ep_reward = 0, td_sum = 0;
  std::size_t td_count = 0;
  const std::uint64_t select_seed = mix64(cfg.seed ^ 0x73656c656374ULL);
  std::optional<Controller<float>> best;
  double best_value = 0;
  for (std::size_t step = 0; step < cfg.training_steps; ++step) {
    const int a = rng.uniform() < epsilon_at(step, cfg) ? int(rng.below(kActionCount)) : greedy_action(res.q, f);
    const StepResult r = env.step(Action::from_class(a));
    ep_reward += r.reward;
    const bool terminal = r.events.collision || r.events.out_of_lane;
    std::vector<float> f2 = tracker.step(a, r.obs);
    replay.add({f, f2, a, float(r.reward), terminal});
    if (r.done) {
      res.train_episode_rewards.push_back(ep_reward);
      ep_reward = 0;
      f = tracker.reset(env.reset(episode_seed(train_seed, ++episode)));
    } else {
      f = std::move(f2);
    }

    if (step + 1 >= cfg.learning_starts && replay.size() >= cfg.batch_size) {
      const auto smp = replay.sample(cfg.batch_size, cfg.prioritized ? beta_at(step, cfg) : 0.0, rng);
      std::vector<const std::vector<float>*> s, s2;
      std::vector<int> acts;
      for (auto i : smp.indices) {
        s.push_back(&replay.at(i).state);
        s2.push_back(&replay.at(i).next_state);
        acts.push_back(replay.at(i).action);
      }
      std::vector<float> y(smp.indices.size());
      {
        Tape<float> tape;
        const auto [a2, b2] = split_features(s2, L);
        const Tensor<float> qn = target.forward(tape, tape.constant(a2), tape.constant(b2)).value();
        for (std::size_t i = 0; i < y.size(); ++i) {
          const auto& tr = replay.at(smp.indices[i]);
          const float* row = qn.data().data() + i * kActionCount;
          const double best = *std::max_element(row, row + kActionCount);
          y[i] = float(cfg.reward_scale * tr.reward + (tr.done ? 0.0 : cfg.gamma * best));
        }
      }
      Tape<float> tape;
      const auto [a1, b1] = split_features(s, L);
      const Var<float> q = res.q.forward(tape, tape.constant(a1), tape.constant(b1));
      std::vector<double> td;
      const Var<float> loss = weighted_td_loss(q, acts, y, smp.weights, td);
      check_finite(scalar(loss), "train-rl");
      opt.zero_grad();
      tape.backward(loss);
      opt.step();
      if (cfg.prioritized) replay.update(smp.indices, td);
      td_sum += scalar(loss);
      ++td_count;
    }
    if ((step + 1) % cfg.target_sync == 0) target = res.q;
    if (cfg.select_every && (step + 1) % cfg.select_every == 0 &&
        double(step + 1) >= cfg.eps_fraction * double(cfg.training_steps)) {
      Controller<float>& cur = res.q;
      const double v = run_episodes(
                           backbone, [&](const std::vector<float>& x, Rng&) { return greedy_action(cur, x); }, env_cfg,
                           reward, cfg.select_episodes, select_seed)
                           .summary()
                           .mean;
      res.selection.emplace_back(step + 1, v);
      if (!best || v > best_value) {
        best = res.q;
        best_value = v;
        res.selected_step = step + 1;
      }
    }
    if (log && (step + 1) % 1000 == 0) {
      const double last = res.train_episode_rewards.empty() ? 0.0 : res.train_episode_rewards.back();
      log(step + 1, td_count ? td_sum / double(td_count) : 0.0, last);
      td_sum = 0;
      td_count = 0;
    }
  }

  if (best) res.q = std::move(*best);
  else res.selected_step = cfg.training_steps;
  const std::uint64_t eval_seed = mix64(cfg.seed ^ 0x6576616cULL);
  Controller<float>& q = res.q;
  res.greedy = run_episodes(
      backbone, [&](const std::vector<float>& x, Rng&) { return greedy_action(q, x); }, env_cfg, reward,
      cfg.eval_episodes, eval_seed);
  res.random = run_episodes(
      backbone, [](const std::vector<float>&, Rng& g) { return int(g.below(kActionCount)); }, env_cfg, reward,
      cfg.eval_episodes, eval_seed);
  return res;
}

}  // namespace carnet
