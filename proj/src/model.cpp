// SPDX-License-Identifier: Apache-2.0

#include "carnet/model.hpp"

#include <stdexcept>

namespace carnet {

CarnetConfig CarnetConfig::full() {
  CarnetConfig c;
  c.input_size = 256;
  c.latent_size = 128;
  c.channels = {2, 4, 8, 16, 32, 64};
  return c;
}

CarnetConfig CarnetConfig::desk() { return CarnetConfig{}; }

CarnetConfig CarnetConfig::tiny() {
  CarnetConfig c;
  c.input_size = 8;
  c.latent_size = 4;
  c.window = 3;
  c.channels = {2};
  return c;
}

std::vector<std::size_t> CarnetConfig::block_strides() const {
  std::vector<std::size_t> s;
  std::size_t side = input_size;
  for (std::size_t i = 0; i < channels.size(); ++i) {
    // Halve until the 4×4 bottleneck, then keep the resolution.
    const std::size_t stride = side > 4 ? 2 : 1;
    s.push_back(stride);
    side = (side + stride - 1) / stride;
  }
  return s;
}

std::size_t CarnetConfig::bottleneck_side() const {
  std::size_t side = input_size;
  for (auto st : block_strides()) side = conv_out_size(side, 3, st, 1);
  return side;
}

std::vector<std::size_t> CarnetConfig::controller_widths() const {
  return {2 * latent_size, latent_size, latent_size, latent_size / 2, 9};
}

void CarnetConfig::validate() const {
  if (window < 2) throw std::invalid_argument("carnet config: window must be at least 2");
  if (channels.empty()) throw std::invalid_argument("carnet config: empty channel ladder");
  if (latent_size < 2) throw std::invalid_argument("carnet config: latent_size must be at least 2");
  if (input_size < 8) throw std::invalid_argument("carnet config: input_size must be at least 8");
  if (sensor_dim && sensor_embed == 0) throw std::invalid_argument("carnet config: sensor_embed must be positive");
  if (use_attention && attention_extent % 2 == 0)
    throw std::invalid_argument("carnet config: attention_extent must be odd");
  if (use_attention && relative_attention && attention_channels % 2)
    throw std::invalid_argument("carnet config: relative attention needs an even channel count");
  // The decoder's strided transposed convs double the side exactly.
  std::size_t side = input_size;
  for (auto st : block_strides()) {
    if (st == 2 && side % 2) throw std::invalid_argument("carnet config: input_size must halve evenly to 4");
    side /= st;
  }
  if (side != 4) throw std::invalid_argument("carnet config: channel ladder must reach a 4x4 bottleneck");
}

template <typename T>
Var<T> ConvUnit<T>::forward(Tape<T>& tape, Var<T> x, bool training) {
  return relu(bn.forward(tape, conv.forward(tape, x), training));
}

template <typename T>
Carnet<T>::Carnet(CarnetConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
  cfg_.validate();
  const auto& ch = cfg_.channels;
  const auto strides = cfg_.block_strides();
  const std::size_t n = ch.size();
  std::size_t in = 1;
  if (cfg_.use_attention) {
    attention_.emplace("enc.attn", 1, cfg_.attention_channels, cfg_.attention_extent, cfg_.relative_attention, rng);
    in = cfg_.attention_channels;
  }
  auto unit = [&](const std::string& name, std::size_t ci, std::size_t co, std::size_t k, std::size_t stride,
                  std::size_t pad, bool transposed) {
    const std::size_t op = transposed && stride == 2 ? 1 : 0;
    return ConvUnit<T>{Conv2d<T>(name, ci, co, k, stride, pad, transposed, op, rng), BatchNorm2d<T>(name + ".bn", co)};
  };
  for (std::size_t i = 0; i < n; ++i) {
    const std::string b = "enc.block" + std::to_string(i);
    encoder_.push_back(unit(b + ".conv0", in, ch[i], 3, strides[i], 1, false));
    encoder_.push_back(unit(b + ".conv1", ch[i], ch[i], 3, 1, 1, false));
    in = ch[i];
  }
  const std::size_t side = cfg_.bottleneck_side();
  projection_ = Conv2d<T>("enc.proj", ch[n - 1], cfg_.latent_size, side, 1, 0, false, 0, rng);

  // Mirror: open with a kernel-`side` transposed conv back to the bottleneck,
  // then walk the ladder down; block i upsamples with the stride that took
  // the encoder into block i+1.
  decoder_.push_back(unit("dec.block0.conv0", cfg_.latent_size, ch[n - 1], side, 1, 0, true));
  decoder_.push_back(unit("dec.block0.conv1", ch[n - 1], ch[n - 1], 3, 1, 1, true));
  for (std::size_t j = 1; j < n; ++j) {
    const std::size_t i = n - 1 - j;
    const std::string b = "dec.block" + std::to_string(j);
    decoder_.push_back(unit(b + ".conv0", ch[i + 1], ch[i], 3, strides[i + 1], 1, true));
    decoder_.push_back(unit(b + ".conv1", ch[i], ch[i], 3, 1, 1, true));
  }
  output_ = Conv2d<T>("dec.out", ch[0], 1, 3, strides[0], 1, true, strides[0] == 2 ? 1 : 0, rng);

  gru_ = GruCell<T>("gru", cfg_.rnn_hidden(), cfg_.rnn_input(), rng);
  if (cfg_.sensor_dim) {
    sensor_in_.emplace("sensor.embed", cfg_.sensor_dim, cfg_.sensor_embed, rng);
    sensor_out_.emplace("sensor.readout", cfg_.rnn_hidden(), cfg_.sensor_dim, rng);
  }
}

template <typename T>
Var<T> Carnet<T>::encode(Tape<T>& tape, Var<T> frames, bool training) {
  const Shape& s = frames.shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != cfg_.input_size || s[3] != cfg_.input_size)
    throw ShapeError("encode: expected (N,1," + std::to_string(cfg_.input_size) + "," +
                     std::to_string(cfg_.input_size) + "), got " + to_string(s));
  Var<T> x = frames;
  if (attention_) x = attention_->forward(tape, x);
  for (auto& u : encoder_) x = u.forward(tape, x, training);
  x = tanh(projection_.forward(tape, x));
  return reshape(x, Shape{s[0], cfg_.latent_size});
}

template <typename T>
Var<T> Carnet<T>::decode(Tape<T>& tape, Var<T> latents, bool training) {
  const Shape& s = latents.shape();
  if (s.size() != 2 || s[1] != cfg_.latent_size)
    throw ShapeError("decode: expected (N," + std::to_string(cfg_.latent_size) + "), got " + to_string(s));
  Var<T> x = reshape(latents, Shape{s[0], cfg_.latent_size, 1, 1});
  for (auto& u : decoder_) x = u.forward(tape, x, training);
  return sigmoid(output_.forward(tape, x));
}

template <typename T>
Var<T> Carnet<T>::latent_slice(Var<T> h) const {
  if (cfg_.rnn_hidden() == cfg_.latent_size) return h;
  return slice(h, 1, 0, cfg_.latent_size);
}

template <typename T>
Var<T> Carnet<T>::transition(Tape<T>& tape, Var<T> h, Var<T> latent, const std::optional<Var<T>>& sensor,
                             const std::optional<Var<T>>& action) {
  std::vector<Var<T>> parts{latent};
  if (cfg_.sensor_dim) {
    if (!sensor) throw std::invalid_argument("transition: sensor fusion enabled but no sensors given");
    parts.push_back(sensor_in_->forward(tape, *sensor));
  }
  if (cfg_.action_dim) {
    if (!action) throw std::invalid_argument("transition: action conditioning enabled but no actions given");
    parts.push_back(*action);
  }
  return gru_.step(tape, h, parts.size() == 1 ? latent : concat(parts, 1));
}

template <typename T>
std::vector<Var<T>> Carnet<T>::unroll(Tape<T>& tape, Var<T> latents, std::size_t batch, std::size_t steps,
                                      const std::optional<Var<T>>& sensors, const std::optional<Var<T>>& actions) {
  Var<T> h = tape.constant(Tensor<T>(Shape{batch, cfg_.rnn_hidden()}));
  std::vector<Var<T>> hs;
  for (std::size_t t = 0; t < steps; ++t) {
    auto rows = [&](const std::optional<Var<T>>& v) -> std::optional<Var<T>> {
      if (!v) return std::nullopt;
      return slice(*v, 0, t * batch, (t + 1) * batch);
    };
    const Var<T> l = slice(latents, 0, t * batch, (t + 1) * batch);
    h = transition(tape, h, l, rows(sensors), rows(actions));
    hs.push_back(h);
  }
  return hs;
}

template <typename T>
RolloutOutput<T> Carnet<T>::rollout(Tape<T>& tape, const WindowBatch<T>& batch, bool training) {
  const std::size_t B = batch.batch(), Tn = batch.steps();
  if (Tn < 2) throw std::invalid_argument("rollout: window length must be at least 2");
  if (cfg_.sensor_dim && !batch.sensors) throw std::invalid_argument("rollout: sensor fusion enabled but batch has no sensors");
  if (cfg_.action_dim && !batch.actions) throw std::invalid_argument("rollout: action conditioning enabled but batch has no actions");
  const Shape& fs = batch.frames.shape();
  const Var<T> frames = tape.constant(time_major(batch.frames).reshaped(Shape{Tn * B, 1, fs[3], fs[4]}));
  std::optional<Var<T>> sensors, actions;
  if (cfg_.sensor_dim) sensors = tape.constant(time_major(*batch.sensors));
  if (cfg_.action_dim) actions = tape.constant(time_major(*batch.actions));

  RolloutOutput<T> out;
  out.batch = B;
  out.steps = Tn;
  out.latents = encode(tape, frames, training);
  out.recons = decode(tape, out.latents, training);
  out.hiddens = unroll(tape, out.latents, B, Tn - 1, sensors, actions);
  std::vector<Var<T>> preds, sens;
  for (const auto& h : out.hiddens) {
    preds.push_back(latent_slice(h));
    if (sensor_out_) sens.push_back(sensor_out_->forward(tape, h));
  }
  out.predicted_latents = preds.size() == 1 ? preds[0] : concat(preds, 0);
  out.preds = decode(tape, out.predicted_latents, training);
  if (sensor_out_) out.sensor_preds = sens.size() == 1 ? sens[0] : concat(sens, 0);
  return out;
}

template <typename T>
ParamList<T> Carnet<T>::encoder_parameters() {
  ParamList<T> p;
  if (attention_) attention_->collect(p);
  for (auto& u : encoder_) u.conv.collect(p), u.bn.collect(p);
  projection_.collect(p);
  return p;
}

template <typename T>
ParamList<T> Carnet<T>::decoder_parameters() {
  ParamList<T> p;
  for (auto& u : decoder_) u.conv.collect(p), u.bn.collect(p);
  output_.collect(p);
  return p;
}

template <typename T>
ParamList<T> Carnet<T>::recurrent_parameters() {
  ParamList<T> p;
  gru_.collect(p);
  if (sensor_in_) sensor_in_->collect(p), sensor_out_->collect(p);
  return p;
}

template <typename T>
ParamList<T> Carnet<T>::parameters() {
  ParamList<T> p = encoder_parameters();
  for (auto* q : decoder_parameters()) p.push_back(q);
  for (auto* q : recurrent_parameters()) p.push_back(q);
  return p;
}

template <typename T>
std::vector<StateEntry<T>> Carnet<T>::state() {
  std::vector<StateEntry<T>> s;
  for (auto* p : parameters()) s.push_back({p->name, &p->value});
  auto stats = [&](BatchNorm2d<T>& bn) {
    const std::string base = bn.gamma.name.substr(0, bn.gamma.name.rfind('.'));
    s.push_back({base + ".running_mean", &bn.stats.running_mean});
    s.push_back({base + ".running_var", &bn.stats.running_var});
  };
  for (auto& u : encoder_) stats(u.bn);
  for (auto& u : decoder_) stats(u.bn);
  return s;
}

template <typename T>
std::vector<std::pair<std::string, Shape>> Carnet<T>::layer_shapes() const {
  std::vector<std::pair<std::string, Shape>> out;
  Shape s{1, cfg_.input_size, cfg_.input_size};
  if (attention_) {
    s[0] = cfg_.attention_channels;
    out.emplace_back("enc.attn", s);
  }
  auto name = [](const Conv2d<T>& c) { return c.weight.name.substr(0, c.weight.name.rfind('.')); };
  for (const auto& u : encoder_) out.emplace_back(name(u.conv), s = u.conv.output_shape(s));
  out.emplace_back(name(projection_), s = projection_.output_shape(s));
  for (const auto& u : decoder_) out.emplace_back(name(u.conv), s = u.conv.output_shape(s));
  out.emplace_back(name(output_), output_.output_shape(s));
  return out;
}

template <typename T>
Controller<T>::Controller(std::size_t latent_size, Rng& rng, std::size_t classes) {
  const std::vector<std::size_t> w{2 * latent_size, latent_size, latent_size, latent_size / 2, classes};
  for (std::size_t i = 0; i + 1 < w.size(); ++i)
    layers_.emplace_back("ctrl.fc" + std::to_string(i + 1), w[i], w[i + 1], rng);
}

template <typename T>
Var<T> Controller<T>::forward(Tape<T>& tape, Var<T> prev, Var<T> next) {
  const std::size_t L = layers_.front().in() / 2;
  if (prev.shape().size() != 2 || prev.shape() != next.shape() || prev.shape()[1] != L)
    throw ShapeError("controller: expected two (B," + std::to_string(L) + ") inputs, got " + to_string(prev.shape()) +
                     " and " + to_string(next.shape()));
  Var<T> x = concat(std::vector<Var<T>>{prev, next}, 1);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    x = layers_[i].forward(tape, x);
    if (i + 1 < layers_.size()) x = relu(x);
  }
  return x;
}

template <typename T>
ParamList<T> Controller<T>::parameters() {
  ParamList<T> p;
  for (auto& l : layers_) l.collect(p);
  return p;
}

template <typename T>
std::vector<StateEntry<T>> Controller<T>::state() {
  std::vector<StateEntry<T>> s;
  for (auto* p : parameters()) s.push_back({p->name, &p->value});
  return s;
}

template <typename T>
Tensor<T> encode_frames(Carnet<T>& model, const Tensor<T>& frames) {
  Tape<T> tape;
  return model.encode(tape, tape.constant(frames), false).value();
}

template struct ConvUnit<float>;
template struct ConvUnit<double>;
template class Carnet<float>;
template class Carnet<double>;
template class Controller<float>;
template class Controller<double>;
template Tensor<float> encode_frames(Carnet<float>&, const Tensor<float>&);
template Tensor<double> encode_frames(Carnet<double>&, const Tensor<double>&);

}  // namespace carnet
