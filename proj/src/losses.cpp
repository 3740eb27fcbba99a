// SPDX-License-Identifier: Apache-2.0

#include "carnet/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace carnet {

// ---------------------------------------------------------------------------
// Configuration

namespace {
const std::vector<double> kDefaultScaleWeights{0.0448, 0.2856, 0.3001, 0.2363, 0.1333};
}

MsSsimConfig MsSsimConfig::standard() { return MsSsimConfig{}; }

MsSsimConfig MsSsimConfig::truncated(std::size_t scales) {
  if (scales == 0 || scales > kDefaultScaleWeights.size())
    throw std::invalid_argument("ms-ssim: truncated config supports 1..5 scales");
  MsSsimConfig c;
  c.scales = scales;
  std::vector<double> w(kDefaultScaleWeights.begin(), kDefaultScaleWeights.begin() + std::ptrdiff_t(scales));
  const double sum = std::accumulate(w.begin(), w.end(), 0.0);
  for (auto& v : w) v /= sum;
  c.beta = w;
  c.gamma = w;
  c.alpha_m = w.back();
  return c;
}

MsSsimConfig MsSsimConfig::unit_weights(std::size_t scales, std::size_t window) {
  MsSsimConfig c;
  c.scales = scales;
  c.beta.assign(scales, 1.0);
  c.gamma.assign(scales, 1.0);
  c.alpha_m = 1.0;
  c.window = window;
  return c;
}

void MsSsimConfig::validate() const {
  if (scales == 0) throw std::invalid_argument("ms-ssim: scales must be positive");
  if (beta.size() != scales || gamma.size() != scales)
    throw std::invalid_argument("ms-ssim: need one contrast and one structure exponent per scale");
  if (!(alpha_m > 0)) throw std::invalid_argument("ms-ssim: luminance exponent must be positive");
  for (std::size_t j = 0; j < scales; ++j) {
    if (!(beta[j] > 0) || !(gamma[j] > 0)) throw std::invalid_argument("ms-ssim: per-scale weights must be positive");
    // The differentiable path evaluates c·s through the combined form that
    // holds for C3 = C2/2, which needs equal exponents.
    if (beta[j] != gamma[j])
      throw std::invalid_argument("ms-ssim: contrast and structure exponents must match at every scale");
  }
  if (window == 0 || window_sigma <= 0) throw std::invalid_argument("ms-ssim: invalid window");
  if (!(dynamic_range > 0)) throw std::invalid_argument("ms-ssim: dynamic range must be positive");
}

std::size_t MsSsimConfig::min_image_side() const { return window << (scales - 1); }

std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> g(size);
  const double c = (double(size) - 1.0) / 2.0;
  double sum = 0;
  for (std::size_t i = 0; i < size; ++i) {
    const double d = double(i) - c;
    sum += (g[i] = std::exp(-d * d / (2 * sigma * sigma)));
  }
  for (auto& v : g) v /= sum;
  return g;
}

// ---------------------------------------------------------------------------
// SSIM kernels

namespace {

template <typename T>
struct Plane {
  std::size_t h = 0, w = 0;
  std::vector<T> v;
  Plane() = default;
  Plane(std::size_t h_, std::size_t w_) : h(h_), w(w_), v(h_ * w_) {}
  Plane(std::size_t h_, std::size_t w_, std::vector<T> v_) : h(h_), w(w_), v(std::move(v_)) {}
};

template <typename T>
Plane<T> filter_valid(const Plane<T>& in, const std::vector<T>& g) {
  const std::size_t n = g.size(), ow = in.w - n + 1, oh = in.h - n + 1;
  Plane<T> tmp(in.h, ow), out(oh, ow);
  for (std::size_t r = 0; r < in.h; ++r) {
    const T* src = in.v.data() + r * in.w;
    T* dst = tmp.v.data() + r * ow;
    for (std::size_t j = 0; j < ow; ++j) {
      T acc = 0;
      for (std::size_t k = 0; k < n; ++k) acc += g[k] * src[j + k];
      dst[j] = acc;
    }
  }
  for (std::size_t i = 0; i < oh; ++i) {
    T* dst = out.v.data() + i * ow;
    for (std::size_t k = 0; k < n; ++k) {
      const T* src = tmp.v.data() + (i + k) * ow;
      const T gk = g[k];
      for (std::size_t j = 0; j < ow; ++j) dst[j] += gk * src[j];
    }
  }
  return out;
}

// gin += Fᵀ gout
template <typename T>
void filter_valid_adjoint(const Plane<T>& gout, const std::vector<T>& g, Plane<T>& gin) {
  const std::size_t n = g.size(), ow = gout.w, oh = gout.h;
  Plane<T> gtmp(gin.h, ow);
  for (std::size_t i = 0; i < oh; ++i) {
    const T* src = gout.v.data() + i * ow;
    for (std::size_t k = 0; k < n; ++k) {
      T* dst = gtmp.v.data() + (i + k) * ow;
      const T gk = g[k];
      for (std::size_t j = 0; j < ow; ++j) dst[j] += gk * src[j];
    }
  }
  for (std::size_t r = 0; r < gin.h; ++r) {
    const T* src = gtmp.v.data() + r * ow;
    T* dst = gin.v.data() + r * gin.w;
    for (std::size_t j = 0; j < ow; ++j)
      for (std::size_t k = 0; k < n; ++k) dst[j + k] += g[k] * src[j];
  }
}

template <typename T>
Plane<T> pool2(const Plane<T>& in) {
  Plane<T> out(in.h / 2, in.w / 2);
  for (std::size_t i = 0; i < out.h; ++i)
    for (std::size_t j = 0; j < out.w; ++j) {
      const T* a = in.v.data() + (2 * i) * in.w + 2 * j;
      const T* b = a + in.w;
      out.v[i * out.w + j] = (a[0] + a[1] + b[0] + b[1]) * T(0.25);
    }
  return out;
}

template <typename T>
void pool2_adjoint(const Plane<T>& gout, Plane<T>& gin) {
  for (std::size_t i = 0; i < gout.h; ++i)
    for (std::size_t j = 0; j < gout.w; ++j) {
      const T q = gout.v[i * gout.w + j] * T(0.25);
      T* a = gin.v.data() + (2 * i) * gin.w + 2 * j;
      T* b = a + gin.w;
      a[0] += q, a[1] += q, b[0] += q, b[1] += q;
    }
}

template <typename T>
Plane<T> product(const Plane<T>& a, const Plane<T>& b) {
  Plane<T> out(a.h, a.w);
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] = a.v[i] * b.v[i];
  return out;
}

// Local moments of one scale.
template <typename T>
struct Moments {
  Plane<T> mux, muy, exx, eyy, exy;
};

template <typename T>
Moments<T> local_moments(const Plane<T>& x, const Plane<T>& y, const std::vector<T>& g) {
  return {filter_valid(x, g), filter_valid(y, g), filter_valid(product(x, x), g), filter_valid(product(y, y), g),
          filter_valid(product(x, y), g)};
}

struct Constants {
  double c1, c2, c3;
};

template <typename T>
std::vector<T> window_taps(const MsSsimConfig& cfg) {
  const auto g = gaussian_window(cfg.window, cfg.window_sigma);
  return std::vector<T>(g.begin(), g.end());
}

template <typename T>
Plane<T> as_plane(const Tensor<T>& t, const char* what) {
  const Shape& s = t.shape();
  if (s.size() == 2) return Plane<T>{s[0], s[1], t.storage()};
  if (s.size() == 3 && s[0] == 1) return Plane<T>{s[1], s[2], t.storage()};
  throw ShapeError(std::string(what) + ": expected a single-channel image (H,W) or (1,H,W), got " + to_string(s));
}

constexpr double kFactorFloor = 1e-6;

// Per-image forward state; enough to evaluate MS-SSIM and its gradient.
template <typename T>
struct MsSsimEval {
  std::vector<Plane<T>> xs, ys;   // image pyramid
  std::vector<double> raw;        // mean cs per scale, then mean l at the last slot
  std::vector<double> factor;     // raw clamped to [floor, 1]
  double value = 0;
};

template <typename T>
MsSsimEval<T> ms_ssim_eval(Plane<T> x, Plane<T> y, const MsSsimConfig& cfg, const std::vector<T>& g) {
  const std::size_t M = cfg.scales;
  const T c1 = T(cfg.c1()), c2 = T(cfg.c2());
  MsSsimEval<T> e;
  e.xs.push_back(std::move(x));
  e.ys.push_back(std::move(y));
  for (std::size_t j = 1; j < M; ++j) {
    e.xs.push_back(pool2(e.xs.back()));
    e.ys.push_back(pool2(e.ys.back()));
  }
  e.raw.assign(M + 1, 0.0);
  for (std::size_t j = 0; j < M; ++j) {
    const Moments<T> m = local_moments(e.xs[j], e.ys[j], g);
    double cs_sum = 0, l_sum = 0;
    const std::size_t P = m.mux.v.size();
    for (std::size_t i = 0; i < P; ++i) {
      const T mx = m.mux.v[i], my = m.muy.v[i];
      const T sx = m.exx.v[i] - mx * mx, sy = m.eyy.v[i] - my * my, sxy = m.exy.v[i] - mx * my;
      cs_sum += double((T(2) * sxy + c2) / (sx + sy + c2));
      if (j + 1 == M) l_sum += double((T(2) * mx * my + c1) / (mx * mx + my * my + c1));
    }
    e.raw[j] = cs_sum / double(P);
    if (j + 1 == M) e.raw[M] = l_sum / double(P);
  }
  e.factor.resize(M + 1);
  e.value = 1.0;
  for (std::size_t j = 0; j <= M; ++j) {
    e.factor[j] = std::clamp(e.raw[j], kFactorFloor, 1.0);
    const double expo = j < M ? cfg.beta[j] : cfg.alpha_m;
    e.value *= std::pow(e.factor[j], expo);
  }
  return e;
}

// Adds d(ms_ssim)/dx · scale_out into gx (and likewise gy when non-null).
template <typename T>
void ms_ssim_backward(const MsSsimEval<T>& e, const MsSsimConfig& cfg, const std::vector<T>& g, double upstream,
                      Plane<T>* gx, Plane<T>* gy) {
  const std::size_t M = cfg.scales;
  const T c1 = T(cfg.c1()), c2 = T(cfg.c2());
  // d value / d factor_j
  std::vector<double> dfac(M + 1, 0.0);
  for (std::size_t j = 0; j <= M; ++j) {
    const bool active = e.raw[j] > kFactorFloor && e.raw[j] < 1.0;
    if (!active) continue;
    const double expo = j < M ? cfg.beta[j] : cfg.alpha_m;
    dfac[j] = upstream * e.value * expo / e.factor[j];
  }
  Plane<T> gxs, gys;  // gradient carried from the coarser scale
  for (std::size_t jj = M; jj-- > 0;) {
    const Plane<T>& x = e.xs[jj];
    const Plane<T>& y = e.ys[jj];
    Plane<T> gxj(x.h, x.w), gyj(y.h, y.w);
    if (jj + 1 < M) {
      pool2_adjoint(gxs, gxj);
      pool2_adjoint(gys, gyj);
    }
    const bool last = jj + 1 == M;
    if (dfac[jj] != 0.0 || (last && dfac[M] != 0.0)) {
      const Moments<T> m = local_moments(x, y, g);
      const std::size_t P = m.mux.v.size();
      const T g_cs = T(dfac[jj] / double(P));
      const T g_l = last ? T(dfac[M] / double(P)) : T(0);
      Plane<T> gmx(m.mux.h, m.mux.w), gmy(gmx.h, gmx.w), gexx(gmx.h, gmx.w), geyy(gmx.h, gmx.w), gexy(gmx.h, gmx.w);
      for (std::size_t i = 0; i < P; ++i) {
        const T mx = m.mux.v[i], my = m.muy.v[i];
        const T sx = m.exx.v[i] - mx * mx, sy = m.eyy.v[i] - my * my, sxy = m.exy.v[i] - mx * my;
        const T b2 = sx + sy + c2;
        const T cs = (T(2) * sxy + c2) / b2;
        const T d_sx = -g_cs * cs / b2;  // same for sy
        const T d_sxy = g_cs * T(2) / b2;
        T dmx = d_sx * (T(-2) * mx) + d_sxy * (-my);
        T dmy = d_sx * (T(-2) * my) + d_sxy * (-mx);
        if (last && g_l != T(0)) {
          const T b1 = mx * mx + my * my + c1;
          const T l = (T(2) * mx * my + c1) / b1;
          dmx += g_l * T(2) * (my - l * mx) / b1;
          dmy += g_l * T(2) * (mx - l * my) / b1;
        }
        gmx.v[i] = dmx;
        gmy.v[i] = dmy;
        gexx.v[i] = d_sx;
        geyy.v[i] = d_sx;
        gexy.v[i] = d_sxy;
      }
      // Pull back through the filters: E[x²] -> 2x, E[xy] -> y (resp. x).
      Plane<T> a(x.h, x.w), bxx(x.h, x.w), bxy(x.h, x.w);
      filter_valid_adjoint(gmx, g, a);
      filter_valid_adjoint(gexx, g, bxx);
      filter_valid_adjoint(gexy, g, bxy);
      for (std::size_t i = 0; i < x.v.size(); ++i) gxj.v[i] += a.v[i] + T(2) * x.v[i] * bxx.v[i] + y.v[i] * bxy.v[i];
      if (gy) {
        Plane<T> ay(y.h, y.w), byy(y.h, y.w);
        filter_valid_adjoint(gmy, g, ay);
        filter_valid_adjoint(geyy, g, byy);
        for (std::size_t i = 0; i < y.v.size(); ++i)
          gyj.v[i] += ay.v[i] + T(2) * y.v[i] * byy.v[i] + x.v[i] * bxy.v[i];
      }
    }
    gxs = std::move(gxj);
    gys = std::move(gyj);
  }
  for (std::size_t i = 0; i < gxs.v.size(); ++i) gx->v[i] += gxs.v[i];
  if (gy)
    for (std::size_t i = 0; i < gys.v.size(); ++i) gy->v[i] += gys.v[i];
}

void check_image_size(const MsSsimConfig& cfg, std::size_t h, std::size_t w) {
  if (std::min(h, w) < cfg.min_image_side())
    throw ShapeError("ms-ssim: image " + std::to_string(h) + "x" + std::to_string(w) + " too small for " +
                     std::to_string(cfg.scales) + " scales with window " + std::to_string(cfg.window) +
                     " (need side >= " + std::to_string(cfg.min_image_side()) + ")");
}

}  // namespace

template <typename T>
SsimMaps<T> ssim_components(const Tensor<T>& x, const Tensor<T>& y, const MsSsimConfig& cfg) {
  const Plane<T> px = as_plane(x, "ssim_components");
  const Plane<T> py = as_plane(y, "ssim_components");
  if (px.h != py.h || px.w != py.w)
    throw ShapeError("ssim_components: shape mismatch " + to_string(x.shape()) + " vs " + to_string(y.shape()));
  if (std::min(px.h, px.w) < cfg.window) throw ShapeError("ssim_components: image smaller than window");
  const auto g = window_taps<T>(cfg);
  const Moments<T> m = local_moments(px, py, g);
  const T c1 = T(cfg.c1()), c2 = T(cfg.c2()), c3 = T(cfg.c3());
  const Shape s{m.mux.h, m.mux.w};
  SsimMaps<T> out{Tensor<T>(s), Tensor<T>(s), Tensor<T>(s)};
  for (std::size_t i = 0; i < m.mux.v.size(); ++i) {
    const T mx = m.mux.v[i], my = m.muy.v[i];
    const T vx = std::max(T(0), m.exx.v[i] - mx * mx), vy = std::max(T(0), m.eyy.v[i] - my * my);
    const T sxy = m.exy.v[i] - mx * my;
    const T sx = std::sqrt(vx), sy = std::sqrt(vy);
    out.luminance[i] = (T(2) * mx * my + c1) / (mx * mx + my * my + c1);
    out.contrast[i] = (T(2) * sx * sy + c2) / (vx + vy + c2);
    out.structure[i] = (sxy + c3) / (sx * sy + c3);
  }
  return out;
}

template <typename T>
double ms_ssim(const Tensor<T>& x, const Tensor<T>& y, const MsSsimConfig& cfg) {
  cfg.validate();
  Plane<T> px = as_plane(x, "ms_ssim");
  Plane<T> py = as_plane(y, "ms_ssim");
  if (px.h != py.h || px.w != py.w)
    throw ShapeError("ms_ssim: shape mismatch " + to_string(x.shape()) + " vs " + to_string(y.shape()));
  check_image_size(cfg, px.h, px.w);
  return ms_ssim_eval(std::move(px), std::move(py), cfg, window_taps<T>(cfg)).value;
}

template <typename T>
Var<T> ms_ssim_loss(Var<T> x, Var<T> y, const MsSsimConfig& cfg) {
  cfg.validate();
  const Shape& s = x.shape();
  if (s != y.shape() || s.size() != 4)
    throw ShapeError("ms_ssim_loss: expected equal (N,C,H,W) shapes, got " + to_string(s) + " and " +
                     to_string(y.shape()));
  const std::size_t images = s[0] * s[1], h = s[2], w = s[3], plane = h * w;
  check_image_size(cfg, h, w);
  const auto g = window_taps<T>(cfg);
  double sum = 0;
  for (std::size_t n = 0; n < images; ++n) {
    const auto xb = x.value().storage().begin() + std::ptrdiff_t(n * plane);
    const auto yb = y.value().storage().begin() + std::ptrdiff_t(n * plane);
    Plane<T> px{h, w, std::vector<T>(xb, xb + std::ptrdiff_t(plane))};
    Plane<T> py{h, w, std::vector<T>(yb, yb + std::ptrdiff_t(plane))};
    sum += 1.0 - ms_ssim_eval(std::move(px), std::move(py), cfg, g).value;
  }
  const std::size_t ix = x.id, iy = y.id;
  return x.tape->record(
      OpKind::ms_ssim_loss, {ix, iy}, Tensor<T>::scalar(T(sum / double(images))),
      [=](Tape<T>& t, std::size_t self) {
        const double up = -double(t.upstream(self)[0]) / double(images);
        const bool need_x = t.requires_grad(ix), need_y = t.requires_grad(iy);
        const auto& xv = t.value(ix).storage();
        const auto& yv = t.value(iy).storage();
        T* gxp = need_x ? t.grad_buffer(ix).data().data() : nullptr;
        T* gyp = need_y ? t.grad_buffer(iy).data().data() : nullptr;
        for (std::size_t n = 0; n < images; ++n) {
          const auto xb = xv.begin() + std::ptrdiff_t(n * plane);
          const auto yb = yv.begin() + std::ptrdiff_t(n * plane);
          // Gradients are symmetric in (x, y); when only y needs one, swap roles.
          const bool swap = !need_x;
          Plane<T> pa{h, w, std::vector<T>(swap ? yb : xb, (swap ? yb : xb) + std::ptrdiff_t(plane))};
          Plane<T> pb{h, w, std::vector<T>(swap ? xb : yb, (swap ? xb : yb) + std::ptrdiff_t(plane))};
          const auto e = ms_ssim_eval(std::move(pa), std::move(pb), cfg, g);
          Plane<T> ga(h, w), gb(h, w);
          ms_ssim_backward(e, cfg, g, up, &ga, (need_x && need_y) ? &gb : nullptr);
          T* first = swap ? gyp : gxp;
          for (std::size_t i = 0; i < plane; ++i) first[n * plane + i] += ga.v[i];
          if (need_x && need_y)
            for (std::size_t i = 0; i < plane; ++i) gyp[n * plane + i] += gb.v[i];
        }
      });
}

// ---------------------------------------------------------------------------
// Pointwise losses

template <typename T>
Var<T> smooth_l1(Var<T> a, Var<T> b, T beta) {
  if (a.shape() != b.shape())
    throw ShapeError("smooth_l1: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  if (!(beta > T(0))) throw std::invalid_argument("smooth_l1: beta must be positive");
  const auto av = a.value().data();
  const auto bv = b.value().data();
  double acc = 0;
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double d = double(av[i]) - double(bv[i]);
    const double ad = std::abs(d);
    acc += ad < double(beta) ? 0.5 * d * d / double(beta) : ad - 0.5 * double(beta);
  }
  const std::size_t ia = a.id, ib = b.id, n = av.size();
  return a.tape->record(OpKind::smooth_l1, {ia, ib}, Tensor<T>::scalar(T(acc / double(n))),
                        [=](Tape<T>& t, std::size_t self) {
                          const T up = t.upstream(self)[0] / T(n);
                          const auto av = t.value(ia).data();
                          const auto bv = t.value(ib).data();
                          T* ga = t.requires_grad(ia) ? t.grad_buffer(ia).data().data() : nullptr;
                          T* gb = t.requires_grad(ib) ? t.grad_buffer(ib).data().data() : nullptr;
                          for (std::size_t i = 0; i < n; ++i) {
                            const T d = av[i] - bv[i];
                            const T gd = std::abs(d) < beta ? d / beta : (d > T(0) ? T(1) : T(-1));
                            if (ga) ga[i] += up * gd;
                            if (gb) gb[i] -= up * gd;
                          }
                        });
}

template <typename T>
Var<T> mse_loss(Var<T> a, Var<T> b) {
  if (a.shape() != b.shape())
    throw ShapeError("mse_loss: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  return reduce_mean(square(sub(a, b)));
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& targets, const CrossEntropyConfig& cfg) {
  const Shape& s = logits.shape();
  const std::size_t K = cfg.classes();
  if (s.size() != 2 || s[1] != K)
    throw ShapeError("cross_entropy: logits must be (N," + std::to_string(K) + "), got " + to_string(s));
  const std::size_t N = s[0];
  if (targets.size() != N)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(N) +
                     " rows");
  for (int y : targets)
    if (y < 0 || std::size_t(y) >= K)
      throw std::out_of_range("cross_entropy: target " + std::to_string(y) + " outside [0," + std::to_string(K) + ")");
  const auto x = logits.value().data();
  std::vector<T> probs(N * K);
  double acc = 0;
  for (std::size_t n = 0; n < N; ++n) {
    const T* row = x.data() + n * K;
    const T mx = *std::max_element(row, row + K);
    double z = 0;
    for (std::size_t k = 0; k < K; ++k) z += std::exp(double(row[k] - mx));
    const double lse = double(mx) + std::log(z);
    for (std::size_t k = 0; k < K; ++k) probs[n * K + k] = T(std::exp(double(row[k]) - lse));
    const std::size_t y = std::size_t(targets[n]);
    acc += -cfg.class_weights[y] * (double(row[y]) - lse);
  }
  const std::size_t il = logits.id;
  std::vector<double> weights = cfg.class_weights;
  return logits.tape->record(OpKind::cross_entropy, {il}, Tensor<T>::scalar(T(acc / double(N))),
                             [=, probs = std::move(probs)](Tape<T>& t, std::size_t self) {
                               const T up = t.upstream(self)[0] / T(N);
                               T* g = t.grad_buffer(il).data().data();
                               for (std::size_t n = 0; n < N; ++n) {
                                 const std::size_t y = std::size_t(targets[n]);
                                 const T wy = T(weights[y]);
                                 for (std::size_t k = 0; k < K; ++k)
                                   g[n * K + k] += up * wy * (probs[n * K + k] - (k == y ? T(1) : T(0)));
                               }
                             });
}

// ---------------------------------------------------------------------------
// Windowed objective

template <typename T>
Tensor<T> time_major(const Tensor<T>& x) {
  const Shape& s = x.shape();
  if (s.size() < 2) throw ShapeError("time_major: need (B,T,...), got " + to_string(s));
  const std::size_t B = s[0], Tn = s[1], inner = x.size() / (B * Tn);
  Shape out{Tn * B};
  out.insert(out.end(), s.begin() + 2, s.end());
  if (out.size() == 1) out.push_back(1);
  Tensor<T> y(out);
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < Tn; ++t)
      std::copy_n(x.data().begin() + std::ptrdiff_t((b * Tn + t) * inner), inner,
                  y.data().begin() + std::ptrdiff_t((t * B + b) * inner));
  return y;
}

template <typename T>
TotalLoss<T> carnet_total_loss(const RolloutOutput<T>& r, const WindowBatch<T>& targets,
                               const TotalLossOptions& opts) {
  const std::size_t B = targets.batch(), Tn = targets.steps();
  if (Tn < 2) throw std::invalid_argument("carnet_total_loss: window length must be at least 2");
  if (r.batch != B || r.steps != Tn) throw ShapeError("carnet_total_loss: rollout and targets cover different windows");
  Tape<T>& tape = *r.recons.tape;
  const Var<T> frames = tape.constant(time_major(targets.frames));
  const Var<T> next_frames = slice(frames, 0, B, Tn * B);
  auto image_loss = [&](Var<T> a, Var<T> b) {
    return opts.image_loss == ImageLoss::ms_ssim ? ms_ssim_loss(a, b, opts.ms_ssim) : mse_loss(a, b);
  };
  const T beta = T(opts.smooth_l1_beta);
  TotalLoss<T> out;
  out.parts.emplace_back("recon", image_loss(r.recons, frames));
  out.parts.emplace_back("pred", image_loss(r.preds, next_frames));
  out.parts.emplace_back("latent", smooth_l1(r.predicted_latents, slice(r.latents, 0, B, Tn * B), beta));
  if (opts.sensors) {
    if (!targets.sensors || !r.sensor_preds)
      throw std::invalid_argument("carnet_total_loss: sensor term requested without sensor data");
    const Var<T> s = tape.constant(time_major(*targets.sensors));
    out.parts.emplace_back("sensor", smooth_l1(*r.sensor_preds, slice(s, 0, B, Tn * B), beta));
  }
  Var<T> total = add(out.parts[0].second, out.parts[1].second);
  for (std::size_t i = 2; i < out.parts.size(); ++i) total = add(total, out.parts[i].second);
  out.total = total;
  return out;
}

#define CARNET_INSTANTIATE(T)                                                                          \
  template SsimMaps<T> ssim_components(const Tensor<T>&, const Tensor<T>&, const MsSsimConfig&);       \
  template double ms_ssim(const Tensor<T>&, const Tensor<T>&, const MsSsimConfig&);                   \
  template Var<T> ms_ssim_loss(Var<T>, Var<T>, const MsSsimConfig&);                                  \
  template Var<T> smooth_l1(Var<T>, Var<T>, T);                                                       \
  template Var<T> mse_loss(Var<T>, Var<T>);                                                           \
  template Var<T> cross_entropy(Var<T>, const std::vector<int>&, const CrossEntropyConfig&);          \
  template Tensor<T> time_major(const Tensor<T>&);                                                    \
  template TotalLoss<T> carnet_total_loss(const RolloutOutput<T>&, const WindowBatch<T>&,             \
                                          const TotalLossOptions&);

CARNET_INSTANTIATE(float)
CARNET_INSTANTIATE(double)

}  // namespace carnet
