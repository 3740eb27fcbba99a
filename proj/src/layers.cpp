// SPDX-License-Identifier: Apache-2.0

#include "carnet/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>

namespace carnet {

namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

struct Geometry {
  std::size_t channels, h, w;      // image side
  std::size_t kernel, stride, pad;
  std::size_t oh, ow;              // column grid
};

// cols[(c,a,b), (i,j)] = img[c, i*s-p+a, j*s-p+b]
template <typename T>
void im2col(const T* img, const Geometry& g, T* cols) {
  const std::size_t npos = g.oh * g.ow;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t a = 0; a < g.kernel; ++a)
      for (std::size_t b = 0; b < g.kernel; ++b) {
        T* row = cols + ((c * g.kernel + a) * g.kernel + b) * npos;
        for (std::size_t i = 0; i < g.oh; ++i) {
          const std::ptrdiff_t y = std::ptrdiff_t(i * g.stride + a) - std::ptrdiff_t(g.pad);
          T* dst = row + i * g.ow;
          if (y < 0 || y >= std::ptrdiff_t(g.h)) {
            std::fill_n(dst, g.ow, T(0));
            continue;
          }
          const T* src = img + (c * g.h + std::size_t(y)) * g.w;
          for (std::size_t j = 0; j < g.ow; ++j) {
            const std::ptrdiff_t x = std::ptrdiff_t(j * g.stride + b) - std::ptrdiff_t(g.pad);
            dst[j] = (x < 0 || x >= std::ptrdiff_t(g.w)) ? T(0) : src[x];
          }
        }
      }
}

// Adjoint of im2col: img += scatter(cols)
template <typename T>
void col2im(const T* cols, const Geometry& g, T* img) {
  const std::size_t npos = g.oh * g.ow;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t a = 0; a < g.kernel; ++a)
      for (std::size_t b = 0; b < g.kernel; ++b) {
        const T* row = cols + ((c * g.kernel + a) * g.kernel + b) * npos;
        for (std::size_t i = 0; i < g.oh; ++i) {
          const std::ptrdiff_t y = std::ptrdiff_t(i * g.stride + a) - std::ptrdiff_t(g.pad);
          if (y < 0 || y >= std::ptrdiff_t(g.h)) continue;
          const T* src = row + i * g.ow;
          T* dst = img + (c * g.h + std::size_t(y)) * g.w;
          for (std::size_t j = 0; j < g.ow; ++j) {
            const std::ptrdiff_t x = std::ptrdiff_t(j * g.stride + b) - std::ptrdiff_t(g.pad);
            if (x >= 0 && x < std::ptrdiff_t(g.w)) dst[x] += src[j];
          }
        }
      }
}

struct ImageDims {
  std::size_t n, c, h, w;
  bool batched;
};

ImageDims image_dims(const char* op, const Shape& s) {
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  throw ShapeError(std::string(op) + ": expected (N,C,H,W) or (C,H,W), got " + to_string(s));
}

Shape image_shape(const ImageDims& d, std::size_t c, std::size_t h, std::size_t w) {
  return d.batched ? Shape{d.n, c, h, w} : Shape{c, h, w};
}

}  // namespace

std::size_t conv_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding) {
  const std::ptrdiff_t span = std::ptrdiff_t(in + 2 * padding) - std::ptrdiff_t(kernel);
  if (span < 0 || stride == 0)
    throw ShapeError("conv2d: non-positive output size for input " + std::to_string(in) + ", kernel " +
                     std::to_string(kernel) + ", stride " + std::to_string(stride) + ", padding " +
                     std::to_string(padding));
  return std::size_t(span) / stride + 1;
}

std::size_t conv_transpose_out_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding,
                                    std::size_t output_padding) {
  const std::ptrdiff_t out = std::ptrdiff_t((in - 1) * stride + kernel + output_padding) - std::ptrdiff_t(2 * padding);
  if (out <= 0 || stride == 0) throw ShapeError("conv_transpose2d: non-positive output size");
  return std::size_t(out);
}

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, std::size_t stride, std::size_t padding) {
  const ImageDims d = image_dims("conv2d", x.shape());
  const Shape& ws = weight.shape();
  if (ws.size() != 4 || ws[2] != ws[3])
    throw ShapeError("conv2d: weight must be (C_out,C_in,k,k), got " + to_string(ws));
  if (ws[1] != d.c)
    throw ShapeError("conv2d: channel mismatch, input " + to_string(x.shape()) + " vs weight " + to_string(ws));
  if (bias.shape() != Shape{ws[0]})
    throw ShapeError("conv2d: bias " + to_string(bias.shape()) + " does not match weight " + to_string(ws));
  const std::size_t k = ws[2], co = ws[0];
  const Geometry g{d.c, d.h, d.w, k, stride, padding, conv_out_size(d.h, k, stride, padding),
                   conv_out_size(d.w, k, stride, padding)};
  const Eigen::Index K = Eigen::Index(d.c * k * k), P = Eigen::Index(g.oh * g.ow), O = Eigen::Index(co);
  Tensor<T> y(image_shape(d, co, g.oh, g.ow));
  std::vector<T> cols(std::size_t(K * P));
  CMapR<T> wm(weight.value().data().data(), O, K);
  const T* bv = bias.value().data().data();
  for (std::size_t n = 0; n < d.n; ++n) {
    im2col(x.value().data().data() + n * d.c * d.h * d.w, g, cols.data());
    MapR<T> out(y.data().data() + n * co * std::size_t(P), O, P);
    out.noalias() = wm * CMapR<T>(cols.data(), K, P);
    for (Eigen::Index o = 0; o < O; ++o) out.row(o).array() += bv[o];
  }
  const std::size_t ix = x.id, iw = weight.id, ib = bias.id;
  const std::size_t in_stride = d.c * d.h * d.w, out_stride = co * std::size_t(P), batch = d.n;
  return x.tape->record(OpKind::conv2d, {ix, iw, ib}, std::move(y), [=](Tape<T>& t, std::size_t self) {
    const T* gy = t.upstream(self).data().data();
    const T* xv = t.value(ix).data().data();
    CMapR<T> wm(t.value(iw).data().data(), O, K);
    std::vector<T> cols(std::size_t(K * P));
    const bool need_x = t.requires_grad(ix), need_w = t.requires_grad(iw), need_b = t.requires_grad(ib);
    T* gx = need_x ? t.grad_buffer(ix).data().data() : nullptr;
    T* gw = need_w ? t.grad_buffer(iw).data().data() : nullptr;
    T* gb = need_b ? t.grad_buffer(ib).data().data() : nullptr;
    for (std::size_t n = 0; n < batch; ++n) {
      CMapR<T> go(gy + n * out_stride, O, P);
      if (need_b)
        for (Eigen::Index o = 0; o < O; ++o) gb[o] += go.row(o).sum();
      if (need_w) {
        im2col(xv + n * in_stride, g, cols.data());
        MapR<T>(gw, O, K).noalias() += go * CMapR<T>(cols.data(), K, P).transpose();
      }
      if (need_x) {
        MapR<T>(cols.data(), K, P).noalias() = wm.transpose() * go;
        col2im(cols.data(), g, gx + n * in_stride);
      }
    }
  });
}

template <typename T>
Var<T> conv_transpose2d(Var<T> x, Var<T> weight, Var<T> bias, std::size_t stride, std::size_t padding,
                        std::size_t output_padding) {
  const ImageDims d = image_dims("conv_transpose2d", x.shape());
  const Shape& ws = weight.shape();
  if (ws.size() != 4 || ws[2] != ws[3])
    throw ShapeError("conv_transpose2d: weight must be (C_in,C_out,k,k), got " + to_string(ws));
  if (ws[0] != d.c)
    throw ShapeError("conv_transpose2d: channel mismatch, input " + to_string(x.shape()) + " vs weight " +
                     to_string(ws));
  if (bias.shape() != Shape{ws[1]})
    throw ShapeError("conv_transpose2d: bias " + to_string(bias.shape()) + " does not match weight " +
                     to_string(ws));
  if (output_padding >= std::max<std::size_t>(stride, 1))
    throw ShapeError("conv_transpose2d: output_padding must be smaller than stride");
  const std::size_t k = ws[2], co = ws[1];
  const std::size_t oh = conv_transpose_out_size(d.h, k, stride, padding, output_padding);
  const std::size_t ow = conv_transpose_out_size(d.w, k, stride, padding, output_padding);
  // Column grid is the input grid; the "image" side is the output.
  const Geometry g{co, oh, ow, k, stride, padding, d.h, d.w};
  const Eigen::Index Ci = Eigen::Index(d.c), K = Eigen::Index(co * k * k), P = Eigen::Index(d.h * d.w);
  Tensor<T> y(image_shape(d, co, oh, ow));
  std::vector<T> cols(std::size_t(K * P));
  CMapR<T> wm(weight.value().data().data(), Ci, K);
  const T* bv = bias.value().data().data();
  const std::size_t in_stride = d.c * std::size_t(P), out_stride = co * oh * ow, plane = oh * ow;
  for (std::size_t n = 0; n < d.n; ++n) {
    MapR<T>(cols.data(), K, P).noalias() = wm.transpose() * CMapR<T>(x.value().data().data() + n * in_stride, Ci, P);
    T* out = y.data().data() + n * out_stride;
    col2im(cols.data(), g, out);
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t i = 0; i < plane; ++i) out[o * plane + i] += bv[o];
  }
  const std::size_t ix = x.id, iw = weight.id, ib = bias.id, batch = d.n;
  return x.tape->record(OpKind::conv_transpose2d, {ix, iw, ib}, std::move(y), [=](Tape<T>& t, std::size_t self) {
    const T* gy = t.upstream(self).data().data();
    const T* xv = t.value(ix).data().data();
    CMapR<T> wm(t.value(iw).data().data(), Ci, K);
    std::vector<T> cols(std::size_t(K * P));
    const bool need_x = t.requires_grad(ix), need_w = t.requires_grad(iw), need_b = t.requires_grad(ib);
    T* gx = need_x ? t.grad_buffer(ix).data().data() : nullptr;
    T* gw = need_w ? t.grad_buffer(iw).data().data() : nullptr;
    T* gb = need_b ? t.grad_buffer(ib).data().data() : nullptr;
    for (std::size_t n = 0; n < batch; ++n) {
      const T* go = gy + n * out_stride;
      if (need_b)
        for (std::size_t o = 0; o < co; ++o)
          for (std::size_t i = 0; i < plane; ++i) gb[o] += go[o * plane + i];
      if (!need_x && !need_w) continue;
      im2col(go, g, cols.data());
      CMapR<T> cm(cols.data(), K, P);
      if (need_x) MapR<T>(gx + n * in_stride, Ci, P).noalias() += wm * cm;
      if (need_w) MapR<T>(gw, Ci, K).noalias() += CMapR<T>(xv + n * in_stride, Ci, P) * cm.transpose();
    }
  });
}

template <typename T>
Var<T> batchnorm2d(Var<T> x, Var<T> gamma, Var<T> beta, T eps, bool training, BatchNormStats<T>* stats,
                   T momentum) {
  const ImageDims d = image_dims("batchnorm2d", x.shape());
  if (gamma.shape() != Shape{d.c} || beta.shape() != Shape{d.c})
    throw ShapeError("batchnorm2d: affine parameters must be (" + std::to_string(d.c) + ",), got " +
                     to_string(gamma.shape()) + " and " + to_string(beta.shape()));
  if (!training && !stats) throw std::invalid_argument("batchnorm2d: eval mode requires running statistics");
  const std::size_t plane = d.h * d.w, count = d.n * plane, C = d.c, N = d.n;
  const T* xv = x.value().data().data();
  std::vector<T> mean(C), invstd(C);
  for (std::size_t c = 0; c < C; ++c) {
    if (training) {
      double s = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < plane; ++i) s += xv[(n * C + c) * plane + i];
      const double mu = s / double(count);
      double v = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < plane; ++i) {
          const double e = xv[(n * C + c) * plane + i] - mu;
          v += e * e;
        }
      v /= double(count);
      mean[c] = T(mu);
      invstd[c] = T(1.0 / std::sqrt(v + double(eps)));
      if (stats) {
        if (stats->running_mean.empty()) {
          stats->running_mean = Tensor<T>(Shape{C}, T(0));
          stats->running_var = Tensor<T>(Shape{C}, T(1));
        }
        const double unbiased = count > 1 ? v * double(count) / double(count - 1) : v;
        stats->running_mean[c] = T((1 - double(momentum)) * stats->running_mean[c] + double(momentum) * mu);
        stats->running_var[c] = T((1 - double(momentum)) * stats->running_var[c] + double(momentum) * unbiased);
      }
    } else {
      mean[c] = stats->running_mean[c];
      invstd[c] = T(1.0 / std::sqrt(double(stats->running_var[c]) + double(eps)));
    }
  }
  Tensor<T> y(x.shape());
  T* yv = y.data().data();
  const T* gv = gamma.value().data().data();
  const T* bv = beta.value().data().data();
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      const std::size_t base = (n * C + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) yv[base + i] = gv[c] * ((xv[base + i] - mean[c]) * invstd[c]) + bv[c];
    }
  const std::size_t ix = x.id, ig = gamma.id, ibt = beta.id;
  return x.tape->record(OpKind::batchnorm2d, {ix, ig, ibt}, std::move(y), [=](Tape<T>& t, std::size_t self) {
    const T* gy = t.upstream(self).data().data();
    const T* xv = t.value(ix).data().data();
    const T* gv = t.value(ig).data().data();
    const bool need_x = t.requires_grad(ix);
    T* gx = need_x ? t.grad_buffer(ix).data().data() : nullptr;
    T* gg = t.requires_grad(ig) ? t.grad_buffer(ig).data().data() : nullptr;
    T* gb = t.requires_grad(ibt) ? t.grad_buffer(ibt).data().data() : nullptr;
    for (std::size_t c = 0; c < C; ++c) {
      double sum_g = 0, sum_gx = 0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t at = (n * C + c) * plane + i;
          const double xhat = double(xv[at] - mean[c]) * invstd[c];
          sum_g += gy[at];
          sum_gx += gy[at] * xhat;
        }
      if (gg) gg[c] += T(sum_gx);
      if (gb) gb[c] += T(sum_g);
      if (!need_x) continue;
      const double gc = gv[c], is = invstd[c];
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t i = 0; i < plane; ++i) {
          const std::size_t at = (n * C + c) * plane + i;
          if (training) {
            const double xhat = double(xv[at] - mean[c]) * is;
            gx[at] += T(gc * is * (double(gy[at]) - sum_g / double(count) - xhat * sum_gx / double(count)));
          } else {
            gx[at] += T(gc * is * double(gy[at]));
          }
        }
    }
  });
}

namespace {

template <typename T>
struct AttentionDims {
  std::size_t n, din, dout, h, w, k, half;
  bool batched, relative;
};

template <typename T>
AttentionDims<T> attention_dims(const Shape& xs, const Shape& wq, const Shape& wk, const Shape& wv,
                                const Shape* rr, const Shape* rc, std::size_t k) {
  if (k % 2 == 0) throw ShapeError("local_attention: neighborhood extent must be odd, got " + std::to_string(k));
  const ImageDims d = image_dims("local_attention", xs);
  if (wq.size() != 2 || wq[1] != d.c || wk != wq || wv.size() != 2 || wv[1] != d.c || wv[0] != wq[0])
    throw ShapeError("local_attention: projection shapes " + to_string(wq) + ", " + to_string(wk) + ", " +
                     to_string(wv) + " incompatible with input " + to_string(xs));
  const std::size_t dout = wq[0];
  const bool relative = rr != nullptr;
  if (relative) {
    if (dout % 2 != 0) throw ShapeError("local_attention: relative mode requires even d_out, got " + std::to_string(dout));
    const Shape want{k, dout / 2};
    if (*rr != want || *rc != want)
      throw ShapeError("local_attention: relative embeddings must be " + to_string(want));
  }
  return {d.n, d.c, dout, d.h, d.w, k, k / 2, d.batched, relative};
}

// Projects x (n, din, h*w) with w (dout, din) into out (n, dout, h*w).
template <typename T>
void project(const T* x, const T* w, std::size_t n, std::size_t din, std::size_t dout, std::size_t p, T* out) {
  CMapR<T> wm(w, Eigen::Index(dout), Eigen::Index(din));
  for (std::size_t b = 0; b < n; ++b)
    MapR<T>(out + b * dout * p, Eigen::Index(dout), Eigen::Index(p)).noalias() =
        wm * CMapR<T>(x + b * din * p, Eigen::Index(din), Eigen::Index(p));
}

// Softmax weights (n, h*w, k*k) for queries q and keys kk, both (n, dout, h*w).
template <typename T>
std::vector<T> attention_softmax(const AttentionDims<T>& a, const T* q, const T* kk, const T* rr, const T* rc) {
  const std::size_t p = a.h * a.w, kk2 = a.k * a.k, hd = a.dout / 2;
  std::vector<T> probs(a.n * p * kk2);
  std::vector<T> score(kk2);
  for (std::size_t b = 0; b < a.n; ++b)
    for (std::size_t i = 0; i < a.h; ++i)
      for (std::size_t j = 0; j < a.w; ++j) {
        const std::size_t pix = i * a.w + j;
        for (std::size_t u = 0; u < a.k; ++u)
          for (std::size_t v = 0; v < a.k; ++v) {
            const std::ptrdiff_t y = std::ptrdiff_t(i + u) - std::ptrdiff_t(a.half);
            const std::ptrdiff_t x = std::ptrdiff_t(j + v) - std::ptrdiff_t(a.half);
            const bool inside = y >= 0 && x >= 0 && y < std::ptrdiff_t(a.h) && x < std::ptrdiff_t(a.w);
            T s = 0;
            for (std::size_t c = 0; c < a.dout; ++c) {
              const T qc = q[(b * a.dout + c) * p + pix];
              T key = inside ? kk[(b * a.dout + c) * p + std::size_t(y) * a.w + std::size_t(x)] : T(0);
              if (a.relative) key += c < hd ? rr[u * hd + c] : rc[v * hd + (c - hd)];
              s += qc * key;
            }
            score[u * a.k + v] = s;
          }
        const T mx = *std::max_element(score.begin(), score.end());
        T z = 0;
        T* pr = probs.data() + (b * p + pix) * kk2;
        for (std::size_t e = 0; e < kk2; ++e) z += (pr[e] = std::exp(score[e] - mx));
        for (std::size_t e = 0; e < kk2; ++e) pr[e] /= z;
      }
  return probs;
}

}  // namespace

template <typename T>
Tensor<T> local_attention_weights(const Tensor<T>& x, const Tensor<T>& w_q, const Tensor<T>& w_k,
                                  const Tensor<T>* r_row, const Tensor<T>* r_col, std::size_t k) {
  const auto a = attention_dims<T>(x.shape(), w_q.shape(), w_k.shape(), w_q.shape(),
                                   r_row ? &r_row->shape() : nullptr, r_col ? &r_col->shape() : nullptr, k);
  const std::size_t p = a.h * a.w;
  std::vector<T> q(a.n * a.dout * p), kk(a.n * a.dout * p);
  project(x.data().data(), w_q.data().data(), a.n, a.din, a.dout, p, q.data());
  project(x.data().data(), w_k.data().data(), a.n, a.din, a.dout, p, kk.data());
  auto probs = attention_softmax(a, q.data(), kk.data(), r_row ? r_row->data().data() : nullptr,
                                 r_col ? r_col->data().data() : nullptr);
  return Tensor<T>(Shape{a.n, a.h, a.w, k * k}, std::move(probs));
}

template <typename T>
Var<T> local_attention(Var<T> x, Var<T> w_q, Var<T> w_k, Var<T> w_v, Var<T> r_row, Var<T> r_col, std::size_t k) {
  const bool relative = r_row.tape != nullptr;
  const auto a = attention_dims<T>(x.shape(), w_q.shape(), w_k.shape(), w_v.shape(),
                                   relative ? &r_row.shape() : nullptr, relative ? &r_col.shape() : nullptr, k);
  const std::size_t p = a.h * a.w, kk2 = k * k, D = a.dout;
  std::vector<T> q(a.n * D * p), kv(a.n * D * p), vv(a.n * D * p);
  const T* xv = x.value().data().data();
  project(xv, w_q.value().data().data(), a.n, a.din, D, p, q.data());
  project(xv, w_k.value().data().data(), a.n, a.din, D, p, kv.data());
  project(xv, w_v.value().data().data(), a.n, a.din, D, p, vv.data());
  const T* rr = relative ? r_row.value().data().data() : nullptr;
  const T* rc = relative ? r_col.value().data().data() : nullptr;
  std::vector<T> probs = attention_softmax(a, q.data(), kv.data(), rr, rc);

  Tensor<T> y(a.batched ? Shape{a.n, D, a.h, a.w} : Shape{D, a.h, a.w});
  T* yv = y.data().data();
  for (std::size_t b = 0; b < a.n; ++b)
    for (std::size_t i = 0; i < a.h; ++i)
      for (std::size_t j = 0; j < a.w; ++j) {
        const std::size_t pix = i * a.w + j;
        const T* pr = probs.data() + (b * p + pix) * kk2;
        for (std::size_t u = 0; u < k; ++u)
          for (std::size_t v = 0; v < k; ++v) {
            const std::ptrdiff_t yy = std::ptrdiff_t(i + u) - std::ptrdiff_t(a.half);
            const std::ptrdiff_t xx = std::ptrdiff_t(j + v) - std::ptrdiff_t(a.half);
            if (yy < 0 || xx < 0 || yy >= std::ptrdiff_t(a.h) || xx >= std::ptrdiff_t(a.w)) continue;
            const std::size_t nb = std::size_t(yy) * a.w + std::size_t(xx);
            const T wgt = pr[u * k + v];
            for (std::size_t c = 0; c < D; ++c) yv[(b * D + c) * p + pix] += wgt * vv[(b * D + c) * p + nb];
          }
      }

  std::vector<std::size_t> ins{x.id, w_q.id, w_k.id, w_v.id};
  if (relative) ins.insert(ins.end(), {r_row.id, r_col.id});
  const std::size_t ix = x.id, iq = w_q.id, ik = w_k.id, iv = w_v.id;
  const std::size_t irr = relative ? r_row.id : 0, irc = relative ? r_col.id : 0;
  return x.tape->record(
      OpKind::local_attention, std::move(ins), std::move(y),
      [=, q = std::move(q), kv = std::move(kv), vv = std::move(vv), probs = std::move(probs)](Tape<T>& t,
                                                                                               std::size_t self) {
        const T* gy = t.upstream(self).data().data();
        const T* rr = relative ? t.value(irr).data().data() : nullptr;
        const T* rc = relative ? t.value(irc).data().data() : nullptr;
        const std::size_t hd = D / 2;
        std::vector<T> gq(q.size()), gk(kv.size()), gv(vv.size());
        std::vector<T> grr(relative ? k * hd : 0), grc(relative ? k * hd : 0);
        std::vector<T> dp(kk2);
        for (std::size_t b = 0; b < a.n; ++b)
          for (std::size_t i = 0; i < a.h; ++i)
            for (std::size_t j = 0; j < a.w; ++j) {
              const std::size_t pix = i * a.w + j;
              const T* pr = probs.data() + (b * p + pix) * kk2;
              // dL/dp for each neighbor, and dL/dv.
              for (std::size_t u = 0; u < k; ++u)
                for (std::size_t v = 0; v < k; ++v) {
                  const std::ptrdiff_t yy = std::ptrdiff_t(i + u) - std::ptrdiff_t(a.half);
                  const std::ptrdiff_t xx = std::ptrdiff_t(j + v) - std::ptrdiff_t(a.half);
                  T acc = 0;
                  if (yy >= 0 && xx >= 0 && yy < std::ptrdiff_t(a.h) && xx < std::ptrdiff_t(a.w)) {
                    const std::size_t nb = std::size_t(yy) * a.w + std::size_t(xx);
                    for (std::size_t c = 0; c < D; ++c) {
                      const T g = gy[(b * D + c) * p + pix];
                      acc += g * vv[(b * D + c) * p + nb];
                      gv[(b * D + c) * p + nb] += pr[u * k + v] * g;
                    }
                  }
                  dp[u * k + v] = acc;
                }
              T dot = 0;
              for (std::size_t e = 0; e < kk2; ++e) dot += pr[e] * dp[e];
              for (std::size_t u = 0; u < k; ++u)
                for (std::size_t v = 0; v < k; ++v) {
                  const T ds = pr[u * k + v] * (dp[u * k + v] - dot);
                  if (ds == T(0)) continue;
                  const std::ptrdiff_t yy = std::ptrdiff_t(i + u) - std::ptrdiff_t(a.half);
                  const std::ptrdiff_t xx = std::ptrdiff_t(j + v) - std::ptrdiff_t(a.half);
                  const bool inside = yy >= 0 && xx >= 0 && yy < std::ptrdiff_t(a.h) && xx < std::ptrdiff_t(a.w);
                  const std::size_t nb = inside ? std::size_t(yy) * a.w + std::size_t(xx) : 0;
                  for (std::size_t c = 0; c < D; ++c) {
                    const T qc = q[(b * D + c) * p + pix];
                    T key = inside ? kv[(b * D + c) * p + nb] : T(0);
                    if (relative) {
                      if (c < hd) {
                        key += rr[u * hd + c];
                        grr[u * hd + c] += ds * qc;
                      } else {
                        key += rc[v * hd + (c - hd)];
                        grc[v * hd + (c - hd)] += ds * qc;
                      }
                    }
                    gq[(b * D + c) * p + pix] += ds * key;
                    if (inside) gk[(b * D + c) * p + nb] += ds * qc;
                  }
                }
            }
        const T* xv = t.value(ix).data().data();
        const Eigen::Index Din = Eigen::Index(a.din), Dd = Eigen::Index(D), P = Eigen::Index(p);
        const std::size_t xs = a.din * p, ps = D * p;
        const bool need_x = t.requires_grad(ix);
        T* gx = need_x ? t.grad_buffer(ix).data().data() : nullptr;
        const std::pair<std::size_t, const std::vector<T>*> projections[] = {{iq, &gq}, {ik, &gk}, {iv, &gv}};
        for (const auto& [wid, gproj] : projections) {
          CMapR<T> wm(t.value(wid).data().data(), Dd, Din);
          const bool need_w = t.requires_grad(wid);
          T* gw = need_w ? t.grad_buffer(wid).data().data() : nullptr;
          for (std::size_t b = 0; b < a.n; ++b) {
            CMapR<T> gpm(gproj->data() + b * ps, Dd, P);
            if (need_w) MapR<T>(gw, Dd, Din).noalias() += gpm * CMapR<T>(xv + b * xs, Din, P).transpose();
            if (need_x) MapR<T>(gx + b * xs, Din, P).noalias() += wm.transpose() * gpm;
          }
        }
        if (relative) {
          t.accumulate(irr, Tensor<T>(Shape{k, hd}, std::move(grr)));
          t.accumulate(irc, Tensor<T>(Shape{k, hd}, std::move(grc)));
        }
      });
}

template <typename T>
Var<T> activation(Activation kind, Var<T> x) {
  switch (kind) {
    case Activation::relu: return relu(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::tanh: return tanh(x);
    case Activation::softmax: return softmax(x);
  }
  return x;
}

// ---------------------------------------------------------------------------
// Initialization

template <typename T>
void init_fan_in_uniform(Tensor<T>& t, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(double(std::max<std::size_t>(fan_in, 1)));
  for (auto& v : t.storage()) v = T(rng.uniform(-bound, bound));
}

template <typename T>
void init_normal(Tensor<T>& t, double stddev, Rng& rng) {
  for (auto& v : t.storage()) v = T(stddev * rng.normal());
}

// ---------------------------------------------------------------------------
// Layers

template <typename T>
Conv2d<T>::Conv2d(std::string name, std::size_t in_ch_, std::size_t out_ch_, std::size_t kernel_, std::size_t stride_,
                  std::size_t padding_, bool transposed_, std::size_t output_padding_, Rng& rng)
    : in_ch(in_ch_),
      out_ch(out_ch_),
      kernel(kernel_),
      stride(stride_),
      padding(padding_),
      output_padding(output_padding_),
      transposed(transposed_) {
  const Shape ws = transposed ? Shape{in_ch, out_ch, kernel, kernel} : Shape{out_ch, in_ch, kernel, kernel};
  weight = Parameter<T>(name + ".weight", Tensor<T>(ws));
  bias = Parameter<T>(name + ".bias", Tensor<T>(Shape{out_ch}));
  init_fan_in_uniform(weight.value, (transposed ? out_ch : in_ch) * kernel * kernel, rng);
}

template <typename T>
Var<T> Conv2d<T>::forward(Tape<T>& tape, Var<T> x) {
  if (transposed)
    return conv_transpose2d(x, tape.param(weight), tape.param(bias), stride, padding, output_padding);
  return conv2d(x, tape.param(weight), tape.param(bias), stride, padding);
}

template <typename T>
Shape Conv2d<T>::output_shape(const Shape& in) const {
  if (in.size() != 3 || in[0] != in_ch)
    throw ShapeError("conv layer " + weight.name + ": expected (" + std::to_string(in_ch) + ",H,W), got " +
                     to_string(in));
  if (transposed)
    return {out_ch, conv_transpose_out_size(in[1], kernel, stride, padding, output_padding),
            conv_transpose_out_size(in[2], kernel, stride, padding, output_padding)};
  return {out_ch, conv_out_size(in[1], kernel, stride, padding), conv_out_size(in[2], kernel, stride, padding)};
}

template <typename T>
BatchNorm2d<T>::BatchNorm2d(std::string name, std::size_t channels)
    : gamma(name + ".gamma", Tensor<T>(Shape{channels}, T(1))),
      beta(name + ".beta", Tensor<T>(Shape{channels}, T(0))),
      stats{Tensor<T>(Shape{channels}, T(0)), Tensor<T>(Shape{channels}, T(1))} {}

template <typename T>
Var<T> BatchNorm2d<T>::forward(Tape<T>& tape, Var<T> x, bool training) {
  return batchnorm2d(x, tape.param(gamma), tape.param(beta), eps, training, &stats, momentum);
}

template <typename T>
Dense<T>::Dense(std::string name, std::size_t in, std::size_t out, Rng& rng)
    : weight(name + ".weight", Tensor<T>(Shape{out, in})), bias(name + ".bias", Tensor<T>(Shape{out})) {
  init_fan_in_uniform(weight.value, in, rng);
}

template <typename T>
Var<T> Dense<T>::forward(Tape<T>& tape, Var<T> x) {
  return linear(x, tape.param(weight), tape.param(bias));
}

template <typename T>
GruCell<T>::GruCell(std::string name, std::size_t hidden_, std::size_t input_, Rng& rng)
    : hidden(hidden_), input(input_) {
  const Shape ws{hidden, hidden + input};
  const double sd = 1.0 / std::sqrt(double(hidden + input));
  w_z = Parameter<T>(name + ".w_z", Tensor<T>(ws));
  w_r = Parameter<T>(name + ".w_r", Tensor<T>(ws));
  w = Parameter<T>(name + ".w", Tensor<T>(ws));
  init_normal(w_z.value, sd, rng);
  init_normal(w_r.value, sd, rng);
  init_normal(w.value, sd, rng);
  b_z = Parameter<T>(name + ".b_z", Tensor<T>(Shape{hidden}));
  b_r = Parameter<T>(name + ".b_r", Tensor<T>(Shape{hidden}));
  b = Parameter<T>(name + ".b", Tensor<T>(Shape{hidden}));
}

template <typename T>
GruGates<T> GruCell<T>::step_gates(Tape<T>& tape, Var<T> h_prev, Var<T> x) {
  const Shape& hs = h_prev.shape();
  const Shape& xs = x.shape();
  if (hs.size() != 2 || xs.size() != 2 || hs[0] != xs[0] || hs[1] != hidden || xs[1] != input)
    throw ShapeError("gru_step: expected h (B," + std::to_string(hidden) + ") and x (B," + std::to_string(input) +
                     "), got " + to_string(hs) + " and " + to_string(xs));
  const Var<T> hx = concat<T>({h_prev, x}, 1);
  const Var<T> z = sigmoid(linear(hx, tape.param(w_z), tape.param(b_z)));
  const Var<T> r = sigmoid(linear(hx, tape.param(w_r), tape.param(b_r)));
  const Var<T> rhx = concat<T>({hadamard(r, h_prev), x}, 1);
  const Var<T> cand = tanh(linear(rhx, tape.param(w), tape.param(b)));
  const Var<T> one_minus_z = add_scalar(scale(z, T(-1)), T(1));
  const Var<T> h = add(hadamard(one_minus_z, h_prev), hadamard(z, cand));
  return {z, r, cand, h};
}

template <typename T>
void GruCell<T>::collect(ParamList<T>& out) {
  for (auto* p : {&w_z, &w_r, &w, &b_z, &b_r, &b}) out.push_back(p);
}

template <typename T>
LocalSelfAttention<T>::LocalSelfAttention(std::string name, std::size_t d_in_, std::size_t d_out_,
                                          std::size_t extent_, bool relative_, Rng& rng)
    : d_in(d_in_), d_out(d_out_), extent(extent_), relative(relative_) {
  if (extent % 2 == 0) throw ShapeError("attention extent must be odd, got " + std::to_string(extent));
  if (relative && d_out % 2 != 0) throw ShapeError("relative attention requires even d_out");
  const Shape ws{d_out, d_in};
  w_q = Parameter<T>(name + ".w_q", Tensor<T>(ws));
  w_k = Parameter<T>(name + ".w_k", Tensor<T>(ws));
  w_v = Parameter<T>(name + ".w_v", Tensor<T>(ws));
  const double sd = 1.0 / std::sqrt(double(d_in));
  init_normal(w_q.value, sd, rng);
  init_normal(w_k.value, sd, rng);
  init_normal(w_v.value, sd, rng);
  if (relative) {
    r_row = Parameter<T>(name + ".r_row", Tensor<T>(Shape{extent, d_out / 2}));
    r_col = Parameter<T>(name + ".r_col", Tensor<T>(Shape{extent, d_out / 2}));
    init_normal(r_row.value, 1.0 / std::sqrt(double(d_out)), rng);
    init_normal(r_col.value, 1.0 / std::sqrt(double(d_out)), rng);
  }
}

template <typename T>
Var<T> LocalSelfAttention<T>::forward(Tape<T>& tape, Var<T> x) {
  if (relative)
    return local_attention(x, tape.param(w_q), tape.param(w_k), tape.param(w_v), tape.param(r_row),
                           tape.param(r_col), extent);
  return local_attention(x, tape.param(w_q), tape.param(w_k), tape.param(w_v), Var<T>{}, Var<T>{}, extent);
}

template <typename T>
void LocalSelfAttention<T>::collect(ParamList<T>& out) {
  for (auto* p : {&w_q, &w_k, &w_v}) out.push_back(p);
  if (relative) out.insert(out.end(), {&r_row, &r_col});
}

#define CARNET_INSTANTIATE(T)                                                                               \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, std::size_t, std::size_t);                                 \
  template Var<T> conv_transpose2d(Var<T>, Var<T>, Var<T>, std::size_t, std::size_t, std::size_t);          \
  template Var<T> batchnorm2d(Var<T>, Var<T>, Var<T>, T, bool, BatchNormStats<T>*, T);                      \
  template Var<T> local_attention(Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, Var<T>, std::size_t);             \
  template Tensor<T> local_attention_weights(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,          \
                                             const Tensor<T>*, const Tensor<T>*, std::size_t);              \
  template Var<T> activation(Activation, Var<T>);                                                           \
  template void init_fan_in_uniform(Tensor<T>&, std::size_t, Rng&);                                         \
  template void init_normal(Tensor<T>&, double, Rng&);                                                      \
  template struct Conv2d<T>;                                                                                \
  template struct BatchNorm2d<T>;                                                                           \
  template struct Dense<T>;                                                                                 \
  template struct GruCell<T>;                                                                               \
  template struct LocalSelfAttention<T>;

CARNET_INSTANTIATE(float)
CARNET_INSTANTIATE(double)

}  // namespace carnet
