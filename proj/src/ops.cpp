// Copyright 2026 The gmmoe Authors
// SPDX-License-Identifier: Apache-2.0

#include "gmmoe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace gmmoe {
namespace {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

// ---------------------------------------------------------------------------
// Convolution via im2col + GEMM. A sample/group's patches are laid out as a
// column-major P x K matrix (P output pixels, K = Cin_g * kh * kw), so each
// patch column is contiguous and the result maps onto contiguous output
// planes: out(P x Cout_g) = cols * W^T.

struct ConvGeometry {
  Index batch, cin, h, w;
  Index cout, cin_g, cout_g, kh, kw;
  Index ho, wo;
  Conv2dOptions opts;

  Index k() const { return cin_g * kh * kw; }
  Index p() const { return ho * wo; }
  bool pointwise() const {
    return kh == 1 && kw == 1 && opts.stride == 1 && opts.padding == 0;
  }
};

template <typename Scalar>
void im2col(const Tensor<Scalar>& x, Index n, Index c0, const ConvGeometry& g, Matrix<Scalar>& cols) {
  const Index s = g.opts.stride, pad = g.opts.padding, d = g.opts.dilation;
  for (Index ci = 0; ci < g.cin_g; ++ci) {
    const Scalar* src = x.plane(n, c0 + ci);
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        Scalar* dst = cols.col((ci * g.kh + ki) * g.kw + kj).data();
        for (Index oy = 0; oy < g.ho; ++oy) {
          const Index iy = oy * s - pad + ki * d;
          Scalar* row = dst + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(row, row + g.wo, Scalar(0));
            continue;
          }
          const Scalar* src_row = src + iy * g.w;
          for (Index ox = 0; ox < g.wo; ++ox) {
            const Index ix = ox * s - pad + kj * d;
            row[ox] = (ix >= 0 && ix < g.w) ? src_row[ix] : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im(const Matrix<Scalar>& cols, Index n, Index c0, const ConvGeometry& g, Tensor<Scalar>& dx) {
  const Index s = g.opts.stride, pad = g.opts.padding, d = g.opts.dilation;
  for (Index ci = 0; ci < g.cin_g; ++ci) {
    Scalar* dst = dx.plane(n, c0 + ci);
    for (Index ki = 0; ki < g.kh; ++ki) {
      for (Index kj = 0; kj < g.kw; ++kj) {
        const Scalar* src = cols.col((ci * g.kh + ki) * g.kw + kj).data();
        for (Index oy = 0; oy < g.ho; ++oy) {
          const Index iy = oy * s - pad + ki * d;
          if (iy < 0 || iy >= g.h) continue;
          Scalar* dst_row = dst + iy * g.w;
          const Scalar* row = src + oy * g.wo;
          for (Index ox = 0; ox < g.wo; ++ox) {
            const Index ix = ox * s - pad + kj * d;
            if (ix >= 0 && ix < g.w) dst_row[ix] += row[ox];
          }
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Broadcasting helpers.

struct Broadcast {
  Shape out;
  // Element strides of each operand in output index space (0 on broadcast dims).
  Index a_stride[4];
  Index b_stride[4];
};

Broadcast broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const Index ad[4] = {a.n, a.c, a.h, a.w};
  const Index bd[4] = {b.n, b.c, b.h, b.w};
  Index od[4];
  for (int i = 0; i < 4; ++i) {
    if (ad[i] != bd[i] && ad[i] != 1 && bd[i] != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + a.str() + " with " + b.str());
    }
    od[i] = std::max(ad[i], bd[i]);
  }
  Broadcast bc{{od[0], od[1], od[2], od[3]}, {}, {}};
  Index as = 1, bs = 1;
  for (int i = 3; i >= 0; --i) {
    bc.a_stride[i] = ad[i] == 1 ? 0 : as;
    bc.b_stride[i] = bd[i] == 1 ? 0 : bs;
    as *= ad[i];
    bs *= bd[i];
  }
  return bc;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <typename F>
void for_each_broadcast(const Broadcast& bc, F&& f) {
  Index o = 0;
  for (Index n = 0; n < bc.out.n; ++n) {
    for (Index c = 0; c < bc.out.c; ++c) {
      for (Index y = 0; y < bc.out.h; ++y) {
        Index ai = n * bc.a_stride[0] + c * bc.a_stride[1] + y * bc.a_stride[2];
        Index bi = n * bc.b_stride[0] + c * bc.b_stride[1] + y * bc.b_stride[2];
        for (Index x = 0; x < bc.out.w; ++x, ++o) {
          f(o, ai, bi);
          ai += bc.a_stride[3];
          bi += bc.b_stride[3];
        }
      }
    }
  }
}

// Reduces a gradient of broadcast shape back onto an operand; `weight` gives
// the per-element factor (1 for add).
template <typename Scalar, typename W>
void accumulate_broadcast(const Broadcast& bc, const Tensor<Scalar>& grad, bool first,
                          Tensor<Scalar>& target, W&& weight) {
  const Scalar* g = grad.data();
  Scalar* t = target.data();
  for_each_broadcast(bc, [&](Index o, Index ai, Index bi) {
    t[first ? ai : bi] += g[o] * weight(o, ai, bi);
  });
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias,
                   const Conv2dOptions& opts) {
  const Shape xs = x.shape(), ws = weight.shape();
  require(opts.stride >= 1 && opts.dilation >= 1 && opts.groups >= 1 && opts.padding >= 0,
          "conv2d: invalid options");
  require(xs.c == ws.c * opts.groups,
          "conv2d: input has " + std::to_string(xs.c) + " channels, weight expects " +
              std::to_string(ws.c * opts.groups));
  require(ws.n % opts.groups == 0, "conv2d: output channels not divisible by groups");
  if (bias.defined()) {
    require(bias.shape() == Shape{1, ws.n, 1, 1}, "conv2d: bias shape " + bias.shape().str());
  }
  ConvGeometry g{xs.n, xs.c, xs.h, xs.w, ws.n, ws.c, ws.n / opts.groups, ws.h, ws.w, 0, 0, opts};
  const Index eff_h = opts.dilation * (g.kh - 1) + 1, eff_w = opts.dilation * (g.kw - 1) + 1;
  if (xs.h + 2 * opts.padding < eff_h || xs.w + 2 * opts.padding < eff_w) {
    throw InputTooSmallError("conv2d: input " + xs.str() + " smaller than kernel");
  }
  g.ho = (xs.h + 2 * opts.padding - eff_h) / opts.stride + 1;
  g.wo = (xs.w + 2 * opts.padding - eff_w) / opts.stride + 1;

  Tensor<Scalar> out(Shape{g.batch, g.cout, g.ho, g.wo});
  const Index groups = opts.groups;
  Matrix<Scalar> cols;
  if (!g.pointwise()) cols.resize(g.p(), g.k());
  for (Index n = 0; n < g.batch; ++n) {
    for (Index gi = 0; gi < groups; ++gi) {
      Eigen::Map<const Matrix<Scalar>> wt(weight.value().data() + gi * g.cout_g * g.k(), g.k(), g.cout_g);
      auto dst = out.planes(n, gi * g.cout_g, g.cout_g);
      if (g.pointwise()) {
        dst.noalias() = x.value().planes(n, gi * g.cin_g, g.cin_g) * wt;
      } else {
        im2col(x.value(), n, gi * g.cin_g, g, cols);
        dst.noalias() = cols * wt;
      }
    }
    if (bias.defined()) {
      for (Index co = 0; co < g.cout; ++co) out.planes(n, co, 1).array() += bias.value()[co];
    }
  }

  return make_result<Scalar>(std::move(out), {x, weight, bias.defined() ? bias : Var<Scalar>(Tensor<Scalar>())},
                             [g](Node<Scalar>& node) {
    const Tensor<Scalar>& grad = node.grad;
    const Tensor<Scalar>& xv = node.input_value(0);
    const Tensor<Scalar>& wv = node.input_value(1);
    Tensor<Scalar>* dx = node.input_grad(0);
    Tensor<Scalar>* dw = node.input_grad(1);
    Tensor<Scalar>* db = node.inputs[2]->value.empty() ? nullptr : node.input_grad(2);
    Matrix<Scalar> cols;
    if (!g.pointwise()) cols.resize(g.p(), g.k());
    for (Index n = 0; n < g.batch; ++n) {
      for (Index gi = 0; gi < g.opts.groups; ++gi) {
        auto go = grad.planes(n, gi * g.cout_g, g.cout_g);
        Eigen::Map<const Matrix<Scalar>> wt(wv.data() + gi * g.cout_g * g.k(), g.k(), g.cout_g);
        if (dw) {
          Eigen::Map<Matrix<Scalar>> dwt(dw->data() + gi * g.cout_g * g.k(), g.k(), g.cout_g);
          if (g.pointwise()) {
            dwt.noalias() += xv.planes(n, gi * g.cin_g, g.cin_g).transpose() * go;
          } else {
            im2col(xv, n, gi * g.cin_g, g, cols);
            dwt.noalias() += cols.transpose() * go;
          }
        }
        if (dx) {
          if (g.pointwise()) {
            dx->planes(n, gi * g.cin_g, g.cin_g).noalias() += go * wt.transpose();
          } else {
            cols.noalias() = go * wt.transpose();
            col2im(cols, n, gi * g.cin_g, g, *dx);
          }
        }
      }
      if (db) {
        for (Index co = 0; co < g.cout; ++co) (*db)[co] += grad.planes(n, co, 1).sum();
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape() == b.shape()) {
    Tensor<Scalar> out(a.shape());
    out.vec() = a.value().vec() + b.value().vec();
    return make_result<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& node) {
      if (auto* da = node.input_grad(0)) da->vec() += node.grad.vec();
      if (auto* db = node.input_grad(1)) db->vec() += node.grad.vec();
    });
  }
  const Broadcast bc = broadcast_shapes(a.shape(), b.shape(), "add");
  Tensor<Scalar> out(bc.out);
  const Scalar* av = a.value().data();
  const Scalar* bv = b.value().data();
  Scalar* o = out.data();
  for_each_broadcast(bc, [&](Index oi, Index ai, Index bi) { o[oi] = av[ai] + bv[bi]; });
  return make_result<Scalar>(std::move(out), {a, b}, [bc](Node<Scalar>& node) {
    auto one = [](Index, Index, Index) { return Scalar(1); };
    if (auto* da = node.input_grad(0)) accumulate_broadcast(bc, node.grad, true, *da, one);
    if (auto* db = node.input_grad(1)) accumulate_broadcast(bc, node.grad, false, *db, one);
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  return add(a, scale(b, Scalar(-1)));
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  if (a.shape() == b.shape()) {
    Tensor<Scalar> out(a.shape());
    out.array() = a.value().array() * b.value().array();
    return make_result<Scalar>(std::move(out), {a, b}, [](Node<Scalar>& node) {
      if (auto* da = node.input_grad(0)) da->array() += node.grad.array() * node.input_value(1).array();
      if (auto* db = node.input_grad(1)) db->array() += node.grad.array() * node.input_value(0).array();
    });
  }
  const Broadcast bc = broadcast_shapes(a.shape(), b.shape(), "mul");
  Tensor<Scalar> out(bc.out);
  const Scalar* av = a.value().data();
  const Scalar* bv = b.value().data();
  Scalar* o = out.data();
  for_each_broadcast(bc, [&](Index oi, Index ai, Index bi) { o[oi] = av[ai] * bv[bi]; });
  return make_result<Scalar>(std::move(out), {a, b}, [bc](Node<Scalar>& node) {
    const Scalar* av = node.input_value(0).data();
    const Scalar* bv = node.input_value(1).data();
    if (auto* da = node.input_grad(0)) {
      accumulate_broadcast(bc, node.grad, true, *da, [bv](Index, Index, Index bi) { return bv[bi]; });
    }
    if (auto* db = node.input_grad(1)) {
      accumulate_broadcast(bc, node.grad, false, *db, [av](Index, Index ai, Index) { return av[ai]; });
    }
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& x, Scalar factor) {
  Tensor<Scalar> out(x.shape());
  out.vec() = x.value().vec() * factor;
  return make_result<Scalar>(std::move(out), {x}, [factor](Node<Scalar>& node) {
    if (auto* dx = node.input_grad(0)) dx->vec() += node.grad.vec() * factor;
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  out.vec() = x.value().vec().unaryExpr([](Scalar v) {
    if (v >= 0) return Scalar(1) / (Scalar(1) + std::exp(-v));
    const Scalar e = std::exp(v);
    return e / (Scalar(1) + e);
  });
  return make_result<Scalar>(std::move(out), {x}, [](Node<Scalar>& node) {
    if (auto* dx = node.input_grad(0)) {
      const auto& y = node.value.array();
      dx->array() += node.grad.array() * y * (Scalar(1) - y);
    }
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& x) {
  Tensor<Scalar> out(x.shape());
  out.array() = x.value().array().max(Scalar(0));
  return make_result<Scalar>(std::move(out), {x}, [](Node<Scalar>& node) {
    if (auto* dx = node.input_grad(0)) {
      dx->array() += (node.input_value(0).array() > Scalar(0)).select(node.grad.array(), Scalar(0));
    }
  });
}

template <typename Scalar>
Var<Scalar> clamp(const Var<Scalar>& x, Scalar lo, Scalar hi) {
  Tensor<Scalar> out(x.shape());
  out.array() = x.value().array().max(lo).min(hi);
  return make_result<Scalar>(std::move(out), {x}, [lo, hi](Node<Scalar>& node) {
    if (auto* dx = node.input_grad(0)) {
      const auto& v = node.input_value(0).array();
      dx->array() += (v >= lo && v <= hi).select(node.grad.array(), Scalar(0));
    }
  });
}

template <typename Scalar>
Var<Scalar> concat_channels(std::span<const Var<Scalar>> parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  Shape s = parts[0].shape();
  Index channels = 0;
  for (const auto& p : parts) {
    const Shape& ps = p.shape();
    require(ps.n == s.n && ps.h == s.h && ps.w == s.w,
            "concat_channels: mismatched " + ps.str() + " vs " + s.str());
    channels += ps.c;
  }
  s.c = channels;
  Tensor<Scalar> out(s);
  const Index plane = s.plane();
  for (Index n = 0; n < s.n; ++n) {
    Index c0 = 0;
    for (const auto& p : parts) {
      const Index pc = p.shape().c;
      std::copy_n(p.value().sample(n), pc * plane, out.plane(n, c0));
      c0 += pc;
    }
  }
  std::vector<Var<Scalar>> inputs(parts.begin(), parts.end());
  return make_result<Scalar>(std::move(out), std::move(inputs), [](Node<Scalar>& node) {
    const Shape& s = node.value.shape();
    const Index plane = s.plane();
    for (Index n = 0; n < s.n; ++n) {
      Index c0 = 0;
      for (std::size_t i = 0; i < node.inputs.size(); ++i) {
        const Index pc = node.inputs[i]->value.shape().c;
        if (auto* dp = node.input_grad(i)) {
          Eigen::Map<const typename Tensor<Scalar>::Storage> src(node.grad.plane(n, c0), pc * plane);
          Eigen::Map<typename Tensor<Scalar>::Storage> dst(dp->sample(n), pc * plane);
          dst += src;
        }
        c0 += pc;
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> slice_channels(const Var<Scalar>& x, Index begin, Index count) {
  const Shape xs = x.shape();
  require(begin >= 0 && count >= 1 && begin + count <= xs.c, "slice_channels: range out of bounds");
  Tensor<Scalar> out(Shape{xs.n, count, xs.h, xs.w});
  for (Index n = 0; n < xs.n; ++n) {
    std::copy_n(x.value().plane(n, begin), count * xs.plane(), out.sample(n));
  }
  return make_result<Scalar>(std::move(out), {x}, [begin, count](Node<Scalar>& node) {
    if (auto* dx = node.input_grad(0)) {
      for (Index n = 0; n < node.value.shape().n; ++n) {
        dx->planes(n, begin, count) += node.grad.planes(n, 0, count);
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x) {
  const Shape xs = x.shape();
  Tensor<Scalar> out(Shape{xs.n, xs.c, 1, 1});
  for (Index n = 0; n < xs.n; ++n) {
    out.planes(n, 0, xs.c) = x.value().planes(n, 0, xs.c).colwise().mean();
  }
  return make_result<Scalar>(std::move(out), {x}, [](Node<Scalar>& node) {
    if (auto* dx = node.input_grad(0)) {
      const Shape xs = dx->shape();
      const Scalar inv = Scalar(1) / static_cast<Scalar>(xs.plane());
      for (Index n = 0; n < xs.n; ++n) {
        for (Index c = 0; c < xs.c; ++c) dx->planes(n, c, 1).array() += node.grad(n, c, 0, 0) * inv;
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> global_max_pool(const Var<Scalar>& x) {
  const Shape xs = x.shape();
  Tensor<Scalar> out(Shape{xs.n, xs.c, 1, 1});
  std::vector<Index> argmax(static_cast<std::size_t>(xs.n * xs.c));
  for (Index n = 0; n < xs.n; ++n) {
    for (Index c = 0; c < xs.c; ++c) {
      Index idx = 0;
      out(n, c, 0, 0) = x.value().planes(n, c, 1).col(0).maxCoeff(&idx);
      argmax[n * xs.c + c] = idx;
    }
  }
  return make_result<Scalar>(std::move(out), {x}, [argmax = std::move(argmax)](Node<Scalar>& node) {
    if (auto* dx = node.input_grad(0)) {
      const Shape xs = dx->shape();
      for (Index n = 0; n < xs.n; ++n) {
        for (Index c = 0; c < xs.c; ++c) dx->plane(n, c)[argmax[n * xs.c + c]] += node.grad(n, c, 0, 0);
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> channel_mean(const Var<Scalar>& x) {
  const Shape xs = x.shape();
  Tensor<Scalar> out(Shape{xs.n, 1, xs.h, xs.w});
  for (Index n = 0; n < xs.n; ++n) out.planes(n, 0, 1) = x.value().planes(n, 0, xs.c).rowwise().mean();
  return make_result<Scalar>(std::move(out), {x}, [](Node<Scalar>& node) {
    if (auto* dx = node.input_grad(0)) {
      const Shape xs = dx->shape();
      const Scalar inv = Scalar(1) / static_cast<Scalar>(xs.c);
      for (Index n = 0; n < xs.n; ++n) {
        dx->planes(n, 0, xs.c).colwise() += node.grad.planes(n, 0, 1).col(0) * inv;
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> channel_max(const Var<Scalar>& x) {
  const Shape xs = x.shape();
  Tensor<Scalar> out(Shape{xs.n, 1, xs.h, xs.w});
  std::vector<Index> argmax(static_cast<std::size_t>(xs.n * xs.plane()));
  for (Index n = 0; n < xs.n; ++n) {
    for (Index p = 0; p < xs.plane(); ++p) {
      Index best = 0;
      Scalar v = x.value().plane(n, 0)[p];
      for (Index c = 1; c < xs.c; ++c) {
        const Scalar cand = x.value().plane(n, c)[p];
        if (cand > v) {
          v = cand;
          best = c;
        }
      }
      out.plane(n, 0)[p] = v;
      argmax[n * xs.plane() + p] = best;
    }
  }
  return make_result<Scalar>(std::move(out), {x}, [argmax = std::move(argmax)](Node<Scalar>& node) {
    if (auto* dx = node.input_grad(0)) {
      const Shape xs = dx->shape();
      for (Index n = 0; n < xs.n; ++n) {
        for (Index p = 0; p < xs.plane(); ++p) {
          dx->plane(n, argmax[n * xs.plane() + p])[p] += node.grad.plane(n, 0)[p];
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> max_pool2d(const Var<Scalar>& x, Index kernel, Index stride, Index padding) {
  const Shape xs = x.shape();
  require(kernel >= 1 && stride >= 1 && padding >= 0 && 2 * padding <= kernel,
          "max_pool2d: invalid window");
  if (xs.h + 2 * padding < kernel || xs.w + 2 * padding < kernel) {
    throw InputTooSmallError("max_pool2d: input " + xs.str() + " smaller than window");
  }
  const Index ho = (xs.h + 2 * padding - kernel) / stride + 1;
  const Index wo = (xs.w + 2 * padding - kernel) / stride + 1;
  Tensor<Scalar> out(Shape{xs.n, xs.c, ho, wo});
  std::vector<Index> argmax(static_cast<std::size_t>(out.size()));
  Index o = 0;
  for (Index n = 0; n < xs.n; ++n) {
    for (Index c = 0; c < xs.c; ++c) {
      const Scalar* src = x.value().plane(n, c);
      for (Index oy = 0; oy < ho; ++oy) {
        for (Index ox = 0; ox < wo; ++ox, ++o) {
          Scalar best = -std::numeric_limits<Scalar>::infinity();
          Index best_idx = -1;
          for (Index ky = 0; ky < kernel; ++ky) {
            const Index iy = oy * stride - padding + ky;
            if (iy < 0 || iy >= xs.h) continue;
            for (Index kx = 0; kx < kernel; ++kx) {
              const Index ix = ox * stride - padding + kx;
              if (ix < 0 || ix >= xs.w) continue;
              const Scalar v = src[iy * xs.w + ix];
              if (best_idx < 0 || v > best) {
                best = v;
                best_idx = iy * xs.w + ix;
              }
            }
          }
          out[o] = best;
          argmax[o] = best_idx;
        }
      }
    }
  }
  return make_result<Scalar>(std::move(out), {x}, [argmax = std::move(argmax)](Node<Scalar>& node) {
    if (auto* dx = node.input_grad(0)) {
      const Shape os = node.value.shape();
      Index o = 0;
      for (Index n = 0; n < os.n; ++n) {
        for (Index c = 0; c < os.c; ++c) {
          Scalar* dst = dx->plane(n, c);
          for (Index p = 0; p < os.plane(); ++p, ++o) dst[argmax[o]] += node.grad[o];
        }
      }
    }
  });
}

namespace {

// Source taps and weights of the clamped half-step bilinear sampler along one axis.
struct AxisTaps {
  std::vector<Index> i0, i1;
  std::vector<double> f;  // weight of i1
};

AxisTaps half_step_taps(Index in, Index out) {
  AxisTaps t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.f.resize(out);
  for (Index j = 0; j < out; ++j) {
    const Index base = std::min(j / 2, in - 1);
    t.i0[j] = base;
    t.i1[j] = std::min(base + 1, in - 1);
    t.f[j] = (j % 2 == 1 && j / 2 < in) ? 0.5 : 0.0;
  }
  return t;
}

}  // namespace

template <typename Scalar>
Var<Scalar> upsample_bilinear2x(const Var<Scalar>& x, Index out_h, Index out_w) {
  const Shape xs = x.shape();
  require(out_h >= 1 && out_w >= 1 && out_h <= 2 * xs.h && out_w <= 2 * xs.w,
          "upsample_bilinear2x: target larger than 2x input");
  const AxisTaps ty = half_step_taps(xs.h, out_h);
  const AxisTaps tx = half_step_taps(xs.w, out_w);
  Tensor<Scalar> out(Shape{xs.n, xs.c, out_h, out_w});
  for (Index n = 0; n < xs.n; ++n) {
    for (Index c = 0; c < xs.c; ++c) {
      const Scalar* src = x.value().plane(n, c);
      Scalar* dst = out.plane(n, c);
      for (Index y = 0; y < out_h; ++y) {
        const Scalar fy = static_cast<Scalar>(ty.f[y]);
        const Scalar* r0 = src + ty.i0[y] * xs.w;
        const Scalar* r1 = src + ty.i1[y] * xs.w;
        for (Index xo = 0; xo < out_w; ++xo) {
          const Scalar fx = static_cast<Scalar>(tx.f[xo]);
          const Index a = tx.i0[xo], b = tx.i1[xo];
          const Scalar top = (1 - fx) * r0[a] + fx * r0[b];
          const Scalar bot = (1 - fx) * r1[a] + fx * r1[b];
          dst[y * out_w + xo] = (1 - fy) * top + fy * bot;
        }
      }
    }
  }
  return make_result<Scalar>(std::move(out), {x}, [ty, tx](Node<Scalar>& node) {
    if (auto* dx = node.input_grad(0)) {
      const Shape os = node.value.shape();
      const Index in_w = dx->shape().w;
      for (Index n = 0; n < os.n; ++n) {
        for (Index c = 0; c < os.c; ++c) {
          const Scalar* g = node.grad.plane(n, c);
          Scalar* dst = dx->plane(n, c);
          for (Index y = 0; y < os.h; ++y) {
            const Scalar fy = static_cast<Scalar>(ty.f[y]);
            Scalar* r0 = dst + ty.i0[y] * in_w;
            Scalar* r1 = dst + ty.i1[y] * in_w;
            for (Index xo = 0; xo < os.w; ++xo) {
              const Scalar fx = static_cast<Scalar>(tx.f[xo]);
              const Scalar gv = g[y * os.w + xo];
              const Index a = tx.i0[xo], b = tx.i1[xo];
              r0[a] += (1 - fy) * (1 - fx) * gv;
              r0[b] += (1 - fy) * fx * gv;
              r1[a] += fy * (1 - fx) * gv;
              r1[b] += fy * fx * gv;
            }
          }
        }
      }
    }
  });
}

namespace {

// Flat source index in `from` for each flat index of the unshuffled tensor.
std::vector<Index> unshuffle_map(const Shape& from, Index r) {
  const Shape to{from.n, from.c * r * r, from.h / r, from.w / r};
  std::vector<Index> map(static_cast<std::size_t>(to.numel()));
  Index o = 0;
  for (Index n = 0; n < to.n; ++n) {
    for (Index c = 0; c < to.c; ++c) {
      const Index src_c = c / (r * r), i = (c / r) % r, j = c % r;
      for (Index y = 0; y < to.h; ++y) {
        for (Index x = 0; x < to.w; ++x, ++o) {
          map[o] = ((n * from.c + src_c) * from.h + y * r + i) * from.w + x * r + j;
        }
      }
    }
  }
  return map;
}

// out[o] = in[map[o]] with the scatter-add backward.
template <typename Scalar>
Var<Scalar> gather(const Var<Scalar>& x, Shape out_shape, std::vector<Index> map) {
  Tensor<Scalar> out(out_shape);
  for (Index o = 0; o < out.size(); ++o) out[o] = x.value()[map[o]];
  return make_result<Scalar>(std::move(out), {x}, [map = std::move(map)](Node<Scalar>& node) {
    if (auto* dx = node.input_grad(0)) {
      for (Index o = 0; o < node.value.size(); ++o) (*dx)[map[o]] += node.grad[o];
    }
  });
}

// out[map[i]] = in[i]; map is a bijection.
template <typename Scalar>
Var<Scalar> scatter(const Var<Scalar>& x, Shape out_shape, std::vector<Index> map) {
  Tensor<Scalar> out(out_shape);
  for (Index i = 0; i < x.value().size(); ++i) out[map[i]] = x.value()[i];
  return make_result<Scalar>(std::move(out), {x}, [map = std::move(map)](Node<Scalar>& node) {
    if (auto* dx = node.input_grad(0)) {
      for (Index i = 0; i < dx->size(); ++i) (*dx)[i] += node.grad[map[i]];
    }
  });
}

}  // namespace

template <typename Scalar>
Var<Scalar> pixel_unshuffle(const Var<Scalar>& x, Index r) {
  const Shape xs = x.shape();
  require(r >= 1, "pixel_unshuffle: factor must be positive");
  require(xs.h % r == 0 && xs.w % r == 0,
          "pixel_unshuffle: " + xs.str() + " not divisible by " + std::to_string(r));
  if (r == 1) return x;
  return gather(x, Shape{xs.n, xs.c * r * r, xs.h / r, xs.w / r}, unshuffle_map(xs, r));
}

template <typename Scalar>
Var<Scalar> pixel_shuffle(const Var<Scalar>& x, Index r) {
  const Shape xs = x.shape();
  require(r >= 1, "pixel_shuffle: factor must be positive");
  require(xs.c % (r * r) == 0,
          "pixel_shuffle: channels of " + xs.str() + " not divisible by " + std::to_string(r * r));
  if (r == 1) return x;
  const Shape to{xs.n, xs.c / (r * r), xs.h * r, xs.w * r};
  return scatter(x, to, unshuffle_map(to, r));
}

template <typename Scalar>
Var<Scalar> reflect_pad(const Var<Scalar>& x, Index pad_bottom, Index pad_right) {
  const Shape xs = x.shape();
  require(pad_bottom >= 0 && pad_right >= 0, "reflect_pad: negative padding");
  if (pad_bottom == 0 && pad_right == 0) return x;
  const Shape to{xs.n, xs.c, xs.h + pad_bottom, xs.w + pad_right};
  std::vector<Index> map(static_cast<std::size_t>(to.numel()));
  Index o = 0;
  for (Index n = 0; n < to.n; ++n) {
    for (Index c = 0; c < to.c; ++c) {
      for (Index y = 0; y < to.h; ++y) {
        const Index sy = reflect_index(y, xs.h);
        for (Index xo = 0; xo < to.w; ++xo, ++o) {
          map[o] = ((n * xs.c + c) * xs.h + sy) * xs.w + reflect_index(xo, xs.w);
        }
      }
    }
  }
  return gather(x, to, std::move(map));
}

template <typename Scalar>
Var<Scalar> crop(const Var<Scalar>& x, Index h, Index w) {
  const Shape xs = x.shape();
  require(h >= 1 && w >= 1 && h <= xs.h && w <= xs.w, "crop: window outside " + xs.str());
  if (h == xs.h && w == xs.w) return x;
  const Shape to{xs.n, xs.c, h, w};
  std::vector<Index> map(static_cast<std::size_t>(to.numel()));
  Index o = 0;
  for (Index n = 0; n < to.n; ++n) {
    for (Index c = 0; c < to.c; ++c) {
      for (Index y = 0; y < h; ++y) {
        for (Index xo = 0; xo < w; ++xo, ++o) map[o] = ((n * xs.c + c) * xs.h + y) * xs.w + xo;
      }
    }
  }
  return gather(x, to, std::move(map));
}

template <typename Scalar>
Var<Scalar> softmax_channels(const Var<Scalar>& x, const std::vector<bool>& mask) {
  const Shape xs = x.shape();
  require(mask.empty() || static_cast<Index>(mask.size()) == xs.c, "softmax_channels: mask size");
  auto enabled = [&mask](Index c) { return mask.empty() || mask[c]; };
  bool any = false;
  for (Index c = 0; c < xs.c; ++c) any = any || enabled(c);
  require(any, "softmax_channels: every channel masked");

  Tensor<Scalar> out(xs);
  for (Index n = 0; n < xs.n; ++n) {
    for (Index p = 0; p < xs.plane(); ++p) {
      Scalar hi = -std::numeric_limits<Scalar>::infinity();
      for (Index c = 0; c < xs.c; ++c) {
        if (enabled(c)) hi = std::max(hi, x.value().plane(n, c)[p]);
      }
      Scalar total = 0;
      for (Index c = 0; c < xs.c; ++c) {
        const Scalar e = enabled(c) ? std::exp(x.value().plane(n, c)[p] - hi) : Scalar(0);
        out.plane(n, c)[p] = e;
        total += e;
      }
      for (Index c = 0; c < xs.c; ++c) out.plane(n, c)[p] /= total;
    }
  }
  return make_result<Scalar>(std::move(out), {x}, [](Node<Scalar>& node) {
    if (auto* dx = node.input_grad(0)) {
      const Shape s = node.value.shape();
      for (Index n = 0; n < s.n; ++n) {
        for (Index p = 0; p < s.plane(); ++p) {
          Scalar dot = 0;
          for (Index c = 0; c < s.c; ++c) dot += node.value.plane(n, c)[p] * node.grad.plane(n, c)[p];
          for (Index c = 0; c < s.c; ++c) {
            dx->plane(n, c)[p] += node.value.plane(n, c)[p] * (node.grad.plane(n, c)[p] - dot);
          }
        }
      }
    }
  });
}

template <typename Scalar>
Var<Scalar> convex_combine(std::span<const Var<Scalar>> inputs, const Var<Scalar>& weights) {
  require(!inputs.empty(), "convex_combine: no inputs");
  const Shape s = inputs[0].shape();
  const Index k = static_cast<Index>(inputs.size());
  for (const auto& in : inputs) require(in.shape() == s, "convex_combine: mismatched input shapes");
  require(weights.shape() == Shape{s.n, k, 1, 1},
          "convex_combine: weights " + weights.shape().str() + " for " + std::to_string(k) + " inputs");

  const Index per_sample = s.c * s.plane();
  std::vector<Index> anchor(static_cast<std::size_t>(s.n));
  Tensor<Scalar> out(s);
  for (Index n = 0; n < s.n; ++n) {
    Index a = 0;
    for (Index i = 1; i < k; ++i) {
      if (weights.value()(n, i, 0, 0) > weights.value()(n, a, 0, 0)) a = i;
    }
    anchor[n] = a;
    using Map = Eigen::Map<const typename Tensor<Scalar>::Storage>;
    Eigen::Map<typename Tensor<Scalar>::Storage> dst(out.sample(n), per_sample);
    const Map xa(inputs[a].value().sample(n), per_sample);
    dst = xa;
    for (Index i = 0; i < k; ++i) {
      if (i == a) continue;
      const Scalar wi = weights.value()(n, i, 0, 0);
      dst.array() += wi * (Map(inputs[i].value().sample(n), per_sample) - xa).array();
    }
  }
  std::vector<Var<Scalar>> all(inputs.begin(), inputs.end());
  all.push_back(weights);
  return make_result<Scalar>(std::move(out), std::move(all), [anchor = std::move(anchor), k](Node<Scalar>& node) {
    using Map = Eigen::Map<const typename Tensor<Scalar>::Storage>;
    using MutMap = Eigen::Map<typename Tensor<Scalar>::Storage>;
    const Shape s = node.value.shape();
    const Index per_sample = s.c * s.plane();
    const Tensor<Scalar>& w = node.input_value(static_cast<std::size_t>(k));
    Tensor<Scalar>* dw = node.input_grad(static_cast<std::size_t>(k));
    for (Index n = 0; n < s.n; ++n) {
      const Index a = anchor[n];
      const Map g(node.grad.sample(n), per_sample);
      const Map xa(node.input_value(a).sample(n), per_sample);
      Scalar anchor_weight = 1;
      for (Index i = 0; i < k; ++i) {
        if (i == a) continue;
        const Scalar wi = w(n, i, 0, 0);
        anchor_weight -= wi;
        if (auto* dx = node.input_grad(i)) MutMap(dx->sample(n), per_sample) += wi * g;
        if (dw) (*dw)(n, i, 0, 0) += g.dot(Map(node.input_value(i).sample(n), per_sample) - xa);
      }
      if (auto* dxa = node.input_grad(a)) MutMap(dxa->sample(n), per_sample) += anchor_weight * g;
    }
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& x) {
  Tensor<Scalar> out(Shape{1, 1, 1, 1});
  out[0] = x.value().vec().sum();
  return make_result<Scalar>(std::move(out), {x}, [](Node<Scalar>& node) {
    if (auto* dx = node.input_grad(0)) dx->array() += node.grad[0];
  });
}

template <typename Scalar>
Var<Scalar> sample_mean(const Var<Scalar>& x) {
  const Shape xs = x.shape();
  const Index per_sample = xs.c * xs.plane();
  Tensor<Scalar> out(Shape{xs.n, 1, 1, 1});
  for (Index n = 0; n < xs.n; ++n) {
    out[n] = Eigen::Map<const typename Tensor<Scalar>::Storage>(x.value().sample(n), per_sample).mean();
  }
  return make_result<Scalar>(std::move(out), {x}, [per_sample](Node<Scalar>& node) {
    if (auto* dx = node.input_grad(0)) {
      for (Index n = 0; n < node.value.shape().n; ++n) {
        Eigen::Map<typename Tensor<Scalar>::Storage>(dx->sample(n), per_sample).array() +=
            node.grad[n] / static_cast<Scalar>(per_sample);
      }
    }
  });
}

#define GMMOE_INSTANTIATE_OPS(S)                                                                 \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const Var<S>&, const Conv2dOptions&);     \
  template Var<S> add(const Var<S>&, const Var<S>&);                                             \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                             \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                             \
  template Var<S> scale(const Var<S>&, S);                                                       \
  template Var<S> sigmoid(const Var<S>&);                                                        \
  template Var<S> relu(const Var<S>&);                                                           \
  template Var<S> clamp(const Var<S>&, S, S);                                                    \
  template Var<S> concat_channels(std::span<const Var<S>>);                                      \
  template Var<S> slice_channels(const Var<S>&, Index, Index);                                   \
  template Var<S> global_avg_pool(const Var<S>&);                                                \
  template Var<S> global_max_pool(const Var<S>&);                                                \
  template Var<S> channel_mean(const Var<S>&);                                                   \
  template Var<S> channel_max(const Var<S>&);                                                    \
  template Var<S> max_pool2d(const Var<S>&, Index, Index, Index);                                \
  template Var<S> upsample_bilinear2x(const Var<S>&, Index, Index);                              \
  template Var<S> pixel_unshuffle(const Var<S>&, Index);                                         \
  template Var<S> pixel_shuffle(const Var<S>&, Index);                                           \
  template Var<S> reflect_pad(const Var<S>&, Index, Index);                                      \
  template Var<S> crop(const Var<S>&, Index, Index);                                             \
  template Var<S> softmax_channels(const Var<S>&, const std::vector<bool>&);                     \
  template Var<S> convex_combine(std::span<const Var<S>>, const Var<S>&);                        \
  template Var<S> sum(const Var<S>&);                                                            \
  template Var<S> sample_mean(const Var<S>&);

GMMOE_INSTANTIATE_OPS(float)
GMMOE_INSTANTIATE_OPS(double)

}  // namespace gmmoe
