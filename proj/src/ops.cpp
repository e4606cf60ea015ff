#include "modalfuse/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "modalfuse/errors.hpp"

namespace modalfuse::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

bool needs(const detail::Node& n, std::size_t i) {
  return i < n.inputs.size() && n.inputs[i] && n.inputs[i]->requires_grad;
}

Tensor& gbuf(detail::Node& n, std::size_t i) { return n.inputs[i]->grad_buffer(); }

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

std::int64_t last_dim(const Var& x, const char* op) {
  if (x.value().rank() == 0) throw ShapeError(std::string(op) + ": scalar input");
  return x.shape().back();
}

void require_rank(const Var& x, std::size_t rank, const char* op) {
  if (x.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
  }
}

template <typename Fwd, typename Deriv>
Var unary(const Var& x, Fwd fwd, Deriv deriv) {
  Tensor out = Tensor::zeros_like(x.value());
  const double* in = x.value().ptr();
  double* o = out.ptr();
  const std::int64_t n = out.numel();
  for (std::int64_t i = 0; i < n; ++i) o[i] = fwd(in[i]);
  return make_op(std::move(out), {x}, [deriv](detail::Node& self) {
    const double* g = self.grad.ptr();
    const double* in = self.inputs[0]->value.ptr();
    const double* o = self.value.ptr();
    double* gi = gbuf(self, 0).ptr();
    const std::int64_t n = self.value.numel();
    for (std::int64_t i = 0; i < n; ++i) gi[i] += g[i] * deriv(in[i], o[i]);
  });
}

}  // namespace

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  out += b.value();
  return make_op(std::move(out), {a, b}, [](detail::Node& self) {
    for (std::size_t i = 0; i < 2; ++i) {
      if (needs(self, i)) gbuf(self, i) += self.grad;
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  const double* pb = b.value().ptr();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] -= pb[i];
  return make_op(std::move(out), {a, b}, [](detail::Node& self) {
    if (needs(self, 0)) gbuf(self, 0) += self.grad;
    if (needs(self, 1)) {
      Tensor& gb = gbuf(self, 1);
      for (std::int64_t i = 0; i < gb.numel(); ++i) gb[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  const double* pb = b.value().ptr();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= pb[i];
  return make_op(std::move(out), {a, b}, [](detail::Node& self) {
    const Tensor& va = self.inputs[0]->value;
    const Tensor& vb = self.inputs[1]->value;
    if (needs(self, 0)) {
      Tensor& ga = gbuf(self, 0);
      for (std::int64_t i = 0; i < ga.numel(); ++i) ga[i] += self.grad[i] * vb[i];
    }
    if (needs(self, 1)) {
      Tensor& gb = gbuf(self, 1);
      for (std::int64_t i = 0; i < gb.numel(); ++i) gb[i] += self.grad[i] * va[i];
    }
  });
}

Var scale(const Var& x, double s) {
  Tensor out = x.value();
  out *= s;
  return make_op(std::move(out), {x}, [s](detail::Node& self) {
    Tensor& gx = gbuf(self, 0);
    for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += s * self.grad[i];
  });
}

Var abs(const Var& x) {
  // Subgradient 0 at the kink.
  return unary(
      x, [](double v) { return std::abs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Var relu(const Var& x) {
  return unary(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var gelu(const Var& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt_2pi = 0.39894228040143267794;
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt_2pi * std::exp(-0.5 * v * v);
      });
}

Var sigmoid(const Var& x) {
  return unary(
      x,
      [](double v) {
        // Rounding alone would return exactly 0 or 1 once |v| is large; keep the
        // result inside the open interval the exact value lies in.
        constexpr double lo = std::numeric_limits<double>::denorm_min();
        const double hi = std::nextafter(1.0, 0.0);
        if (v >= 0.0) return std::min(1.0 / (1.0 + std::exp(-v)), hi);
        const double e = std::exp(v);
        return std::max(e / (1.0 + e), lo);
      },
      [](double, double o) { return o * (1.0 - o); });
}

Var mul_lastdim(const Var& x, const Var& v) {
  const std::int64_t c = last_dim(x, "mul_lastdim");
  if (v.shape() != Shape{c}) {
    throw ShapeError("mul_lastdim: vector " + shape_str(v.shape()) + " vs channels " +
                     std::to_string(c));
  }
  Tensor out = x.value();
  const double* pv = v.value().ptr();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] *= pv[i % c];
  return make_op(std::move(out), {x, v}, [c](detail::Node& self) {
    const Tensor& vx = self.inputs[0]->value;
    const Tensor& vv = self.inputs[1]->value;
    if (needs(self, 0)) {
      Tensor& gx = gbuf(self, 0);
      for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += self.grad[i] * vv[i % c];
    }
    if (needs(self, 1)) {
      Tensor& gv = gbuf(self, 1);
      for (std::int64_t i = 0; i < self.grad.numel(); ++i) gv[i % c] += self.grad[i] * vx[i];
    }
  });
}

Var add_lastdim(const Var& x, const Var& v) {
  const std::int64_t c = last_dim(x, "add_lastdim");
  if (v.shape() != Shape{c}) {
    throw ShapeError("add_lastdim: vector " + shape_str(v.shape()) + " vs channels " +
                     std::to_string(c));
  }
  Tensor out = x.value();
  const double* pv = v.value().ptr();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += pv[i % c];
  return make_op(std::move(out), {x, v}, [c](detail::Node& self) {
    if (needs(self, 0)) gbuf(self, 0) += self.grad;
    if (needs(self, 1)) {
      Tensor& gv = gbuf(self, 1);
      for (std::int64_t i = 0; i < self.grad.numel(); ++i) gv[i % c] += self.grad[i];
    }
  });
}

Var add_broadcast(const Var& x, const Var& t) {
  const Shape& xs = x.shape();
  const Shape& ts = t.shape();
  if (ts.size() > xs.size() || !std::equal(ts.rbegin(), ts.rend(), xs.rbegin())) {
    throw ShapeError("add_broadcast: " + shape_str(ts) + " is not a suffix of " + shape_str(xs));
  }
  const std::int64_t inner = t.value().numel();
  Tensor out = x.value();
  const double* pt = t.value().ptr();
  for (std::int64_t i = 0; i < out.numel(); ++i) out[i] += pt[i % inner];
  return make_op(std::move(out), {x, t}, [inner](detail::Node& self) {
    if (needs(self, 0)) gbuf(self, 0) += self.grad;
    if (needs(self, 1)) {
      Tensor& gt = gbuf(self, 1);
      for (std::int64_t i = 0; i < self.grad.numel(); ++i) gt[i % inner] += self.grad[i];
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  const std::int64_t in = last_dim(x, "linear");
  require_rank(weight, 2, "linear weight");
  const std::int64_t out_f = weight.shape()[0];
  if (weight.shape()[1] != in) {
    throw ShapeError("linear: weight " + shape_str(weight.shape()) + " cannot consume input " +
                     shape_str(x.shape()));
  }
  if (bias.defined() && bias.shape() != Shape{out_f}) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " for " +
                     std::to_string(out_f) + " outputs");
  }
  const std::int64_t rows = in == 0 ? 0 : x.value().numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = out_f;
  Tensor out(out_shape);
  {
    ConstMatMap X(x.value().ptr(), rows, in);
    ConstMatMap W(weight.value().ptr(), out_f, in);
    MatMap Y(out.ptr(), rows, out_f);
    Y.noalias() = X * W.transpose();
    if (bias.defined()) {
      Y.rowwise() += ConstVecMap(bias.value().ptr(), out_f).transpose();
    }
  }
  return make_op(std::move(out), {x, weight, bias}, [rows, in, out_f](detail::Node& self) {
    ConstMatMap G(self.grad.ptr(), rows, out_f);
    if (needs(self, 0)) {
      ConstMatMap W(self.inputs[1]->value.ptr(), out_f, in);
      MatMap GX(gbuf(self, 0).ptr(), rows, in);
      GX.noalias() += G * W;
    }
    if (needs(self, 1)) {
      ConstMatMap X(self.inputs[0]->value.ptr(), rows, in);
      MatMap GW(gbuf(self, 1).ptr(), out_f, in);
      GW.noalias() += G.transpose() * X;
    }
    if (needs(self, 2)) {
      VecMap GB(gbuf(self, 2).ptr(), out_f);
      GB += G.colwise().sum().transpose();
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const std::int64_t c = last_dim(x, "layer_norm");
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("layer_norm: affine parameters must have shape [" + std::to_string(c) + "]");
  }
  const std::int64_t rows = x.value().numel() / c;
  Tensor out = Tensor::zeros_like(x.value());
  std::vector<double> xhat(static_cast<std::size_t>(x.value().numel()));
  std::vector<double> rstd(static_cast<std::size_t>(rows));
  const double* px = x.value().ptr();
  const double* pg = gamma.value().ptr();
  const double* pb = beta.value().ptr();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = px + r * c;
    double mean = 0.0;
    for (std::int64_t j = 0; j < c; ++j) mean += row[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::int64_t j = 0; j < c; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(c);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::int64_t j = 0; j < c; ++j) {
      const double h = (row[j] - mean) * rs;
      xhat[r * c + j] = h;
      out[r * c + j] = h * pg[j] + pb[j];
    }
  }
  return make_op(std::move(out), {x, gamma, beta},
                 [c, rows, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& self) {
                   const double* g = self.grad.ptr();
                   const double* pg = self.inputs[1]->value.ptr();
                   if (needs(self, 0)) {
                     double* gx = gbuf(self, 0).ptr();
                     std::vector<double> dh(static_cast<std::size_t>(c));
                     for (std::int64_t r = 0; r < rows; ++r) {
                       double mean_dh = 0.0;
                       double mean_dh_h = 0.0;
                       for (std::int64_t j = 0; j < c; ++j) {
                         dh[j] = g[r * c + j] * pg[j];
                         mean_dh += dh[j];
                         mean_dh_h += dh[j] * xhat[r * c + j];
                       }
                       mean_dh /= static_cast<double>(c);
                       mean_dh_h /= static_cast<double>(c);
                       for (std::int64_t j = 0; j < c; ++j) {
                         gx[r * c + j] +=
                             rstd[r] * (dh[j] - mean_dh - xhat[r * c + j] * mean_dh_h);
                       }
                     }
                   }
                   if (needs(self, 1)) {
                     double* gg = gbuf(self, 1).ptr();
                     for (std::int64_t i = 0; i < rows * c; ++i) gg[i % c] += g[i] * xhat[i];
                   }
                   if (needs(self, 2)) {
                     double* gb = gbuf(self, 2).ptr();
                     for (std::int64_t i = 0; i < rows * c; ++i) gb[i % c] += g[i];
                   }
                 });
}

Var self_attention(const Var& qkv, std::int64_t heads) {
  if (qkv.value().rank() < 3) throw ShapeError("self_attention: expected [B, ..., 3C]");
  const std::int64_t c3 = qkv.shape().back();
  if (c3 % 3 != 0) throw ShapeError("self_attention: last dim not divisible by 3");
  const std::int64_t c = c3 / 3;
  if (heads <= 0 || c % heads != 0) {
    throw ShapeError("self_attention: " + std::to_string(c) + " channels not divisible into " +
                     std::to_string(heads) + " heads");
  }
  const std::int64_t dh = c / heads;
  const std::int64_t batch = qkv.shape()[0];
  const std::int64_t tokens = qkv.value().numel() / (batch * c3);
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  Shape out_shape = qkv.shape();
  out_shape.back() = c;
  Tensor out(out_shape);
  std::vector<RowMat> attn(static_cast<std::size_t>(batch * heads));
  for (std::int64_t b = 0; b < batch; ++b) {
    const double* base = qkv.value().ptr() + b * tokens * c3;
    for (std::int64_t h = 0; h < heads; ++h) {
      ConstStridedMap Q(base + h * dh, tokens, dh, Eigen::OuterStride<>(c3));
      ConstStridedMap K(base + c + h * dh, tokens, dh, Eigen::OuterStride<>(c3));
      ConstStridedMap V(base + 2 * c + h * dh, tokens, dh, Eigen::OuterStride<>(c3));
      RowMat s = (Q * K.transpose()) * sc;
      for (std::int64_t i = 0; i < tokens; ++i) {
        const double m = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - m).exp();
        s.row(i) /= s.row(i).sum();
      }
      StridedMap O(out.ptr() + b * tokens * c + h * dh, tokens, dh, Eigen::OuterStride<>(c));
      O.noalias() = s * V;
      attn[static_cast<std::size_t>(b * heads + h)] = std::move(s);
    }
  }
  return make_op(std::move(out), {qkv},
                 [batch, heads, tokens, c, c3, dh, sc, attn = std::move(attn)](detail::Node& self) {
                   const double* qv = self.inputs[0]->value.ptr();
                   double* gq = gbuf(self, 0).ptr();
                   for (std::int64_t b = 0; b < batch; ++b) {
                     const double* base = qv + b * tokens * c3;
                     double* gbase = gq + b * tokens * c3;
                     for (std::int64_t h = 0; h < heads; ++h) {
                       const RowMat& a = attn[static_cast<std::size_t>(b * heads + h)];
                       ConstStridedMap Q(base + h * dh, tokens, dh, Eigen::OuterStride<>(c3));
                       ConstStridedMap K(base + c + h * dh, tokens, dh, Eigen::OuterStride<>(c3));
                       ConstStridedMap V(base + 2 * c + h * dh, tokens, dh,
                                         Eigen::OuterStride<>(c3));
                       ConstStridedMap dO(self.grad.ptr() + b * tokens * c + h * dh, tokens, dh,
                                          Eigen::OuterStride<>(c));
                       RowMat da = dO * V.transpose();
                       Eigen::VectorXd rs = (da.array() * a.array()).rowwise().sum();
                       RowMat ds = a.array() * (da.colwise() - rs).array();
                       StridedMap dQ(gbase + h * dh, tokens, dh, Eigen::OuterStride<>(c3));
                       StridedMap dK(gbase + c + h * dh, tokens, dh, Eigen::OuterStride<>(c3));
                       StridedMap dV(gbase + 2 * c + h * dh, tokens, dh, Eigen::OuterStride<>(c3));
                       dQ.noalias() += sc * (ds * K);
                       dK.noalias() += sc * (ds.transpose() * Q);
                       dV.noalias() += a.transpose() * dO;
                     }
                   }
                 });
}

Var dropout(const Var& x, double rate, Rng* rng) {
  if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
  if (rng == nullptr || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::vector<double> mask(static_cast<std::size_t>(x.value().numel()));
  Tensor out = x.value();
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    mask[i] = rng->bernoulli(rate) ? 0.0 : keep_scale;
    out[i] *= mask[i];
  }
  return make_op(std::move(out), {x}, [mask = std::move(mask)](detail::Node& self) {
    Tensor& gx = gbuf(self, 0);
    for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += self.grad[i] * mask[i];
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& ref = parts.front().shape();
  if (axis >= ref.size()) throw ShapeError("concat: axis out of range");
  std::int64_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
  std::int64_t trailing = 1;
  for (std::size_t i = axis + 1; i < ref.size(); ++i) trailing *= ref[i];
  std::vector<std::int64_t> widths;
  Shape out_shape = ref;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool compatible = s.size() == ref.size();
    for (std::size_t i = 0; compatible && i < s.size(); ++i) {
      if (i != axis && s[i] != ref[i]) compatible = false;
    }
    if (!compatible) {
      throw ShapeError("concat: " + shape_str(s) + " incompatible with " + shape_str(ref));
    }
    widths.push_back(s[axis] * trailing);
    out_shape[axis] += s[axis];
  }
  const std::int64_t row = out_shape[axis] * trailing;
  Tensor out(out_shape);
  std::int64_t col = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const double* src = parts[k].value().ptr();
    for (std::int64_t o = 0; o < outer; ++o) {
      std::copy_n(src + o * widths[k], widths[k], out.ptr() + o * row + col);
    }
    col += widths[k];
  }
  return make_op(std::move(out), parts, [outer, row, widths](detail::Node& self) {
    std::int64_t col = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      if (needs(self, k)) {
        double* g = gbuf(self, k).ptr();
        for (std::int64_t o = 0; o < outer; ++o) {
          const double* src = self.grad.ptr() + o * row + col;
          for (std::int64_t j = 0; j < widths[k]; ++j) g[o * widths[k] + j] += src[j];
        }
      }
      col += widths[k];
    }
  });
}

namespace {

// Moves axis 3 of a rank-4 tensor to position 1 (forward = true) or back.
Tensor permute_channels(const Tensor& in, bool to_first) {
  const Shape& s = in.shape();
  Tensor out;
  if (to_first) {
    const std::int64_t B = s[0], H = s[1], W = s[2], C = s[3];
    out = Tensor(Shape{B, C, H, W});
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t p = 0; p < H * W; ++p)
        for (std::int64_t ch = 0; ch < C; ++ch)
          out[(b * C + ch) * H * W + p] = in[(b * H * W + p) * C + ch];
  } else {
    const std::int64_t B = s[0], C = s[1], H = s[2], W = s[3];
    out = Tensor(Shape{B, H, W, C});
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t ch = 0; ch < C; ++ch)
        for (std::int64_t p = 0; p < H * W; ++p)
          out[(b * H * W + p) * C + ch] = in[(b * C + ch) * H * W + p];
  }
  return out;
}

}  // namespace

Var channels_first(const Var& x) {
  require_rank(x, 4, "channels_first");
  return make_op(permute_channels(x.value(), true), {x}, [](detail::Node& self) {
    gbuf(self, 0) += permute_channels(self.grad, false);
  });
}

Var channels_last(const Var& x) {
  require_rank(x, 4, "channels_last");
  return make_op(permute_channels(x.value(), false), {x}, [](detail::Node& self) {
    gbuf(self, 0) += permute_channels(self.grad, true);
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_op(std::move(out), {x}, [](detail::Node& self) {
    Tensor& gx = gbuf(self, 0);
    const double* g = self.grad.ptr();
    for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += g[i];
  });
}

Var conv1x1(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 4, "conv1x1");
  require_rank(weight, 2, "conv1x1 weight");
  const std::int64_t B = x.shape()[0], cin = x.shape()[1];
  const std::int64_t P = x.shape()[2] * x.shape()[3];
  const std::int64_t cout = weight.shape()[0];
  if (weight.shape()[1] != cin) {
    throw ShapeError("conv1x1: weight " + shape_str(weight.shape()) + " expects " +
                     std::to_string(weight.shape()[1]) + " channels, input has " +
                     std::to_string(cin));
  }
  if (bias.defined() && bias.shape() != Shape{cout}) throw ShapeError("conv1x1: bias shape");
  Tensor out(Shape{B, cout, x.shape()[2], x.shape()[3]});
  ConstMatMap W(weight.value().ptr(), cout, cin);
  for (std::int64_t b = 0; b < B; ++b) {
    ConstMatMap X(x.value().ptr() + b * cin * P, cin, P);
    MatMap Y(out.ptr() + b * cout * P, cout, P);
    Y.noalias() = W * X;
    if (bias.defined()) Y.colwise() += ConstVecMap(bias.value().ptr(), cout);
  }
  return make_op(std::move(out), {x, weight, bias}, [B, cin, cout, P](detail::Node& self) {
    ConstMatMap W(self.inputs[1]->value.ptr(), cout, cin);
    for (std::int64_t b = 0; b < B; ++b) {
      ConstMatMap G(self.grad.ptr() + b * cout * P, cout, P);
      if (needs(self, 0)) {
        MatMap GX(gbuf(self, 0).ptr() + b * cin * P, cin, P);
        GX.noalias() += W.transpose() * G;
      }
      if (needs(self, 1)) {
        ConstMatMap X(self.inputs[0]->value.ptr() + b * cin * P, cin, P);
        MatMap GW(gbuf(self, 1).ptr(), cout, cin);
        GW.noalias() += G * X.transpose();
      }
      if (needs(self, 2)) {
        VecMap GB(gbuf(self, 2).ptr(), cout);
        GB += G.rowwise().sum();
      }
    }
  });
}

namespace {

void im2col3x3(const double* x, std::int64_t cin, std::int64_t H, std::int64_t W, double* cols) {
  const std::int64_t P = H * W;
  for (std::int64_t c = 0; c < cin; ++c)
    for (std::int64_t ky = 0; ky < 3; ++ky)
      for (std::int64_t kx = 0; kx < 3; ++kx) {
        double* row = cols + ((c * 3 + ky) * 3 + kx) * P;
        for (std::int64_t i = 0; i < H; ++i) {
          const std::int64_t sy = i + ky - 1;
          for (std::int64_t j = 0; j < W; ++j) {
            const std::int64_t sx = j + kx - 1;
            row[i * W + j] = (sy < 0 || sy >= H || sx < 0 || sx >= W) ? 0.0 : x[(c * H + sy) * W + sx];
          }
        }
      }
}

void col2im3x3(const double* cols, std::int64_t cin, std::int64_t H, std::int64_t W, double* x) {
  const std::int64_t P = H * W;
  for (std::int64_t c = 0; c < cin; ++c)
    for (std::int64_t ky = 0; ky < 3; ++ky)
      for (std::int64_t kx = 0; kx < 3; ++kx) {
        const double* row = cols + ((c * 3 + ky) * 3 + kx) * P;
        for (std::int64_t i = 0; i < H; ++i) {
          const std::int64_t sy = i + ky - 1;
          if (sy < 0 || sy >= H) continue;
          for (std::int64_t j = 0; j < W; ++j) {
            const std::int64_t sx = j + kx - 1;
            if (sx < 0 || sx >= W) continue;
            x[(c * H + sy) * W + sx] += row[i * W + j];
          }
        }
      }
}

}  // namespace

Var conv3x3(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 4, "conv3x3");
  require_rank(weight, 4, "conv3x3 weight");
  const std::int64_t B = x.shape()[0], cin = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const std::int64_t cout = weight.shape()[0];
  if (weight.shape() != Shape{cout, cin, 3, 3}) {
    throw ShapeError("conv3x3: weight " + shape_str(weight.shape()) + " for input " +
                     shape_str(x.shape()));
  }
  if (bias.defined() && bias.shape() != Shape{cout}) throw ShapeError("conv3x3: bias shape");
  const std::int64_t P = H * W, K = cin * 9;
  Tensor out(Shape{B, cout, H, W});
  RowMat cols(K, P);
  ConstMatMap Wm(weight.value().ptr(), cout, K);
  for (std::int64_t b = 0; b < B; ++b) {
    im2col3x3(x.value().ptr() + b * cin * P, cin, H, W, cols.data());
    MatMap Y(out.ptr() + b * cout * P, cout, P);
    Y.noalias() = Wm * cols;
    if (bias.defined()) Y.colwise() += ConstVecMap(bias.value().ptr(), cout);
  }
  return make_op(std::move(out), {x, weight, bias}, [B, cin, cout, H, W, P, K](detail::Node& self) {
    ConstMatMap Wm(self.inputs[1]->value.ptr(), cout, K);
    RowMat cols(K, P);
    for (std::int64_t b = 0; b < B; ++b) {
      ConstMatMap G(self.grad.ptr() + b * cout * P, cout, P);
      if (needs(self, 1)) {
        im2col3x3(self.inputs[0]->value.ptr() + b * cin * P, cin, H, W, cols.data());
        MatMap GW(gbuf(self, 1).ptr(), cout, K);
        GW.noalias() += G * cols.transpose();
      }
      if (needs(self, 0)) {
        RowMat dcols = Wm.transpose() * G;
        col2im3x3(dcols.data(), cin, H, W, gbuf(self, 0).ptr() + b * cin * P);
      }
      if (needs(self, 2)) {
        VecMap GB(gbuf(self, 2).ptr(), cout);
        GB += G.rowwise().sum();
      }
    }
  });
}

Var group_norm(const Var& x, std::int64_t groups, const Var& gamma, const Var& beta, double eps) {
  require_rank(x, 4, "group_norm");
  const std::int64_t B = x.shape()[0], C = x.shape()[1];
  const std::int64_t P = x.shape()[2] * x.shape()[3];
  if (groups <= 0 || C % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(C) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
    throw ShapeError("group_norm: affine parameters must have shape [" + std::to_string(C) + "]");
  }
  const std::int64_t cg = C / groups;
  const std::int64_t n = cg * P;
  Tensor out = Tensor::zeros_like(x.value());
  std::vector<double> xhat(static_cast<std::size_t>(x.value().numel()));
  std::vector<double> rstd(static_cast<std::size_t>(B * groups));
  const double* pg = gamma.value().ptr();
  const double* pb = beta.value().ptr();
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t g = 0; g < groups; ++g) {
      const std::int64_t off = (b * C + g * cg) * P;
      const double* px = x.value().ptr() + off;
      double mean = 0.0;
      for (std::int64_t i = 0; i < n; ++i) mean += px[i];
      mean /= static_cast<double>(n);
      double var = 0.0;
      for (std::int64_t i = 0; i < n; ++i) var += (px[i] - mean) * (px[i] - mean);
      var /= static_cast<double>(n);
      const double rs = 1.0 / std::sqrt(var + eps);
      rstd[b * groups + g] = rs;
      for (std::int64_t i = 0; i < n; ++i) {
        const std::int64_t ch = g * cg + i / P;
        const double h = (px[i] - mean) * rs;
        xhat[off + i] = h;
        out[off + i] = h * pg[ch] + pb[ch];
      }
    }
  }
  return make_op(
      std::move(out), {x, gamma, beta},
      [B, C, P, groups, cg, n, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node& self) {
        const double* g = self.grad.ptr();
        const double* pg = self.inputs[1]->value.ptr();
        if (needs(self, 0)) {
          double* gx = gbuf(self, 0).ptr();
          std::vector<double> dh(static_cast<std::size_t>(n));
          for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t gr = 0; gr < groups; ++gr) {
              const std::int64_t off = (b * C + gr * cg) * P;
              double mean_dh = 0.0, mean_dh_h = 0.0;
              for (std::int64_t i = 0; i < n; ++i) {
                dh[i] = g[off + i] * pg[gr * cg + i / P];
                mean_dh += dh[i];
                mean_dh_h += dh[i] * xhat[off + i];
              }
              mean_dh /= static_cast<double>(n);
              mean_dh_h /= static_cast<double>(n);
              const double rs = rstd[b * groups + gr];
              for (std::int64_t i = 0; i < n; ++i) {
                gx[off + i] += rs * (dh[i] - mean_dh - xhat[off + i] * mean_dh_h);
              }
            }
          }
        }
        for (std::size_t k = 1; k <= 2; ++k) {
          if (!needs(self, k)) continue;
          double* ga = gbuf(self, k).ptr();
          for (std::int64_t b = 0; b < B; ++b)
            for (std::int64_t ch = 0; ch < C; ++ch)
              for (std::int64_t p = 0; p < P; ++p) {
                const std::int64_t i = (b * C + ch) * P + p;
                ga[ch] += k == 1 ? g[i] * xhat[i] : g[i];
              }
        }
      });
}

Var adaptive_avg_pool(const Var& x, std::int64_t out_h, std::int64_t out_w) {
  require_rank(x, 4, "adaptive_avg_pool");
  if (out_h <= 0 || out_w <= 0) throw ShapeError("adaptive_avg_pool: non-positive output size");
  const std::int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  auto lo = [](std::int64_t i, std::int64_t in, std::int64_t out) { return (i * in) / out; };
  auto hi = [](std::int64_t i, std::int64_t in, std::int64_t out) {
    return ((i + 1) * in + out - 1) / out;
  };
  Tensor out(Shape{B, C, out_h, out_w});
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const double* src = x.value().ptr() + bc * H * W;
    for (std::int64_t i = 0; i < out_h; ++i)
      for (std::int64_t j = 0; j < out_w; ++j) {
        const std::int64_t y0 = lo(i, H, out_h), y1 = hi(i, H, out_h);
        const std::int64_t x0 = lo(j, W, out_w), x1 = hi(j, W, out_w);
        double s = 0.0;
        for (std::int64_t y = y0; y < y1; ++y)
          for (std::int64_t xx = x0; xx < x1; ++xx) s += src[y * W + xx];
        out[(bc * out_h + i) * out_w + j] = s / static_cast<double>((y1 - y0) * (x1 - x0));
      }
  }
  return make_op(std::move(out), {x}, [B, C, H, W, out_h, out_w, lo, hi](detail::Node& self) {
    double* gx = gbuf(self, 0).ptr();
    for (std::int64_t bc = 0; bc < B * C; ++bc)
      for (std::int64_t i = 0; i < out_h; ++i)
        for (std::int64_t j = 0; j < out_w; ++j) {
          const std::int64_t y0 = lo(i, H, out_h), y1 = hi(i, H, out_h);
          const std::int64_t x0 = lo(j, W, out_w), x1 = hi(j, W, out_w);
          const double g = self.grad[(bc * out_h + i) * out_w + j] /
                           static_cast<double>((y1 - y0) * (x1 - x0));
          for (std::int64_t y = y0; y < y1; ++y)
            for (std::int64_t xx = x0; xx < x1; ++xx) gx[bc * H * W + y * W + xx] += g;
        }
  });
}

namespace {

struct LinearTaps {
  std::vector<std::int64_t> i0, i1;
  std::vector<double> w1;  // weight of i1; i0 gets 1 - w1
};

LinearTaps corner_aligned_taps(std::int64_t in, std::int64_t out) {
  LinearTaps t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.w1.resize(out);
  const double ratio = out > 1 ? static_cast<double>(in - 1) / static_cast<double>(out - 1) : 0.0;
  for (std::int64_t o = 0; o < out; ++o) {
    const double src = ratio * static_cast<double>(o);
    const auto f = std::min(static_cast<std::int64_t>(std::floor(src)), in - 1);
    t.i0[o] = f;
    t.i1[o] = std::min(f + 1, in - 1);
    t.w1[o] = src - static_cast<double>(f);
  }
  return t;
}

}  // namespace

Var resize_bilinear(const Var& x, std::int64_t out_h, std::int64_t out_w) {
  require_rank(x, 4, "resize_bilinear");
  if (out_h <= 0 || out_w <= 0) throw ShapeError("resize_bilinear: non-positive output size");
  const std::int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  if (H == out_h && W == out_w) return x;
  LinearTaps ty = corner_aligned_taps(H, out_h);
  LinearTaps tx = corner_aligned_taps(W, out_w);
  Tensor out(Shape{B, C, out_h, out_w});
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const double* src = x.value().ptr() + bc * H * W;
    double* dst = out.ptr() + bc * out_h * out_w;
    for (std::int64_t i = 0; i < out_h; ++i) {
      const double wy = ty.w1[i];
      const double* r0 = src + ty.i0[i] * W;
      const double* r1 = src + ty.i1[i] * W;
      for (std::int64_t j = 0; j < out_w; ++j) {
        const double wx = tx.w1[j];
        const double top = (1.0 - wx) * r0[tx.i0[j]] + wx * r0[tx.i1[j]];
        const double bot = (1.0 - wx) * r1[tx.i0[j]] + wx * r1[tx.i1[j]];
        dst[i * out_w + j] = (1.0 - wy) * top + wy * bot;
      }
    }
  }
  return make_op(std::move(out), {x},
                 [B, C, H, W, out_h, out_w, ty = std::move(ty), tx = std::move(tx)](detail::Node& self) {
                   double* gx = gbuf(self, 0).ptr();
                   for (std::int64_t bc = 0; bc < B * C; ++bc) {
                     const double* g = self.grad.ptr() + bc * out_h * out_w;
                     double* dst = gx + bc * H * W;
                     for (std::int64_t i = 0; i < out_h; ++i) {
                       const double wy = ty.w1[i];
                       for (std::int64_t j = 0; j < out_w; ++j) {
                         const double wx = tx.w1[j];
                         const double v = g[i * out_w + j];
                         dst[ty.i0[i] * W + tx.i0[j]] += (1.0 - wy) * (1.0 - wx) * v;
                         dst[ty.i0[i] * W + tx.i1[j]] += (1.0 - wy) * wx * v;
                         dst[ty.i1[i] * W + tx.i0[j]] += wy * (1.0 - wx) * v;
                         dst[ty.i1[i] * W + tx.i1[j]] += wy * wx * v;
                       }
                     }
                   }
                 });
}

Var gated_mix(const Var& g, const Var& x, const Var& y) {
  require_same_shape(g, x, "gated_mix");
  require_same_shape(x, y, "gated_mix");
  Tensor out = Tensor::zeros_like(x.value());
  const double* pg = g.value().ptr();
  const double* px = x.value().ptr();
  const double* py = y.value().ptr();
  // The exact mix lies between x and y; clamping only removes rounding overshoot.
  for (std::int64_t i = 0; i < out.numel(); ++i) {
    const double m = pg[i] * px[i] + (1.0 - pg[i]) * py[i];
    out[i] = std::clamp(m, std::min(px[i], py[i]), std::max(px[i], py[i]));
  }
  return make_op(std::move(out), {g, x, y}, [](detail::Node& self) {
    const double* pg = self.inputs[0]->value.ptr();
    const double* px = self.inputs[1]->value.ptr();
    const double* py = self.inputs[2]->value.ptr();
    const double* d = self.grad.ptr();
    const std::int64_t n = self.grad.numel();
    if (needs(self, 0)) {
      double* o = gbuf(self, 0).ptr();
      for (std::int64_t i = 0; i < n; ++i) o[i] += d[i] * (px[i] - py[i]);
    }
    if (needs(self, 1)) {
      double* o = gbuf(self, 1).ptr();
      for (std::int64_t i = 0; i < n; ++i) o[i] += d[i] * pg[i];
    }
    if (needs(self, 2)) {
      double* o = gbuf(self, 2).ptr();
      for (std::int64_t i = 0; i < n; ++i) o[i] += d[i] * (1.0 - pg[i]);
    }
  });
}

Var patchify(const Var& image, std::int64_t patch) {
  require_rank(image, 4, "patchify");
  const std::int64_t B = image.shape()[0], C = image.shape()[1];
  const std::int64_t H = image.shape()[2], W = image.shape()[3];
  if (patch <= 0) throw ShapeError("patchify: patch size must be positive");
  if (H % patch != 0) {
    throw ShapeError("patchify: height " + std::to_string(H) + " is not divisible by patch size " +
                     std::to_string(patch));
  }
  if (W % patch != 0) {
    throw ShapeError("patchify: width " + std::to_string(W) + " is not divisible by patch size " +
                     std::to_string(patch));
  }
  const std::int64_t gh = H / patch, gw = W / patch, feat = C * patch * patch;
  auto src_index = [=](std::int64_t b, std::int64_t i, std::int64_t j, std::int64_t f) {
    const std::int64_t c = f / (patch * patch);
    const std::int64_t py = (f / patch) % patch;
    const std::int64_t px = f % patch;
    return ((b * C + c) * H + i * patch + py) * W + j * patch + px;
  };
  Tensor out(Shape{B, gh, gw, feat});
  std::int64_t k = 0;
  for (std::int64_t b = 0; b < B; ++b)
    for (std::int64_t i = 0; i < gh; ++i)
      for (std::int64_t j = 0; j < gw; ++j)
        for (std::int64_t f = 0; f < feat; ++f) out[k++] = image.value()[src_index(b, i, j, f)];
  return make_op(std::move(out), {image}, [=](detail::Node& self) {
    double* gi = gbuf(self, 0).ptr();
    std::int64_t k = 0;
    for (std::int64_t b = 0; b < B; ++b)
      for (std::int64_t i = 0; i < gh; ++i)
        for (std::int64_t j = 0; j < gw; ++j)
          for (std::int64_t f = 0; f < feat; ++f) gi[src_index(b, i, j, f)] += self.grad[k++];
  });
}

Var cross_entropy(const Var& logits, const std::vector<std::int32_t>& labels,
                  std::int32_t ignore_index, const std::vector<std::uint8_t>* include) {
  require_rank(logits, 4, "cross_entropy");
  const std::int64_t B = logits.shape()[0], K = logits.shape()[1];
  const std::int64_t P = logits.shape()[2] * logits.shape()[3];
  if (static_cast<std::int64_t>(labels.size()) != B * P) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_str(logits.shape()));
  }
  if (include && include->size() != labels.size()) {
    throw ShapeError("cross_entropy: include mask size mismatch");
  }
  // Per-pixel d(loss_i)/d(logit) before the 1/count factor.
  Tensor dlogits = Tensor::zeros_like(logits.value());
  double total = 0.0;
  std::int64_t count = 0;
  const double* z = logits.value().ptr();
  std::vector<double> prob(static_cast<std::size_t>(K));
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t p = 0; p < P; ++p) {
      const std::int64_t idx = b * P + p;
      const std::int32_t y = labels[idx];
      if (y == ignore_index) continue;
      if (include && (*include)[idx] == 0) continue;
      if (y < 0 || y >= K) {
        throw std::invalid_argument("cross_entropy: label " + std::to_string(y) + " at pixel " +
                                    std::to_string(idx) + " outside [0, " + std::to_string(K) +
                                    ")");
      }
      const double* zp = z + b * K * P + p;
      double m = zp[0];
      for (std::int64_t k = 1; k < K; ++k) m = std::max(m, zp[k * P]);
      double denom = 0.0;
      for (std::int64_t k = 0; k < K; ++k) {
        prob[k] = std::exp(zp[k * P] - m);
        denom += prob[k];
      }
      total += std::log(denom) + m - zp[y * P];
      for (std::int64_t k = 0; k < K; ++k) {
        dlogits[b * K * P + k * P + p] = prob[k] / denom - (k == y ? 1.0 : 0.0);
      }
      ++count;
    }
  }
  const double mean = count > 0 ? total / static_cast<double>(count) : 0.0;
  const double inv = count > 0 ? 1.0 / static_cast<double>(count) : 0.0;
  return make_op(Tensor::scalar(mean), {logits},
                 [inv, dlogits = std::move(dlogits)](detail::Node& self) {
                   const double s = self.grad[0] * inv;
                   if (s == 0.0) return;
                   Tensor& gl = gbuf(self, 0);
                   for (std::int64_t i = 0; i < gl.numel(); ++i) gl[i] += s * dlogits[i];
                 });
}

Var weighted_sum(const Var& x, const Tensor& weights) {
  if (weights.shape() != x.shape()) throw ShapeError("weighted_sum: shape mismatch");
  double s = 0.0;
  for (std::int64_t i = 0; i < weights.numel(); ++i) s += x.value()[i] * weights[i];
  return make_op(Tensor::scalar(s), {x}, [weights](detail::Node& self) {
    Tensor& gx = gbuf(self, 0);
    const double g = self.grad[0];
    for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += g * weights[i];
  });
}

Var sum(const Var& x) {
  return make_op(Tensor::scalar(x.value().sum()), {x}, [](detail::Node& self) {
    Tensor& gx = gbuf(self, 0);
    const double g = self.grad[0];
    for (std::int64_t i = 0; i < gx.numel(); ++i) gx[i] += g;
  });
}

double cubic_kernel(double distance, double a) {
  const double x = std::abs(distance);
  if (x <= 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a;
  return 0.0;
}

namespace {

// Resamples along one axis of a [outer, n, inner] view.
Tensor bicubic_axis(const Tensor& in, std::int64_t outer, std::int64_t n, std::int64_t inner,
                    std::int64_t out_n) {
  Tensor out(Shape{outer, out_n, inner});
  const double ratio = static_cast<double>(n) / static_cast<double>(out_n);
  for (std::int64_t o = 0; o < out_n; ++o) {
    const double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    const double fl = std::floor(src);
    const double t = src - fl;
    const auto base = static_cast<std::int64_t>(fl);
    double w[4] = {cubic_kernel(t + 1.0), cubic_kernel(t), cubic_kernel(1.0 - t),
                   cubic_kernel(2.0 - t)};
    std::int64_t idx[4];
    for (int k = 0; k < 4; ++k) idx[k] = std::clamp<std::int64_t>(base - 1 + k, 0, n - 1);
    for (std::int64_t a = 0; a < outer; ++a)
      for (std::int64_t c = 0; c < inner; ++c) {
        double v = 0.0;
        for (int k = 0; k < 4; ++k) v += w[k] * in[(a * n + idx[k]) * inner + c];
        out[(a * out_n + o) * inner + c] = v;
      }
  }
  return out;
}

}  // namespace

Tensor resize_bicubic(const Tensor& grid, std::int64_t out_h, std::int64_t out_w) {
  if (grid.rank() != 3) throw ShapeError("resize_bicubic: expected [H, W, C]");
  if (out_h <= 0 || out_w <= 0) throw ShapeError("resize_bicubic: non-positive output size");
  const std::int64_t H = grid.dim(0), W = grid.dim(1), C = grid.dim(2);
  if (H == out_h && W == out_w) return grid;
  Tensor rows = bicubic_axis(grid, 1, H, W * C, out_h);
  Tensor cols = bicubic_axis(rows, out_h, W, C, out_w);
  cols.reshape(Shape{out_h, out_w, C});
  return cols;
}

}  // namespace modalfuse::ops
