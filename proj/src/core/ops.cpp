// SPDX-License-Identifier: Apache-2.0

#include "edmb/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include <Eigen/Dense>

#include "edmb/branch_trace.hpp"
#include "edmb/flops.hpp"
#include "edmb/kernels.hpp"

namespace edmb {

namespace {

template <typename T>
using Node = typename Tensor<T>::Node;

template <typename T>
using Mat = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <typename T>
using ConstMat = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Gradient sink for an input, or an empty span when it needs none.
template <typename T>
std::span<T> sink(Node<T>* n) {
  if (!n || !n->requires_grad) return {};
  return n->grad_buffer();
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

template <typename T>
void require_rank(const Tensor<T>& x, int rank, const char* op) {
  require(x.defined(), std::string(op) + ": undefined input");
  require(x.rank() == rank, std::string(op) + ": expected rank " + std::to_string(rank) +
                                " input, got shape " + shape_str(x.shape()));
}

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  require(a.shape() == b.shape(), std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                      " vs " + shape_str(b.shape()));
}

}  // namespace

template <typename T>
T sigmoid_value(T x) {
  // Single monotone formula; exp(-x) overflowing to inf yields exactly 0.
  return T(1) / (T(1) + std::exp(-x));
}

template <typename T>
T softplus_value(T x) {
  if (x > T(20)) return x;
  if (x < T(-20)) return std::exp(x);
  return std::log1p(std::exp(x));
}

template <typename T>
Tensor<T> pointwise(const Tensor<T>& x, Pointwise kind, T c) {
  require(x.defined(), "pointwise: undefined input");
  const auto& in = x.vec();
  std::vector<T> out(in.size());
  switch (kind) {
    case Pointwise::relu:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > T(0) ? in[i] : T(0);
      if (auto* bt = BranchTrace::active())
        for (std::size_t i = 0; i < in.size(); ++i) bt->mix(in[i] > T(0));
      break;
    case Pointwise::sigmoid:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = sigmoid_value(in[i]);
      break;
    case Pointwise::softplus:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = softplus_value(in[i]);
      break;
    case Pointwise::exp:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::exp(in[i]);
      break;
    case Pointwise::log:
      for (std::size_t i = 0; i < in.size(); ++i) {
        const T v = std::max(in[i], c);
        if (auto* bt = BranchTrace::active()) bt->mix(in[i] < c);
        if (!(v > T(0))) {
          throw Error(std::string(std::isnan(static_cast<double>(v)) ? "log: non-finite input " : "log: non-positive input ") +
                      std::to_string(static_cast<double>(in[i])) +
                      " at index " + std::to_string(i) + " after clamping");
        }
        out[i] = std::log(v);
      }
      break;
    case Pointwise::neg:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = -in[i];
      break;
    case Pointwise::add_const:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] + c;
      break;
    case Pointwise::mul_const:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * c;
      break;
  }
  Node<T>* xn = x.node();
  static constexpr const char* names[] = {"relu", "sigmoid", "softplus", "exp",
                                          "log",  "neg",     "add_const", "mul_const"};
  return make_result<T>(x.shape(), std::move(out), {&x}, names[static_cast<int>(kind)],
                        [xn, kind, c](Node<T>& self) {
                          auto gx = sink<T>(xn);
                          if (gx.empty()) return;
                          const auto& xi = xn->data;
                          const auto& y = self.data;
                          const auto& gy = self.grad;
                          const std::size_t n = y.size();
                          switch (kind) {
                            case Pointwise::relu:
                              for (std::size_t i = 0; i < n; ++i) if (xi[i] > T(0)) gx[i] += gy[i];
                              break;
                            case Pointwise::sigmoid:
                              for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * y[i] * (T(1) - y[i]);
                              break;
                            case Pointwise::softplus:
                              for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * sigmoid_value(xi[i]);
                              break;
                            case Pointwise::exp:
                              for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * y[i];
                              break;
                            case Pointwise::log:
                              for (std::size_t i = 0; i < n; ++i)
                                if (xi[i] >= c) gx[i] += gy[i] / xi[i];
                              break;
                            case Pointwise::neg:
                              for (std::size_t i = 0; i < n; ++i) gx[i] -= gy[i];
                              break;
                            case Pointwise::add_const:
                              for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i];
                              break;
                            case Pointwise::mul_const:
                              for (std::size_t i = 0; i < n; ++i) gx[i] += gy[i] * c;
                              break;
                          }
                        });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  require(x.defined(), "sqrt: undefined input");
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) {
    require(x[i] >= T(0), "sqrt: negative input at index " + std::to_string(i));
    out[i] = std::sqrt(x[i]);
  }
  Node<T>* xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {&x}, "sqrt", [xn](Node<T>& self) {
    auto gx = sink<T>(xn);
    if (gx.empty()) return;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (self.data[i] > T(0)) gx[i] += self.grad[i] / (T(2) * self.data[i]);
    }
  });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& x, T lo, T hi) {
  require(x.defined() && lo <= hi, "clamp: invalid arguments");
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(std::max(x[i], lo), hi);
  if (auto* bt = BranchTrace::active())
    for (std::size_t i = 0; i < out.size(); ++i) bt->mix(x[i] <= lo ? 0 : (x[i] >= hi ? 2 : 1));
  Node<T>* xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {&x}, "clamp", [xn, lo, hi](Node<T>& self) {
    auto gx = sink<T>(xn);
    if (gx.empty()) return;
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const T v = xn->data[i];
      if (v > lo && v < hi) gx[i] += self.grad[i];
    }
  });
}

namespace {

template <typename T, typename Fwd>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, int kind) {
  require_same_shape(a, b, name);
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(a[i], b[i]);
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  return make_result<T>(a.shape(), std::move(out), {&a, &b}, name, [an, bn, kind](Node<T>& self) {
    auto ga = sink<T>(an);
    auto gb = sink<T>(bn);
    const auto& g = self.grad;
    for (std::size_t i = 0; i < g.size(); ++i) {
      switch (kind) {
        case 0:
          if (!ga.empty()) ga[i] += g[i];
          if (!gb.empty()) gb[i] += g[i];
          break;
        case 1:
          if (!ga.empty()) ga[i] += g[i];
          if (!gb.empty()) gb[i] -= g[i];
          break;
        default:
          if (!ga.empty()) ga[i] += g[i] * bn->data[i];
          if (!gb.empty()) gb[i] += g[i] * an->data[i];
          break;
      }
    }
  });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, "add", [](T u, T v) { return u + v; }, 0);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, "sub", [](T u, T v) { return u - v; }, 1);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, "mul", [](T u, T v) { return u * v; }, 2);
}

template <typename T>
Tensor<T> add_broadcast_leading(const Tensor<T>& x, const Tensor<T>& y) {
  require(x.defined() && y.defined(), "add_broadcast_leading: undefined input");
  Shape tail(x.shape().begin() + 1, x.shape().end());
  require(tail == y.shape(), "add_broadcast_leading: trailing shape " + shape_str(tail) +
                                 " does not match " + shape_str(y.shape()));
  const std::size_t inner = y.numel();
  const int outer = x.dim(0);
  std::vector<T> out(x.vec());
  for (int b = 0; b < outer; ++b)
    for (std::size_t i = 0; i < inner; ++i) out[b * inner + i] += y[i];
  Node<T>* xn = x.node();
  Node<T>* yn = y.node();
  return make_result<T>(x.shape(), std::move(out), {&x, &y}, "add_broadcast",
                        [xn, yn, outer, inner](Node<T>& self) {
                          auto gx = sink<T>(xn);
                          auto gy = sink<T>(yn);
                          for (int b = 0; b < outer; ++b)
                            for (std::size_t i = 0; i < inner; ++i) {
                              const T g = self.grad[b * inner + i];
                              if (!gx.empty()) gx[b * inner + i] += g;
                              if (!gy.empty()) gy[i] += g;
                            }
                        });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  require(x.defined(), "sum: undefined input");
  T acc = T(0);
  for (T v : x.vec()) acc += v;
  Node<T>* xn = x.node();
  return make_result<T>(Shape{1}, std::vector<T>{acc}, {&x}, "sum", [xn](Node<T>& self) {
    auto gx = sink<T>(xn);
    for (auto& g : gx) g += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return mul_const(sum(x), T(1) / static_cast<T>(x.numel()));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  require(shape_numel(shape) == x.numel(),
          "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Node<T>* xn = x.node();
  return make_result<T>(std::move(shape), x.vec(), {&x}, "reshape", [xn](Node<T>& self) {
    auto gx = sink<T>(xn);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
  });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 int padding, int groups) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d weight");
  kernels::ConvGeometry g;
  g.batch = x.dim(0);
  g.in_channels = x.dim(1);
  g.height = x.dim(2);
  g.width = x.dim(3);
  g.out_channels = w.dim(0);
  g.kernel_h = w.dim(2);
  g.kernel_w = w.dim(3);
  g.stride = stride;
  g.padding = padding;
  g.groups = groups;
  require(groups >= 1 && g.in_channels % groups == 0 && g.out_channels % groups == 0,
          "conv2d: groups=" + std::to_string(groups) + " does not divide channels");
  require(w.dim(1) * groups == g.in_channels,
          "conv2d: input channel dimension " + std::to_string(g.in_channels) +
              " does not match weight " + shape_str(w.shape()));
  require(g.kernel_h % 2 == 1 && g.kernel_w % 2 == 1,
          "conv2d: kernel size " + std::to_string(g.kernel_h) + "x" + std::to_string(g.kernel_w) +
              " must be odd");
  require(stride >= 1 && padding >= 0, "conv2d: invalid stride/padding");
  const int span_h = g.height + 2 * padding - g.kernel_h;
  const int span_w = g.width + 2 * padding - g.kernel_w;
  require(span_h >= 0 && span_h % stride == 0,
          "conv2d: height " + std::to_string(g.height) + " gives a non-integral output size");
  require(span_w >= 0 && span_w % stride == 0,
          "conv2d: width " + std::to_string(g.width) + " gives a non-integral output size");
  if (bias.defined()) {
    require(bias.numel() == static_cast<std::size_t>(g.out_channels),
            "conv2d: bias length " + std::to_string(bias.numel()) + " does not match out channels " +
                std::to_string(g.out_channels));
  }
  const int ho = g.out_height(), wo = g.out_width();
  std::vector<T> out(static_cast<std::size_t>(g.batch) * g.out_channels * ho * wo);
  std::span<const T> bspan = bias.defined() ? bias.data() : std::span<const T>{};
  kernels::conv2d_forward<T>(g, x.data(), w.data(), bspan, out);
  if (auto* mc = FlopScope::active()) {
    mc->conv += static_cast<std::uint64_t>(g.batch) * ho * wo * g.out_channels * g.in_per_group() *
                g.kernel_h * g.kernel_w;
  }
  Node<T>* xn = x.node();
  Node<T>* wn = w.node();
  Node<T>* bn = bias.defined() ? bias.node() : nullptr;
  return make_result<T>(Shape{g.batch, g.out_channels, ho, wo}, std::move(out), {&x, &w, &bias},
                        "conv2d", [xn, wn, bn, g](Node<T>& self) {
                          kernels::conv2d_backward<T>(g, xn->data, wn->data, self.grad,
                                                      sink<T>(xn), sink<T>(wn), sink<T>(bn));
                        });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
  require(x.defined() && w.defined(), "linear: undefined input");
  require_rank(w, 2, "linear weight");
  const int in = x.dim(-1);
  const int outf = w.dim(0);
  require(w.dim(1) == in, "linear: input width " + std::to_string(in) + " does not match weight " +
                              shape_str(w.shape()));
  if (bias.defined()) {
    require(bias.numel() == static_cast<std::size_t>(outf), "linear: bias length mismatch");
  }
  const auto rows = static_cast<Eigen::Index>(x.numel() / static_cast<std::size_t>(in));
  Shape shape = x.shape();
  shape.back() = outf;
  std::vector<T> out(static_cast<std::size_t>(rows) * outf);
  {
    ConstMat<T> X(x.data().data(), rows, in);
    ConstMat<T> Wm(w.data().data(), outf, in);
    Mat<T> Y(out.data(), rows, outf);
    Y.noalias() = X * Wm.transpose();
    if (bias.defined()) {
      Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.data().data(), outf);
      Y.rowwise() += bv;
    }
  }
  if (auto* mc = FlopScope::active()) mc->linear += static_cast<std::uint64_t>(rows) * in * outf;
  Node<T>* xn = x.node();
  Node<T>* wn = w.node();
  Node<T>* bn = bias.defined() ? bias.node() : nullptr;
  return make_result<T>(std::move(shape), std::move(out), {&x, &w, &bias}, "linear",
                        [xn, wn, bn, rows, in, outf](Node<T>& self) {
                          ConstMat<T> GY(self.grad.data(), rows, outf);
                          auto gx = sink<T>(xn);
                          auto gw = sink<T>(wn);
                          auto gb = sink<T>(bn);
                          if (!gx.empty()) {
                            ConstMat<T> Wm(wn->data.data(), outf, in);
                            Mat<T> GX(gx.data(), rows, in);
                            GX.noalias() += GY * Wm;
                          }
                          if (!gw.empty()) {
                            ConstMat<T> X(xn->data.data(), rows, in);
                            Mat<T> GW(gw.data(), outf, in);
                            GW.noalias() += GY.transpose() * X;
                          }
                          if (!gb.empty()) {
                            for (Eigen::Index r = 0; r < rows; ++r)
                              for (int o = 0; o < outf; ++o) gb[o] += GY(r, o);
                          }
                        });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require(x.defined(), "layer_norm: undefined input");
  const int d = x.dim(-1);
  require(gamma.numel() == static_cast<std::size_t>(d) && beta.numel() == static_cast<std::size_t>(d),
          "layer_norm: affine parameters must have length " + std::to_string(d));
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = x.data().data() + r * d;
    T m = T(0);
    for (int i = 0; i < d; ++i) m += xr[i];
    m /= d;
    T v = T(0);
    for (int i = 0; i < d; ++i) v += (xr[i] - m) * (xr[i] - m);
    v /= d;
    const T is = T(1) / std::sqrt(v + eps);
    inv_std[r] = is;
    for (int i = 0; i < d; ++i) {
      const T h = (xr[i] - m) * is;
      xhat[r * d + i] = h;
      out[r * d + i] = h * gamma[i] + beta[i];
    }
  }
  Node<T>* xn = x.node();
  Node<T>* gn = gamma.node();
  Node<T>* bn = beta.node();
  return make_result<T>(x.shape(), std::move(out), {&x, &gamma, &beta}, "layer_norm",
                        [xn, gn, bn, d, rows, xhat = std::move(xhat),
                         inv_std = std::move(inv_std)](Node<T>& self) {
                          auto gx = sink<T>(xn);
                          auto gg = sink<T>(gn);
                          auto gb = sink<T>(bn);
                          std::vector<T> gh(d);
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* gy = self.grad.data() + r * d;
                            const T* h = xhat.data() + r * d;
                            T s1 = T(0), s2 = T(0);
                            for (int i = 0; i < d; ++i) {
                              if (!gg.empty()) gg[i] += gy[i] * h[i];
                              if (!gb.empty()) gb[i] += gy[i];
                              gh[i] = gy[i] * gn->data[i];
                              s1 += gh[i];
                              s2 += gh[i] * h[i];
                            }
                            if (gx.empty()) continue;
                            const T is = inv_std[r];
                            for (int i = 0; i < d; ++i) {
                              gx[r * d + i] += is * (gh[i] - s1 / d - h[i] * s2 / d);
                            }
                          }
                        });
}

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       Tensor<T>& running_mean, Tensor<T>& running_var, bool training, T momentum,
                       T eps) {
  require_rank(x, 4, "batch_norm2d");
  const int B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require(gamma.numel() == static_cast<std::size_t>(C) && beta.numel() == static_cast<std::size_t>(C) &&
              running_mean.numel() == static_cast<std::size_t>(C) &&
              running_var.numel() == static_cast<std::size_t>(C),
          "batch_norm2d: parameter length does not match " + std::to_string(C) + " channels");
  const std::size_t count = static_cast<std::size_t>(B) * HW;
  std::vector<T> mean_c(C), inv_std(C);
  for (int c = 0; c < C; ++c) {
    if (training) {
      T m = T(0);
      for (int b = 0; b < B; ++b) {
        const T* p = x.data().data() + (static_cast<std::size_t>(b) * C + c) * HW;
        for (int i = 0; i < HW; ++i) m += p[i];
      }
      m /= static_cast<T>(count);
      T v = T(0);
      for (int b = 0; b < B; ++b) {
        const T* p = x.data().data() + (static_cast<std::size_t>(b) * C + c) * HW;
        for (int i = 0; i < HW; ++i) v += (p[i] - m) * (p[i] - m);
      }
      const T biased = v / static_cast<T>(count);
      const T unbiased = count > 1 ? v / static_cast<T>(count - 1) : biased;
      mean_c[c] = m;
      inv_std[c] = T(1) / std::sqrt(biased + eps);
      running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * m;
      running_var[c] = (T(1) - momentum) * running_var[c] + momentum * unbiased;
    } else {
      mean_c[c] = running_mean[c];
      inv_std[c] = T(1) / std::sqrt(running_var[c] + eps);
    }
  }
  std::vector<T> out(x.numel());
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const std::size_t off = (static_cast<std::size_t>(b) * C + c) * HW;
      const T m = mean_c[c], is = inv_std[c], gm = gamma[c], bt = beta[c];
      for (int i = 0; i < HW; ++i) out[off + i] = (x[off + i] - m) * is * gm + bt;
    }
  Node<T>* xn = x.node();
  Node<T>* gn = gamma.node();
  Node<T>* bn = beta.node();
  return make_result<T>(
      x.shape(), std::move(out), {&x, &gamma, &beta}, "batch_norm2d",
      [xn, gn, bn, B, C, HW, training, mean_c = std::move(mean_c),
       inv_std = std::move(inv_std)](Node<T>& self) {
        auto gx = sink<T>(xn);
        auto gg = sink<T>(gn);
        auto gb = sink<T>(bn);
        const T n = static_cast<T>(static_cast<std::size_t>(B) * HW);
        for (int c = 0; c < C; ++c) {
          const T m = mean_c[c], is = inv_std[c], gm = gn->data[c];
          T sum_g = T(0), sum_gh = T(0);
          for (int b = 0; b < B; ++b) {
            const std::size_t off = (static_cast<std::size_t>(b) * C + c) * HW;
            for (int i = 0; i < HW; ++i) {
              const T g = self.grad[off + i];
              const T h = (xn->data[off + i] - m) * is;
              sum_g += g;
              sum_gh += g * h;
            }
          }
          if (!gg.empty()) gg[c] += sum_gh;
          if (!gb.empty()) gb[c] += sum_g;
          if (gx.empty()) continue;
          for (int b = 0; b < B; ++b) {
            const std::size_t off = (static_cast<std::size_t>(b) * C + c) * HW;
            for (int i = 0; i < HW; ++i) {
              const T g = self.grad[off + i];
              if (training) {
                const T h = (xn->data[off + i] - m) * is;
                gx[off + i] += gm * is * (g - sum_g / n - h * sum_gh / n);
              } else {
                gx[off + i] += g * gm * is;
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, int groups, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps) {
  require_rank(x, 4, "group_norm");
  const int B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require(groups >= 1 && C % groups == 0,
          "group_norm: " + std::to_string(groups) + " groups do not divide " + std::to_string(C) +
              " channels");
  require(gamma.numel() == static_cast<std::size_t>(C) && beta.numel() == static_cast<std::size_t>(C),
          "group_norm: affine parameter length mismatch");
  const int cpg = C / groups;
  const std::size_t gsize = static_cast<std::size_t>(cpg) * HW;
  std::vector<T> xhat(x.numel()), inv_std(static_cast<std::size_t>(B) * groups);
  std::vector<T> out(x.numel());
  for (int b = 0; b < B; ++b)
    for (int g = 0; g < groups; ++g) {
      const std::size_t off = (static_cast<std::size_t>(b) * C + g * cpg) * HW;
      T m = T(0);
      for (std::size_t i = 0; i < gsize; ++i) m += x[off + i];
      m /= static_cast<T>(gsize);
      T v = T(0);
      for (std::size_t i = 0; i < gsize; ++i) v += (x[off + i] - m) * (x[off + i] - m);
      v /= static_cast<T>(gsize);
      const T is = T(1) / std::sqrt(v + eps);
      inv_std[static_cast<std::size_t>(b) * groups + g] = is;
      for (std::size_t i = 0; i < gsize; ++i) {
        const int c = g * cpg + static_cast<int>(i / HW);
        const T h = (x[off + i] - m) * is;
        xhat[off + i] = h;
        out[off + i] = h * gamma[c] + beta[c];
      }
    }
  Node<T>* xn = x.node();
  Node<T>* gn = gamma.node();
  Node<T>* bn = beta.node();
  return make_result<T>(x.shape(), std::move(out), {&x, &gamma, &beta}, "group_norm",
                        [xn, gn, bn, B, C, HW, groups, cpg, gsize, xhat = std::move(xhat),
                         inv_std = std::move(inv_std)](Node<T>& self) {
                          auto gx = sink<T>(xn);
                          auto gg = sink<T>(gn);
                          auto gb = sink<T>(bn);
                          for (int b = 0; b < B; ++b)
                            for (int g = 0; g < groups; ++g) {
                              const std::size_t off = (static_cast<std::size_t>(b) * C + g * cpg) * HW;
                              T s1 = T(0), s2 = T(0);
                              for (std::size_t i = 0; i < gsize; ++i) {
                                const int c = g * cpg + static_cast<int>(i / HW);
                                const T gy = self.grad[off + i];
                                if (!gg.empty()) gg[c] += gy * xhat[off + i];
                                if (!gb.empty()) gb[c] += gy;
                                const T gh = gy * gn->data[c];
                                s1 += gh;
                                s2 += gh * xhat[off + i];
                              }
                              if (gx.empty()) continue;
                              const T is = inv_std[static_cast<std::size_t>(b) * groups + g];
                              const T n = static_cast<T>(gsize);
                              for (std::size_t i = 0; i < gsize; ++i) {
                                const int c = g * cpg + static_cast<int>(i / HW);
                                const T gh = self.grad[off + i] * gn->data[c];
                                gx[off + i] += is * (gh - s1 / n - xhat[off + i] * s2 / n);
                              }
                            }
                        });
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, int out_h, int out_w) {
  require_rank(x, 4, "resize_bilinear");
  require(out_h >= 1 && out_w >= 1, "resize_bilinear: output size must be positive");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<T> out(static_cast<std::size_t>(B) * C * out_h * out_w);
  kernels::bilinear_forward<T>(B * C, H, W, out_h, out_w, x.data(), out);
  Node<T>* xn = x.node();
  return make_result<T>(Shape{B, C, out_h, out_w}, std::move(out), {&x}, "resize_bilinear",
                        [xn, B, C, H, W, out_h, out_w](Node<T>& self) {
                          auto gx = sink<T>(xn);
                          if (gx.empty()) return;
                          kernels::bilinear_backward<T>(B * C, H, W, out_h, out_w, self.grad, gx);
                        });
}

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& x, int factor) {
  require(factor >= 1, "bilinear_upsample: factor " + std::to_string(factor) + " must be >= 1");
  require_rank(x, 4, "bilinear_upsample");
  return resize_bilinear(x, x.dim(2) * factor, x.dim(3) * factor);
}

template <typename T>
Tensor<T> max_pool2x2(const Tensor<T>& x) {
  require_rank(x, 4, "max_pool2x2");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(H % 2 == 0 && W % 2 == 0,
          "max_pool2x2: spatial size " + std::to_string(H) + "x" + std::to_string(W) + " must be even");
  const int ho = H / 2, wo = W / 2;
  std::vector<T> out(static_cast<std::size_t>(B) * C * ho * wo);
  std::vector<std::uint32_t> arg(out.size());
  for (int p = 0; p < B * C; ++p) {
    const T* src = x.data().data() + static_cast<std::size_t>(p) * H * W;
    for (int oy = 0; oy < ho; ++oy)
      for (int ox = 0; ox < wo; ++ox) {
        std::uint32_t best = static_cast<std::uint32_t>((2 * oy) * W + 2 * ox);
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const auto idx = static_cast<std::uint32_t>((2 * oy + dy) * W + 2 * ox + dx);
            if (src[idx] > src[best]) best = idx;
          }
        const std::size_t o = static_cast<std::size_t>(p) * ho * wo + oy * wo + ox;
        out[o] = src[best];
        arg[o] = best;
      }
  }
  if (auto* bt = BranchTrace::active())
    for (auto a : arg) bt->mix(a);
  Node<T>* xn = x.node();
  return make_result<T>(Shape{B, C, ho, wo}, std::move(out), {&x}, "max_pool2x2",
                        [xn, H, W, ho, wo, arg = std::move(arg)](Node<T>& self) {
                          auto gx = sink<T>(xn);
                          if (gx.empty()) return;
                          for (std::size_t o = 0; o < arg.size(); ++o) {
                            const std::size_t p = o / (static_cast<std::size_t>(ho) * wo);
                            gx[p * H * W + arg[o]] += self.grad[o];
                          }
                        });
}

template <typename T>
Tensor<T> concat_channels(const std::vector<Tensor<T>>& parts) {
  require(!parts.empty(), "concat_channels: no inputs");
  for (const auto& p : parts) require_rank(p, 4, "concat_channels");
  const int B = parts[0].dim(0), H = parts[0].dim(2), W = parts[0].dim(3);
  int C = 0;
  std::vector<int> offsets;
  for (const auto& p : parts) {
    require(p.dim(0) == B && p.dim(2) == H && p.dim(3) == W,
            "concat_channels: shape " + shape_str(p.shape()) + " incompatible with " +
                shape_str(parts[0].shape()));
    offsets.push_back(C);
    C += p.dim(1);
  }
  const std::size_t HW = static_cast<std::size_t>(H) * W;
  std::vector<T> out(static_cast<std::size_t>(B) * C * HW);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const int ck = parts[k].dim(1);
    for (int b = 0; b < B; ++b) {
      const T* src = parts[k].data().data() + static_cast<std::size_t>(b) * ck * HW;
      std::copy(src, src + ck * HW, out.begin() + (static_cast<std::size_t>(b) * C + offsets[k]) * HW);
    }
  }
  std::vector<Node<T>*> nodes;
  std::vector<int> widths;
  for (const auto& p : parts) {
    nodes.push_back(p.node());
    widths.push_back(p.dim(1));
  }
  return make_result<T>(Shape{B, C, H, W}, std::move(out), parts, "concat_channels",
                        [nodes, widths, offsets, B, C, HW](Node<T>& self) {
                          for (std::size_t k = 0; k < nodes.size(); ++k) {
                            auto gk = sink<T>(nodes[k]);
                            if (gk.empty()) continue;
                            const int ck = widths[k];
                            for (int b = 0; b < B; ++b) {
                              const T* src = self.grad.data() +
                                             (static_cast<std::size_t>(b) * C + offsets[k]) * HW;
                              T* dst = gk.data() + static_cast<std::size_t>(b) * ck * HW;
                              for (std::size_t i = 0; i < ck * HW; ++i) dst[i] += src[i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> crop2d(const Tensor<T>& x, int y0, int x0, int h, int w) {
  require_rank(x, 4, "crop2d");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(y0 >= 0 && x0 >= 0 && h >= 1 && w >= 1 && y0 + h <= H && x0 + w <= W,
          "crop2d: window out of bounds for shape " + shape_str(x.shape()));
  std::vector<T> out(static_cast<std::size_t>(B) * C * h * w);
  for (int p = 0; p < B * C; ++p)
    for (int i = 0; i < h; ++i) {
      const T* src = x.data().data() + (static_cast<std::size_t>(p) * H + y0 + i) * W + x0;
      std::copy(src, src + w, out.begin() + (static_cast<std::size_t>(p) * h + i) * w);
    }
  Node<T>* xn = x.node();
  return make_result<T>(Shape{B, C, h, w}, std::move(out), {&x}, "crop2d",
                        [xn, B, C, H, W, y0, x0, h, w](Node<T>& self) {
                          auto gx = sink<T>(xn);
                          if (gx.empty()) return;
                          for (int p = 0; p < B * C; ++p)
                            for (int i = 0; i < h; ++i)
                              for (int j = 0; j < w; ++j)
                                gx[(static_cast<std::size_t>(p) * H + y0 + i) * W + x0 + j] +=
                                    self.grad[(static_cast<std::size_t>(p) * h + i) * w + j];
                        });
}

template <typename T>
Tensor<T> assemble_quadrants(const Tensor<T>& tl, const Tensor<T>& tr, const Tensor<T>& bl,
                             const Tensor<T>& br) {
  require_rank(tl, 4, "assemble_quadrants");
  for (const auto* q : {&tr, &bl, &br}) require_same_shape(tl, *q, "assemble_quadrants");
  const int B = tl.dim(0), C = tl.dim(1), h = tl.dim(2), w = tl.dim(3);
  const int H = 2 * h, W = 2 * w;
  std::vector<T> out(static_cast<std::size_t>(B) * C * H * W);
  const Tensor<T>* quads[4] = {&tl, &tr, &bl, &br};
  for (int q = 0; q < 4; ++q) {
    const int oy = (q / 2) * h, ox = (q % 2) * w;
    for (int p = 0; p < B * C; ++p)
      for (int i = 0; i < h; ++i) {
        const T* src = quads[q]->data().data() + (static_cast<std::size_t>(p) * h + i) * w;
        std::copy(src, src + w, out.begin() + (static_cast<std::size_t>(p) * H + oy + i) * W + ox);
      }
  }
  std::vector<Node<T>*> nodes{tl.node(), tr.node(), bl.node(), br.node()};
  return make_result<T>(Shape{B, C, H, W}, std::move(out), {&tl, &tr, &bl, &br}, "assemble_quadrants",
                        [nodes, B, C, h, w, H, W](Node<T>& self) {
                          for (int q = 0; q < 4; ++q) {
                            auto gq = sink<T>(nodes[q]);
                            if (gq.empty()) continue;
                            const int oy = (q / 2) * h, ox = (q % 2) * w;
                            for (int p = 0; p < B * C; ++p)
                              for (int i = 0; i < h; ++i)
                                for (int j = 0; j < w; ++j)
                                  gq[(static_cast<std::size_t>(p) * h + i) * w + j] +=
                                      self.grad[(static_cast<std::size_t>(p) * H + oy + i) * W + ox + j];
                          }
                        });
}

template <typename T>
Tensor<T> tokens_to_spatial(const Tensor<T>& x, int h, int w) {
  require_rank(x, 3, "tokens_to_spatial");
  const int B = x.dim(0), M = x.dim(1), D = x.dim(2);
  require(M == h * w, "tokens_to_spatial: " + std::to_string(M) + " tokens do not form a " +
                          std::to_string(h) + "x" + std::to_string(w) + " grid");
  std::vector<T> out(x.numel());
  for (int b = 0; b < B; ++b)
    for (int m = 0; m < M; ++m)
      for (int d = 0; d < D; ++d)
        out[(static_cast<std::size_t>(b) * D + d) * M + m] = x[(static_cast<std::size_t>(b) * M + m) * D + d];
  Node<T>* xn = x.node();
  return make_result<T>(Shape{B, D, h, w}, std::move(out), {&x}, "tokens_to_spatial",
                        [xn, B, M, D](Node<T>& self) {
                          auto gx = sink<T>(xn);
                          if (gx.empty()) return;
                          for (int b = 0; b < B; ++b)
                            for (int m = 0; m < M; ++m)
                              for (int d = 0; d < D; ++d)
                                gx[(static_cast<std::size_t>(b) * M + m) * D + d] +=
                                    self.grad[(static_cast<std::size_t>(b) * D + d) * M + m];
                        });
}

template <typename T>
Tensor<T> spatial_to_tokens(const Tensor<T>& x) {
  require_rank(x, 4, "spatial_to_tokens");
  const int B = x.dim(0), D = x.dim(1), M = x.dim(2) * x.dim(3);
  std::vector<T> out(x.numel());
  for (int b = 0; b < B; ++b)
    for (int d = 0; d < D; ++d)
      for (int m = 0; m < M; ++m)
        out[(static_cast<std::size_t>(b) * M + m) * D + d] = x[(static_cast<std::size_t>(b) * D + d) * M + m];
  Node<T>* xn = x.node();
  return make_result<T>(Shape{B, M, D}, std::move(out), {&x}, "spatial_to_tokens",
                        [xn, B, M, D](Node<T>& self) {
                          auto gx = sink<T>(xn);
                          if (gx.empty()) return;
                          for (int b = 0; b < B; ++b)
                            for (int d = 0; d < D; ++d)
                              for (int m = 0; m < M; ++m)
                                gx[(static_cast<std::size_t>(b) * D + d) * M + m] +=
                                    self.grad[(static_cast<std::size_t>(b) * M + m) * D + d];
                        });
}

template <typename T>
Tensor<T> patchify(const Tensor<T>& x, int patch) {
  require_rank(x, 4, "patchify");
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(patch >= 1 && H % patch == 0 && W % patch == 0,
          "patchify: image H=" + std::to_string(H) + ", W=" + std::to_string(W) +
              " not divisible by patch size P=" + std::to_string(patch));
  const int gh = H / patch, gw = W / patch, M = gh * gw, F = C * patch * patch;
  // Index map shared by forward and backward: token feature -> pixel.
  std::vector<std::uint32_t> src(static_cast<std::size_t>(M) * F);
  for (int py = 0; py < gh; ++py)
    for (int px = 0; px < gw; ++px)
      for (int c = 0; c < C; ++c)
        for (int i = 0; i < patch; ++i)
          for (int j = 0; j < patch; ++j) {
            const int m = py * gw + px;
            const int f = (c * patch + i) * patch + j;
            src[static_cast<std::size_t>(m) * F + f] =
                static_cast<std::uint32_t>((c * H + py * patch + i) * W + px * patch + j);
          }
  const std::size_t img = static_cast<std::size_t>(C) * H * W;
  std::vector<T> out(static_cast<std::size_t>(B) * M * F);
  for (int b = 0; b < B; ++b)
    for (std::size_t k = 0; k < src.size(); ++k) out[b * src.size() + k] = x[b * img + src[k]];
  Node<T>* xn = x.node();
  return make_result<T>(Shape{B, M, F}, std::move(out), {&x}, "patchify",
                        [xn, B, img, src = std::move(src)](Node<T>& self) {
                          auto gx = sink<T>(xn);
                          if (gx.empty()) return;
                          for (int b = 0; b < B; ++b)
                            for (std::size_t k = 0; k < src.size(); ++k)
                              gx[b * img + src[k]] += self.grad[b * src.size() + k];
                        });
}

template <typename T>
Tensor<T> merge_patches(const Tensor<T>& x, int h, int w) {
  require_rank(x, 3, "merge_patches");
  const int B = x.dim(0), M = x.dim(1), D = x.dim(2);
  require(M == h * w && h % 2 == 0 && w % 2 == 0,
          "merge_patches: grid " + std::to_string(h) + "x" + std::to_string(w) +
              " must be even and match " + std::to_string(M) + " tokens");
  const int oh = h / 2, ow = w / 2, OM = oh * ow;
  std::vector<T> out(static_cast<std::size_t>(B) * OM * 4 * D);
  // Swin ordering: (0,0), (1,0), (0,1), (1,1).
  auto source = [&](int om, int k) {
    const int oy = om / ow, ox = om % ow;
    const int dy = k % 2, dx = k / 2;
    return (2 * oy + dy) * w + 2 * ox + dx;
  };
  for (int b = 0; b < B; ++b)
    for (int om = 0; om < OM; ++om)
      for (int k = 0; k < 4; ++k) {
        const T* s = x.data().data() + (static_cast<std::size_t>(b) * M + source(om, k)) * D;
        std::copy(s, s + D, out.begin() + ((static_cast<std::size_t>(b) * OM + om) * 4 + k) * D);
      }
  Node<T>* xn = x.node();
  return make_result<T>(Shape{B, OM, 4 * D}, std::move(out), {&x}, "merge_patches",
                        [xn, B, M, D, OM, w, ow](Node<T>& self) {
                          auto gx = sink<T>(xn);
                          if (gx.empty()) return;
                          for (int b = 0; b < B; ++b)
                            for (int om = 0; om < OM; ++om)
                              for (int k = 0; k < 4; ++k) {
                                const int oy = om / ow, ox = om % ow;
                                const int m = (2 * oy + k % 2) * w + 2 * ox + k / 2;
                                const T* g = self.grad.data() +
                                             ((static_cast<std::size_t>(b) * OM + om) * 4 + k) * D;
                                T* dst = gx.data() + (static_cast<std::size_t>(b) * M + m) * D;
                                for (int d = 0; d < D; ++d) dst[d] += g[d];
                              }
                        });
}

template <typename T>
Tensor<T> reverse_tokens(const Tensor<T>& x) {
  require_rank(x, 3, "reverse_tokens");
  const int B = x.dim(0), M = x.dim(1), D = x.dim(2);
  std::vector<T> out(x.numel());
  for (int b = 0; b < B; ++b)
    for (int m = 0; m < M; ++m) {
      const T* s = x.data().data() + (static_cast<std::size_t>(b) * M + m) * D;
      std::copy(s, s + D, out.begin() + (static_cast<std::size_t>(b) * M + (M - 1 - m)) * D);
    }
  Node<T>* xn = x.node();
  return make_result<T>(x.shape(), std::move(out), {&x}, "reverse_tokens", [xn, B, M, D](Node<T>& self) {
    auto gx = sink<T>(xn);
    if (gx.empty()) return;
    for (int b = 0; b < B; ++b)
      for (int m = 0; m < M; ++m)
        for (int d = 0; d < D; ++d)
          gx[(static_cast<std::size_t>(b) * M + m) * D + d] +=
              self.grad[(static_cast<std::size_t>(b) * M + (M - 1 - m)) * D + d];
  });
}

template <typename T>
Tensor<T> selective_scan(const Tensor<T>& x, const Tensor<T>& delta, const Tensor<T>& a,
                         const Tensor<T>& b, const Tensor<T>& c, bool reverse) {
  require_rank(x, 3, "selective_scan");
  require_same_shape(x, delta, "selective_scan delta");
  require_rank(a, 2, "selective_scan A");
  kernels::ScanGeometry g;
  g.batch = x.dim(0);
  g.length = x.dim(1);
  g.channels = x.dim(2);
  g.state_dim = a.dim(1);
  g.reverse = reverse;
  require(a.dim(0) == g.channels, "selective_scan: A has " + std::to_string(a.dim(0)) +
                                      " rows, expected " + std::to_string(g.channels));
  const Shape bc{g.batch, g.length, g.state_dim};
  require(b.shape() == bc && c.shape() == bc,
          "selective_scan: B/C must have shape " + shape_str(bc));
  for (T v : delta.vec()) require(v > T(0), "selective_scan: step sizes must be positive");
  std::vector<T> out(x.numel());
  const bool track = GradMode::enabled() &&
                     (x.requires_grad() || delta.requires_grad() || a.requires_grad() ||
                      b.requires_grad() || c.requires_grad());
  std::vector<T> states(track ? x.numel() * g.state_dim : 0);
  kernels::selective_scan_forward<T>(g, x.data(), delta.data(), a.data(), b.data(), c.data(), out,
                                     states);
  for (T v : out) {
    if (!std::isfinite(static_cast<double>(v))) throw Error("selective_scan: non-finite output");
  }
  if (auto* mc = FlopScope::active()) {
    mc->scan += static_cast<std::uint64_t>(g.batch) * g.length * g.channels * g.state_dim * 3;
  }
  Node<T>* xn = x.node();
  Node<T>* dn = delta.node();
  Node<T>* an = a.node();
  Node<T>* bn = b.node();
  Node<T>* cn = c.node();
  return make_result<T>(x.shape(), std::move(out), {&x, &delta, &a, &b, &c}, "selective_scan",
                        [xn, dn, an, bn, cn, g, states = std::move(states)](Node<T>& self) {
                          kernels::selective_scan_backward<T>(
                              g, xn->data, dn->data, an->data, bn->data, cn->data, states,
                              self.grad, sink<T>(xn), sink<T>(dn), sink<T>(an), sink<T>(bn),
                              sink<T>(cn));
                        });
}

#define EDMB_INSTANTIATE_OPS(T)                                                                  \
  template T sigmoid_value<T>(T);                                                                \
  template T softplus_value<T>(T);                                                               \
  template Tensor<T> pointwise<T>(const Tensor<T>&, Pointwise, T);                               \
  template Tensor<T> sqrt<T>(const Tensor<T>&);                                                  \
  template Tensor<T> clamp<T>(const Tensor<T>&, T, T);                                           \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> add_broadcast_leading<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                   \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                  \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                        \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int,   \
                               int);                                                             \
  template Tensor<T> linear<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> layer_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);     \
  template Tensor<T> batch_norm2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,       \
                                     Tensor<T>&, Tensor<T>&, bool, T, T);                        \
  template Tensor<T> group_norm<T>(const Tensor<T>&, int, const Tensor<T>&, const Tensor<T>&, T); \
  template Tensor<T> bilinear_upsample<T>(const Tensor<T>&, int);                                \
  template Tensor<T> resize_bilinear<T>(const Tensor<T>&, int, int);                             \
  template Tensor<T> max_pool2x2<T>(const Tensor<T>&);                                           \
  template Tensor<T> concat_channels<T>(const std::vector<Tensor<T>>&);                          \
  template Tensor<T> crop2d<T>(const Tensor<T>&, int, int, int, int);                            \
  template Tensor<T> assemble_quadrants<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                           const Tensor<T>&);                                    \
  template Tensor<T> tokens_to_spatial<T>(const Tensor<T>&, int, int);                           \
  template Tensor<T> spatial_to_tokens<T>(const Tensor<T>&);                                     \
  template Tensor<T> patchify<T>(const Tensor<T>&, int);                                         \
  template Tensor<T> merge_patches<T>(const Tensor<T>&, int, int);                               \
  template Tensor<T> reverse_tokens<T>(const Tensor<T>&);                                        \
  template Tensor<T> selective_scan<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                       const Tensor<T>&, const Tensor<T>&, bool);

EDMB_INSTANTIATE_OPS(float)
EDMB_INSTANTIATE_OPS(double)

}  // namespace edmb
