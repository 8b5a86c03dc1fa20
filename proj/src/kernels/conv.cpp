// SPDX-License-Identifier: Apache-2.0

#include <Eigen/Core>
#include <algorithm>
#include <vector>

#include "edmb/kernels.hpp"

namespace edmb::kernels {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel_h == 1 && g.kernel_w == 1 && g.stride == 1 && g.padding == 0;
}

bool is_depthwise(const ConvGeometry& g) {
  return g.groups > 1 && g.groups == g.in_channels && g.groups == g.out_channels;
}

// Unrolls channels [0, channels) of one image into col[channels*kh*kw, Ho*Wo].
template <typename T>
void im2col(const ConvGeometry& g, const T* x, int channels, T* col) {
  const int ho = g.out_height(), wo = g.out_width();
  const int plane = g.height * g.width;
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < g.kernel_h; ++ki) {
      for (int kj = 0; kj < g.kernel_w; ++kj) {
        T* row = col + static_cast<std::size_t>((c * g.kernel_h + ki) * g.kernel_w + kj) * ho * wo;
        const T* src = x + static_cast<std::size_t>(c) * plane;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.stride - g.padding + ki;
          T* out = row + oy * wo;
          if (iy < 0 || iy >= g.height) {
            std::fill(out, out + wo, T(0));
            continue;
          }
          const T* line = src + iy * g.width;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * g.stride - g.padding + kj;
            out[ox] = (ix >= 0 && ix < g.width) ? line[ix] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const ConvGeometry& g, const T* col, int channels, T* dx) {
  const int ho = g.out_height(), wo = g.out_width();
  const int plane = g.height * g.width;
  for (int c = 0; c < channels; ++c) {
    for (int ki = 0; ki < g.kernel_h; ++ki) {
      for (int kj = 0; kj < g.kernel_w; ++kj) {
        const T* row =
            col + static_cast<std::size_t>((c * g.kernel_h + ki) * g.kernel_w + kj) * ho * wo;
        T* dst = dx + static_cast<std::size_t>(c) * plane;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * g.stride - g.padding + ki;
          if (iy < 0 || iy >= g.height) continue;
          T* line = dst + iy * g.width;
          const T* in = row + oy * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * g.stride - g.padding + kj;
            if (ix >= 0 && ix < g.width) line[ix] += in[ox];
          }
        }
      }
    }
  }
}

template <typename T>
void depthwise_forward(const ConvGeometry& g, const T* x, const T* w, const T* bias, T* y) {
  const int ho = g.out_height(), wo = g.out_width();
  const int kk = g.kernel_h * g.kernel_w;
#pragma omp parallel for collapse(2) schedule(static)
  for (int b = 0; b < g.batch; ++b) {
    for (int c = 0; c < g.in_channels; ++c) {
      const T* src = x + (static_cast<std::size_t>(b) * g.in_channels + c) * g.height * g.width;
      T* dst = y + (static_cast<std::size_t>(b) * g.out_channels + c) * ho * wo;
      const T* k = w + static_cast<std::size_t>(c) * kk;
      const T b0 = bias ? bias[c] : T(0);
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          T acc = b0;
          for (int ki = 0; ki < g.kernel_h; ++ki) {
            const int iy = oy * g.stride - g.padding + ki;
            if (iy < 0 || iy >= g.height) continue;
            for (int kj = 0; kj < g.kernel_w; ++kj) {
              const int ix = ox * g.stride - g.padding + kj;
              if (ix < 0 || ix >= g.width) continue;
              acc += k[ki * g.kernel_w + kj] * src[iy * g.width + ix];
            }
          }
          dst[oy * wo + ox] = acc;
        }
      }
    }
  }
}

template <typename T>
void depthwise_backward(const ConvGeometry& g, const T* x, const T* w, const T* dy, T* dx, T* dw,
                        T* db) {
  const int ho = g.out_height(), wo = g.out_width();
  const int kk = g.kernel_h * g.kernel_w;
  // Channels are independent; the batch loop stays inside so each thread
  // owns dw[c] and db[c] and the summation order is fixed.
#pragma omp parallel for schedule(static)
  for (int c = 0; c < g.in_channels; ++c) {
    const T* k = w + static_cast<std::size_t>(c) * kk;
    for (int b = 0; b < g.batch; ++b) {
      const T* src = x + (static_cast<std::size_t>(b) * g.in_channels + c) * g.height * g.width;
      const T* grad = dy + (static_cast<std::size_t>(b) * g.out_channels + c) * ho * wo;
      T* dsrc = dx ? dx + (static_cast<std::size_t>(b) * g.in_channels + c) * g.height * g.width
                   : nullptr;
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          const T gv = grad[oy * wo + ox];
          if (db) db[c] += gv;
          for (int ki = 0; ki < g.kernel_h; ++ki) {
            const int iy = oy * g.stride - g.padding + ki;
            if (iy < 0 || iy >= g.height) continue;
            for (int kj = 0; kj < g.kernel_w; ++kj) {
              const int ix = ox * g.stride - g.padding + kj;
              if (ix < 0 || ix >= g.width) continue;
              if (dw) dw[static_cast<std::size_t>(c) * kk + ki * g.kernel_w + kj] += gv * src[iy * g.width + ix];
              if (dsrc) dsrc[iy * g.width + ix] += gv * k[ki * g.kernel_w + kj];
            }
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                    std::span<const T> bias, std::span<T> y) {
  const T* bptr = bias.empty() ? nullptr : bias.data();
  if (is_depthwise(g)) {
    depthwise_forward(g, x.data(), w.data(), bptr, y.data());
    return;
  }
  const int ho = g.out_height(), wo = g.out_width();
  const int cg = g.in_per_group(), og = g.out_per_group();
  const int k = cg * g.kernel_h * g.kernel_w;
  const int cols = ho * wo;
  const bool pointwise = is_pointwise(g);
#pragma omp parallel
  {
    std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(k) * cols);
#pragma omp for schedule(static)
    for (int b = 0; b < g.batch; ++b) {
      for (int grp = 0; grp < g.groups; ++grp) {
        const T* xb = x.data() + (static_cast<std::size_t>(b) * g.in_channels + grp * cg) *
                                     g.height * g.width;
        const T* colp = xb;
        if (!pointwise) {
          im2col(g, xb, cg, col.data());
          colp = col.data();
        }
        CMapMat<T> wm(w.data() + static_cast<std::size_t>(grp) * og * k, og, k);
        CMapMat<T> cm(colp, k, cols);
        MapMat<T> ym(y.data() + (static_cast<std::size_t>(b) * g.out_channels + grp * og) * cols,
                     og, cols);
        ym.noalias() = wm * cm;
        if (bptr) {
          for (int o = 0; o < og; ++o) ym.row(o).array() += bptr[grp * og + o];
        }
      }
    }
  }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                     std::span<const T> dy, std::span<T> dx, std::span<T> dw, std::span<T> db) {
  T* dxp = dx.empty() ? nullptr : dx.data();
  T* dwp = dw.empty() ? nullptr : dw.data();
  T* dbp = db.empty() ? nullptr : db.data();
  if (is_depthwise(g)) {
    depthwise_backward(g, x.data(), w.data(), dy.data(), dxp, dwp, dbp);
    return;
  }
  const int ho = g.out_height(), wo = g.out_width();
  const int cg = g.in_per_group(), og = g.out_per_group();
  const int k = cg * g.kernel_h * g.kernel_w;
  const int cols = ho * wo;
  const bool pointwise = is_pointwise(g);
  const std::size_t wsize = w.size();
  // Per-image weight gradients are reduced in batch order afterwards so the
  // result does not depend on the thread count.
  std::vector<T> dw_parts(dwp ? wsize * g.batch : 0, T(0));

#pragma omp parallel
  {
    std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(k) * cols);
    std::vector<T> dcol(static_cast<std::size_t>(k) * cols);
#pragma omp for schedule(static)
    for (int b = 0; b < g.batch; ++b) {
      for (int grp = 0; grp < g.groups; ++grp) {
        const std::size_t in_off =
            (static_cast<std::size_t>(b) * g.in_channels + grp * cg) * g.height * g.width;
        const T* xb = x.data() + in_off;
        CMapMat<T> dym(dy.data() + (static_cast<std::size_t>(b) * g.out_channels + grp * og) * cols,
                       og, cols);
        CMapMat<T> wm(w.data() + static_cast<std::size_t>(grp) * og * k, og, k);
        if (dwp) {
          const T* colp = xb;
          if (!pointwise) {
            im2col(g, xb, cg, col.data());
            colp = col.data();
          }
          CMapMat<T> cm(colp, k, cols);
          MapMat<T> dwm(dw_parts.data() + wsize * b + static_cast<std::size_t>(grp) * og * k, og, k);
          dwm.noalias() = dym * cm.transpose();
        }
        if (dxp) {
          if (pointwise) {
            MapMat<T> dxm(dxp + in_off, k, cols);
            dxm.noalias() += wm.transpose() * dym;
          } else {
            MapMat<T> dcm(dcol.data(), k, cols);
            dcm.noalias() = wm.transpose() * dym;
            col2im(g, dcol.data(), cg, dxp + in_off);
          }
        }
      }
    }
  }
  if (dwp) {
    for (int b = 0; b < g.batch; ++b) {
      const T* part = dw_parts.data() + wsize * b;
      for (std::size_t i = 0; i < wsize; ++i) dwp[i] += part[i];
    }
  }
  if (dbp) {
    for (int b = 0; b < g.batch; ++b) {
      for (int o = 0; o < g.out_channels; ++o) {
        const T* row = dy.data() + (static_cast<std::size_t>(b) * g.out_channels + o) * cols;
        T acc = T(0);
        for (int i = 0; i < cols; ++i) acc += row[i];
        dbp[o] += acc;
      }
    }
  }
}

namespace reference {

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                    std::span<const T> bias, std::span<T> y) {
  const int ho = g.out_height(), wo = g.out_width();
  const int cg = g.in_per_group(), og = g.out_per_group();
  for (int b = 0; b < g.batch; ++b)
    for (int o = 0; o < g.out_channels; ++o) {
      const int grp = o / og;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          T acc = bias.empty() ? T(0) : bias[o];
          for (int c = 0; c < cg; ++c)
            for (int ki = 0; ki < g.kernel_h; ++ki)
              for (int kj = 0; kj < g.kernel_w; ++kj) {
                const int iy = oy * g.stride - g.padding + ki;
                const int ix = ox * g.stride - g.padding + kj;
                if (iy < 0 || iy >= g.height || ix < 0 || ix >= g.width) continue;
                const int ic = grp * cg + c;
                acc += w[((static_cast<std::size_t>(o) * cg + c) * g.kernel_h + ki) * g.kernel_w + kj] *
                       x[((static_cast<std::size_t>(b) * g.in_channels + ic) * g.height + iy) * g.width + ix];
              }
          y[((static_cast<std::size_t>(b) * g.out_channels + o) * ho + oy) * wo + ox] = acc;
        }
    }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> x, std::span<const T> w,
                     std::span<const T> dy, std::span<T> dx, std::span<T> dw, std::span<T> db) {
  const int ho = g.out_height(), wo = g.out_width();
  const int cg = g.in_per_group(), og = g.out_per_group();
  for (int b = 0; b < g.batch; ++b)
    for (int o = 0; o < g.out_channels; ++o) {
      const int grp = o / og;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox) {
          const T gv = dy[((static_cast<std::size_t>(b) * g.out_channels + o) * ho + oy) * wo + ox];
          if (!db.empty()) db[o] += gv;
          for (int c = 0; c < cg; ++c)
            for (int ki = 0; ki < g.kernel_h; ++ki)
              for (int kj = 0; kj < g.kernel_w; ++kj) {
                const int iy = oy * g.stride - g.padding + ki;
                const int ix = ox * g.stride - g.padding + kj;
                if (iy < 0 || iy >= g.height || ix < 0 || ix >= g.width) continue;
                const int ic = grp * cg + c;
                const std::size_t wi = ((static_cast<std::size_t>(o) * cg + c) * g.kernel_h + ki) * g.kernel_w + kj;
                const std::size_t xi = ((static_cast<std::size_t>(b) * g.in_channels + ic) * g.height + iy) * g.width + ix;
                if (!dw.empty()) dw[wi] += gv * x[xi];
                if (!dx.empty()) dx[xi] += gv * w[wi];
              }
        }
    }
}

template void conv2d_forward<float>(const ConvGeometry&, std::span<const float>, std::span<const float>,
                                    std::span<const float>, std::span<float>);
template void conv2d_forward<double>(const ConvGeometry&, std::span<const double>, std::span<const double>,
                                     std::span<const double>, std::span<double>);
template void conv2d_backward<float>(const ConvGeometry&, std::span<const float>, std::span<const float>,
                                     std::span<const float>, std::span<float>, std::span<float>,
                                     std::span<float>);
template void conv2d_backward<double>(const ConvGeometry&, std::span<const double>,
                                      std::span<const double>, std::span<const double>,
                                      std::span<double>, std::span<double>, std::span<double>);

}  // namespace reference

template void conv2d_forward<float>(const ConvGeometry&, std::span<const float>, std::span<const float>,
                                    std::span<const float>, std::span<float>);
template void conv2d_forward<double>(const ConvGeometry&, std::span<const double>, std::span<const double>,
                                     std::span<const double>, std::span<double>);
template void conv2d_backward<float>(const ConvGeometry&, std::span<const float>, std::span<const float>,
                                     std::span<const float>, std::span<float>, std::span<float>,
                                     std::span<float>);
template void conv2d_backward<double>(const ConvGeometry&, std::span<const double>,
                                      std::span<const double>, std::span<const double>,
                                      std::span<double>, std::span<double>, std::span<double>);

}  // namespace edmb::kernels
