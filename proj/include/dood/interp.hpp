#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "dood/tensor.hpp"

namespace dood {

// Precomputed taps for half-pixel-centred bilinear resampling between two
// grid sizes. apply() resamples; apply_adjoint() is its exact transpose and is
// what backpropagation through an upsampling step needs.
class BilinearPlan {
 public:
  BilinearPlan() = default;
  BilinearPlan(int src_h, int src_w, int dst_h, int dst_w)
      : src_h_(src_h), src_w_(src_w), dst_h_(dst_h), dst_w_(dst_w) {
    build_axis(src_h, dst_h, y0_, y1_, wy_);
    build_axis(src_w, dst_w, x0_, x1_, wx_);
  }

  int src_height() const { return src_h_; }
  int src_width() const { return src_w_; }
  int dst_height() const { return dst_h_; }
  int dst_width() const { return dst_w_; }

  template <typename T>
  void apply_plane(const T* src, T* dst) const {
    for (int y = 0; y < dst_h_; ++y) {
      const T* r0 = src + static_cast<std::size_t>(y0_[y]) * src_w_;
      const T* r1 = src + static_cast<std::size_t>(y1_[y]) * src_w_;
      const T wy = static_cast<T>(wy_[y]);
      T* out = dst + static_cast<std::size_t>(y) * dst_w_;
      for (int x = 0; x < dst_w_; ++x) {
        const T wx = static_cast<T>(wx_[x]);
        const T top = r0[x0_[x]] + (r0[x1_[x]] - r0[x0_[x]]) * wx;
        const T bot = r1[x0_[x]] + (r1[x1_[x]] - r1[x0_[x]]) * wx;
        out[x] = top + (bot - top) * wy;
      }
    }
  }

  // Accumulates the transpose: src_grad += A^T dst_grad.
  template <typename T>
  void adjoint_plane(const T* dst_grad, T* src_grad) const {
    for (int y = 0; y < dst_h_; ++y) {
      T* r0 = src_grad + static_cast<std::size_t>(y0_[y]) * src_w_;
      T* r1 = src_grad + static_cast<std::size_t>(y1_[y]) * src_w_;
      const T wy = static_cast<T>(wy_[y]);
      const T* g = dst_grad + static_cast<std::size_t>(y) * dst_w_;
      for (int x = 0; x < dst_w_; ++x) {
        const T wx = static_cast<T>(wx_[x]);
        const T gt = g[x] * (T(1) - wy);
        const T gb = g[x] * wy;
        r0[x0_[x]] += gt * (T(1) - wx);
        r0[x1_[x]] += gt * wx;
        r1[x0_[x]] += gb * (T(1) - wx);
        r1[x1_[x]] += gb * wx;
      }
    }
  }

  template <typename T>
  Tensor3<T> apply(const Tensor3<T>& src) const {
    Tensor3<T> out(src.channels, dst_h_, dst_w_);
    for (int c = 0; c < src.channels; ++c) {
      apply_plane(src.plane(c).data(), out.plane(c).data());
    }
    return out;
  }

  template <typename T>
  void apply_adjoint(const Tensor3<T>& dst_grad, Tensor3<T>& src_grad) const {
    for (int c = 0; c < dst_grad.channels; ++c) {
      adjoint_plane(dst_grad.plane(c).data(), src_grad.plane(c).data());
    }
  }

 private:
  static void build_axis(int src, int dst, std::vector<int>& i0, std::vector<int>& i1,
                         std::vector<double>& w) {
    i0.resize(dst);
    i1.resize(dst);
    w.resize(dst);
    const double ratio = static_cast<double>(src) / dst;
    for (int i = 0; i < dst; ++i) {
      double pos = (i + 0.5) * ratio - 0.5;
      pos = std::clamp(pos, 0.0, static_cast<double>(src - 1));
      const int lo = static_cast<int>(std::floor(pos));
      i0[i] = lo;
      i1[i] = std::min(lo + 1, src - 1);
      w[i] = pos - lo;
    }
  }

  int src_h_ = 0, src_w_ = 0, dst_h_ = 0, dst_w_ = 0;
  std::vector<int> y0_, y1_, x0_, x1_;
  std::vector<double> wy_, wx_;
};

}  // namespace dood
