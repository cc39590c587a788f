#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace derefl::ad {

/// N x C x H x W real tensor with an optional same-shape gradient slot.
/// The gradient is materialized on demand (empty vector = absent).
struct Tensor4 {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<double> v;  // values, row-major NCHW
  std::vector<double> g;  // gradient, empty unless materialized

  Tensor4() = default;
  Tensor4(int n_, int c_, int h_, int w_, double fill = 0.0)
      : n(n_), c(c_), h(h_), w(w_) {
    if (n < 1 || c < 1 || h < 1 || w < 1) {
      throw std::invalid_argument("Tensor4: all dims must be >= 1");
    }
    v.assign(numel(), fill);
  }

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }

  double& at(int in, int ic, int iy, int ix) {
    return v[((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix];
  }
  double at(int in, int ic, int iy, int ix) const {
    return v[((static_cast<std::size_t>(in) * c + ic) * h + iy) * w + ix];
  }

  bool same_shape(const Tensor4& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  std::string shape_str() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" +
           std::to_string(h) + "x" + std::to_string(w);
  }

  void ensure_grad() {
    if (g.empty()) g.assign(numel(), 0.0);
  }
  void zero_grad() { g.assign(numel(), 0.0); }
};

}  // namespace derefl::ad
