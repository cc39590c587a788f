#pragma once

#include <cmath>
#include <cstdlib>
#include <vector>

#include "derefl/image.hpp"

namespace derefl {

/// Small 2-D convolution kernel, odd dims. Two variants are produced here:
/// normalized Gaussians (taps sum to 1) and two-pulse ghosting kernels
/// (taps sum to 1-alpha).
struct Kernel2D {
  int height = 0;
  int width = 0;
  std::vector<double> taps;  // row-major height*width

  Kernel2D() = default;
  Kernel2D(int h, int w, double fill = 0.0)
      : height(h), width(w), taps(static_cast<std::size_t>(h) * w, fill) {}

  double& at(int y, int x) { return taps[static_cast<std::size_t>(y) * width + x]; }
  double at(int y, int x) const { return taps[static_cast<std::size_t>(y) * width + x]; }
};

/// 1x1 kernel [1]; convolving with it is the identity.
inline Kernel2D identity_kernel() {
  Kernel2D k(1, 1);
  k.taps[0] = 1.0;
  return k;
}

/// Truncated Gaussian, radius ceil(3*sigma), taps proportional to
/// exp(-(dx^2+dy^2)/(2 sigma^2)), normalized to sum 1.
inline Kernel2D gaussian_kernel(double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_kernel: sigma must be > 0");
  const int r = static_cast<int>(std::ceil(3.0 * sigma));
  const int n = 2 * r + 1;
  Kernel2D k(n, n);
  double sum = 0.0;
  for (int dy = -r; dy <= r; ++dy) {
    for (int dx = -r; dx <= r; ++dx) {
      const double t = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
      k.at(dy + r, dx + r) = t;
      sum += t;
    }
  }
  for (double& t : k.taps) t /= sum;
  return k;
}

/// Ghosting kernel for a pane of transmittance alpha: pulse 1-sqrt(alpha) at
/// the center and pulse sqrt(alpha)-alpha displaced by (dy,dx). Kernel side
/// is 2*max(|dy|,|dx|)+1. The pulse sum is exactly 1-alpha.
inline Kernel2D double_reflection_kernel(double alpha, int dy, int dx) {
  if (!(alpha > 0.0 && alpha < 1.0)) {
    throw std::invalid_argument("double_reflection_kernel: alpha must be in (0,1)");
  }
  if (dy == 0 && dx == 0) {
    throw std::invalid_argument("double_reflection_kernel: offset must be nonzero");
  }
  const int r = std::max(std::abs(dy), std::abs(dx));
  const int n = 2 * r + 1;
  Kernel2D k(n, n);
  const double root = std::sqrt(alpha);
  k.at(r, r) = 1.0 - root;
  k.at(r + dy, r + dx) = root - alpha;
  return k;
}

// ---------------------------------------------------------------------------
// convolve2d: true 2-D convolution with edge replication.
//
//   out[y][x] = sum_{ky,kx} k[ky][kx] * img[clip(y - (ky-ry))][clip(x - (kx-rx))]
//
// where (ry,rx) is the kernel center and clip() clamps coordinates to the
// image border (edge replication). Output has the input's size. Linear in
// both the image and the kernel.
// ---------------------------------------------------------------------------
inline LinearImage convolve2d(const LinearImage& img, const Kernel2D& k) {
  if (k.height < 1 || k.width < 1 || k.height % 2 == 0 || k.width % 2 == 0) {
    throw std::invalid_argument("convolve2d: kernel dims must be odd and positive");
  }
  if (k.height > img.height || k.width > img.width) {
    throw std::invalid_argument("convolve2d: kernel larger than image");
  }
  const int ry = k.height / 2;
  const int rx = k.width / 2;
  LinearImage out(img.height, img.width);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      double acc[3] = {0.0, 0.0, 0.0};
      for (int ky = 0; ky < k.height; ++ky) {
        int sy = y - (ky - ry);
        sy = sy < 0 ? 0 : (sy >= img.height ? img.height - 1 : sy);
        for (int kx = 0; kx < k.width; ++kx) {
          int sx = x - (kx - rx);
          sx = sx < 0 ? 0 : (sx >= img.width ? img.width - 1 : sx);
          const double t = k.at(ky, kx);
          if (t == 0.0) continue;
          for (int c = 0; c < 3; ++c) acc[c] += t * img.at(sy, sx, c);
        }
      }
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = acc[c];
    }
  }
  return out;
}

}  // namespace derefl
