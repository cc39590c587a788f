#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "derefl/common.hpp"

namespace derefl {

// ---------------------------------------------------------------------------
// Images are H x W x 3 interleaved RGB, real values in [0,1]. Two distinct
// types keep the light domain straight at compile time:
//   EncodedImage - display-referred (gamma-encoded) values, what PNGs hold
//   LinearImage  - linear light, the domain where compositing is physical
// ---------------------------------------------------------------------------

namespace detail {
struct EncodedTag {};
struct LinearTag {};
}  // namespace detail

template <class DomainTag>
struct Image {
  int height = 0;
  int width = 0;
  std::vector<double> data;  // size height*width*3, row-major, interleaved

  Image() = default;
  Image(int h, int w, double fill = 0.0)
      : height(h), width(w), data(static_cast<std::size_t>(h) * w * 3, fill) {}

  static constexpr int channels = 3;

  std::size_t size() const { return data.size(); }
  double& at(int y, int x, int c) {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  double at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width;
  }
};

using EncodedImage = Image<detail::EncodedTag>;
using LinearImage = Image<detail::LinearTag>;

/// Decoding exponent g: linear = encoded^g. Default 2.2, the common display
/// gamma. The inverse (encode) uses exponent 1/g.
struct GammaParam {
  double gamma = 2.2;
};

namespace detail {

template <class Img>
inline void require_finite(const Img& img, const char* who) {
  for (double v : img.data) {
    if (!std::isfinite(v)) {
      throw std::invalid_argument(std::string(who) + ": non-finite pixel value");
    }
  }
}

inline double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

template <class OutImg, class InImg>
inline OutImg pow_map(const InImg& img, double e, const char* who) {
  require_finite(img, who);
  OutImg out(img.height, img.width);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    out.data[i] = clamp01(std::pow(img.data[i], e));
  }
  return out;
}

}  // namespace detail

/// linear = encoded^g. Monotone in the input; fixes 0 and 1.
inline LinearImage decode_gamma(const EncodedImage& img, GammaParam g) {
  if (!(g.gamma > 0.0)) throw std::invalid_argument("decode_gamma: gamma must be > 0");
  return detail::pow_map<LinearImage>(img, g.gamma, "decode_gamma");
}

/// encoded = linear^(1/g). Inverse of decode_gamma on [0,1].
inline EncodedImage encode_gamma(const LinearImage& img, GammaParam g) {
  if (!(g.gamma > 0.0)) throw std::invalid_argument("encode_gamma: gamma must be > 0");
  return detail::pow_map<EncodedImage>(img, 1.0 / g.gamma, "encode_gamma");
}

// ---------------------------------------------------------------------------
// resize_bilinear: corner-aligned sampling.
//
// For target length L2 from source length L1 the source coordinate of output
// index i is
//     s(i) = i * (L1 - 1) / (L2 - 1)      if L2 > 1
//     s(i) = 0                            if L2 == 1
// and the output value interpolates the four neighbours
//     out = (1-fy)(1-fx) I[y0,x0] + (1-fy)fx I[y0,x1]
//         +  fy (1-fx)   I[y1,x0] +  fy fx  I[y1,x1]
// with y0 = floor(s), y1 = min(y0+1, L1-1), fy = s - y0 (likewise for x).
// Identity-size resize is bit-exact; a constant image stays constant.
// ---------------------------------------------------------------------------
template <class Img>
inline Img resize_bilinear(const Img& img, int new_height, int new_width) {
  if (new_height < 1 || new_width < 1) {
    throw std::invalid_argument("resize_bilinear: target dims must be >= 1");
  }
  Img out(new_height, new_width);
  const double sy = new_height > 1
                        ? static_cast<double>(img.height - 1) / (new_height - 1)
                        : 0.0;
  const double sx = new_width > 1
                        ? static_cast<double>(img.width - 1) / (new_width - 1)
                        : 0.0;
  for (int y = 0; y < new_height; ++y) {
    const double srcy = y * sy;
    const int y0 = static_cast<int>(srcy);
    const int y1 = std::min(y0 + 1, img.height - 1);
    const double fy = srcy - y0;
    for (int x = 0; x < new_width; ++x) {
      const double srcx = x * sx;
      const int x0 = static_cast<int>(srcx);
      const int x1 = std::min(x0 + 1, img.width - 1);
      const double fx = srcx - x0;
      for (int c = 0; c < 3; ++c) {
        out.at(y, x, c) = (1.0 - fy) * (1.0 - fx) * img.at(y0, x0, c) +
                          (1.0 - fy) * fx * img.at(y0, x1, c) +
                          fy * (1.0 - fx) * img.at(y1, x0, c) +
                          fy * fx * img.at(y1, x1, c);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// crop_random: contiguous sub-rectangle at a seed-derived offset.
//
// Offsets are drawn from Rng(seed) as
//     row = rng() % (height - crop_h + 1)
//     col = rng() % (width  - crop_w + 1)
// in that order; the derivation is fixed and asserted by tests.
// ---------------------------------------------------------------------------
template <class Img>
inline Img crop_random(const Img& img, int crop_h, int crop_w,
                       std::uint64_t seed) {
  if (crop_h < 1 || crop_w < 1 || crop_h > img.height || crop_w > img.width) {
    throw std::invalid_argument("crop_random: crop does not fit inside image");
  }
  Rng rng(seed);
  const int row = static_cast<int>(
      uniform_below(rng, static_cast<std::uint64_t>(img.height - crop_h + 1)));
  const int col = static_cast<int>(
      uniform_below(rng, static_cast<std::uint64_t>(img.width - crop_w + 1)));
  Img out(crop_h, crop_w);
  for (int y = 0; y < crop_h; ++y) {
    for (int x = 0; x < crop_w; ++x) {
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = img.at(row + y, col + x, c);
    }
  }
  return out;
}

/// 10*log10(peak^2 / MSE), MSE averaged over all pixels and channels.
/// Identical images return +infinity (documented sentinel, not an error).
template <class Img>
inline double psnr(const Img& a, const Img& b, double peak = 1.0) {
  if (!a.same_shape(b)) throw std::invalid_argument("psnr: shape mismatch");
  double sq = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    sq += d * d;
  }
  const double mse = sq / static_cast<double>(a.data.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(peak * peak / mse);
}

}  // namespace derefl
