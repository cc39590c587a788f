#pragma once

#include <string>

#include "derefl/common.hpp"
#include "derefl/image.hpp"
#include "derefl/kernel.hpp"

namespace derefl::synth {

// ---------------------------------------------------------------------------
// Mixture formation: a reflection-tainted image is
//
//     I = clamp( alpha*T + beta*(R * G * K) + n, 0, 1 )
//
// in linear light, where G is a defocus Gaussian, K models the glass's
// front/back-surface ghosting, and n is optional sensor noise. Two modes:
//   Complement       - beta = 1-alpha, K = identity (single blurred reflection)
//   DoubleReflection - beta = 1, K carries the two ghost pulses
// R*G*K is evaluated left to right: (R*G)*K.
// ---------------------------------------------------------------------------

enum class BetaMode { Complement, DoubleReflection };

inline const char* to_string(BetaMode m) {
  return m == BetaMode::Complement ? "complement" : "double_reflection";
}

inline BetaMode beta_mode_from_string(const std::string& s) {
  if (s == "complement") return BetaMode::Complement;
  if (s == "double_reflection") return BetaMode::DoubleReflection;
  throw std::invalid_argument("unknown beta_mode: " + s);
}

struct SynthConfig {
  double alpha_lo = 0.75, alpha_hi = 0.8;  // transmittance range
  double sigma_lo = 1.0, sigma_hi = 5.0;   // Gaussian blur sigma range
  BetaMode beta_mode = BetaMode::DoubleReflection;
  int offset_lo = 3, offset_hi = 10;       // ghost displacement magnitude, px
  double noise_std = 0.0;                  // additive sensor noise std (linear)
  int patch = 128;                         // output side length
  int reflections_per_transmission = 18;
  double split_ratio = 0.75;               // fraction of transmissions in train
  GammaParam gamma{2.2};
  std::uint64_t seed = 0;

  void validate() const {
    if (!(alpha_lo > 0.0 && alpha_lo <= alpha_hi && alpha_hi <= 1.0)) {
      throw std::invalid_argument("SynthConfig: alpha range must satisfy 0 < lo <= hi <= 1");
    }
    if (!(sigma_lo > 0.0 && sigma_lo <= sigma_hi)) {
      throw std::invalid_argument("SynthConfig: sigma range must satisfy 0 < lo <= hi");
    }
    if (!(offset_lo >= 1 && offset_lo <= offset_hi)) {
      throw std::invalid_argument("SynthConfig: offset range must satisfy 1 <= lo <= hi");
    }
    if (noise_std < 0.0) throw std::invalid_argument("SynthConfig: noise_std must be >= 0");
    if (patch < 1) throw std::invalid_argument("SynthConfig: patch must be >= 1");
    if (reflections_per_transmission < 1) {
      throw std::invalid_argument("SynthConfig: reflections_per_transmission must be >= 1");
    }
    if (!(split_ratio >= 0.0 && split_ratio <= 1.0)) {
      throw std::invalid_argument("SynthConfig: split_ratio must be in [0,1]");
    }
    if (!(gamma.gamma > 0.0)) throw std::invalid_argument("SynthConfig: gamma must be > 0");
  }
};

struct CompositeParams {
  double alpha = 0.8;
  double beta = 0.2;
  Kernel2D blur = identity_kernel();   // G
  Kernel2D ghost = identity_kernel();  // K
  double noise_std = 0.0;
  std::uint64_t noise_seed = 0;
};

/// clamp(alpha*T + beta*((R*G)*K) + noise, 0, 1). Noise, when enabled, is
/// zero-mean Gaussian drawn per value in row-major (y,x,c) order from
/// Rng(noise_seed).
inline LinearImage composite(const LinearImage& T, const LinearImage& R,
                             const CompositeParams& p) {
  if (!T.same_shape(R)) throw std::invalid_argument("composite: shape mismatch");
  LinearImage refl = convolve2d(convolve2d(R, p.blur), p.ghost);
  LinearImage out(T.height, T.width);
  if (p.noise_std > 0.0) {
    Rng noise(p.noise_seed);
    for (std::size_t i = 0; i < out.data.size(); ++i) {
      out.data[i] = detail::clamp01(p.alpha * T.data[i] + p.beta * refl.data[i] +
                                    p.noise_std * gaussian(noise));
    }
  } else {
    for (std::size_t i = 0; i < out.data.size(); ++i) {
      out.data[i] = detail::clamp01(p.alpha * T.data[i] + p.beta * refl.data[i]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-sample randomness. Everything a sample needs is drawn up front from
// Rng(derive_seed(cfg.seed, kSample, index)) in this fixed order:
//   alpha, sigma, |dy|, sign(dy), |dx|, sign(dx),
//   reflection crop side, crop seed, noise seed.
// Draws are unconditional (unused values are still consumed) so the stream
// is identical across modes.
// ---------------------------------------------------------------------------
struct SampleParams {
  double alpha = 0.0;
  double sigma = 0.0;
  int offset_dy = 0;
  int offset_dx = 0;
  int crop_side = 0;          // 0 = decided at synthesis time from R's dims
  std::uint64_t crop_side_draw = 0;  // raw draw, mapped once R's size is known
  std::uint64_t crop_seed = 0;
  std::uint64_t noise_seed = 0;
};

inline SampleParams draw_sample_params(const SynthConfig& cfg, std::uint64_t index) {
  Rng rng(derive_seed(cfg.seed, rng_stream::kSample, index));
  SampleParams p;
  p.alpha = uniform_in(rng, cfg.alpha_lo, cfg.alpha_hi);
  p.sigma = uniform_in(rng, cfg.sigma_lo, cfg.sigma_hi);
  const int span = cfg.offset_hi - cfg.offset_lo + 1;
  const int dy_mag = cfg.offset_lo + static_cast<int>(uniform_below(rng, span));
  const int dy_sign = uniform_below(rng, 2) == 0 ? 1 : -1;
  const int dx_mag = cfg.offset_lo + static_cast<int>(uniform_below(rng, span));
  const int dx_sign = uniform_below(rng, 2) == 0 ? 1 : -1;
  p.offset_dy = dy_sign * dy_mag;
  p.offset_dx = dx_sign * dx_mag;
  p.crop_side_draw = rng();
  p.crop_seed = rng();
  p.noise_seed = rng();
  return p;
}

struct Provenance {
  std::uint64_t index = 0;
  std::string transmission_src;
  std::string reflection_src;
  double alpha = 0.0;
  double sigma = 0.0;
  int offset_dy = 0;
  int offset_dx = 0;
  BetaMode mode = BetaMode::DoubleReflection;
};

/// Mixture I and target alpha*T, both gamma-encoded for storage, plus the
/// provenance that (together with cfg and index) regenerates them bit-exactly.
struct SamplePair {
  EncodedImage mixture;
  EncodedImage target;
  Provenance provenance;
};

// ---------------------------------------------------------------------------
// synthesize_pair pipeline:
//   1. decode both sources to linear light (exponent cfg.gamma)
//   2. resize T to patch x patch
//   3. crop R to a random square (side uniform in [patch, min(H,W)], offset
//      from crop_seed) and resize it to patch x patch; reflected scenes sit
//      far behind the glass, so they are sampled from a wider field of view
//   4. composite with the drawn alpha/sigma/offsets
//   5. gamma-encode the mixture and alpha*T_linear
// Deterministic function of (sources, cfg, index).
// ---------------------------------------------------------------------------
inline SamplePair synthesize_pair(const EncodedImage& t_src, const EncodedImage& r_src,
                                  const SynthConfig& cfg, std::uint64_t index) {
  cfg.validate();
  if (t_src.height < cfg.patch || t_src.width < cfg.patch ||
      r_src.height < cfg.patch || r_src.width < cfg.patch) {
    throw DataError("synthesize_pair: source smaller than patch size");
  }
  SampleParams sp = draw_sample_params(cfg, index);

  LinearImage t_lin = resize_bilinear(decode_gamma(t_src, cfg.gamma), cfg.patch, cfg.patch);

  LinearImage r_full = decode_gamma(r_src, cfg.gamma);
  const int max_side = std::min(r_full.height, r_full.width);
  const int side = cfg.patch + static_cast<int>(
      sp.crop_side_draw % static_cast<std::uint64_t>(max_side - cfg.patch + 1));
  LinearImage r_lin =
      resize_bilinear(crop_random(r_full, side, side, sp.crop_seed), cfg.patch, cfg.patch);

  CompositeParams cp;
  cp.alpha = sp.alpha;
  cp.blur = gaussian_kernel(sp.sigma);
  cp.noise_std = cfg.noise_std;
  cp.noise_seed = sp.noise_seed;
  if (cfg.beta_mode == BetaMode::Complement) {
    cp.beta = 1.0 - sp.alpha;
    cp.ghost = identity_kernel();
  } else if (sp.alpha < 1.0) {
    cp.beta = 1.0;
    cp.ghost = double_reflection_kernel(sp.alpha, sp.offset_dy, sp.offset_dx);
  } else {
    cp.beta = 0.0;  // alpha == 1: both ghost pulses vanish
    cp.ghost = identity_kernel();
  }

  LinearImage mixture_lin = composite(t_lin, r_lin, cp);
  LinearImage target_lin(cfg.patch, cfg.patch);
  for (std::size_t i = 0; i < target_lin.data.size(); ++i) {
    target_lin.data[i] = detail::clamp01(sp.alpha * t_lin.data[i]);
  }

  SamplePair pair;
  pair.mixture = encode_gamma(mixture_lin, cfg.gamma);
  pair.target = encode_gamma(target_lin, cfg.gamma);
  pair.provenance = Provenance{index, "", "", sp.alpha, sp.sigma,
                               sp.offset_dy, sp.offset_dx, cfg.beta_mode};
  return pair;
}

}  // namespace derefl::synth
