#include <cmath>
#include <sstream>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "derefl/gradcheck.hpp"
#include "derefl/loss.hpp"
#include "test_util.hpp"

using namespace derefl;
using namespace derefl::nn;
using Catch::Matchers::WithinAbs;

namespace {

ad::Tensor4 rand_tensor(int n, int c, int h, int w, Rng& rng, double lo = 0.0,
                        double hi = 1.0) {
  ad::Tensor4 t(n, c, h, w);
  for (double& v : t.v) v = uniform_in(rng, lo, hi);
  return t;
}

/// Zero-padded conv reference, local copy for feature-map recomputation.
ad::Tensor4 conv_ref(const ad::Tensor4& x, const std::vector<double>& w,
                     const std::vector<double>& b, int out_ch, int k) {
  const int r = k / 2, in_ch = x.c;
  ad::Tensor4 out(x.n, out_ch, x.h, x.w);
  for (int n = 0; n < x.n; ++n) {
    for (int p = 0; p < out_ch; ++p) {
      for (int y = 0; y < x.h; ++y) {
        for (int xx = 0; xx < x.w; ++xx) {
          double acc = b[p];
          for (int q = 0; q < in_ch; ++q) {
            for (int ky = 0; ky < k; ++ky) {
              for (int kx = 0; kx < k; ++kx) {
                const int sy = y + ky - r, sx = xx + kx - r;
                if (sy < 0 || sy >= x.h || sx < 0 || sx >= x.w) continue;
                acc += w[((static_cast<std::size_t>(p) * in_ch + q) * k + ky) * k + kx] *
                       x.at(n, q, sy, sx);
              }
            }
          }
          out.at(n, p, y, xx) = std::max(0.0, acc);  // post-ReLU
        }
      }
    }
  }
  return out;
}

/// Builds an extractor with handpicked parameters by writing its weight file
/// in memory and loading it back (the only way in, and a format test too).
FeatureExtractor crafted_extractor(const ExtractorConfig& cfg,
                                   const std::vector<double>& params) {
  std::stringstream buf;
  io::write_param_file(buf, io::kExtractorMagic, 1,
                       extractor_config_to_json(cfg).dump(), params);
  return FeatureExtractor::load(buf);
}

/// 3-channel identity extractor: one 1x1 stage whose weight is the identity
/// matrix, so features(x) == relu(x) == x for non-negative inputs.
FeatureExtractor identity_extractor() {
  ExtractorConfig cfg;
  cfg.in_channels = 3;
  cfg.stages = {{3, 1}};
  return crafted_extractor(cfg, {1, 0, 0, 0, 1, 0, 0, 0, 1, /*bias*/ 0, 0, 0});
}

}  // namespace

TEST_CASE("l2 loss is the mean squared difference", "[loss]") {
  Rng rng(1);
  const ad::Tensor4 a = rand_tensor(2, 3, 4, 5, rng);
  const ad::Tensor4 b = rand_tensor(2, 3, 4, 5, rng);
  const ad::VarPtr loss = l2_loss(ad::make_const(a), ad::make_const(b));
  double want = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.v[i] - b.v[i];
    want += d * d;
  }
  want /= static_cast<double>(a.numel());
  REQUIRE_THAT(loss->t.v[0], WithinAbs(want, 1e-12));
  // Identical inputs give exactly zero.
  REQUIRE(l2_loss(ad::make_const(a), ad::make_const(a))->t.v[0] == 0.0);
  // Uniform difference d scores d^2 regardless of shape.
  const ad::Tensor4 x(1, 3, 7, 7, 0.6);
  const ad::Tensor4 y(1, 3, 7, 7, 0.35);
  REQUIRE_THAT(l2_loss(ad::make_const(x), ad::make_const(y))->t.v[0],
               WithinAbs(0.0625, 1e-12));
  REQUIRE_THROWS_AS(
      l2_loss(ad::make_const(a), ad::make_const(ad::Tensor4(2, 3, 4, 4))),
      std::invalid_argument);
}

TEST_CASE("l2 gradient is 2(out - target)/numel", "[loss]") {
  Rng rng(2);
  const ad::VarPtr out = ad::make_leaf(rand_tensor(1, 3, 4, 4, rng), true);
  const ad::VarPtr tgt = ad::make_const(rand_tensor(1, 3, 4, 4, rng));
  ad::backward(l2_loss(out, tgt));
  const double inv = 1.0 / static_cast<double>(out->t.numel());
  for (std::size_t i = 0; i < out->t.numel(); ++i) {
    REQUIRE_THAT(out->t.g[i],
                 WithinAbs(2.0 * (out->t.v[i] - tgt->t.v[i]) * inv, 1e-12));
  }
}

TEST_CASE("identity extractor reduces perceptual loss to SSD over area", "[loss]") {
  const FeatureExtractor fx = identity_extractor();
  Rng rng(3);
  // Batch of two so the batch-mean normalization is visible: divide by N*H*W.
  const ad::Tensor4 a = rand_tensor(2, 3, 6, 5, rng);
  const ad::Tensor4 b = rand_tensor(2, 3, 6, 5, rng);
  const ad::VarPtr loss =
      perceptual_loss(fx, ad::make_const(a), ad::make_const(b));
  double ssd = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = a.v[i] - b.v[i];
    ssd += d * d;
  }
  REQUIRE_THAT(loss->t.v[0], WithinAbs(ssd / (2.0 * 6.0 * 5.0), 1e-12));
  // Note the channel count does not divide: scaling channels would scale
  // the loss. Identical inputs score zero.
  REQUIRE(perceptual_loss(fx, ad::make_const(a), ad::make_const(a))->t.v[0] ==
          0.0);
}

TEST_CASE("multi-stage perceptual loss matches a feature-map recomputation", "[loss]") {
  ExtractorConfig cfg;
  cfg.in_channels = 3;
  cfg.stages = {{2, 3}, {3, 3}};
  cfg.seed = 9;
  const FeatureExtractor fx = FeatureExtractor::seeded(cfg);
  Rng rng(4);
  const ad::Tensor4 a = rand_tensor(1, 3, 6, 6, rng);
  const ad::Tensor4 b = rand_tensor(1, 3, 6, 6, rng);
  const double got =
      perceptual_loss(fx, ad::make_const(a), ad::make_const(b))->t.v[0];

  // Recompute the two post-ReLU feature maps with an independent conv and
  // the init stream replayed by hand.
  Rng init(derive_seed(9, rng_stream::kInit));
  std::vector<double> w1(2 * 3 * 9), b1(2, 0.0);
  const double bound1 = std::sqrt(6.0 / (3.0 * 9.0));
  for (double& v : w1) v = uniform_in(init, -bound1, bound1);
  std::vector<double> w2(3 * 2 * 9), b2(3, 0.0);
  const double bound2 = std::sqrt(6.0 / (2.0 * 9.0));
  for (double& v : w2) v = uniform_in(init, -bound2, bound2);

  double want = 0.0;
  const ad::Tensor4 fa1 = conv_ref(a, w1, b1, 2, 3);
  const ad::Tensor4 fb1 = conv_ref(b, w1, b1, 2, 3);
  const ad::Tensor4 fa2 = conv_ref(fa1, w2, b2, 3, 3);
  const ad::Tensor4 fb2 = conv_ref(fb1, w2, b2, 3, 3);
  for (const auto* pair : {&fa1, &fa2}) {
    const ad::Tensor4& fa = *pair;
    const ad::Tensor4& fb = pair == &fa1 ? fb1 : fb2;
    double ssd = 0.0;
    for (std::size_t i = 0; i < fa.numel(); ++i) {
      const double d = fa.v[i] - fb.v[i];
      ssd += d * d;
    }
    want += ssd / (1.0 * fa.h * fa.w);
  }
  REQUIRE_THAT(got, WithinAbs(want, 1e-9));
}

TEST_CASE("extractor weights stay frozen through backward passes", "[loss]") {
  ExtractorConfig cfg;
  cfg.stages = {{2, 3}};
  cfg.seed = 5;
  const FeatureExtractor fx = FeatureExtractor::seeded(cfg);
  const std::uint64_t checksum = fx.weight_checksum();
  Rng rng(6);
  const ad::VarPtr out = ad::make_leaf(rand_tensor(1, 3, 5, 5, rng), true);
  const ad::VarPtr tgt = ad::make_const(rand_tensor(1, 3, 5, 5, rng));
  ad::backward(perceptual_loss(fx, out, tgt));
  // Gradients reach the output leaf but the extractor is untouched.
  REQUIRE_FALSE(out->t.g.empty());
  REQUIRE(fx.weight_checksum() == checksum);
  // A fully-frozen graph never even wires up for backward.
  const ad::VarPtr frozen =
      perceptual_loss(fx, ad::make_const(out->t), tgt);
  REQUIRE_FALSE(frozen->needs_grad);
}

TEST_CASE("combined loss honours the lambda contract", "[loss]") {
  const FeatureExtractor fx = identity_extractor();
  Rng rng(7);
  const ad::VarPtr out = ad::make_const(rand_tensor(1, 3, 5, 5, rng));
  const ad::VarPtr tgt = ad::make_const(rand_tensor(1, 3, 5, 5, rng));
  const double l2 = l2_loss(out, tgt)->t.v[0];
  const double perc = perceptual_loss(fx, out, tgt)->t.v[0];

  // lambda = 0: exactly the l2 value, and no extractor is required.
  REQUIRE(combined_loss(out, tgt, nullptr, LossWeights{0.0})->t.v[0] == l2);
  REQUIRE(combined_loss(out, tgt, &fx, LossWeights{0.0})->t.v[0] == l2);
  // lambda > 0 without an extractor is a usage error.
  REQUIRE_THROWS_AS(combined_loss(out, tgt, nullptr, LossWeights{0.5}),
                    std::invalid_argument);
  // Default weighting.
  REQUIRE(LossWeights{}.lambda == 0.001);
  REQUIRE_THAT(combined_loss(out, tgt, &fx, LossWeights{}) ->t.v[0],
               WithinAbs(l2 + 0.001 * perc, 1e-15));
  // Affinity in lambda: L(2c) - L(c) == c * perceptual.
  const double c = 0.003;
  const double l_2c = combined_loss(out, tgt, &fx, LossWeights{2 * c})->t.v[0];
  const double l_c = combined_loss(out, tgt, &fx, LossWeights{c})->t.v[0];
  REQUIRE_THAT(l_2c - l_c, WithinAbs(c * perc, 1e-12));
  // Invalid weights are rejected up front.
  REQUIRE_THROWS_AS(combined_loss(out, tgt, &fx, LossWeights{-1.0}),
                    std::invalid_argument);
}

TEST_CASE("finite differences confirm the combined loss gradient", "[loss]") {
  // Crafted extractor: small weights and a +2 bias keep every preactivation
  // strictly positive, so the ReLU kink never sits inside the probe step.
  ExtractorConfig cfg;
  cfg.in_channels = 3;
  cfg.stages = {{2, 3}};
  std::vector<double> params;
  Rng wrng(8);
  for (int i = 0; i < 2 * 3 * 9; ++i) {
    params.push_back(uniform_in(wrng, -0.05, 0.05));
  }
  params.push_back(2.0);  // biases
  params.push_back(2.0);
  const FeatureExtractor fx = crafted_extractor(cfg, params);

  Rng rng(9);
  const ad::VarPtr out = ad::make_leaf(rand_tensor(1, 3, 5, 5, rng), true);
  const ad::VarPtr tgt = ad::make_const(rand_tensor(1, 3, 5, 5, rng));
  const LossWeights w{0.01};
  const auto build = [&] { return combined_loss(out, tgt, &fx, w); };
  const ad::GradCheckReport report = ad::check_gradients(build, {{"out", out}});
  INFO("max rel error " << report.max_rel_error);
  REQUIRE(report.passed(1e-4));
}

TEST_CASE("extractor weight files round-trip with stable checksums", "[loss]") {
  testutil::TempDir tmp("fx");
  ExtractorConfig cfg;
  cfg.stages = {{4, 3}, {2, 1}};
  cfg.seed = 77;
  const FeatureExtractor fx = FeatureExtractor::seeded(cfg);
  const auto path = tmp / "fx.weights";
  fx.save(path);
  REQUIRE_FALSE(std::filesystem::exists(tmp / "fx.weights.tmp"));
  const FeatureExtractor loaded = FeatureExtractor::load(path);
  REQUIRE(loaded.weight_checksum() == fx.weight_checksum());
  REQUIRE(loaded.stage_count() == 2);
  REQUIRE(loaded.config().stages[0].out_channels == 4);
  REQUIRE(loaded.config().stages[1].kernel == 1);
  // Identical features on identical input.
  Rng rng(10);
  const ad::Tensor4 x = rand_tensor(1, 3, 6, 6, rng);
  const auto fa = fx.features(ad::make_const(x));
  const auto fb = loaded.features(ad::make_const(x));
  REQUIRE(fa.size() == fb.size());
  for (std::size_t i = 0; i < fa.size(); ++i) {
    REQUIRE(fa[i]->t.v == fb[i]->t.v);
  }
}

TEST_CASE("extractor file errors are typed", "[loss]") {
  ExtractorConfig cfg;
  cfg.stages = {{2, 3}};
  const FeatureExtractor fx = FeatureExtractor::seeded(cfg);
  std::stringstream buf;
  fx.save(buf);
  const std::string good = buf.str();

  {
    std::string bad = good;
    bad[4] = 'x';  // damage the magic
    std::stringstream in(bad);
    REQUIRE_THROWS_AS(FeatureExtractor::load(in), VersionError);
  }
  {
    // A checkpoint magic is not an extractor file.
    std::stringstream out;
    io::write_param_file(out, io::kCheckpointMagic, 1, "{}", {});
    REQUIRE_THROWS_AS(FeatureExtractor::load(out), VersionError);
  }
  {
    std::stringstream in(good.substr(0, good.size() / 2));
    REQUIRE_THROWS_AS(FeatureExtractor::load(in), TruncatedError);
  }
  {
    // Parameter count disagrees with the declared stages.
    std::stringstream out;
    io::write_param_file(out, io::kExtractorMagic, 1,
                         extractor_config_to_json(cfg).dump(),
                         std::vector<double>(3, 0.0));
    REQUIRE_THROWS_AS(FeatureExtractor::load(out), ShapeError);
  }
  {
    // Stage table whose channels do not chain.
    nlohmann::json bad = extractor_config_to_json(cfg);
    bad["stages"][0]["in_channels"] = 5;
    std::stringstream out;
    io::write_param_file(out, io::kExtractorMagic, 1, bad.dump(), {});
    REQUIRE_THROWS_AS(FeatureExtractor::load(out), ShapeError);
  }
  {
    // stage_count field disagreeing with the list length.
    nlohmann::json bad = extractor_config_to_json(cfg);
    bad["stage_count"] = 7;
    std::stringstream out;
    io::write_param_file(out, io::kExtractorMagic, 1, bad.dump(),
                         std::vector<double>(2 * 3 * 9 + 2, 0.0));
    REQUIRE_THROWS_AS(FeatureExtractor::load(out), ShapeError);
  }
}

TEST_CASE("extractor provider falls back to the seeded stand-in", "[loss]") {
  testutil::TempDir tmp("fxprov");
  ExtractorConfig cfg;
  cfg.stages = {{2, 3}};
  cfg.seed = 31;
  const std::uint64_t seeded_sum = FeatureExtractor::seeded(cfg).weight_checksum();
  // Empty path: always the seeded extractor.
  REQUIRE(FeatureExtractor::from_file_or_seeded("", cfg).weight_checksum() ==
          seeded_sum);
  // Missing file with fallback enabled: seeded; without: an I/O error.
  REQUIRE(FeatureExtractor::from_file_or_seeded(tmp / "none.w", cfg)
              .weight_checksum() == seeded_sum);
  REQUIRE_THROWS_AS(
      FeatureExtractor::from_file_or_seeded(tmp / "none.w", cfg, false),
      IoError);
  // Existing file wins over the seed.
  ExtractorConfig other = cfg;
  other.seed = 32;
  const FeatureExtractor fx = FeatureExtractor::seeded(other);
  fx.save(tmp / "fx.w");
  REQUIRE(FeatureExtractor::from_file_or_seeded(tmp / "fx.w", cfg)
              .weight_checksum() == fx.weight_checksum());
  REQUIRE(fx.weight_checksum() != seeded_sum);
}

TEST_CASE("extractor config validation and feature shapes", "[loss]") {
  ExtractorConfig cfg;
  REQUIRE_NOTHROW(cfg.validate());  // default five-stage shape
  REQUIRE(cfg.stages.size() == 5);
  REQUIRE(cfg.stages[0].out_channels == 64);
  REQUIRE(cfg.stages[4].out_channels == 256);
  cfg.stages.clear();
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = ExtractorConfig{};
  cfg.stages[1].kernel = 2;
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = ExtractorConfig{};
  cfg.in_channels = 0;
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);

  ExtractorConfig small;
  small.stages = {{2, 3}, {5, 3}};
  const FeatureExtractor fx = FeatureExtractor::seeded(small);
  Rng rng(11);
  const auto maps = fx.features(ad::make_const(rand_tensor(2, 3, 7, 8, rng)));
  REQUIRE(maps.size() == 2);
  REQUIRE(maps[0]->t.c == 2);
  REQUIRE(maps[1]->t.c == 5);
  for (const auto& m : maps) {
    REQUIRE(m->t.n == 2);
    REQUIRE(m->t.h == 7);
    REQUIRE(m->t.w == 8);
    for (double v : m->t.v) REQUIRE(v >= 0.0);  // post-ReLU
  }
  REQUIRE_THROWS_AS(fx.features(ad::make_const(ad::Tensor4(1, 3, 2, 2))),
                    std::invalid_argument);
}
