#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "derefl/autodiff.hpp"
#include "derefl/common.hpp"
#include "derefl/weights_io.hpp"

// Training objective: a per-element mean squared error on pixels plus a
// feature-space penalty under a frozen multi-stage conv-ReLU extractor,
// combined as  loss = l2 + lambda * perceptual.

namespace derefl::nn {

struct ExtractorStage {
  int out_channels = 0;
  int kernel = 3;
};

struct ExtractorConfig {
  int in_channels = 3;
  // Default shape mirrors the first five conv layers of the classic
  // 19-layer feature network the perceptual loss is usually built on.
  std::vector<ExtractorStage> stages = {
      {64, 3}, {64, 3}, {128, 3}, {128, 3}, {256, 3}};
  std::uint64_t seed = 0;

  void validate() const {
    if (in_channels < 1) {
      throw std::invalid_argument("ExtractorConfig: in_channels < 1");
    }
    if (stages.empty()) {
      throw std::invalid_argument("ExtractorConfig: needs >= 1 stage");
    }
    for (const ExtractorStage& s : stages) {
      if (s.out_channels < 1) {
        throw std::invalid_argument("ExtractorConfig: stage channels < 1");
      }
      if (s.kernel < 1 || s.kernel % 2 == 0) {
        throw std::invalid_argument(
            "ExtractorConfig: stage kernels must be odd, got " +
            std::to_string(s.kernel));
      }
    }
  }
};

inline nlohmann::json extractor_config_to_json(const ExtractorConfig& cfg) {
  nlohmann::json stages = nlohmann::json::array();
  int in = cfg.in_channels;
  for (const ExtractorStage& s : cfg.stages) {
    stages.push_back({{"in_channels", in},
                      {"out_channels", s.out_channels},
                      {"kernel", s.kernel}});
    in = s.out_channels;
  }
  return nlohmann::json{{"in_channels", cfg.in_channels},
                        {"stage_count", cfg.stages.size()},
                        {"stages", stages}};
}

inline ExtractorConfig extractor_config_from_json(const nlohmann::json& j) {
  try {
    ExtractorConfig cfg;
    cfg.stages.clear();
    cfg.in_channels = j.at("in_channels").get<int>();
    int expect_in = cfg.in_channels;
    for (const auto& s : j.at("stages")) {
      const int in = s.at("in_channels").get<int>();
      if (in != expect_in) {
        throw ShapeError("extractor header: stage input channels " +
                         std::to_string(in) + " do not chain from " +
                         std::to_string(expect_in));
      }
      cfg.stages.push_back(
          {s.at("out_channels").get<int>(), s.at("kernel").get<int>()});
      expect_in = cfg.stages.back().out_channels;
    }
    if (j.at("stage_count").get<std::size_t>() != cfg.stages.size()) {
      throw ShapeError("extractor header: stage_count disagrees with list");
    }
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw SerializationError(std::string("extractor header JSON: ") + e.what());
  }
}

/// Frozen stack of M conv-ReLU stages producing one feature map per stage.
/// Weights never receive gradients; they come either from a weight file
/// (see docs/extractor-weights.md) or from a documented seeded init.
class FeatureExtractor {
 public:
  /// Random frozen extractor: per stage in order, weight elements drawn in
  /// storage order as uniform +-sqrt(6 / (in_ch * k * k)) from the kInit
  /// stream of cfg.seed; biases zero.  This is the desk-scale stand-in for
  /// externally pretrained weights — same structure, same normalization.
  static FeatureExtractor seeded(const ExtractorConfig& cfg) {
    cfg.validate();
    FeatureExtractor fx;
    fx.cfg_ = cfg;
    fx.alloc_stages();
    Rng rng(derive_seed(cfg.seed, rng_stream::kInit));
    for (Stage& st : fx.stages_) {
      const double bound = std::sqrt(
          6.0 / (static_cast<double>(st.in_ch) * st.k * st.k));
      for (double& wv : st.w->t.v) wv = uniform_in(rng, -bound, bound);
    }
    return fx;
  }

  /// Weight file: framed container with the stage table as JSON header and
  /// parameters flattened in stage order (weights then bias per stage).
  void save(std::ostream& out) const {
    io::write_param_file(out, io::kExtractorMagic, kExtractorVersion,
                         extractor_config_to_json(cfg_).dump(), flatten());
  }

  void save(const std::filesystem::path& path) const {
    atomic_write(path, [this](const std::filesystem::path& tmp) {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) throw IoError("cannot open for writing: " + tmp.string());
      save(out);
      if (!out.flush()) throw IoError("short write: " + tmp.string());
    });
  }

  static FeatureExtractor load(std::istream& in) {
    io::ParamFile pf =
        io::read_param_file(in, io::kExtractorMagic, kExtractorVersion);
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(pf.json_header);
    } catch (const nlohmann::json::exception& e) {
      throw SerializationError(std::string("extractor header: ") + e.what());
    }
    FeatureExtractor fx;
    fx.cfg_ = extractor_config_from_json(header);
    try {
      fx.cfg_.validate();
    } catch (const std::invalid_argument& e) {
      throw ShapeError(std::string("extractor config invalid: ") + e.what());
    }
    fx.alloc_stages();
    std::size_t need = 0;
    for (const Stage& st : fx.stages_) {
      need += st.w->t.numel() + st.b->t.numel();
    }
    if (pf.params.size() != need) {
      throw ShapeError("extractor file holds " +
                       std::to_string(pf.params.size()) +
                       " parameters, header declares " + std::to_string(need));
    }
    std::size_t offset = 0;
    for (Stage& st : fx.stages_) {
      std::copy_n(pf.params.begin() + offset, st.w->t.numel(),
                  st.w->t.v.begin());
      offset += st.w->t.numel();
      std::copy_n(pf.params.begin() + offset, st.b->t.numel(),
                  st.b->t.v.begin());
      offset += st.b->t.numel();
    }
    return fx;
  }

  static FeatureExtractor load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open extractor weights: " + path.string());
    return load(in);
  }

  /// File provider with seeded fallback: empty path or (with fallback
  /// enabled) a missing file yields the seeded extractor for cfg.
  static FeatureExtractor from_file_or_seeded(const std::filesystem::path& path,
                                              const ExtractorConfig& cfg,
                                              bool allow_fallback = true) {
    if (path.empty()) return seeded(cfg);
    if (!std::filesystem::exists(path)) {
      if (allow_fallback) return seeded(cfg);
      throw IoError("extractor weights not found: " + path.string());
    }
    return load(path);
  }

  const ExtractorConfig& config() const { return cfg_; }
  std::size_t stage_count() const { return stages_.size(); }

  /// FNV-1a over the flattened parameter bytes; recorded in reports so a
  /// training or evaluation run pins down which extractor it used.
  std::uint64_t weight_checksum() const {
    const std::vector<double> flat = flatten();
    return fnv1a64(flat.data(), flat.size() * sizeof(double));
  }

  /// Post-ReLU feature maps of all stages, shallow to deep.  Gradients flow
  /// through into `input` only; the stage weights are frozen leaves.
  std::vector<ad::VarPtr> features(const ad::VarPtr& input) const {
    int min_side = 1;
    for (const Stage& st : stages_) min_side = std::max(min_side, st.k);
    if (input->t.h < min_side || input->t.w < min_side) {
      throw std::invalid_argument(
          "extractor input " + std::to_string(input->t.h) + "x" +
          std::to_string(input->t.w) + " smaller than largest stage kernel (" +
          std::to_string(min_side) + ")");
    }
    std::vector<ad::VarPtr> maps;
    maps.reserve(stages_.size());
    ad::VarPtr cur = input;
    for (const Stage& st : stages_) {
      cur = ad::relu(ad::conv2d(cur, st.w, st.b));
      maps.push_back(cur);
    }
    return maps;
  }

 private:
  static constexpr std::uint32_t kExtractorVersion = 1;

  struct Stage {
    int in_ch = 0, out_ch = 0, k = 0;
    ad::VarPtr w, b;  // frozen (requires_grad = false)
  };

  void alloc_stages() {
    stages_.clear();
    int in = cfg_.in_channels;
    for (const ExtractorStage& s : cfg_.stages) {
      Stage st;
      st.in_ch = in;
      st.out_ch = s.out_channels;
      st.k = s.kernel;
      st.w = ad::make_const(ad::Tensor4(st.out_ch, st.in_ch, st.k, st.k));
      st.b = ad::make_const(ad::Tensor4(1, st.out_ch, 1, 1));
      stages_.push_back(std::move(st));
      in = s.out_channels;
    }
  }

  std::vector<double> flatten() const {
    std::vector<double> flat;
    for (const Stage& st : stages_) {
      flat.insert(flat.end(), st.w->t.v.begin(), st.w->t.v.end());
      flat.insert(flat.end(), st.b->t.v.begin(), st.b->t.v.end());
    }
    return flat;
  }

  ExtractorConfig cfg_;
  std::vector<Stage> stages_;
};

struct LossWeights {
  double lambda = 0.001;

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
      throw std::invalid_argument("LossWeights: lambda must be finite and >= 0");
    }
  }
};

/// Mean of squared differences over every element (mean, not sum, so the
/// magnitude does not depend on batch or patch size).
inline ad::VarPtr l2_loss(const ad::VarPtr& output, const ad::VarPtr& target) {
  if (!output->t.same_shape(target->t)) {
    throw std::invalid_argument("l2_loss: shape mismatch " +
                                output->t.shape_str() + " vs " +
                                target->t.shape_str());
  }
  const double inv = 1.0 / static_cast<double>(output->t.numel());
  return ad::scale(ad::sum_squares(ad::subtract(output, target)), inv);
}

/// Sum over stages of the squared feature difference, each stage divided by
/// its map area W_i*H_i (and by batch size, so a batch scores the mean of
/// its per-sample values; for a single sample this is exactly the per-stage
/// area normalization).  Channel count deliberately does not divide.
inline ad::VarPtr perceptual_loss(const FeatureExtractor& fx,
                                  const ad::VarPtr& output,
                                  const ad::VarPtr& target) {
  if (!output->t.same_shape(target->t)) {
    throw std::invalid_argument("perceptual_loss: shape mismatch " +
                                output->t.shape_str() + " vs " +
                                target->t.shape_str());
  }
  const std::vector<ad::VarPtr> f_out = fx.features(output);
  const std::vector<ad::VarPtr> f_tgt = fx.features(target);
  ad::VarPtr total;
  for (std::size_t i = 0; i < f_out.size(); ++i) {
    const double inv = 1.0 / (static_cast<double>(f_out[i]->t.n) *
                              f_out[i]->t.h * f_out[i]->t.w);
    ad::VarPtr term =
        ad::scale(ad::sum_squares(ad::subtract(f_out[i], f_tgt[i])), inv);
    total = total ? ad::add(total, term) : term;
  }
  return total;
}

/// l2 + lambda * perceptual.  lambda == 0 skips the feature branch entirely,
/// so the result is *exactly* the l2 loss (and fx may be null).
inline ad::VarPtr combined_loss(const ad::VarPtr& output,
                                const ad::VarPtr& target,
                                const FeatureExtractor* fx,
                                const LossWeights& w) {
  w.validate();
  ad::VarPtr l2 = l2_loss(output, target);
  if (w.lambda == 0.0) return l2;
  if (fx == nullptr) {
    throw std::invalid_argument("combined_loss: lambda > 0 needs an extractor");
  }
  return ad::add(l2, ad::scale(perceptual_loss(*fx, output, target), w.lambda));
}

}  // namespace derefl::nn
