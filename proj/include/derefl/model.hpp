#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "derefl/autodiff.hpp"
#include "derefl/common.hpp"
#include "derefl/image.hpp"
#include "derefl/weights_io.hpp"

// Three-stage convolutional encoder-decoder mapping a reflection-tainted
// photograph to its attenuated transmission layer:
//
//   stage 1  conv1..conv6      feature extraction            (ReLU each)
//   stage 2  conv7..conv12,    reflection-feature recovery   (ReLU each,
//            deconv1..deconv6   with skip additions into chosen deconvs
//                               applied before that deconv's ReLU)
//   junction relu(conv6_out - deconv6_out)   subtracts the recovered
//                               reflection features from the stage-1 features
//   stage 3  deconv7..deconv12 transmission restoration; the final deconv
//                               maps back to image channels with no ReLU
//
// Every layer is stride-1 with zero-padded same output, so the network is
// fully convolutional: any input size above the largest kernel produces an
// equal-size output.  Layer depths, widths and kernel sizes are knobs of
// ModelConfig; the defaults give the 12-conv/12-deconv, 64-filter shape.

namespace derefl::nn {

/// Shortcut from a stage-2 conv into a stage-2 deconv.  conv_index uses
/// global conv numbering (so stage-2 convs by default are 7..12);
/// deconv_index counts within the stage-2 deconvs (1..stage2_deconvs).
struct SkipPair {
  int conv_index = 0;
  int deconv_index = 0;
};

struct ModelConfig {
  int filters = 64;
  int inner_kernel = 5;
  // Used by the first two convs and the last two deconvs; the wider option
  // (9) helps when the two ghost copies are far apart.
  int outer_kernel = 5;
  int stage1_convs = 6;
  int stage2_convs = 6;
  int stage2_deconvs = 6;
  int stage3_deconvs = 6;
  std::vector<SkipPair> skip_pairs = {{8, 5}, {10, 3}};
  int in_channels = 3;
  int out_channels = 3;
  std::uint64_t seed = 0;

  int total_convs() const { return stage1_convs + stage2_convs; }
  int total_deconvs() const { return stage2_deconvs + stage3_deconvs; }

  void validate() const {
    if (filters < 1) throw std::invalid_argument("ModelConfig: filters < 1");
    if (in_channels < 1 || out_channels < 1) {
      throw std::invalid_argument("ModelConfig: channel counts must be >= 1");
    }
    for (int k : {inner_kernel, outer_kernel}) {
      if (k < 1 || k % 2 == 0) {
        throw std::invalid_argument(
            "ModelConfig: kernel sizes must be odd and >= 1, got " +
            std::to_string(k));
      }
    }
    if (stage1_convs < 1 || stage2_convs < 1 || stage2_deconvs < 1 ||
        stage3_deconvs < 1) {
      throw std::invalid_argument("ModelConfig: every stage needs >= 1 layer");
    }
    for (const SkipPair& s : skip_pairs) {
      if (s.conv_index <= stage1_convs || s.conv_index > total_convs()) {
        throw std::invalid_argument(
            "ModelConfig: skip source conv" + std::to_string(s.conv_index) +
            " is not a stage-2 conv (conv" + std::to_string(stage1_convs + 1) +
            "..conv" + std::to_string(total_convs()) + ")");
      }
      if (s.deconv_index < 1 || s.deconv_index > stage2_deconvs) {
        throw std::invalid_argument(
            "ModelConfig: skip target deconv" + std::to_string(s.deconv_index) +
            " is not a stage-2 deconv (1.." + std::to_string(stage2_deconvs) +
            ")");
      }
    }
  }
};

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  nlohmann::json skips = nlohmann::json::array();
  for (const SkipPair& s : cfg.skip_pairs) {
    skips.push_back({s.conv_index, s.deconv_index});
  }
  return nlohmann::json{{"filters", cfg.filters},
                        {"inner_kernel", cfg.inner_kernel},
                        {"outer_kernel", cfg.outer_kernel},
                        {"stage1_convs", cfg.stage1_convs},
                        {"stage2_convs", cfg.stage2_convs},
                        {"stage2_deconvs", cfg.stage2_deconvs},
                        {"stage3_deconvs", cfg.stage3_deconvs},
                        {"skip_pairs", skips},
                        {"in_channels", cfg.in_channels},
                        {"out_channels", cfg.out_channels},
                        {"seed", cfg.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig cfg;
    cfg.filters = j.at("filters").get<int>();
    cfg.inner_kernel = j.at("inner_kernel").get<int>();
    cfg.outer_kernel = j.at("outer_kernel").get<int>();
    cfg.stage1_convs = j.at("stage1_convs").get<int>();
    cfg.stage2_convs = j.at("stage2_convs").get<int>();
    cfg.stage2_deconvs = j.at("stage2_deconvs").get<int>();
    cfg.stage3_deconvs = j.at("stage3_deconvs").get<int>();
    cfg.skip_pairs.clear();
    for (const auto& pair : j.at("skip_pairs")) {
      if (!pair.is_array() || pair.size() != 2) {
        throw SerializationError("model config: skip pair must be [conv,deconv]");
      }
      cfg.skip_pairs.push_back({pair[0].get<int>(), pair[1].get<int>()});
    }
    cfg.in_channels = j.at("in_channels").get<int>();
    cfg.out_channels = j.at("out_channels").get<int>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw SerializationError(std::string("model config JSON: ") + e.what());
  }
}

/// One conv or deconv layer: trainable weight + bias leaves.
/// Conv weights are out x in x k x k; deconv weights are in x out x k x k
/// (the orientation a forward conv of the opposite direction would use,
/// making tconv2d the exact adjoint).
struct Layer {
  bool transposed = false;
  int in_ch = 0, out_ch = 0, k = 0;
  ad::VarPtr w, b;

  std::size_t param_count() const {
    return static_cast<std::size_t>(in_ch) * out_ch * k * k + out_ch;
  }
};

/// Post-activation captures for inspection: the last stage-1 conv, the last
/// stage-2 deconv, and the subtraction junction between them.  (Field names
/// follow the default-depth layer numbering.)
struct NetworkTaps {
  ad::VarPtr conv6_out;
  ad::VarPtr deconv6_out;
  ad::VarPtr junction_out;
};

class Network {
 public:
  /// Builds the layer stack and initializes weights from cfg.seed: for each
  /// layer in order (conv1..convN then deconv1..deconvM), weight elements
  /// are drawn in storage order as uniform +-sqrt(6 / fan_in) with
  /// fan_in = in_ch * k * k, and biases start at zero.
  static Network build(const ModelConfig& cfg) {
    cfg.validate();
    Network net;
    net.cfg_ = cfg;
    const int n_convs = cfg.total_convs();
    const int n_deconvs = cfg.total_deconvs();
    for (int i = 1; i <= n_convs; ++i) {
      const int in = i == 1 ? cfg.in_channels : cfg.filters;
      const int k = i <= 2 ? cfg.outer_kernel : cfg.inner_kernel;
      net.convs_.push_back(make_layer(false, in, cfg.filters, k));
    }
    for (int j = 1; j <= n_deconvs; ++j) {
      const int out = j == n_deconvs ? cfg.out_channels : cfg.filters;
      const int k = j > n_deconvs - 2 ? cfg.outer_kernel : cfg.inner_kernel;
      net.deconvs_.push_back(make_layer(true, cfg.filters, out, k));
    }
    Rng rng(derive_seed(cfg.seed, rng_stream::kInit));
    for (Layer* layer : net.layer_order()) {
      const double bound =
          std::sqrt(6.0 / (static_cast<double>(layer->in_ch) * layer->k * layer->k));
      for (double& wv : layer->w->t.v) wv = uniform_in(rng, -bound, bound);
      // biases stay zero
    }
    return net;
  }

  const ModelConfig& config() const { return cfg_; }

  /// All trainable leaves in serialization order: convs then deconvs,
  /// weight before bias within each layer.
  std::vector<ad::VarPtr> parameters() const {
    std::vector<ad::VarPtr> out;
    for (const Layer* layer : layer_order()) {
      out.push_back(layer->w);
      out.push_back(layer->b);
    }
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const Layer* layer : layer_order()) total += layer->param_count();
    return total;
  }

  /// Marks parameters trainable or frozen.  Frozen forward passes skip all
  /// gradient bookkeeping and release intermediate activations eagerly.
  void set_trainable(bool trainable) const {
    for (const Layer* layer : layer_order()) {
      layer->w->requires_grad = layer->w->needs_grad = trainable;
      layer->b->requires_grad = layer->b->needs_grad = trainable;
    }
  }

  /// Builds the forward graph over an existing input node.  The returned
  /// value is the raw (unclamped) network output; clamping to [0,1] belongs
  /// to image export, not to the graph, so losses see actual values.
  ad::VarPtr forward(const ad::VarPtr& input, NetworkTaps* taps = nullptr) const {
    check_input(input->t);
    // Post-ReLU outputs of every conv, indexed by global conv number,
    // so skip sources can be looked up later.
    std::vector<ad::VarPtr> conv_outs;
    conv_outs.reserve(convs_.size());
    ad::VarPtr cur = input;
    for (int i = 0; i < cfg_.stage1_convs; ++i) {
      cur = ad::relu(apply(convs_[i], cur));
      conv_outs.push_back(cur);
    }
    const ad::VarPtr stage1_out = cur;
    for (int i = cfg_.stage1_convs; i < cfg_.total_convs(); ++i) {
      cur = ad::relu(apply(convs_[i], cur));
      conv_outs.push_back(cur);
    }
    for (int j = 1; j <= cfg_.stage2_deconvs; ++j) {
      cur = apply(deconvs_[j - 1], cur);
      for (const SkipPair& s : cfg_.skip_pairs) {
        if (s.deconv_index == j) {
          cur = ad::add(cur, conv_outs[s.conv_index - 1]);
        }
      }
      cur = ad::relu(cur);
    }
    const ad::VarPtr stage2_out = cur;
    const ad::VarPtr junction = ad::relu(ad::subtract(stage1_out, stage2_out));
    cur = junction;
    const int n_deconvs = cfg_.total_deconvs();
    for (int j = cfg_.stage2_deconvs + 1; j <= n_deconvs; ++j) {
      cur = apply(deconvs_[j - 1], cur);
      if (j != n_deconvs) cur = ad::relu(cur);
    }
    if (taps != nullptr) {
      taps->conv6_out = stage1_out;
      taps->deconv6_out = stage2_out;
      taps->junction_out = junction;
    }
    return cur;
  }

  /// Gradient-free forward pass.  With every parameter frozen, graph nodes
  /// drop their edges at construction, so intermediate activations are
  /// released as soon as the data flow moves past them — this is the path
  /// for inference on full-size photographs.
  ad::Tensor4 infer(const ad::Tensor4& input, NetworkTaps* taps = nullptr) const {
    const bool was_trainable = convs_.front().w->requires_grad;
    set_trainable(false);
    ad::VarPtr out;
    try {
      out = forward(ad::make_const(input), taps);
    } catch (...) {
      set_trainable(was_trainable);
      throw;
    }
    set_trainable(was_trainable);
    return std::move(out->t);
  }

  /// Checkpoint layout: framed container from weights_io with the model
  /// config as the JSON header and parameters flattened in layer order.
  void save_checkpoint(std::ostream& out) const {
    std::vector<double> flat;
    flat.reserve(parameter_count());
    for (const Layer* layer : layer_order()) {
      flat.insert(flat.end(), layer->w->t.v.begin(), layer->w->t.v.end());
      flat.insert(flat.end(), layer->b->t.v.begin(), layer->b->t.v.end());
    }
    io::write_param_file(out, io::kCheckpointMagic, kCheckpointVersion,
                         model_config_to_json(cfg_).dump(), flat);
  }

  void save_checkpoint(const std::filesystem::path& path) const {
    atomic_write(path, [this](const std::filesystem::path& tmp) {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) throw IoError("cannot open for writing: " + tmp.string());
      save_checkpoint(out);
      if (!out.flush()) throw IoError("short write: " + tmp.string());
    });
  }

  static Network load_checkpoint(std::istream& in) {
    io::ParamFile pf =
        io::read_param_file(in, io::kCheckpointMagic, kCheckpointVersion);
    nlohmann::json header;
    try {
      header = nlohmann::json::parse(pf.json_header);
    } catch (const nlohmann::json::exception& e) {
      throw SerializationError(std::string("checkpoint header: ") + e.what());
    }
    ModelConfig cfg = model_config_from_json(header);
    try {
      cfg.validate();
    } catch (const std::invalid_argument& e) {
      throw ShapeError(std::string("checkpoint config invalid: ") + e.what());
    }
    Network net = Network::build(cfg);
    if (pf.params.size() != net.parameter_count()) {
      throw ShapeError("checkpoint holds " + std::to_string(pf.params.size()) +
                       " parameters, config needs " +
                       std::to_string(net.parameter_count()));
    }
    std::size_t offset = 0;
    for (Layer* layer : net.layer_order()) {
      std::copy_n(pf.params.begin() + offset, layer->w->t.numel(),
                  layer->w->t.v.begin());
      offset += layer->w->t.numel();
      std::copy_n(pf.params.begin() + offset, layer->b->t.numel(),
                  layer->b->t.v.begin());
      offset += layer->b->t.numel();
    }
    return net;
  }

  static Network load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path.string());
    return load_checkpoint(in);
  }

 private:
  static constexpr std::uint32_t kCheckpointVersion = 1;

  static Layer make_layer(bool transposed, int in_ch, int out_ch, int k) {
    Layer layer;
    layer.transposed = transposed;
    layer.in_ch = in_ch;
    layer.out_ch = out_ch;
    layer.k = k;
    // Conv weights: out x in x k x k.  Deconv weights keep dim 0 = this
    // layer's input channels, dim 1 = its output channels.
    const int d0 = transposed ? in_ch : out_ch;
    const int d1 = transposed ? out_ch : in_ch;
    layer.w = ad::make_leaf(ad::Tensor4(d0, d1, k, k), true);
    layer.b = ad::make_leaf(ad::Tensor4(1, out_ch, 1, 1), true);
    return layer;
  }

  static ad::VarPtr apply(const Layer& layer, const ad::VarPtr& x) {
    return layer.transposed ? ad::tconv2d(x, layer.w, layer.b)
                            : ad::conv2d(x, layer.w, layer.b);
  }

  std::vector<Layer*> layer_order() const {
    std::vector<Layer*> order;
    order.reserve(convs_.size() + deconvs_.size());
    for (const Layer& l : convs_) order.push_back(const_cast<Layer*>(&l));
    for (const Layer& l : deconvs_) order.push_back(const_cast<Layer*>(&l));
    return order;
  }

  void check_input(const ad::Tensor4& t) const {
    if (t.c != cfg_.in_channels) {
      throw std::invalid_argument("forward: input has " + std::to_string(t.c) +
                                  " channels, model expects " +
                                  std::to_string(cfg_.in_channels));
    }
    const int min_side = std::max(cfg_.inner_kernel, cfg_.outer_kernel);
    if (t.h < min_side || t.w < min_side) {
      throw std::invalid_argument(
          "forward: input " + std::to_string(t.h) + "x" + std::to_string(t.w) +
          " is smaller than the largest kernel (" + std::to_string(min_side) +
          ")");
    }
  }

  ModelConfig cfg_;
  std::vector<Layer> convs_;
  std::vector<Layer> deconvs_;
};

/// Image <-> tensor adapters (interleaved H x W x 3 to planar 1 x 3 x H x W).
inline ad::Tensor4 image_to_tensor(const EncodedImage& img) {
  ad::Tensor4 t(1, 3, img.height, img.width);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < img.height; ++y) {
      for (int x = 0; x < img.width; ++x) {
        t.at(0, c, y, x) = img.at(y, x, c);
      }
    }
  }
  return t;
}

/// Maps a 1 x 3 x H x W tensor back to an image, clamping into [0,1] —
/// network output is unclamped by design, clamping happens only here.
inline EncodedImage tensor_to_image(const ad::Tensor4& t) {
  if (t.n != 1 || t.c != 3) {
    throw std::invalid_argument("tensor_to_image: need 1x3xHxW, got " +
                                t.shape_str());
  }
  EncodedImage img(t.h, t.w);
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < t.h; ++y) {
      for (int x = 0; x < t.w; ++x) {
        img.at(y, x, c) = std::clamp(t.at(0, c, y, x), 0.0, 1.0);
      }
    }
  }
  return img;
}

}  // namespace derefl::nn
