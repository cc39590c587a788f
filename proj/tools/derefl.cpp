// Command-line front end for the reflection-removal pipeline:
//
//   derefl synth --config synth.json [--set key=value ...]
//   derefl train --config train.json [--set key=value ...]
//   derefl infer --checkpoint model.ckpt --input in.png --output out.png
//   derefl eval  --checkpoint model.ckpt --manifest manifest_test.json
//                [--report report.json]
//
// Config files are JSON; --set overrides individual values with dotted keys
// (e.g. --set seed=7, --set model.filters=8).  Unknown keys are rejected.
// If DEREFL_OUT_DIR is set, relative *output* paths are placed under it.
//
// Exit codes: 0 success, 1 runtime/I-O failure, 2 usage/config error.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include <derefl/derefl.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw derefl::DataError("cannot open config " + path);
  try {
    json j;
    in >> j;
    if (!j.is_object()) {
      throw derefl::DataError("config " + path + " must hold a JSON object");
    }
    return j;
  } catch (const json::exception& e) {
    throw derefl::DataError("config parse error in " + path + ": " + e.what());
  }
}

bool same_kind(const json& a, const json& b) {
  if (a.is_number() && b.is_number()) return true;
  return a.type() == b.type();
}

/// Overlays `src` onto the schema-shaped `dst`, rejecting keys the schema
/// does not know and values of the wrong kind.  Arrays replace wholesale.
void merge_validated(json& dst, const json& src, const std::string& prefix) {
  for (const auto& [key, val] : src.items()) {
    if (!dst.contains(key)) {
      throw derefl::DataError("unknown config key: " + prefix + key);
    }
    json& cur = dst[key];
    if (cur.is_object()) {
      if (!val.is_object()) {
        throw derefl::DataError("config key " + prefix + key +
                                " must be an object");
      }
      merge_validated(cur, val, prefix + key + ".");
    } else if (cur.is_array()) {
      if (!val.is_array()) {
        throw derefl::DataError("config key " + prefix + key +
                                " must be an array");
      }
      cur = val;
    } else {
      if (!same_kind(cur, val)) {
        throw derefl::DataError("config key " + prefix + key +
                                " has the wrong type");
      }
      cur = val;
    }
  }
}

/// Applies one `--set key=value`.  The value is parsed as JSON when
/// possible; for string-typed keys the raw text is used verbatim.
void apply_set(json& dst, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw derefl::DataError("--set expects key=value, got \"" + kv + "\"");
  }
  const std::string key = kv.substr(0, eq);
  const std::string raw = kv.substr(eq + 1);
  json* cur = &dst;
  std::size_t pos = 0;
  std::string full;
  while (true) {
    const auto dot = key.find('.', pos);
    const std::string part =
        key.substr(pos, dot == std::string::npos ? dot : dot - pos);
    full += (full.empty() ? "" : ".") + part;
    if (!cur->is_object() || !cur->contains(part)) {
      throw derefl::DataError("unknown config key: " + full);
    }
    cur = &(*cur)[part];
    if (dot == std::string::npos) break;
    pos = dot + 1;
  }
  json parsed;
  try {
    parsed = json::parse(raw);
  } catch (const json::exception&) {
    parsed = raw;
  }
  if (cur->is_string() && !parsed.is_string()) parsed = raw;
  if (cur->is_object() || !same_kind(*cur, parsed)) {
    throw derefl::DataError("config key " + full + " has the wrong type");
  }
  *cur = parsed;
}

json merged_config(json schema, const std::string& config_path,
                   const std::vector<std::string>& sets) {
  if (!config_path.empty()) {
    merge_validated(schema, load_json_file(config_path), "");
  }
  for (const std::string& kv : sets) apply_set(schema, kv);
  return schema;
}

/// Relative output paths land under DEREFL_OUT_DIR when that is set.
fs::path out_path(const std::string& p) {
  const char* root = std::getenv("DEREFL_OUT_DIR");
  fs::path path(p);
  if (root != nullptr && *root != '\0' && path.is_relative()) {
    return fs::path(root) / path;
  }
  return path;
}

int cmd_synth(const std::string& config_path,
              const std::vector<std::string>& sets, bool verbose) {
  json schema = derefl::synth::config_to_json(derefl::synth::SynthConfig{});
  schema["transmission_dir"] = "";
  schema["reflection_dir"] = "";
  schema["out_dir"] = "";
  const json cfg = merged_config(schema, config_path, sets);
  const std::string tdir = cfg.at("transmission_dir").get<std::string>();
  const std::string rdir = cfg.at("reflection_dir").get<std::string>();
  const std::string odir = cfg.at("out_dir").get<std::string>();
  if (tdir.empty() || rdir.empty() || odir.empty()) {
    throw derefl::DataError(
        "synth config needs transmission_dir, reflection_dir and out_dir");
  }
  const derefl::synth::SynthConfig sc = derefl::synth::config_from_json(cfg);
  if (verbose) std::cerr << "synth config: " << cfg.dump() << "\n";
  const derefl::synth::GenerateResult result =
      derefl::synth::generate_dataset(tdir, rdir, sc, out_path(odir));
  std::cout << "wrote " << result.train.samples.size() << " train + "
            << result.test.samples.size() << " test samples under "
            << out_path(odir).string() << "\n";
  return 0;
}

int cmd_train(const std::string& config_path,
              const std::vector<std::string>& sets, bool verbose) {
  json schema{
      {"train", derefl::train::train_config_to_json(derefl::train::TrainConfig{})},
      {"model", derefl::nn::model_config_to_json(derefl::nn::ModelConfig{})},
      {"extractor",
       derefl::train::extractor_config_to_cli_json(derefl::nn::ExtractorConfig{})}};
  const json cfg = merged_config(schema, config_path, sets);
  derefl::train::TrainConfig tc =
      derefl::train::train_config_from_json(cfg.at("train"));
  derefl::nn::ModelConfig mc;
  try {
    mc = derefl::nn::model_config_from_json(cfg.at("model"));
  } catch (const derefl::SerializationError& e) {
    throw derefl::DataError(e.what());
  }
  tc.extractor = derefl::train::extractor_config_from_cli_json(cfg.at("extractor"));
  tc.out_checkpoint = out_path(tc.out_checkpoint).string();
  tc.log_path = out_path(tc.log_path).string();
  if (verbose) std::cerr << "train config: " << cfg.dump() << "\n";
  const derefl::train::TrainResult result = derefl::train::train(tc, mc);
  std::cout << "trained " << result.log.steps.size() << " steps in "
            << result.log.wall_seconds << " s; final loss "
            << (result.log.steps.empty() ? 0.0 : result.log.steps.back().loss)
            << "; checkpoint " << tc.out_checkpoint << "; log " << tc.log_path
            << "\n";
  return 0;
}

int cmd_infer(const std::string& checkpoint, const std::string& input,
              const std::string& output) {
  const derefl::nn::Network net =
      derefl::nn::Network::load_checkpoint(fs::path(checkpoint));
  const derefl::EncodedImage img = derefl::read_png(input);
  const auto t0 = std::chrono::steady_clock::now();
  const derefl::ad::Tensor4 out = net.infer(derefl::nn::image_to_tensor(img));
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  derefl::write_png_atomic(out_path(output), derefl::nn::tensor_to_image(out));
  std::cout << "restored " << img.width << "x" << img.height << " image in "
            << seconds << " s -> " << out_path(output).string() << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest_path,
             const std::string& report_path) {
  const derefl::nn::Network net =
      derefl::nn::Network::load_checkpoint(fs::path(checkpoint));
  const derefl::synth::Manifest manifest =
      derefl::synth::load_manifest(manifest_path);
  const derefl::train::EvalReport report = derefl::train::evaluate(net, manifest);
  const json doc = derefl::train::eval_report_to_json(report);
  if (!report_path.empty()) {
    derefl::atomic_write(out_path(report_path), [&doc](const fs::path& tmp) {
      std::ofstream out(tmp);
      if (!out) throw derefl::IoError("cannot write report: " + tmp.string());
      out << doc.dump(2) << "\n";
    });
  }
  if (report.zero_samples) {
    std::cout << "no samples in manifest (zero_samples=true)\n";
  } else {
    std::cout << "mean PSNR " << doc.at("mean_psnr").dump() << " dB vs baseline "
              << doc.at("baseline_mean_psnr").dump() << " dB over "
              << report.evaluated << " samples (" << report.failed
              << " failed)\n";
  }
  if (!report_path.empty()) {
    std::cout << "report -> " << out_path(report_path).string() << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"single-image reflection removal: synthesize, train, infer, evaluate"};
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "echo effective configs to stderr");

  std::string synth_config;
  std::vector<std::string> synth_sets;
  CLI::App* synth = app.add_subcommand("synth", "generate a paired dataset");
  synth->add_option("--config", synth_config, "JSON config file")->required();
  synth->add_option("--set", synth_sets, "override key=value (repeatable)");

  std::string train_config;
  std::vector<std::string> train_sets;
  CLI::App* train = app.add_subcommand("train", "train on a synthesized dataset");
  train->add_option("--config", train_config, "JSON config file")->required();
  train->add_option("--set", train_sets, "override key=value (repeatable)");

  std::string in_ckpt, in_png, out_png;
  CLI::App* infer = app.add_subcommand("infer", "restore one image");
  infer->add_option("--checkpoint", in_ckpt, "trained checkpoint")->required();
  infer->add_option("--input", in_png, "mixture PNG")->required();
  infer->add_option("--output", out_png, "restored PNG to write")->required();

  std::string ev_ckpt, ev_manifest, ev_report;
  CLI::App* eval = app.add_subcommand("eval", "PSNR over a manifest");
  eval->add_option("--checkpoint", ev_ckpt, "trained checkpoint")->required();
  eval->add_option("--manifest", ev_manifest, "dataset manifest")->required();
  eval->add_option("--report", ev_report, "write the JSON report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;  // --help is success; bad usage is 2
  }

  try {
    if (synth->parsed()) return cmd_synth(synth_config, synth_sets, verbose);
    if (train->parsed()) return cmd_train(train_config, train_sets, verbose);
    if (infer->parsed()) return cmd_infer(in_ckpt, in_png, out_png);
    if (eval->parsed()) return cmd_eval(ev_ckpt, ev_manifest, ev_report);
    std::cerr << "error: no subcommand\n";
    return 2;
  } catch (const derefl::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    // I/O failures, corrupt weight files, training aborts
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
