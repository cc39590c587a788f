#include <filesystem>
#include <fstream>
#include <string>

#include <catch2/catch_amalgamated.hpp>
#include <json.hpp>

#include "derefl/dataset.hpp"
#include "derefl/trainer.hpp"
#include "test_util.hpp"

using namespace derefl;
using nlohmann::json;
namespace fs = std::filesystem;
using testutil::run_cli;

namespace {

synth::SynthConfig desk_synth() {
  synth::SynthConfig cfg;
  cfg.patch = 16;
  cfg.sigma_lo = cfg.sigma_hi = 1.0;
  cfg.offset_lo = 2;
  cfg.offset_hi = 3;
  return cfg;
}

void write_sources(const fs::path& root, int n_trans = 3, int n_refl = 4) {
  fs::create_directories(root / "trans");
  fs::create_directories(root / "refl");
  for (int i = 0; i < n_trans; ++i) {
    testutil::write_test_png(root / "trans" / ("t" + std::to_string(i) + ".png"),
                             24, 26, 100 + static_cast<std::uint64_t>(i));
  }
  for (int i = 0; i < n_refl; ++i) {
    testutil::write_test_png(root / "refl" / ("r" + std::to_string(i) + ".png"),
                             22, 28, 200 + static_cast<std::uint64_t>(i));
  }
}

/// Writes the flat synth config for the desk-scale shape above.
fs::path write_synth_config(const fs::path& root, const fs::path& out_dir,
                            int rpt = 2) {
  json cfg{{"patch", 16},
           {"sigma_lo", 1.0},
           {"sigma_hi", 1.0},
           {"offset_lo", 2},
           {"offset_hi", 3},
           {"reflections_per_transmission", rpt},
           {"split_ratio", 0.75},
           {"seed", 5},
           {"transmission_dir", (root / "trans").string()},
           {"reflection_dir", (root / "refl").string()},
           {"out_dir", out_dir.string()}};
  const fs::path path = root / "synth.json";
  std::ofstream(path) << cfg.dump(2);
  return path;
}

/// Library-side dataset for the train/eval fixtures (faster than going
/// through the binary every time).
synth::GenerateResult quick_dataset(const fs::path& root, int n_trans,
                                    int rpt) {
  write_sources(root, n_trans, 4);
  auto cfg = desk_synth();
  cfg.reflections_per_transmission = rpt;
  cfg.split_ratio = 1.0;
  return synth::generate_dataset(root / "trans", root / "refl", cfg,
                                 root / "data");
}

fs::path write_identity_checkpoint(const fs::path& path) {
  testutil::make_identity_network().save_checkpoint(path);
  return path;
}

}  // namespace

TEST_CASE("help and usage errors use the documented exit codes", "[cli]") {
  REQUIRE(run_cli("--help").exit_code == 0);
  REQUIRE(run_cli("synth --help").exit_code == 0);
  const auto help = run_cli("--help");
  REQUIRE(help.output.find("synth") != std::string::npos);
  REQUIRE(help.output.find("infer") != std::string::npos);

  REQUIRE(run_cli("").exit_code == 2);               // a subcommand is required
  REQUIRE(run_cli("frobnicate").exit_code == 2);     // unknown subcommand
  REQUIRE(run_cli("synth").exit_code == 2);          // missing --config
  REQUIRE(run_cli("infer --checkpoint x").exit_code == 2);  // missing options
  REQUIRE(run_cli("synth --config x --bogus").exit_code == 2);
}

TEST_CASE("synth generates a dataset from a JSON config", "[cli]") {
  testutil::TempDir tmp("cli_synth");
  write_sources(tmp.path());
  const fs::path out_dir = tmp / "dataset";
  const fs::path cfg = write_synth_config(tmp.path(), out_dir);

  const auto r = run_cli("synth --config " + cfg.string());
  CAPTURE(r.output);
  REQUIRE(r.exit_code == 0);
  // 3 transmissions at ratio 0.75 -> 2 train, each with 2 reflections.
  REQUIRE(r.output.find("wrote 4 train + 2 test samples under " +
                        out_dir.string()) != std::string::npos);
  const synth::Manifest train =
      synth::load_manifest(out_dir / "manifest_train.json");
  const synth::Manifest test =
      synth::load_manifest(out_dir / "manifest_test.json");
  REQUIRE(train.samples.size() == 4);
  REQUIRE(test.samples.size() == 2);
  for (const auto& s : train.samples) {
    REQUIRE(fs::exists(train.resolve(s.mixture_path)));
    REQUIRE(fs::exists(train.resolve(s.target_path)));
  }
  // --verbose echoes the effective config to stderr.
  const auto v = run_cli("-v synth --config " + cfg.string() + " --set seed=5");
  REQUIRE(v.exit_code == 0);
  REQUIRE(v.output.find("synth config:") != std::string::npos);
}

TEST_CASE("synth reruns are deterministic and --set changes the draw", "[cli]") {
  testutil::TempDir tmp("cli_det");
  write_sources(tmp.path());
  const fs::path cfg = write_synth_config(tmp.path(), tmp / "ds_a");

  REQUIRE(run_cli("synth --config " + cfg.string()).exit_code == 0);
  REQUIRE(run_cli("synth --config " + cfg.string() + " --set out_dir=" +
                  (tmp / "ds_b").string())
              .exit_code == 0);
  // Identical seeds: manifests and image bytes agree across runs.
  REQUIRE(testutil::file_bytes(tmp / "ds_a/manifest_train.json") ==
          testutil::file_bytes(tmp / "ds_b/manifest_train.json"));
  const synth::Manifest a = synth::load_manifest(tmp / "ds_a/manifest_train.json");
  for (const auto& s : a.samples) {
    REQUIRE(testutil::file_bytes(tmp / "ds_a" / s.mixture_path) ==
            testutil::file_bytes(tmp / "ds_b" / s.mixture_path));
  }

  // A different seed draws different parameters.
  REQUIRE(run_cli("synth --config " + cfg.string() + " --set out_dir=" +
                  (tmp / "ds_c").string() + " --set seed=7")
              .exit_code == 0);
  const synth::Manifest c = synth::load_manifest(tmp / "ds_c/manifest_train.json");
  REQUIRE(a.samples[0].alpha != c.samples[0].alpha);

  // String-typed keys take --set values verbatim.
  REQUIRE(run_cli("synth --config " + cfg.string() + " --set out_dir=" +
                  (tmp / "ds_d").string() + " --set beta_mode=complement")
              .exit_code == 0);
  const synth::Manifest d = synth::load_manifest(tmp / "ds_d/manifest_train.json");
  REQUIRE(d.samples[0].mode == "complement");
}

TEST_CASE("synth rejects unknown keys, bad types and missing sources", "[cli]") {
  testutil::TempDir tmp("cli_synth_err");
  write_sources(tmp.path());
  const fs::path cfg = write_synth_config(tmp.path(), tmp / "ds");

  auto expect_usage = [&](const std::string& args, const std::string& needle) {
    const auto r = run_cli(args);
    CAPTURE(r.output);
    REQUIRE(r.exit_code == 2);
    REQUIRE(r.output.find(needle) != std::string::npos);
  };
  expect_usage("synth --config " + cfg.string() + " --set nope=1",
               "unknown config key: nope");
  expect_usage("synth --config " + cfg.string() + " --set patch=hello",
               "wrong type");
  expect_usage("synth --config " + cfg.string() + " --set patch",
               "key=value");

  {
    json bad = json::parse(std::ifstream(cfg));
    bad["patchh"] = 16;
    std::ofstream(tmp / "bad.json") << bad.dump();
    expect_usage("synth --config " + (tmp / "bad.json").string(),
                 "unknown config key: patchh");
  }
  {
    json bad = json::parse(std::ifstream(cfg));
    bad.erase("out_dir");
    std::ofstream(tmp / "noout.json") << bad.dump();
    expect_usage("synth --config " + (tmp / "noout.json").string(), "out_dir");
  }
  {
    // Empty source directory: fails before creating any output.
    fs::create_directories(tmp / "empty");
    json bad = json::parse(std::ifstream(cfg));
    bad["transmission_dir"] = (tmp / "empty").string();
    bad["out_dir"] = (tmp / "never").string();
    std::ofstream(tmp / "nosrc.json") << bad.dump();
    expect_usage("synth --config " + (tmp / "nosrc.json").string(),
                 "no PNG files");
    REQUIRE_FALSE(fs::exists(tmp / "never"));
  }
  REQUIRE(run_cli("synth --config " + (tmp / "missing.json").string())
              .exit_code == 2);
}

TEST_CASE("train runs end to end from a config file", "[cli]") {
  testutil::TempDir tmp("cli_train");
  const auto gen = quick_dataset(tmp.path(), 4, 1);

  json cfg{{"train",
            {{"manifest", gen.train_manifest_path.string()},
             {"epochs", 2},
             {"batch_size", 2},
             {"lr", 0.001},
             {"lambda", 0.0},
             {"out_checkpoint", (tmp / "model.ckpt").string()},
             {"log_path", (tmp / "log.jsonl").string()}}},
           {"model",
            {{"filters", 4},
             {"inner_kernel", 3},
             {"outer_kernel", 3},
             {"stage1_convs", 1},
             {"stage2_convs", 1},
             {"stage2_deconvs", 1},
             {"stage3_deconvs", 1},
             {"skip_pairs", json::array()},
             {"seed", 7}}}};
  std::ofstream(tmp / "train.json") << cfg.dump(2);

  const auto r = run_cli("train --config " + (tmp / "train.json").string());
  CAPTURE(r.output);
  REQUIRE(r.exit_code == 0);
  REQUIRE(r.output.find("trained 4 steps") != std::string::npos);
  REQUIRE(fs::exists(tmp / "log.jsonl"));
  const nn::Network net = nn::Network::load_checkpoint(tmp / "model.ckpt");
  REQUIRE(net.config().filters == 4);

  // Dotted --set overrides reach nested keys.
  const auto r2 = run_cli("train --config " + (tmp / "train.json").string() +
                          " --set train.epochs=1 --set train.out_checkpoint=" +
                          (tmp / "m1.ckpt").string());
  REQUIRE(r2.exit_code == 0);
  REQUIRE(r2.output.find("trained 2 steps") != std::string::npos);

  // Config errors are usage errors.
  REQUIRE(run_cli("train --config " + (tmp / "train.json").string() +
                  " --set train.lr=-0.5")
              .exit_code == 2);
  REQUIRE(run_cli("train --config " + (tmp / "train.json").string() +
                  " --set train.manifest=" + (tmp / "no.json").string())
              .exit_code == 2);
  REQUIRE(run_cli("train --config " + (tmp / "train.json").string() +
                  " --set model.filters=0")
              .exit_code == 2);
}

TEST_CASE("infer preserves dimensions and reruns byte-identically", "[cli]") {
  testutil::TempDir tmp("cli_infer");
  const fs::path ckpt = write_identity_checkpoint(tmp / "identity.ckpt");
  testutil::write_test_png(tmp / "in.png", 97, 129, 3);

  const auto r = run_cli("infer --checkpoint " + ckpt.string() + " --input " +
                         (tmp / "in.png").string() + " --output " +
                         (tmp / "out_a.png").string());
  CAPTURE(r.output);
  REQUIRE(r.exit_code == 0);
  REQUIRE(r.output.find("restored 129x97 image") != std::string::npos);

  const EncodedImage in = read_png(tmp / "in.png");
  const EncodedImage out = read_png(tmp / "out_a.png");
  REQUIRE(out.height == 97);
  REQUIRE(out.width == 129);
  // The identity network reproduces its 8-bit input exactly.
  std::size_t mismatches = 0;
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        if (out.at(y, x, c) != in.at(y, x, c)) ++mismatches;
      }
    }
  }
  REQUIRE(mismatches == 0);

  REQUIRE(run_cli("infer --checkpoint " + ckpt.string() + " --input " +
                  (tmp / "in.png").string() + " --output " +
                  (tmp / "out_b.png").string())
              .exit_code == 0);
  REQUIRE(testutil::file_bytes(tmp / "out_a.png") ==
          testutil::file_bytes(tmp / "out_b.png"));

  // A non-square second size, just the geometry.
  testutil::write_test_png(tmp / "wide.png", 33, 51, 4);
  const auto r2 = run_cli("infer --checkpoint " + ckpt.string() + " --input " +
                          (tmp / "wide.png").string() + " --output " +
                          (tmp / "wide_out.png").string());
  REQUIRE(r2.exit_code == 0);
  const EncodedImage wide = read_png(tmp / "wide_out.png");
  REQUIRE(wide.height == 33);
  REQUIRE(wide.width == 51);
}

TEST_CASE("infer failure modes map to the documented exit codes", "[cli]") {
  testutil::TempDir tmp("cli_infer_err");
  const fs::path ckpt = write_identity_checkpoint(tmp / "identity.ckpt");
  testutil::write_test_png(tmp / "in.png", 16, 16, 1);

  // Missing files are runtime errors (1).
  REQUIRE(run_cli("infer --checkpoint " + (tmp / "no.ckpt").string() +
                  " --input " + (tmp / "in.png").string() + " --output " +
                  (tmp / "o.png").string())
              .exit_code == 1);
  REQUIRE(run_cli("infer --checkpoint " + ckpt.string() + " --input " +
                  (tmp / "no.png").string() + " --output " +
                  (tmp / "o.png").string())
              .exit_code == 1);

  // Corrupt checkpoint bytes are runtime errors (1).
  std::ofstream(tmp / "junk.ckpt", std::ios::binary) << "NOTAFILEATALL";
  REQUIRE(run_cli("infer --checkpoint " + (tmp / "junk.ckpt").string() +
                  " --input " + (tmp / "in.png").string() + " --output " +
                  (tmp / "o.png").string())
              .exit_code == 1);

  // An input smaller than the kernels is a usage error (2).
  testutil::write_test_png(tmp / "tiny.png", 2, 2, 1);
  const auto r = run_cli("infer --checkpoint " + ckpt.string() + " --input " +
                         (tmp / "tiny.png").string() + " --output " +
                         (tmp / "o.png").string());
  CAPTURE(r.output);
  REQUIRE(r.exit_code == 2);
  REQUIRE_FALSE(fs::exists(tmp / "o.png"));
}

TEST_CASE("eval reproduces the baseline through the CLI", "[cli]") {
  testutil::TempDir tmp("cli_eval");
  const auto gen = quick_dataset(tmp.path(), 3, 1);
  const fs::path ckpt = write_identity_checkpoint(tmp / "identity.ckpt");

  const auto r = run_cli("eval --checkpoint " + ckpt.string() + " --manifest " +
                         gen.train_manifest_path.string() + " --report " +
                         (tmp / "report.json").string());
  CAPTURE(r.output);
  REQUIRE(r.exit_code == 0);
  REQUIRE(r.output.find("mean PSNR") != std::string::npos);
  REQUIRE(r.output.find("over 3 samples (0 failed)") != std::string::npos);
  REQUIRE(r.output.find("report -> ") != std::string::npos);

  const json report = json::parse(std::ifstream(tmp / "report.json"));
  REQUIRE(report.at("target_definition") == "alpha_T");
  REQUIRE(report.at("evaluated") == 3);
  REQUIRE(report.at("mean_psnr").get<double>() ==
          report.at("baseline_mean_psnr").get<double>());

  // A broken sample is reported but does not fail the run.
  fs::remove(gen.train.resolve(gen.train.samples[0].mixture_path));
  const auto r2 = run_cli("eval --checkpoint " + ckpt.string() +
                          " --manifest " + gen.train_manifest_path.string());
  REQUIRE(r2.exit_code == 0);
  REQUIRE(r2.output.find("over 2 samples (1 failed)") != std::string::npos);
}

TEST_CASE("eval handles empty manifests and bad inputs", "[cli]") {
  testutil::TempDir tmp("cli_eval_err");
  const fs::path ckpt = write_identity_checkpoint(tmp / "identity.ckpt");

  json empty{{"version", 1},
             {"split", "test"},
             {"config", synth::config_to_json(desk_synth())},
             {"samples", json::array()}};
  std::ofstream(tmp / "empty.json") << empty.dump();
  const auto r = run_cli("eval --checkpoint " + ckpt.string() + " --manifest " +
                         (tmp / "empty.json").string());
  CAPTURE(r.output);
  REQUIRE(r.exit_code == 0);
  REQUIRE(r.output.find("no samples in manifest (zero_samples=true)") !=
          std::string::npos);

  REQUIRE(run_cli("eval --checkpoint " + ckpt.string() + " --manifest " +
                  (tmp / "no.json").string())
              .exit_code == 2);
  std::ofstream(tmp / "junk.ckpt", std::ios::binary) << "NOTACHECKPOINT";
  REQUIRE(run_cli("eval --checkpoint " + (tmp / "junk.ckpt").string() +
                  " --manifest " + (tmp / "empty.json").string())
              .exit_code == 1);
}

TEST_CASE("DEREFL_OUT_DIR re-roots relative output paths", "[cli]") {
  testutil::TempDir tmp("cli_outdir");
  testutil::TempDir rooted("cli_rooted");
  const fs::path ckpt = write_identity_checkpoint(tmp / "identity.ckpt");
  testutil::write_test_png(tmp / "in.png", 16, 16, 2);
  const std::string env = "DEREFL_OUT_DIR=" + rooted.path().string();

  // Relative --output lands under the root.
  const auto r = run_cli("infer --checkpoint " + ckpt.string() + " --input " +
                             (tmp / "in.png").string() + " --output result.png",
                         env);
  CAPTURE(r.output);
  REQUIRE(r.exit_code == 0);
  REQUIRE(fs::exists(rooted / "result.png"));
  REQUIRE(r.output.find((rooted / "result.png").string()) != std::string::npos);

  // Absolute paths are left alone.
  REQUIRE(run_cli("infer --checkpoint " + ckpt.string() + " --input " +
                      (tmp / "in.png").string() + " --output " +
                      (tmp / "abs.png").string(),
                  env)
              .exit_code == 0);
  REQUIRE(fs::exists(tmp / "abs.png"));
  REQUIRE_FALSE(fs::exists(rooted / "abs.png"));

  // synth: a relative out_dir is created under the root.
  write_sources(tmp.path());
  const fs::path cfg = write_synth_config(tmp.path(), "rel_ds");
  REQUIRE(run_cli("synth --config " + cfg.string(), env).exit_code == 0);
  REQUIRE(fs::exists(rooted / "rel_ds/manifest_train.json"));
}
