#pragma once

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "derefl/common.hpp"
#include "derefl/png_io.hpp"
#include "derefl/synthesis.hpp"

namespace derefl::synth {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline json config_to_json(const SynthConfig& cfg) {
  return json{{"alpha_lo", cfg.alpha_lo},
              {"alpha_hi", cfg.alpha_hi},
              {"sigma_lo", cfg.sigma_lo},
              {"sigma_hi", cfg.sigma_hi},
              {"beta_mode", to_string(cfg.beta_mode)},
              {"offset_lo", cfg.offset_lo},
              {"offset_hi", cfg.offset_hi},
              {"noise_std", cfg.noise_std},
              {"patch", cfg.patch},
              {"reflections_per_transmission", cfg.reflections_per_transmission},
              {"split_ratio", cfg.split_ratio},
              {"gamma", cfg.gamma.gamma},
              {"seed", cfg.seed}};
}

inline SynthConfig config_from_json(const json& j) {
  SynthConfig cfg;
  cfg.alpha_lo = j.at("alpha_lo").get<double>();
  cfg.alpha_hi = j.at("alpha_hi").get<double>();
  cfg.sigma_lo = j.at("sigma_lo").get<double>();
  cfg.sigma_hi = j.at("sigma_hi").get<double>();
  cfg.beta_mode = beta_mode_from_string(j.at("beta_mode").get<std::string>());
  cfg.offset_lo = j.at("offset_lo").get<int>();
  cfg.offset_hi = j.at("offset_hi").get<int>();
  cfg.noise_std = j.at("noise_std").get<double>();
  cfg.patch = j.at("patch").get<int>();
  cfg.reflections_per_transmission = j.at("reflections_per_transmission").get<int>();
  cfg.split_ratio = j.at("split_ratio").get<double>();
  cfg.gamma.gamma = j.at("gamma").get<double>();
  cfg.seed = j.at("seed").get<std::uint64_t>();
  return cfg;
}

struct ManifestSample {
  std::uint64_t id = 0;
  std::string mixture_path;  // relative to the manifest's directory
  std::string target_path;
  std::string transmission_src;
  std::string reflection_src;
  double alpha = 0.0;
  double sigma = 0.0;
  int offset_dy = 0;
  int offset_dx = 0;
  std::string mode;
};

struct Manifest {
  int version = 1;
  std::string split;  // "train" or "test"
  SynthConfig config;
  std::vector<ManifestSample> samples;
  fs::path dir;  // directory the manifest was written to / read from

  fs::path resolve(const std::string& rel) const { return dir / rel; }
};

inline json manifest_to_json(const Manifest& m) {
  json samples = json::array();
  for (const auto& s : m.samples) {
    samples.push_back(json{{"id", s.id},
                           {"mixture_path", s.mixture_path},
                           {"target_path", s.target_path},
                           {"transmission_src", s.transmission_src},
                           {"reflection_src", s.reflection_src},
                           {"alpha", s.alpha},
                           {"sigma", s.sigma},
                           {"offsets", json::array({s.offset_dy, s.offset_dx})},
                           {"mode", s.mode}});
  }
  return json{{"version", m.version},
              {"split", m.split},
              {"config", config_to_json(m.config)},
              {"samples", samples}};
}

inline Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("manifest parse error in " + path.string() + ": " + e.what());
  }
  Manifest m;
  try {
    m.version = j.at("version").get<int>();
    if (m.version != 1) throw DataError("unsupported manifest version in " + path.string());
    m.split = j.at("split").get<std::string>();
    m.config = config_from_json(j.at("config"));
    for (const auto& js : j.at("samples")) {
      ManifestSample s;
      s.id = js.at("id").get<std::uint64_t>();
      s.mixture_path = js.at("mixture_path").get<std::string>();
      s.target_path = js.at("target_path").get<std::string>();
      s.transmission_src = js.at("transmission_src").get<std::string>();
      s.reflection_src = js.at("reflection_src").get<std::string>();
      s.alpha = js.at("alpha").get<double>();
      s.sigma = js.at("sigma").get<double>();
      s.offset_dy = js.at("offsets").at(0).get<int>();
      s.offset_dx = js.at("offsets").at(1).get<int>();
      s.mode = js.at("mode").get<std::string>();
      m.samples.push_back(std::move(s));
    }
  } catch (const json::exception& e) {
    throw DataError("manifest field error in " + path.string() + ": " + e.what());
  }
  m.dir = path.parent_path();
  return m;
}

struct GenerateResult {
  fs::path train_manifest_path;
  fs::path test_manifest_path;
  Manifest train;
  Manifest test;
};

namespace detail {

inline std::vector<fs::path> list_pngs(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) throw DataError("not a directory: " + dir.string());
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// Reflection picks for one transmission image: without replacement when the
/// pool is large enough (partial Fisher-Yates), with replacement otherwise.
inline std::vector<std::size_t> pick_reflections(std::size_t pool, int count,
                                                 std::uint64_t seed,
                                                 std::uint64_t t_idx) {
  Rng rng(derive_seed(seed, rng_stream::kReflPick, t_idx));
  std::vector<std::size_t> picks;
  picks.reserve(count);
  if (pool >= static_cast<std::size_t>(count)) {
    std::vector<std::size_t> ids(pool);
    for (std::size_t i = 0; i < pool; ++i) ids[i] = i;
    for (int j = 0; j < count; ++j) {
      const std::size_t k = j + uniform_below(rng, pool - j);
      std::swap(ids[j], ids[k]);
      picks.push_back(ids[j]);
    }
  } else {
    for (int j = 0; j < count; ++j) picks.push_back(uniform_below(rng, pool));
  }
  return picks;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// generate_dataset: every transmission image is paired with
// reflections_per_transmission reflection images; the train/test split is by
// transmission image (ids never straddle the splits). The split permutation
// comes from Rng(derive_seed(seed, kSplit)) by Fisher-Yates over the sorted
// transmission list; the first round(split_ratio * T) entries train.
// Output: out_dir/images/{mix,tgt}_NNNNNN.png plus manifest_train.json and
// manifest_test.json. Fully determined by (inputs, cfg).
// ---------------------------------------------------------------------------
inline GenerateResult generate_dataset(const fs::path& transmission_dir,
                                       const fs::path& reflection_dir,
                                       const SynthConfig& cfg, const fs::path& out_dir) {
  cfg.validate();
  const auto t_files = detail::list_pngs(transmission_dir);
  const auto r_files = detail::list_pngs(reflection_dir);
  if (t_files.empty()) throw DataError("no PNG files in " + transmission_dir.string());
  if (r_files.empty()) throw DataError("no PNG files in " + reflection_dir.string());

  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec || !fs::is_directory(out_dir / "images")) {
    throw IoError("cannot create output directory " + (out_dir / "images").string());
  }

  // Split by transmission image.
  const std::size_t t_count = t_files.size();
  std::vector<std::size_t> order(t_count);
  for (std::size_t i = 0; i < t_count; ++i) order[i] = i;
  {
    Rng rng(derive_seed(cfg.seed, rng_stream::kSplit));
    for (std::size_t i = t_count - 1; i > 0; --i) {
      const std::size_t j = uniform_below(rng, i + 1);
      std::swap(order[i], order[j]);
    }
  }
  const auto n_train = static_cast<std::size_t>(
      std::floor(cfg.split_ratio * static_cast<double>(t_count) + 0.5));
  std::vector<bool> in_train(t_count, false);
  for (std::size_t i = 0; i < std::min(n_train, t_count); ++i) in_train[order[i]] = true;

  Manifest train, test;
  train.split = "train";
  test.split = "test";
  train.config = test.config = cfg;
  train.dir = test.dir = out_dir;

  std::map<std::size_t, EncodedImage> r_cache;
  char name[64];
  for (std::size_t t_idx = 0; t_idx < t_count; ++t_idx) {
    const EncodedImage t_img = read_png(t_files[t_idx].string());
    const auto picks = detail::pick_reflections(r_files.size(),
                                                cfg.reflections_per_transmission,
                                                cfg.seed, t_idx);
    for (int j = 0; j < cfg.reflections_per_transmission; ++j) {
      const std::uint64_t index =
          static_cast<std::uint64_t>(t_idx) * cfg.reflections_per_transmission + j;
      const std::size_t r_idx = picks[j];
      auto it = r_cache.find(r_idx);
      if (it == r_cache.end()) {
        it = r_cache.emplace(r_idx, read_png(r_files[r_idx].string())).first;
      }
      SamplePair pair = synthesize_pair(t_img, it->second, cfg, index);

      std::snprintf(name, sizeof(name), "images/mix_%06llu.png",
                    static_cast<unsigned long long>(index));
      const std::string mix_rel = name;
      std::snprintf(name, sizeof(name), "images/tgt_%06llu.png",
                    static_cast<unsigned long long>(index));
      const std::string tgt_rel = name;
      write_png_atomic((out_dir / mix_rel).string(), pair.mixture);
      write_png_atomic((out_dir / tgt_rel).string(), pair.target);

      ManifestSample s;
      s.id = index;
      s.mixture_path = mix_rel;
      s.target_path = tgt_rel;
      s.transmission_src = t_files[t_idx].filename().string();
      s.reflection_src = r_files[r_idx].filename().string();
      s.alpha = pair.provenance.alpha;
      s.sigma = pair.provenance.sigma;
      s.offset_dy = pair.provenance.offset_dy;
      s.offset_dx = pair.provenance.offset_dx;
      s.mode = to_string(cfg.beta_mode);
      (in_train[t_idx] ? train : test).samples.push_back(std::move(s));
    }
  }

  GenerateResult result;
  result.train_manifest_path = out_dir / "manifest_train.json";
  result.test_manifest_path = out_dir / "manifest_test.json";
  for (auto* m : {&train, &test}) {
    const fs::path path =
        m->split == "train" ? result.train_manifest_path : result.test_manifest_path;
    atomic_write(path, [&](const fs::path& tmp) {
      std::ofstream out(tmp);
      if (!out) throw IoError("cannot write manifest " + path.string());
      out << manifest_to_json(*m).dump(2) << "\n";
    });
  }
  result.train = std::move(train);
  result.test = std::move(test);
  return result;
}

}  // namespace derefl::synth
