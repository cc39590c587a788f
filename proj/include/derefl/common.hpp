#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>

namespace derefl {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

/// Input data is unusable (empty directory, bad manifest, missing sample file).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A read or write on the filesystem failed mid-operation.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Base class for weight/checkpoint file problems. Subclasses distinguish
/// the failure so callers can react (or test) per kind.
struct SerializationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
/// Magic bytes or format version do not match.
struct VersionError : SerializationError {
  using SerializationError::SerializationError;
};
/// File ends before the declared payload does.
struct TruncatedError : SerializationError {
  using SerializationError::SerializationError;
};
/// Stored shapes disagree with the embedded or expected configuration.
struct ShapeError : SerializationError {
  using SerializationError::SerializationError;
};

/// Training aborted (non-finite loss). Carries step/batch context in what().
struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Deterministic randomness
//
// All randomness in the library derives from std::mt19937_64 (whose output
// sequence is fixed by the C++ standard) plus the explicit value mappings
// below. Standard-library distributions are avoided because their sequences
// are implementation-defined.
// ---------------------------------------------------------------------------

using Rng = std::mt19937_64;

namespace rng_stream {
// Stream tags keep independent uses of one master seed from colliding.
inline constexpr std::uint64_t kSample = 1;   // per-sample synthesis draws
inline constexpr std::uint64_t kSplit = 2;    // train/test split shuffle
inline constexpr std::uint64_t kReflPick = 3; // reflection choice per transmission
inline constexpr std::uint64_t kInit = 4;     // network / extractor weight init
inline constexpr std::uint64_t kShuffle = 5;  // per-epoch batch shuffle
}  // namespace rng_stream

/// splitmix64 output function applied to x (standard constants).
inline std::uint64_t sm64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Seed for an (engine) stream: sm64(sm64(seed ^ stream*G) ^ index*C).
/// G and C are the splitmix64/xxhash odd constants. This exact formula is
/// part of the reproducibility contract and is asserted by tests.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream,
                                 std::uint64_t index = 0) {
  return sm64(sm64(seed ^ stream * 0x9E3779B97F4A7C15ULL) ^
              index * 0xC2B2AE3D27D4EB4FULL);
}

/// Uniform double in [0,1): top 53 bits of one engine draw.
inline double uniform01(Rng& g) {
  return static_cast<double>(g() >> 11) * 0x1.0p-53;
}

/// Uniform double in [lo,hi): lo + (hi-lo)*uniform01. lo==hi returns lo.
inline double uniform_in(Rng& g, double lo, double hi) {
  return lo + (hi - lo) * uniform01(g);
}

/// Uniform integer in [0,n): one engine draw reduced modulo n.
/// The modulo mapping is the documented contract (bias is < n/2^64).
inline std::uint64_t uniform_below(Rng& g, std::uint64_t n) {
  return g() % n;
}

/// Standard normal via Box-Muller: sqrt(-2 ln u1) * cos(2 pi u2),
/// u1 in (0,1], u2 in [0,1). Two engine draws per value, none cached.
inline double gaussian(Rng& g) {
  const double u1 = 1.0 - uniform01(g);  // avoid log(0)
  const double u2 = uniform01(g);
  return std::sqrt(-2.0 * std::log(u1)) *
         std::cos(2.0 * 3.14159265358979323846 * u2);
}

// ---------------------------------------------------------------------------
// Atomic file output: write to "<path>.tmp", rename over path on success.
// ---------------------------------------------------------------------------

inline void atomic_write(const std::filesystem::path& path,
                         const std::function<void(const std::filesystem::path&)>& writer) {
  namespace fs = std::filesystem;
  fs::path tmp = path;
  tmp += ".tmp";
  writer(tmp);
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp, ec);
    throw IoError("rename failed for " + path.string());
  }
}

/// FNV-1a 64-bit over a byte range; used as a weight-payload checksum.
inline std::uint64_t fnv1a64(const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001B3ULL;
  }
  return h;
}

}  // namespace derefl
