#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <vector>

#include "derefl/common.hpp"

// Framed binary container shared by network checkpoints and feature-extractor
// weight files:
//
//   bytes 0..7   magic (file kind + format generation)
//   u32          version
//   u64          header length, then that many bytes of JSON (UTF-8)
//   u64          parameter count, then that many float64 values
//
// All integers and floats are little-endian.  Readers raise VersionError for
// an unrecognized magic or an unsupported version number, and TruncatedError
// when the stream ends early.  Bytes after the parameter block are ignored.

namespace derefl::io {

inline constexpr char kCheckpointMagic[8] = {'D', 'R', 'F', 'L',
                                             'C', 'K', 'P', '1'};
inline constexpr char kExtractorMagic[8] = {'D', 'R', 'F', 'L',
                                            'F', 'X', 'W', '1'};

namespace detail {

static_assert(sizeof(double) == 8, "float64 serialization needs 8-byte double");

template <class T>
inline void write_le(std::ostream& out, T value) {
  unsigned char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) {
      std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    }
  }
  out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
inline T read_le(std::istream& in, const char* what) {
  unsigned char buf[sizeof(T)];
  in.read(reinterpret_cast<char*>(buf), sizeof(T));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(T))) {
    throw TruncatedError(std::string("weight file ends inside ") + what);
  }
  if constexpr (std::endian::native == std::endian::big) {
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) {
      std::swap(buf[i], buf[sizeof(T) - 1 - i]);
    }
  }
  T value;
  std::memcpy(&value, buf, sizeof(T));
  return value;
}

}  // namespace detail

inline void write_param_file(std::ostream& out, const char (&magic)[8],
                             std::uint32_t version,
                             const std::string& json_header,
                             const std::vector<double>& params) {
  out.write(magic, 8);
  detail::write_le<std::uint32_t>(out, version);
  detail::write_le<std::uint64_t>(out, json_header.size());
  out.write(json_header.data(),
            static_cast<std::streamsize>(json_header.size()));
  detail::write_le<std::uint64_t>(out, params.size());
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(params.data()),
              static_cast<std::streamsize>(params.size() * sizeof(double)));
  } else {
    for (double p : params) detail::write_le<double>(out, p);
  }
  if (!out) throw IoError("failed to write weight file stream");
}

struct ParamFile {
  std::uint32_t version = 0;
  std::string json_header;
  std::vector<double> params;
};

inline ParamFile read_param_file(std::istream& in, const char (&magic)[8],
                                 std::uint32_t expected_version) {
  char got[8];
  in.read(got, 8);
  if (in.gcount() != 8) throw TruncatedError("weight file shorter than magic");
  if (std::memcmp(got, magic, 8) != 0) {
    throw VersionError("not a recognized weight file (magic mismatch)");
  }
  ParamFile pf;
  pf.version = detail::read_le<std::uint32_t>(in, "version field");
  if (pf.version != expected_version) {
    throw VersionError("weight file version " + std::to_string(pf.version) +
                       " unsupported (expected " +
                       std::to_string(expected_version) + ")");
  }
  const auto json_len = detail::read_le<std::uint64_t>(in, "header length");
  pf.json_header.resize(json_len);
  in.read(pf.json_header.data(), static_cast<std::streamsize>(json_len));
  if (in.gcount() != static_cast<std::streamsize>(json_len)) {
    throw TruncatedError("weight file ends inside JSON header");
  }
  const auto count = detail::read_le<std::uint64_t>(in, "parameter count");
  pf.params.resize(count);
  if constexpr (std::endian::native == std::endian::little) {
    in.read(reinterpret_cast<char*>(pf.params.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (in.gcount() != static_cast<std::streamsize>(count * sizeof(double))) {
      throw TruncatedError("weight file ends inside parameter block");
    }
  } else {
    for (std::uint64_t i = 0; i < count; ++i) {
      pf.params[i] = detail::read_le<double>(in, "parameter block");
    }
  }
  return pf;
}

}  // namespace derefl::io
