// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>

namespace dispro {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MatD = Mat<double>;

enum class Modality : std::uint8_t { Pathology = 0, Genomics = 1 };

inline constexpr Modality other(Modality m) {
  return m == Modality::Pathology ? Modality::Genomics : Modality::Pathology;
}

// short tag used in parameter names and CLI flags
inline constexpr std::string_view tag(Modality m) {
  return m == Modality::Pathology ? "p" : "g";
}

inline constexpr std::string_view name(Modality m) {
  return m == Modality::Pathology ? "pathology" : "genomics";
}

enum class ErrorCode {
  InvalidArgument,
  ShapeMismatch,
  Io,
  Format,
  State,
  NoComparablePairs,
};

inline constexpr std::string_view to_string(ErrorCode c) {
  switch (c) {
    case ErrorCode::InvalidArgument: return "invalid_argument";
    case ErrorCode::ShapeMismatch: return "shape_mismatch";
    case ErrorCode::Io: return "io";
    case ErrorCode::Format: return "format";
    case ErrorCode::State: return "state";
    case ErrorCode::NoComparablePairs: return "no_comparable_pairs";
  }
  return "unknown";
}

/// Every failure raised by the library. The code is stable and is what the
/// CLI reports in its machine-readable error record.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline void require(bool ok, ErrorCode code, const std::string& msg) {
  if (!ok) throw Error(code, msg);
}

// literal messages stay unallocated on the success path
inline void require(bool ok, ErrorCode code, const char* msg) {
  if (!ok) throw Error(code, msg);
}

}  // namespace dispro
