// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

namespace qvit {

// Error taxonomy. Every failure mode the library reports maps to one of
// these, so callers (and the CLI exit-code mapping) can tell them apart.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape or dimension disagreement.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// Bad numeric value: NaN/Inf where finite is required, out-of-range label,
// non-positive scale, empty calibration sample.
class ValueError : public Error {
 public:
  explicit ValueError(const std::string& msg) : Error(msg) {}
};

// Config file schema violation (unknown key, wrong type, invalid range).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// File cannot be opened/read/written.
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

// Binary container violations (checkpoint, IDX). Subclassed so tests can
// distinguish the three IDX failure modes required to be distinct.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

class BadMagicError : public FormatError {
 public:
  explicit BadMagicError(const std::string& msg) : FormatError(msg) {}
};

class TruncatedError : public FormatError {
 public:
  explicit TruncatedError(const std::string& msg) : FormatError(msg) {}
};

class CountMismatchError : public FormatError {
 public:
  explicit CountMismatchError(const std::string& msg) : FormatError(msg) {}
};

// Round half to even. All quantization rounding goes through here so the
// behaviour is identical everywhere regardless of platform defaults.
inline double round_even(double x) {
  double r = std::nearbyint(x);  // FE_TONEAREST is the untouched default
  return r == 0.0 ? 0.0 : r;     // normalize -0
}

}  // namespace qvit
