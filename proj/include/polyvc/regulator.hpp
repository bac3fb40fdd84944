#pragma once

#include <cmath>
#include <cstdint>
#include <string>

#include "polyvc/common.hpp"
#include "polyvc/matrix.hpp"

namespace polyvc {

enum class RegulatorMode { nearest, linear };
enum class RegulatorPlacement { after_encoder, on_input };

inline std::string to_string(RegulatorMode m) { return m == RegulatorMode::nearest ? "nearest" : "linear"; }
inline std::string to_string(RegulatorPlacement p) {
  return p == RegulatorPlacement::after_encoder ? "after_encoder" : "on_input";
}

inline RegulatorMode regulator_mode_from_string(const std::string& s) {
  if (s == "nearest") return RegulatorMode::nearest;
  if (s == "linear") return RegulatorMode::linear;
  throw ConfigError("unknown regulator mode: " + s);
}

inline RegulatorPlacement regulator_placement_from_string(const std::string& s) {
  if (s == "after_encoder") return RegulatorPlacement::after_encoder;
  if (s == "on_input") return RegulatorPlacement::on_input;
  throw ConfigError("unknown regulator placement: " + s);
}

struct RegulatorConfig {
  RegulatorMode mode = RegulatorMode::nearest;
  RegulatorPlacement placement = RegulatorPlacement::after_encoder;
};

/// Number of mel frames the vocoder target should have for a clip of
/// n_samples at feature_rate, with mels hopped at mel_hop samples of
/// mel_rate audio.
inline int64_t target_length(int64_t n_samples, int feature_rate, int mel_hop, int mel_rate) {
  if (n_samples < 1 || feature_rate < 1 || mel_hop < 1 || mel_rate < 1)
    throw ContractViolation("target_length: bad arguments");
  const int64_t num = n_samples * static_cast<int64_t>(mel_rate);
  const int64_t den = static_cast<int64_t>(feature_rate) * mel_hop;
  return std::max<int64_t>(1, (num + den - 1) / den);
}

namespace detail {

template <typename T>
Matrix<T> regulate_impl(const Matrix<T>& src, size_t out_len, RegulatorMode mode) {
  const size_t t_in = src.rows(), dim = src.cols();
  if (t_in == 0) throw InsufficientDataError("regulate: empty input");
  if (out_len == 0) throw ContractViolation("regulate: zero output length");
  if (t_in == out_len) return src;  // identity passthrough, bit-exact

  Matrix<T> out(out_len, dim);
  if (mode == RegulatorMode::nearest) {
    for (size_t j = 0; j < out_len; ++j) {
      const size_t i = j * t_in / out_len;
      std::copy_n(src.row(i), dim, out.row(j));
    }
  } else {
    // endpoint-aligned linear interpolation over the source index axis
    for (size_t j = 0; j < out_len; ++j) {
      const double pos = out_len == 1 ? 0.0
                                      : static_cast<double>(j) * static_cast<double>(t_in - 1) /
                                            static_cast<double>(out_len - 1);
      const size_t j0 = std::min(static_cast<size_t>(pos), t_in - 1);
      const size_t j1 = std::min(j0 + 1, t_in - 1);
      const double frac = pos - static_cast<double>(j0);
      const T* a = src.row(j0);
      const T* b = src.row(j1);
      for (size_t d = 0; d < dim; ++d)
        out(j, d) = static_cast<T>((1.0 - frac) * static_cast<double>(a[d]) +
                                   frac * static_cast<double>(b[d]));
    }
  }
  return out;
}

}  // namespace detail

inline MatF regulate(const MatF& src, size_t out_len, RegulatorMode mode) {
  return detail::regulate_impl(src, out_len, mode);
}
inline MatD regulate(const MatD& src, size_t out_len, RegulatorMode mode) {
  return detail::regulate_impl(src, out_len, mode);
}

/// Scatter-adds output gradients back onto the source rows the regulator read.
inline MatD regulate_backward(const MatD& grad_out, size_t in_len, RegulatorMode mode) {
  const size_t out_len = grad_out.rows(), dim = grad_out.cols();
  MatD grad_in(in_len, dim);
  if (in_len == out_len) {
    grad_in = grad_out;
    return grad_in;
  }
  if (mode == RegulatorMode::nearest) {
    for (size_t j = 0; j < out_len; ++j) {
      const size_t i = j * in_len / out_len;
      for (size_t d = 0; d < dim; ++d) grad_in(i, d) += grad_out(j, d);
    }
  } else {
    for (size_t j = 0; j < out_len; ++j) {
      const double pos = out_len == 1 ? 0.0
                                      : static_cast<double>(j) * static_cast<double>(in_len - 1) /
                                            static_cast<double>(out_len - 1);
      const size_t j0 = std::min(static_cast<size_t>(pos), in_len - 1);
      const size_t j1 = std::min(j0 + 1, in_len - 1);
      const double frac = pos - static_cast<double>(j0);
      for (size_t d = 0; d < dim; ++d) {
        grad_in(j0, d) += (1.0 - frac) * grad_out(j, d);
        grad_in(j1, d) += frac * grad_out(j, d);
      }
    }
  }
  return grad_in;
}

}  // namespace polyvc
