#pragma once

#include <cmath>
#include <complex>
#include <memory>
#include <string>
#include <vector>

#include "polyvc/audio.hpp"
#include "polyvc/configfile.hpp"
#include "polyvc/dsp.hpp"

namespace polyvc {

struct VocoderSpec {
  std::string backend_id = "fallback_gl";
  DspConfig dsp;
  int gl_iters = 32;

  void validate() const {
    dsp.validate();
    if (gl_iters < 1) throw ConfigError("vocoder: gl_iters must be positive");
  }
};

/// Neural vocoders live outside this library and plug in here. The bundled
/// fallback reconstructs phase with Griffin-Lim so the pipeline always has a
/// working synthesis path.
class VocoderBackend {
 public:
  virtual ~VocoderBackend() = default;
  virtual std::string id() const = 0;
  virtual AudioClip synthesize(const MelSpectrogram& mel) = 0;
};

namespace detail {

/// Complex STFT with the same centered, reflect-padded framing as the
/// magnitude path, so analysis and synthesis agree on frame count.
inline std::vector<std::vector<std::complex<double>>> stft_complex(const std::vector<float>& x,
                                                                   const DspConfig& cfg) {
  const size_t t_frames = dsp::frame_count(x.size(), cfg.hop_length);
  const size_t bins = static_cast<size_t>(cfg.n_fft) / 2 + 1;
  const std::vector<double> window = dsp::padded_hann(cfg.win_length, cfg.n_fft);
  const int64_t n = static_cast<int64_t>(x.size());
  const int64_t half = cfg.n_fft / 2;

  std::vector<std::vector<std::complex<double>>> out(t_frames);
  std::vector<std::complex<double>> buf(static_cast<size_t>(cfg.n_fft));
  for (size_t t = 0; t < t_frames; ++t) {
    const int64_t start = static_cast<int64_t>(t) * cfg.hop_length - half;
    for (int i = 0; i < cfg.n_fft; ++i) {
      const double s = x[dsp::reflect_index(start + i, n)];
      buf[static_cast<size_t>(i)] = {s * window[static_cast<size_t>(i)], 0.0};
    }
    dsp::fft_inplace(buf, false);
    out[t].assign(buf.begin(), buf.begin() + static_cast<ptrdiff_t>(bins));
  }
  return out;
}

/// Overlap-add inverse STFT with window-square normalization. Undoes the
/// n_fft/2 center padding and returns exactly t_frames * hop samples.
inline std::vector<float> istft(const std::vector<std::vector<std::complex<double>>>& spec,
                                const DspConfig& cfg) {
  const size_t t_frames = spec.size();
  const size_t bins = static_cast<size_t>(cfg.n_fft) / 2 + 1;
  const std::vector<double> window = dsp::padded_hann(cfg.win_length, cfg.n_fft);
  const size_t full = static_cast<size_t>(t_frames - 1) * cfg.hop_length + cfg.n_fft;

  std::vector<double> acc(full, 0.0), wsum(full, 0.0);
  std::vector<std::complex<double>> buf(static_cast<size_t>(cfg.n_fft));
  for (size_t t = 0; t < t_frames; ++t) {
    for (size_t b = 0; b < bins; ++b) buf[b] = spec[t][b];
    for (size_t b = bins; b < static_cast<size_t>(cfg.n_fft); ++b)
      buf[b] = std::conj(spec[t][static_cast<size_t>(cfg.n_fft) - b]);
    dsp::fft_inplace(buf, true);
    const size_t off = t * static_cast<size_t>(cfg.hop_length);
    for (int i = 0; i < cfg.n_fft; ++i) {
      acc[off + static_cast<size_t>(i)] += buf[static_cast<size_t>(i)].real() * window[static_cast<size_t>(i)];
      wsum[off + static_cast<size_t>(i)] += window[static_cast<size_t>(i)] * window[static_cast<size_t>(i)];
    }
  }

  const size_t lead = static_cast<size_t>(cfg.n_fft) / 2;  // center-padding offset
  const size_t want = t_frames * static_cast<size_t>(cfg.hop_length);
  std::vector<float> out(want, 0.0f);
  for (size_t i = 0; i < want && lead + i < full; ++i)
    out[i] = static_cast<float>(acc[lead + i] / std::max(wsum[lead + i], 1e-8));
  return out;
}

}  // namespace detail

/// Griffin-Lim over a least-squares mel inversion. Deterministic: zero phase
/// start, fixed iteration count.
class FallbackVocoder final : public VocoderBackend {
 public:
  explicit FallbackVocoder(const VocoderSpec& spec) : spec_(spec) {
    spec_.validate();
    fb_ = dsp::MelFilterbank::make(spec_.dsp);
    factor_gram();
  }

  std::string id() const override { return "fallback_gl"; }

  AudioClip synthesize(const MelSpectrogram& mel) override {
    if (!mel.params_match(spec_.dsp)) throw ConfigError("vocoder: mel parameters do not match backend");
    if (mel.frames.rows() == 0) throw InsufficientDataError("vocoder: empty mel");
    if (!mel.frames.all_finite()) throw ContractViolation("vocoder: non-finite mel");

    const size_t t_frames = mel.frames.rows();
    const size_t bins = static_cast<size_t>(spec_.dsp.n_fft) / 2 + 1;
    const size_t n_mels = static_cast<size_t>(spec_.dsp.n_mels);

    // log-mel -> mel magnitude -> min-norm linear spectrogram
    MatD mag(t_frames, bins);
    std::vector<double> m(n_mels), z(n_mels);
    for (size_t t = 0; t < t_frames; ++t) {
      for (size_t i = 0; i < n_mels; ++i) m[i] = std::exp(static_cast<double>(mel.frames(t, i)));
      cholesky_solve(m, z);
      for (size_t b = 0; b < bins; ++b) {
        double acc = 0.0;
        for (size_t i = 0; i < n_mels; ++i) acc += fb_.weights(i, b) * z[i];
        mag(t, b) = std::max(0.0, acc);
      }
    }

    // zero-phase start, then iterate analysis/synthesis with phase replacement
    std::vector<std::vector<std::complex<double>>> spec(t_frames,
                                                        std::vector<std::complex<double>>(bins));
    for (size_t t = 0; t < t_frames; ++t)
      for (size_t b = 0; b < bins; ++b) spec[t][b] = {mag(t, b), 0.0};
    std::vector<float> x = detail::istft(spec, spec_.dsp);
    for (int it = 0; it < spec_.gl_iters; ++it) {
      auto cur = detail::stft_complex(x, spec_.dsp);
      for (size_t t = 0; t < t_frames && t < cur.size(); ++t) {
        for (size_t b = 0; b < bins; ++b) {
          const double a = std::abs(cur[t][b]);
          spec[t][b] = a > 1e-12 ? cur[t][b] * (mag(t, b) / a)
                                 : std::complex<double>(mag(t, b), 0.0);
        }
      }
      x = detail::istft(spec, spec_.dsp);
    }

    AudioClip clip;
    clip.sample_rate = spec_.dsp.sample_rate;
    clip.channel_count = 1;
    clip.samples.resize(x.size());
    for (size_t i = 0; i < x.size(); ++i)
      clip.samples[i] = std::max(-1.0f, std::min(1.0f, x[i]));  // hard clamp
    return clip;
  }

 private:
  // FF^T with a tiny ridge, Cholesky-factored once; solving it per frame gives
  // the minimum-norm least-squares mel inversion S = F^T (FF^T)^{-1} m.
  void factor_gram() {
    const size_t n = static_cast<size_t>(spec_.dsp.n_mels);
    const size_t bins = fb_.weights.cols();
    MatD gram(n, n);
    double trace = 0.0;
    for (size_t i = 0; i < n; ++i) {
      for (size_t j = i; j < n; ++j) {
        double acc = 0.0;
        for (size_t b = 0; b < bins; ++b) acc += fb_.weights(i, b) * fb_.weights(j, b);
        gram(i, j) = acc;
        gram(j, i) = acc;
      }
      trace += gram(i, i);
    }
    const double ridge = 1e-10 * trace / static_cast<double>(n);
    for (size_t i = 0; i < n; ++i) gram(i, i) += ridge;

    chol_ = MatD(n, n);
    for (size_t i = 0; i < n; ++i) {
      for (size_t j = 0; j <= i; ++j) {
        double acc = gram(i, j);
        for (size_t k = 0; k < j; ++k) acc -= chol_(i, k) * chol_(j, k);
        if (i == j) {
          if (acc <= 0.0) throw ContractViolation("vocoder: filterbank gram not positive definite");
          chol_(i, i) = std::sqrt(acc);
        } else {
          chol_(i, j) = acc / chol_(j, j);
        }
      }
    }
  }

  void cholesky_solve(const std::vector<double>& rhs, std::vector<double>& out) const {
    const size_t n = rhs.size();
    std::vector<double> y(n);
    for (size_t i = 0; i < n; ++i) {
      double acc = rhs[i];
      for (size_t k = 0; k < i; ++k) acc -= chol_(i, k) * y[k];
      y[i] = acc / chol_(i, i);
    }
    for (size_t i = n; i-- > 0;) {
      double acc = y[i];
      for (size_t k = i + 1; k < n; ++k) acc -= chol_(k, i) * out[k];
      out[i] = acc / chol_(i, i);
    }
  }

  VocoderSpec spec_;
  dsp::MelFilterbank fb_;
  MatD chol_;
};

/// Builds a vocoder from config keys under "vocoder." plus the DSP block.
inline std::unique_ptr<VocoderBackend> create_vocoder(const VocoderSpec& spec) {
  if (spec.backend_id == "fallback_gl") return std::make_unique<FallbackVocoder>(spec);
  throw AdapterError("vocoder backend '" + spec.backend_id +
                     "' is not bundled; neural vocoders attach through the VocoderBackend interface "
                     "(use backend_id=fallback_gl for the built-in Griffin-Lim path)");
}

inline VocoderSpec vocoder_spec_from_config(const KeyValueConfig& cfg, const DspConfig& dsp) {
  VocoderSpec spec;
  spec.backend_id = cfg.get_string("vocoder.backend_id", spec.backend_id);
  spec.gl_iters = static_cast<int>(cfg.get_int("vocoder.gl_iters", spec.gl_iters));
  spec.dsp = dsp;
  spec.validate();
  return spec;
}

/// Adapter entry point: validates the mel against the backend contract and
/// checks the returned audio before handing it on.
inline AudioClip vocode(VocoderBackend& backend, const MelSpectrogram& mel, const VocoderSpec& spec) {
  if (!mel.params_match(spec.dsp)) throw ConfigError("vocode: mel parameters do not match vocoder spec");
  AudioClip clip = backend.synthesize(mel);
  if (clip.sample_rate != spec.dsp.sample_rate)
    throw ContractViolation("vocode: backend returned rate " + std::to_string(clip.sample_rate) +
                            ", expected " + std::to_string(spec.dsp.sample_rate));
  if (clip.samples.empty()) throw ContractViolation("vocode: backend returned no samples");
  for (float s : clip.samples)
    if (!std::isfinite(s)) throw ContractViolation("vocode: backend returned non-finite samples");
  return clip;
}

}  // namespace polyvc
