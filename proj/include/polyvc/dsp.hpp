#pragma once

#include <cmath>
#include <complex>
#include <vector>

#include "polyvc/audio.hpp"
#include "polyvc/configfile.hpp"
#include "polyvc/matrix.hpp"

namespace polyvc {

/// Spectrogram extraction parameters. Shared verbatim by training, inference
/// and evaluation so mel targets stay bit-stable across the pipeline.
struct DspConfig {
  int sample_rate = 16000;
  int n_fft = 1024;
  int win_length = 1024;
  int hop_length = 320;
  int n_mels = 128;
  double fmin = 0.0;
  double fmax = 8000.0;
  double log_floor = 1e-5;

  void validate() const {
    if (sample_rate <= 0) throw ConfigError("dsp: sample_rate must be positive");
    if (n_mels < 1) throw ConfigError("dsp: n_mels must be >= 1");
    if (!(hop_length >= 1 && hop_length <= win_length && win_length <= n_fft))
      throw ConfigError("dsp: need 1 <= hop_length <= win_length <= n_fft");
    if ((n_fft & (n_fft - 1)) != 0) throw ConfigError("dsp: n_fft must be a power of two");
    if (n_mels > n_fft / 2 + 1) throw ConfigError("dsp: n_mels exceeds spectrum bins");
    if (!(log_floor > 0.0)) throw ConfigError("dsp: log_floor must be positive");
    if (!(fmin >= 0.0 && fmin < fmax && fmax <= sample_rate / 2.0 + 1e-9))
      throw ConfigError("dsp: need 0 <= fmin < fmax <= sample_rate/2");
  }

  void to_config(KeyValueConfig& cfg, const std::string& prefix = "dsp.") const {
    cfg.set_int(prefix + "sample_rate", sample_rate);
    cfg.set_int(prefix + "n_fft", n_fft);
    cfg.set_int(prefix + "win_length", win_length);
    cfg.set_int(prefix + "hop_length", hop_length);
    cfg.set_int(prefix + "n_mels", n_mels);
    cfg.set_double(prefix + "fmin", fmin);
    cfg.set_double(prefix + "fmax", fmax);
    cfg.set_double(prefix + "log_floor", log_floor);
    cfg.set(prefix + "filterbank", "slaney");  // recorded so checkpoints are self-describing
  }

  static DspConfig from_config(const KeyValueConfig& cfg, const std::string& prefix = "dsp.") {
    DspConfig d;
    d.sample_rate = static_cast<int>(cfg.get_int(prefix + "sample_rate"));
    d.n_fft = static_cast<int>(cfg.get_int(prefix + "n_fft", 1024));
    d.win_length = static_cast<int>(cfg.get_int(prefix + "win_length", d.n_fft));
    d.hop_length = static_cast<int>(cfg.get_int(prefix + "hop_length"));
    d.n_mels = static_cast<int>(cfg.get_int(prefix + "n_mels"));
    d.fmin = cfg.get_double(prefix + "fmin", 0.0);
    d.fmax = cfg.get_double(prefix + "fmax", d.sample_rate / 2.0);
    d.log_floor = cfg.get_double(prefix + "log_floor", 1e-5);
    d.validate();
    return d;
  }

  std::string fingerprint_text() const {
    KeyValueConfig cfg;
    to_config(cfg);
    return cfg.serialize();
  }

  friend bool operator==(const DspConfig& a, const DspConfig& b) {
    return a.sample_rate == b.sample_rate && a.n_fft == b.n_fft && a.win_length == b.win_length &&
           a.hop_length == b.hop_length && a.n_mels == b.n_mels && a.fmin == b.fmin && a.fmax == b.fmax &&
           a.log_floor == b.log_floor;
  }
  friend bool operator!=(const DspConfig& a, const DspConfig& b) { return !(a == b); }
};

/// 16 kHz setup: 128 mel bands at a 20 ms hop.
inline DspConfig mel_config_16k() {
  DspConfig d;
  d.sample_rate = 16000;
  d.n_fft = 1024;
  d.win_length = 1024;
  d.hop_length = 320;
  d.n_mels = 128;
  d.fmin = 0.0;
  d.fmax = 8000.0;
  d.log_floor = 1e-5;
  return d;
}

/// 22050 Hz setup: 80 mel bands, 1024 fft/window, 256 hop.
inline DspConfig mel_config_22k() {
  DspConfig d;
  d.sample_rate = 22050;
  d.n_fft = 1024;
  d.win_length = 1024;
  d.hop_length = 256;
  d.n_mels = 80;
  d.fmin = 0.0;
  d.fmax = 11025.0;
  d.log_floor = 1e-5;
  return d;
}

/// Log-mel spectrogram, frames laid out time-major (T x n_mels).
struct MelSpectrogram {
  MatF frames;
  int n_mels = 0;
  int hop_length = 0;
  int win_length = 0;
  int n_fft = 0;
  int sample_rate = 0;

  size_t length() const { return frames.rows(); }

  bool params_match(const DspConfig& d) const {
    return n_mels == d.n_mels && hop_length == d.hop_length && win_length == d.win_length && n_fft == d.n_fft &&
           sample_rate == d.sample_rate;
  }
};

namespace dsp {

// Iterative radix-2 FFT, in place. Size must be a power of two.
inline void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
  const size_t n = a.size();
  if (n == 0 || (n & (n - 1)) != 0) throw ContractViolation("fft size must be a power of two");
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  const double pi = 3.14159265358979323846;
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (size_t k = 0; k < len / 2; ++k) {
        std::complex<double> u = a[i + k];
        std::complex<double> v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
  if (inverse)
    for (auto& v : a) v /= static_cast<double>(n);
}

// Periodic Hann of win_length, zero-padded symmetrically to n_fft.
inline std::vector<double> padded_hann(int win_length, int n_fft) {
  std::vector<double> w(static_cast<size_t>(n_fft), 0.0);
  const double pi = 3.14159265358979323846;
  const int off = (n_fft - win_length) / 2;
  for (int i = 0; i < win_length; ++i)
    w[static_cast<size_t>(off + i)] = 0.5 - 0.5 * std::cos(2.0 * pi * i / win_length);
  return w;
}

// Reflection indexing that stays valid for any signal length >= 1.
inline size_t reflect_index(int64_t i, int64_t n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return static_cast<size_t>(i);
}

inline size_t frame_count(size_t n_samples, int hop) {
  return (n_samples + static_cast<size_t>(hop) - 1) / static_cast<size_t>(hop);
}

/// Magnitude STFT with centered frames and reflection padding; output is
/// frame_count(len, hop) x (n_fft/2 + 1).
inline MatD stft_magnitude(const std::vector<float>& x, const DspConfig& cfg) {
  cfg.validate();
  if (x.empty()) throw InsufficientDataError("stft of empty signal");
  const size_t t_frames = frame_count(x.size(), cfg.hop_length);
  const size_t bins = static_cast<size_t>(cfg.n_fft) / 2 + 1;
  const std::vector<double> window = padded_hann(cfg.win_length, cfg.n_fft);
  const int64_t n = static_cast<int64_t>(x.size());
  const int64_t half = cfg.n_fft / 2;

  MatD mag(t_frames, bins);
  std::vector<std::complex<double>> buf(static_cast<size_t>(cfg.n_fft));
  for (size_t t = 0; t < t_frames; ++t) {
    const int64_t start = static_cast<int64_t>(t) * cfg.hop_length - half;
    for (int i = 0; i < cfg.n_fft; ++i) {
      const double s = x[reflect_index(start + i, n)];
      buf[static_cast<size_t>(i)] = {s * window[static_cast<size_t>(i)], 0.0};
    }
    fft_inplace(buf, false);
    for (size_t b = 0; b < bins; ++b) mag(t, b) = std::abs(buf[b]);
  }
  return mag;
}

inline double hz_to_mel(double hz) {
  constexpr double min_log_hz = 1000.0;
  constexpr double lin_step = 200.0 / 3.0;
  if (hz < min_log_hz) return hz / lin_step;
  const double min_log_mel = min_log_hz / lin_step;
  const double log_step = std::log(6.4) / 27.0;
  return min_log_mel + std::log(hz / min_log_hz) / log_step;
}

inline double mel_to_hz(double mel) {
  constexpr double min_log_hz = 1000.0;
  constexpr double lin_step = 200.0 / 3.0;
  const double min_log_mel = min_log_hz / lin_step;
  if (mel < min_log_mel) return mel * lin_step;
  const double log_step = std::log(6.4) / 27.0;
  return min_log_hz * std::exp(log_step * (mel - min_log_mel));
}

/// Triangular filters on the Slaney mel scale with area normalization;
/// weights is n_mels x (n_fft/2 + 1).
struct MelFilterbank {
  MatD weights;

  static MelFilterbank make(const DspConfig& cfg) {
    cfg.validate();
    const size_t bins = static_cast<size_t>(cfg.n_fft) / 2 + 1;
    const size_t n_mels = static_cast<size_t>(cfg.n_mels);
    std::vector<double> pts(n_mels + 2);
    const double mel_lo = hz_to_mel(cfg.fmin), mel_hi = hz_to_mel(cfg.fmax);
    for (size_t i = 0; i < pts.size(); ++i)
      pts[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * static_cast<double>(i) / static_cast<double>(n_mels + 1));

    MelFilterbank fb;
    fb.weights = MatD(n_mels, bins);
    for (size_t m = 0; m < n_mels; ++m) {
      const double f_lo = pts[m], f_mid = pts[m + 1], f_hi = pts[m + 2];
      const double norm = 2.0 / (f_hi - f_lo);
      for (size_t b = 0; b < bins; ++b) {
        const double f = static_cast<double>(b) * cfg.sample_rate / cfg.n_fft;
        const double up = (f - f_lo) / (f_mid - f_lo);
        const double down = (f_hi - f) / (f_hi - f_mid);
        const double w = std::max(0.0, std::min(up, down));
        fb.weights(m, b) = w * norm;
      }
    }
    return fb;
  }
};

}  // namespace dsp

/// Log-mel extraction: magnitude STFT, mel filterbank, log(max(., log_floor)).
inline MelSpectrogram compute_mel(const AudioClip& clip, const DspConfig& cfg) {
  cfg.validate();
  if (clip.sample_rate != cfg.sample_rate)
    throw ConfigError("compute_mel: clip rate " + std::to_string(clip.sample_rate) + " != config rate " +
                      std::to_string(cfg.sample_rate));
  if (clip.samples.empty()) throw InsufficientDataError("compute_mel: empty clip");

  const MatD mag = dsp::stft_magnitude(clip.samples, cfg);
  const dsp::MelFilterbank fb = dsp::MelFilterbank::make(cfg);
  const size_t t_frames = mag.rows(), bins = mag.cols();

  MelSpectrogram mel;
  mel.n_mels = cfg.n_mels;
  mel.hop_length = cfg.hop_length;
  mel.win_length = cfg.win_length;
  mel.n_fft = cfg.n_fft;
  mel.sample_rate = cfg.sample_rate;
  mel.frames = MatF(t_frames, static_cast<size_t>(cfg.n_mels));
  for (size_t t = 0; t < t_frames; ++t) {
    const double* mrow = mag.row(t);
    for (int m = 0; m < cfg.n_mels; ++m) {
      const double* frow = fb.weights.row(static_cast<size_t>(m));
      double acc = 0.0;
      for (size_t b = 0; b < bins; ++b) acc += frow[b] * mrow[b];
      mel.frames(t, static_cast<size_t>(m)) = static_cast<float>(std::log(std::max(acc, cfg.log_floor)));
    }
  }
  return mel;
}

}  // namespace polyvc
