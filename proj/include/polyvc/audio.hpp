#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "polyvc/common.hpp"

namespace polyvc {

/// Mono audio in [-1, 1]. Multi-channel sources are averaged down on load.
struct AudioClip {
  std::vector<float> samples;
  int sample_rate = 0;
  int channel_count = 1;

  double duration_sec() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

namespace detail {

inline uint32_t read_u32le(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | static_cast<uint32_t>(p[1]) << 8 | static_cast<uint32_t>(p[2]) << 16 |
         static_cast<uint32_t>(p[3]) << 24;
}
inline uint16_t read_u16le(const uint8_t* p) { return static_cast<uint16_t>(p[0] | p[1] << 8); }

}  // namespace detail

/// Reads a RIFF/WAVE file. Supports PCM 16-bit and IEEE float32, any channel
/// count (mixed down to mono by averaging).
inline AudioClip read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open audio file: " + path.string());
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 || std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw IoError("not a RIFF/WAVE file: " + path.string());

  uint16_t format = 0, channels = 0, bits = 0;
  uint32_t rate = 0;
  const uint8_t* data_chunk = nullptr;
  size_t data_size = 0;

  size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const uint8_t* hdr = bytes.data() + pos;
    uint32_t chunk_size = detail::read_u32le(hdr + 4);
    const uint8_t* body = hdr + 8;
    if (pos + 8 + chunk_size > bytes.size()) throw IoError("truncated WAV chunk: " + path.string());
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (chunk_size < 16) throw IoError("malformed fmt chunk: " + path.string());
      format = detail::read_u16le(body);
      channels = detail::read_u16le(body + 2);
      rate = detail::read_u32le(body + 4);
      bits = detail::read_u16le(body + 14);
      if (format == 0xFFFE && chunk_size >= 40) format = detail::read_u16le(body + 24);  // extensible
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      data_chunk = body;
      data_size = chunk_size;
    }
    pos += 8 + chunk_size + (chunk_size & 1);  // chunks are word-aligned
  }

  if (format == 0 || rate == 0 || channels == 0) throw IoError("missing fmt chunk: " + path.string());
  if (!data_chunk) throw IoError("missing data chunk: " + path.string());

  const bool pcm16 = format == 1 && bits == 16;
  const bool f32 = format == 3 && bits == 32;
  if (!pcm16 && !f32)
    throw IoError("unsupported WAV encoding (only PCM16 and float32): " + path.string());

  const size_t bytes_per_sample = pcm16 ? 2 : 4;
  const size_t frame_bytes = bytes_per_sample * channels;
  const size_t n_frames = data_size / frame_bytes;
  if (n_frames == 0) throw InsufficientDataError("zero-length audio: " + path.string());

  AudioClip clip;
  clip.sample_rate = static_cast<int>(rate);
  clip.samples.resize(n_frames);
  for (size_t f = 0; f < n_frames; ++f) {
    double acc = 0.0;
    const uint8_t* frame = data_chunk + f * frame_bytes;
    for (size_t c = 0; c < channels; ++c) {
      if (pcm16) {
        int16_t s;
        std::memcpy(&s, frame + c * 2, 2);
        acc += s / 32768.0;
      } else {
        float s;
        std::memcpy(&s, frame + c * 4, 4);
        acc += s;
      }
    }
    float v = static_cast<float>(acc / channels);
    if (!std::isfinite(v)) throw IoError("non-finite sample in audio file: " + path.string());
    clip.samples[f] = v;
  }
  return clip;
}

inline void write_wav_pcm16(const std::filesystem::path& path, const AudioClip& clip) {
  if (clip.samples.empty()) throw ContractViolation("refusing to write empty audio clip");
  std::vector<uint8_t> out;
  const uint32_t data_size = static_cast<uint32_t>(clip.samples.size() * 2);
  auto push_u32 = [&](uint32_t v) { put_u32(out, v); };
  auto push_u16 = [&](uint16_t v) {
    out.push_back(static_cast<uint8_t>(v));
    out.push_back(static_cast<uint8_t>(v >> 8));
  };
  auto push_tag = [&](const char* t) { out.insert(out.end(), t, t + 4); };

  push_tag("RIFF");
  push_u32(36 + data_size);
  push_tag("WAVE");
  push_tag("fmt ");
  push_u32(16);
  push_u16(1);  // PCM
  push_u16(1);  // mono
  push_u32(static_cast<uint32_t>(clip.sample_rate));
  push_u32(static_cast<uint32_t>(clip.sample_rate) * 2);
  push_u16(2);
  push_u16(16);
  push_tag("data");
  push_u32(data_size);
  for (float s : clip.samples) {
    double clamped = std::min(1.0, std::max(-1.0, static_cast<double>(s)));
    auto q = static_cast<int16_t>(std::lround(clamped * 32767.0));
    push_u16(static_cast<uint16_t>(q));
  }

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write audio file: " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("short write: " + path.string());
}

/// Windowed-sinc resampler. Chosen for determinism; quality is secondary to
/// bit-stable output for fixed inputs.
inline std::vector<float> resample_sinc(const std::vector<float>& x, int src_rate, int dst_rate) {
  if (src_rate <= 0 || dst_rate <= 0) throw ContractViolation("sample rates must be positive");
  if (src_rate == dst_rate) return x;
  if (x.empty()) return {};

  const double ratio = static_cast<double>(dst_rate) / src_rate;
  const double cutoff = std::min(1.0, ratio);  // relative to source Nyquist
  const int zero_crossings = 24;
  const double support = zero_crossings / cutoff;
  const auto n_in = static_cast<int64_t>(x.size());
  const auto n_out = static_cast<int64_t>(n_in * static_cast<int64_t>(dst_rate) / src_rate);

  std::vector<float> y(static_cast<size_t>(n_out));
  const double pi = 3.14159265358979323846;
  for (int64_t j = 0; j < n_out; ++j) {
    const double center = static_cast<double>(j) / ratio;
    const auto lo = static_cast<int64_t>(std::ceil(center - support));
    const auto hi = static_cast<int64_t>(std::floor(center + support));
    double acc = 0.0, wsum = 0.0;
    for (int64_t i = std::max<int64_t>(0, lo); i <= std::min(n_in - 1, hi); ++i) {
      const double t = (static_cast<double>(i) - center) * cutoff;
      const double sinc = t == 0.0 ? 1.0 : std::sin(pi * t) / (pi * t);
      const double u = (static_cast<double>(i) - center) / support;
      const double win = 0.5 + 0.5 * std::cos(pi * u);
      const double w = sinc * win;
      acc += x[static_cast<size_t>(i)] * w;
      wsum += w;
    }
    y[static_cast<size_t>(j)] = wsum > 1e-12 ? static_cast<float>(acc / wsum) : 0.0f;
  }
  return y;
}

inline AudioClip resample_clip(const AudioClip& clip, int target_rate) {
  if (clip.sample_rate == target_rate) return clip;
  AudioClip out;
  out.sample_rate = target_rate;
  out.samples = resample_sinc(clip.samples, clip.sample_rate, target_rate);
  if (out.samples.empty()) throw InsufficientDataError("clip too short to resample");
  return out;
}

/// Loads audio as mono at target_rate, resampling when the source differs.
inline AudioClip load_audio(const std::filesystem::path& path, int target_rate) {
  if (target_rate <= 0) throw ContractViolation("target_rate must be positive");
  AudioClip clip = read_wav(path);
  return resample_clip(clip, target_rate);
}

}  // namespace polyvc
