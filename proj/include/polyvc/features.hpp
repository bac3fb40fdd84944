#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>

#include "polyvc/audio.hpp"
#include "polyvc/configfile.hpp"
#include "polyvc/matrix.hpp"
#include "polyvc/rng.hpp"

namespace polyvc {

/// Frame-level content representation, one row per encoder frame.
struct SSLFeatureMatrix {
  MatF vectors;               // T x dim
  int dim = 0;
  int frame_hop_samples = 0;  // encoder stride in source samples
  int source_sample_rate = 0;

  size_t length() const { return vectors.rows(); }
};

struct ContentEncoderSpec {
  std::string backend_id;
  int layer_index = 15;
  int expected_dim = 1024;
};

/// Pretrained content encoders are consumed behind this interface. Instances
/// are exclusive-access: callers serialize calls per instance.
class ContentEncoder {
 public:
  virtual ~ContentEncoder() = default;
  virtual std::string id() const = 0;
  virtual int feature_dim() const = 0;
  virtual int frame_hop() const = 0;
  virtual int expected_sample_rate() const = 0;
  virtual SSLFeatureMatrix extract(const AudioClip& clip) = 0;
  /// Stable string identifying the encoder configuration, folded into cache keys.
  virtual std::string fingerprint() const = 0;
};

/// Deterministic stand-in encoder: a fixed random linear projection of
/// non-overlapping audio frames, squashed by tanh. Lets every pipeline stage
/// run and be tested without the real pretrained model.
class SyntheticEncoder final : public ContentEncoder {
 public:
  SyntheticEncoder(int dim, int sample_rate, int hop, uint64_t seed)
      : dim_(dim), sample_rate_(sample_rate), hop_(hop), seed_(seed) {
    if (dim < 1 || sample_rate < 1 || hop < 1) throw ConfigError("synthetic encoder: bad dimensions");
    Rng rng(derive_seed(seed, 0x5e, static_cast<uint64_t>(dim)));
    proj_ = MatD(static_cast<size_t>(dim), static_cast<size_t>(hop));
    const double scale = 3.0 / std::sqrt(static_cast<double>(hop));
    for (size_t i = 0; i < proj_.size(); ++i) proj_.data()[i] = rng.normal() * scale;
  }

  std::string id() const override { return "synthetic"; }
  int feature_dim() const override { return dim_; }
  int frame_hop() const override { return hop_; }
  int expected_sample_rate() const override { return sample_rate_; }

  std::string fingerprint() const override {
    return "synthetic/dim=" + std::to_string(dim_) + "/rate=" + std::to_string(sample_rate_) +
           "/hop=" + std::to_string(hop_) + "/seed=" + std::to_string(seed_);
  }

  SSLFeatureMatrix extract(const AudioClip& clip) override {
    if (clip.sample_rate != sample_rate_)
      throw ConfigError("synthetic encoder expects " + std::to_string(sample_rate_) + " Hz audio, got " +
                        std::to_string(clip.sample_rate));
    const size_t t_frames = clip.samples.size() / static_cast<size_t>(hop_);
    if (t_frames == 0) throw InsufficientDataError("clip shorter than one encoder frame");

    SSLFeatureMatrix f;
    f.dim = dim_;
    f.frame_hop_samples = hop_;
    f.source_sample_rate = sample_rate_;
    f.vectors = MatF(t_frames, static_cast<size_t>(dim_));
    std::vector<double> frame(static_cast<size_t>(hop_));
    for (size_t t = 0; t < t_frames; ++t) {
      for (int i = 0; i < hop_; ++i) frame[static_cast<size_t>(i)] = clip.samples[t * hop_ + i];
      for (int o = 0; o < dim_; ++o) {
        const double* w = proj_.row(static_cast<size_t>(o));
        double acc = 0.0;
        for (int i = 0; i < hop_; ++i) acc += w[i] * frame[static_cast<size_t>(i)];
        f.vectors(t, static_cast<size_t>(o)) = static_cast<float>(std::tanh(acc));
      }
    }
    return f;
  }

 private:
  int dim_, sample_rate_, hop_;
  uint64_t seed_;
  MatD proj_;
};

/// Builds a content encoder from config keys under "encoder.".
inline std::unique_ptr<ContentEncoder> create_content_encoder(const KeyValueConfig& cfg) {
  const std::string backend = cfg.get_string("encoder.backend_id", "synthetic");
  if (backend == "synthetic") {
    const int rate = static_cast<int>(cfg.get_int("encoder.sample_rate", 16000));
    return std::make_unique<SyntheticEncoder>(static_cast<int>(cfg.get_int("encoder.dim", 1024)), rate,
                                              static_cast<int>(cfg.get_int("encoder.hop", rate / 50)),
                                              static_cast<uint64_t>(cfg.get_int("encoder.seed", 7)));
  }
  throw AdapterError("content encoder backend '" + backend +
                     "' is not bundled; external pretrained encoders plug in through the ContentEncoder "
                     "interface (use backend_id=synthetic for a self-contained run)");
}

/// Runs the encoder and validates dim, sample rate and finiteness of its output.
inline SSLFeatureMatrix extract_features(const AudioClip& clip, const ContentEncoderSpec& spec,
                                         ContentEncoder& backend) {
  if (backend.feature_dim() != spec.expected_dim)
    throw ContractViolation("encoder dim " + std::to_string(backend.feature_dim()) + " != expected_dim " +
                            std::to_string(spec.expected_dim));
  if (clip.sample_rate != backend.expected_sample_rate())
    throw ConfigError("encoder expects " + std::to_string(backend.expected_sample_rate()) + " Hz audio");
  SSLFeatureMatrix f = backend.extract(clip);
  if (static_cast<int>(f.vectors.cols()) != spec.expected_dim)
    throw ContractViolation("encoder returned dim " + std::to_string(f.vectors.cols()));
  if (!f.vectors.all_finite()) throw ContractViolation("encoder returned non-finite features");
  return f;
}

/// Zero-mean unit-variance per dimension across the utterance's frames
/// (population statistics). Constant dimensions map to zero.
inline SSLFeatureMatrix standardize_per_utterance(const SSLFeatureMatrix& f) {
  const size_t t_frames = f.vectors.rows(), dim = f.vectors.cols();
  if (t_frames < 2) throw InsufficientDataError("standardize needs at least 2 frames");

  SSLFeatureMatrix out = f;
  for (size_t d = 0; d < dim; ++d) {
    double mean = 0.0;
    for (size_t t = 0; t < t_frames; ++t) mean += f.vectors(t, d);
    mean /= static_cast<double>(t_frames);
    double var = 0.0;
    for (size_t t = 0; t < t_frames; ++t) {
      const double dv = f.vectors(t, d) - mean;
      var += dv * dv;
    }
    var /= static_cast<double>(t_frames);
    const double sd = std::sqrt(var);
    for (size_t t = 0; t < t_frames; ++t)
      out.vectors(t, d) = sd < 1e-12 ? 0.0f : static_cast<float>((f.vectors(t, d) - mean) / sd);
  }
  return out;
}

// ---- binary matrix container ----------------------------------------------
// Header: magic, version, dim, frames, hop, rate as little-endian u32, then
// row-major float32 data. Feature matrices and codebooks share the layout.

inline constexpr uint32_t kMatrixContainerMagic = 0x46435650u;  // "PVCF"
inline constexpr uint32_t kMatrixContainerVersion = 1;

struct MatrixContainer {
  MatF data;  // frames x dim
  uint32_t dim = 0;
  uint32_t frames = 0;
  uint32_t hop = 0;
  uint32_t rate = 0;
};

inline std::vector<uint8_t> serialize_matrix_container(const MatrixContainer& c) {
  std::vector<uint8_t> buf;
  buf.reserve(24 + c.data.size() * 4);
  put_u32(buf, kMatrixContainerMagic);
  put_u32(buf, kMatrixContainerVersion);
  put_u32(buf, c.dim);
  put_u32(buf, c.frames);
  put_u32(buf, c.hop);
  put_u32(buf, c.rate);
  for (size_t i = 0; i < c.data.size(); ++i) put_f32(buf, c.data.data()[i]);
  return buf;
}

inline MatrixContainer parse_matrix_container(const std::vector<uint8_t>& bytes) {
  ByteReader r(bytes);
  if (r.u32() != kMatrixContainerMagic) throw IoError("bad matrix container magic");
  if (r.u32() != kMatrixContainerVersion) throw IoError("unsupported matrix container version");
  MatrixContainer c;
  c.dim = r.u32();
  c.frames = r.u32();
  c.hop = r.u32();
  c.rate = r.u32();
  if (r.remaining() != static_cast<size_t>(c.dim) * c.frames * 4) throw IoError("matrix container size mismatch");
  c.data = MatF(c.frames, c.dim);
  for (size_t i = 0; i < c.data.size(); ++i) c.data.data()[i] = r.f32();
  return c;
}

inline void write_container_file(const std::filesystem::path& path, const std::vector<uint8_t>& bytes) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write: " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("short write: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::vector<uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open: " + path.string());
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void save_features(const std::filesystem::path& path, const SSLFeatureMatrix& f) {
  MatrixContainer c;
  c.data = f.vectors;
  c.dim = static_cast<uint32_t>(f.dim);
  c.frames = static_cast<uint32_t>(f.vectors.rows());
  c.hop = static_cast<uint32_t>(f.frame_hop_samples);
  c.rate = static_cast<uint32_t>(f.source_sample_rate);
  write_container_file(path, serialize_matrix_container(c));
}

inline SSLFeatureMatrix load_features(const std::filesystem::path& path) {
  MatrixContainer c = parse_matrix_container(read_file_bytes(path));
  SSLFeatureMatrix f;
  f.vectors = std::move(c.data);
  f.dim = static_cast<int>(c.dim);
  f.frame_hop_samples = static_cast<int>(c.hop);
  f.source_sample_rate = static_cast<int>(c.rate);
  return f;
}

}  // namespace polyvc
