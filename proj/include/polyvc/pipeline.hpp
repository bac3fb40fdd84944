#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "polyvc/acoustic.hpp"
#include "polyvc/checkpoint.hpp"
#include "polyvc/dsp.hpp"
#include "polyvc/features.hpp"
#include "polyvc/manifest.hpp"
#include "polyvc/regulator.hpp"
#include "polyvc/training.hpp"
#include "polyvc/vocoder.hpp"

namespace polyvc {

/// JSON-lines event stream. One object per event; safe to call from worker
/// threads.
class RunLog {
 public:
  explicit RunLog(std::ostream* out) : out_(out) {}

  void event(const std::string& name, nlohmann::json fields = nlohmann::json::object()) {
    if (!out_) return;
    fields["event"] = name;
    std::lock_guard<std::mutex> lock(mu_);
    *out_ << fields.dump() << "\n";
    out_->flush();
  }

 private:
  std::ostream* out_;
  std::mutex mu_;
};

/// Typed view over one key=value config file. Construction validates every
/// block before any audio is touched.
struct PipelineConfig {
  DspConfig dsp;
  AcousticConfig acoustic;
  TrainConfig train;
  RegulatorConfig regulator;
  KeyValueConfig raw;

  static PipelineConfig from_config(const KeyValueConfig& cfg) {
    PipelineConfig p;
    p.raw = cfg;
    p.dsp = DspConfig::from_config(cfg);
    p.acoustic = AcousticConfig::from_config(cfg);
    p.train = TrainConfig::from_config(cfg);
    p.regulator.mode = regulator_mode_from_string(cfg.get_string("pipeline.regulator_mode", "nearest"));
    p.regulator.placement =
        regulator_placement_from_string(cfg.get_string("pipeline.regulator_placement", "after_encoder"));
    if (p.acoustic.n_mels != p.dsp.n_mels)
      throw ConfigError("config: acoustic.n_mels (" + std::to_string(p.acoustic.n_mels) +
                        ") != dsp.n_mels (" + std::to_string(p.dsp.n_mels) + ")");
    return p;
  }

  static PipelineConfig from_file(const std::filesystem::path& path) {
    return from_config(KeyValueConfig::load(path));
  }

  std::unique_ptr<ContentEncoder> make_encoder() const {
    std::unique_ptr<ContentEncoder> enc = create_content_encoder(raw);
    if (enc->feature_dim() != acoustic.input_dim)
      throw ConfigError("config: encoder dim " + std::to_string(enc->feature_dim()) +
                        " != acoustic.input_dim " + std::to_string(acoustic.input_dim));
    return enc;
  }
};

struct ConvertResult {
  std::filesystem::path output;
  size_t feature_frames = 0;
  size_t mel_frames = 0;
  size_t samples = 0;
};

struct BatchFailure {
  std::string utterance_id;
  std::string message;
};

struct BatchReport {
  std::vector<ConvertResult> succeeded;
  std::vector<BatchFailure> failed;
  std::map<std::string, std::filesystem::path> outputs;  // utterance_id -> wav
};

namespace detail {

inline double ms_since(const std::chrono::steady_clock::time_point& t0) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// Conversion engine around one trained checkpoint. The checkpoint carries
/// its own DSP/acoustic/encoder configuration, so the caller supplies audio
/// and nothing else.
class Pipeline {
 public:
  explicit Pipeline(AcousticCheckpoint ckpt, RunLog* log = nullptr)
      : ckpt_(std::move(ckpt)), log_(log) {
    acoustic_ = ckpt_.acoustic_config();
    dsp_ = DspConfig::from_config(ckpt_.config);
    regulator_ = ckpt_.meta.regulator;
    encoder_ = create_content_encoder(ckpt_.config);
    if (encoder_->feature_dim() != acoustic_.input_dim)
      throw ConfigError("checkpoint: encoder dim does not match acoustic input_dim");
    vocoder_spec_ = vocoder_spec_from_config(ckpt_.config, dsp_);
    vocoder_ = create_vocoder(vocoder_spec_);
    inference_seed_ = static_cast<uint64_t>(ckpt_.config.get_int("pipeline.inference_seed", 0));
  }

  const AcousticCheckpoint& checkpoint() const { return ckpt_; }
  const DspConfig& dsp() const { return dsp_; }

  /// Full any-to-one conversion of one clip. Deterministic for a fixed
  /// checkpoint and seed.
  ConvertResult convert(const std::filesystem::path& input_wav, const std::filesystem::path& output_wav,
                        uint64_t seed_salt = 0) {
    const auto t0 = std::chrono::steady_clock::now();
    const AudioClip clip = load_audio(input_wav, encoder_->expected_sample_rate());
    const uint64_t seed = derive_seed(inference_seed_, 0xCF, seed_salt);

    auto stage = std::chrono::steady_clock::now();
    SSLFeatureMatrix feats;
    {
      // encoder backends are not assumed re-entrant
      std::lock_guard<std::mutex> lock(encoder_mu_);
      feats = encoder_->extract(clip);
    }
    const double t_feat = detail::ms_since(stage);

    const int64_t out_len = target_length(static_cast<int64_t>(clip.samples.size()),
                                          encoder_->expected_sample_rate(), dsp_.hop_length,
                                          dsp_.sample_rate);

    stage = std::chrono::steady_clock::now();
    const MatD mel_pred = acoustic_generate(feats.vectors, static_cast<size_t>(out_len), ckpt_.params,
                                            acoustic_, regulator_, DropoutMode::inference, seed);
    const double t_model = detail::ms_since(stage);

    MelSpectrogram mel;
    mel.frames = narrow(mel_pred);
    mel.n_mels = dsp_.n_mels;
    mel.hop_length = dsp_.hop_length;
    mel.win_length = dsp_.win_length;
    mel.n_fft = dsp_.n_fft;
    mel.sample_rate = dsp_.sample_rate;

    stage = std::chrono::steady_clock::now();
    AudioClip out;
    {
      std::lock_guard<std::mutex> lock(vocoder_mu_);
      out = vocode(*vocoder_, mel, vocoder_spec_);
    }
    const double t_voc = detail::ms_since(stage);

    std::filesystem::create_directories(output_wav.parent_path().empty()
                                            ? std::filesystem::path(".")
                                            : output_wav.parent_path());
    write_wav_pcm16(output_wav, out);

    if (log_)
      log_->event("convert", {{"input", input_wav.string()},
                              {"output", output_wav.string()},
                              {"feature_frames", feats.vectors.rows()},
                              {"mel_frames", mel.frames.rows()},
                              {"samples", out.samples.size()},
                              {"ms_features", t_feat},
                              {"ms_acoustic", t_model},
                              {"ms_vocoder", t_voc},
                              {"ms_total", detail::ms_since(t0)}});

    ConvertResult r;
    r.output = output_wav;
    r.feature_frames = feats.vectors.rows();
    r.mel_frames = mel.frames.rows();
    r.samples = out.samples.size();
    return r;
  }

  /// Converts every manifest entry into out_dir/<utterance_id>.wav. Failures
  /// are isolated per entry and reported, never fatal for the batch.
  BatchReport convert_batch(const Manifest& manifest, const std::filesystem::path& out_dir, int jobs = 1) {
    if (manifest.entries.empty()) throw InsufficientDataError("convert_batch: empty manifest");
    if (jobs < 1) throw ConfigError("convert_batch: jobs must be >= 1");
    std::filesystem::create_directories(out_dir);

    BatchReport report;
    std::mutex mu;
    std::atomic<size_t> next{0};

    auto worker = [&]() {
      for (;;) {
        const size_t i = next.fetch_add(1);
        if (i >= manifest.entries.size()) return;
        const ManifestEntry& e = manifest.entries[i];
        const std::filesystem::path out_path = out_dir / (e.utterance_id + ".wav");
        try {
          ConvertResult r =
              convert(manifest.resolve_audio(e), out_path, fnv1a64(e.utterance_id));
          std::lock_guard<std::mutex> lock(mu);
          report.succeeded.push_back(std::move(r));
          report.outputs[e.utterance_id] = out_path;
        } catch (const std::exception& ex) {
          std::lock_guard<std::mutex> lock(mu);
          report.failed.push_back({e.utterance_id, ex.what()});
          if (log_) log_->event("convert_failed", {{"utterance_id", e.utterance_id}, {"error", ex.what()}});
        }
      }
    };

    if (jobs == 1) {
      worker();
    } else {
      std::vector<std::thread> pool;
      for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
      for (auto& t : pool) t.join();
    }
    if (log_)
      log_->event("convert_batch_done",
                  {{"succeeded", report.succeeded.size()}, {"failed", report.failed.size()}});
    return report;
  }

 private:
  AcousticCheckpoint ckpt_;
  RunLog* log_;
  AcousticConfig acoustic_;
  DspConfig dsp_;
  RegulatorConfig regulator_;
  std::unique_ptr<ContentEncoder> encoder_;
  VocoderSpec vocoder_spec_;
  std::unique_ptr<VocoderBackend> vocoder_;
  uint64_t inference_seed_ = 0;
  std::mutex encoder_mu_, vocoder_mu_;
};

}  // namespace polyvc
