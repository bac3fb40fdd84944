#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "polyvc/acoustic.hpp"
#include "polyvc/checkpoint.hpp"
#include "polyvc/dsp.hpp"
#include "polyvc/features.hpp"
#include "polyvc/manifest.hpp"
#include "polyvc/regulator.hpp"

namespace polyvc {

struct TrainConfig {
  int batch_size = 32;
  int64_t max_steps = 200000;
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  int64_t warmup_steps = 4000;
  uint64_t seed = 0;
  double grad_clip_norm = 1.0;  // global norm; 0 disables clipping
  std::string phase = "standard";
  std::string schedule = "warmup_linear";
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double data_budget_hours = 0.0;  // 0 disables the budget

  void validate() const {
    if (batch_size < 1) throw ConfigError("train: batch_size must be positive");
    if (max_steps < 0) throw ConfigError("train: max_steps must be >= 0");
    if (!(learning_rate > 0.0)) throw ConfigError("train: learning_rate must be positive");
    if (weight_decay < 0.0) throw ConfigError("train: weight_decay must be >= 0");
    if (warmup_steps < 0) throw ConfigError("train: warmup_steps must be >= 0");
    if (grad_clip_norm < 0.0) throw ConfigError("train: grad_clip_norm must be >= 0");
    if (phase != "standard" && phase != "pretrain" && phase != "finetune")
      throw ConfigError("train: unknown phase '" + phase + "'");
    if (schedule != "warmup_linear" && schedule != "constant")
      throw ConfigError("train: unknown schedule '" + schedule + "'");
    if (schedule == "warmup_linear" && warmup_steps > max_steps)
      throw ConfigError("train: warmup_steps cannot exceed max_steps");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw ConfigError("train: betas must lie in [0, 1)");
    if (!(adam_eps > 0.0)) throw ConfigError("train: adam_eps must be positive");
    if (data_budget_hours < 0.0) throw ConfigError("train: data_budget_hours must be >= 0");
  }

  void to_config(KeyValueConfig& cfg) const {
    cfg.set_int("train.batch_size", batch_size);
    cfg.set_int("train.max_steps", max_steps);
    cfg.set_double("train.learning_rate", learning_rate);
    cfg.set_double("train.weight_decay", weight_decay);
    cfg.set_int("train.warmup_steps", warmup_steps);
    cfg.set_int("train.seed", static_cast<int64_t>(seed));
    cfg.set_double("train.grad_clip_norm", grad_clip_norm);
    cfg.set("train.phase", phase);
    cfg.set("train.schedule", schedule);
    cfg.set_double("train.beta1", beta1);
    cfg.set_double("train.beta2", beta2);
    cfg.set_double("train.adam_eps", adam_eps);
    cfg.set_double("train.data_budget_hours", data_budget_hours);
  }

  static TrainConfig from_config(const KeyValueConfig& cfg) {
    TrainConfig t;
    t.batch_size = static_cast<int>(cfg.get_int("train.batch_size", t.batch_size));
    t.max_steps = cfg.get_int("train.max_steps", t.max_steps);
    t.learning_rate = cfg.get_double("train.learning_rate", t.learning_rate);
    t.weight_decay = cfg.get_double("train.weight_decay", t.weight_decay);
    t.warmup_steps = cfg.get_int("train.warmup_steps", t.warmup_steps);
    t.seed = static_cast<uint64_t>(cfg.get_int("train.seed", 0));
    t.grad_clip_norm = cfg.get_double("train.grad_clip_norm", t.grad_clip_norm);
    t.phase = cfg.get_string("train.phase", t.phase);
    t.schedule = cfg.get_string("train.schedule", t.schedule);
    t.beta1 = cfg.get_double("train.beta1", t.beta1);
    t.beta2 = cfg.get_double("train.beta2", t.beta2);
    t.adam_eps = cfg.get_double("train.adam_eps", t.adam_eps);
    t.data_budget_hours = cfg.get_double("train.data_budget_hours", t.data_budget_hours);
    t.validate();
    return t;
  }
};

// ---- loss -------------------------------------------------------------------

/// Mean absolute difference over every element.
inline double l1_mel_loss(const MatD& pred, const MatD& target) {
  if (!pred.same_shape(target)) throw ContractViolation("l1 loss: shape mismatch");
  if (pred.empty()) throw ContractViolation("l1 loss: empty input");
  double acc = 0.0;
  for (size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred.data()[i] - target.data()[i]);
  return acc / static_cast<double>(pred.size());
}

/// Batch L1 over zero-padded entries: only the first lengths[b] rows of each
/// entry count. Padding content never influences the value.
inline double masked_l1_loss(const std::vector<MatD>& pred, const std::vector<MatD>& target,
                             const std::vector<size_t>& lengths) {
  if (pred.size() != target.size() || pred.size() != lengths.size())
    throw ContractViolation("masked l1: batch size mismatch");
  if (pred.empty()) throw ContractViolation("masked l1: empty batch");
  double acc = 0.0;
  size_t count = 0;
  for (size_t b = 0; b < pred.size(); ++b) {
    if (!pred[b].same_shape(target[b])) throw ContractViolation("masked l1: entry shape mismatch");
    if (lengths[b] > pred[b].rows()) throw ContractViolation("masked l1: length exceeds rows");
    const size_t cols = pred[b].cols();
    for (size_t t = 0; t < lengths[b]; ++t) {
      const double* pr = pred[b].row(t);
      const double* tr = target[b].row(t);
      for (size_t c = 0; c < cols; ++c) acc += std::abs(pr[c] - tr[c]);
    }
    count += lengths[b] * cols;
  }
  if (count == 0) throw ContractViolation("masked l1: no valid frames");
  return acc / static_cast<double>(count);
}

// ---- schedule ---------------------------------------------------------------

/// Linear ramp from 0 over the warmup, then linear decay to 0 at max_steps.
/// Valid for steps 0..max_steps inclusive.
inline double lr_at_step(int64_t step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.max_steps) throw ContractViolation("lr_at_step: step out of range");
  if (cfg.schedule == "constant") return cfg.learning_rate;
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
    return cfg.learning_rate * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  if (cfg.max_steps == cfg.warmup_steps) return cfg.learning_rate;
  return cfg.learning_rate * static_cast<double>(cfg.max_steps - step) /
         static_cast<double>(cfg.max_steps - cfg.warmup_steps);
}

// ---- optimizer --------------------------------------------------------------

struct AdamWScalarState {
  double m = 0.0;
  double v = 0.0;
};

/// One decoupled-weight-decay Adam update on a single scalar. t counts from 1.
inline double adamw_update_scalar(double param, double grad, AdamWScalarState& st, int64_t t, double lr,
                                  const TrainConfig& cfg) {
  if (t < 1) throw ContractViolation("adamw: step index counts from 1");
  st.m = cfg.beta1 * st.m + (1.0 - cfg.beta1) * grad;
  st.v = cfg.beta2 * st.v + (1.0 - cfg.beta2) * grad * grad;
  const double m_hat = st.m / (1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
  const double v_hat = st.v / (1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
  return param - lr * (m_hat / (std::sqrt(v_hat) + cfg.adam_eps) + cfg.weight_decay * param);
}

struct AdamWState {
  AcousticParams m, v;
  int64_t t = 0;

  static AdamWState init(const AcousticParams& params) {
    AdamWState s;
    s.m = zero_like(params);
    s.v = zero_like(params);
    return s;
  }
};

inline double global_grad_norm(const AcousticParams& grads) {
  double acc = 0.0;
  grads.for_each_tensor([&](const std::string&, const MatD& g) {
    for (size_t i = 0; i < g.size(); ++i) acc += g.data()[i] * g.data()[i];
  });
  return std::sqrt(acc);
}

inline void clip_grads(AcousticParams& grads, double max_norm) {
  if (max_norm <= 0.0) return;
  const double norm = global_grad_norm(grads);
  if (norm <= max_norm) return;
  const double scale = max_norm / norm;
  grads.for_each_tensor([&](const std::string&, MatD& g) {
    for (size_t i = 0; i < g.size(); ++i) g.data()[i] *= scale;
  });
}

inline void adamw_step(AcousticParams& params, const AcousticParams& grads, AdamWState& st, double lr,
                       const TrainConfig& cfg) {
  ++st.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));

  std::vector<MatD*> ps, ms, vs;
  std::vector<const MatD*> gs;
  params.for_each_tensor([&](const std::string&, MatD& m) { ps.push_back(&m); });
  grads.for_each_tensor([&](const std::string&, const MatD& m) { gs.push_back(&m); });
  st.m.for_each_tensor([&](const std::string&, MatD& m) { ms.push_back(&m); });
  st.v.for_each_tensor([&](const std::string&, MatD& m) { vs.push_back(&m); });

  for (size_t k = 0; k < ps.size(); ++k) {
    MatD& p = *ps[k];
    const MatD& g = *gs[k];
    MatD& m = *ms[k];
    MatD& v = *vs[k];
    if (!p.same_shape(g)) throw ContractViolation("adamw: grad shape mismatch");
    for (size_t i = 0; i < p.size(); ++i) {
      const double gi = g.data()[i];
      m.data()[i] = cfg.beta1 * m.data()[i] + (1.0 - cfg.beta1) * gi;
      v.data()[i] = cfg.beta2 * v.data()[i] + (1.0 - cfg.beta2) * gi * gi;
      const double m_hat = m.data()[i] / bc1;
      const double v_hat = v.data()[i] / bc2;
      p.data()[i] -= lr * (m_hat / (std::sqrt(v_hat) + cfg.adam_eps) + cfg.weight_decay * p.data()[i]);
    }
  }
}

// ---- feature cache ------------------------------------------------------------

struct CachedUtterance {
  std::filesystem::path features;
  std::filesystem::path mel;
};

struct FeatureCacheResult {
  std::map<std::string, CachedUtterance> entries;  // by utterance_id
  size_t built = 0;
  size_t reused = 0;
  std::string fingerprint;
};

/// Extracts content features and target mels for every manifest entry into
/// cache_dir. Reuses files from previous runs when the encoder/DSP
/// configuration fingerprint matches; otherwise rebuilds everything.
inline FeatureCacheResult cache_features(const Manifest& man, ContentEncoder& enc, const DspConfig& dsp,
                                         const std::filesystem::path& cache_dir,
                                         std::ostream* log = nullptr) {
  std::filesystem::create_directories(cache_dir);
  const std::string fp = hex64(fnv1a64(enc.fingerprint() + "|" + dsp.fingerprint_text()));
  const std::filesystem::path index_path = cache_dir / "index.json";

  nlohmann::json index;
  bool fresh = true;
  if (std::filesystem::exists(index_path)) {
    try {
      std::ifstream in(index_path);
      in >> index;
      fresh = !(index.contains("fingerprint") && index["fingerprint"] == fp);
    } catch (...) {
      fresh = true;  // unreadable index, rebuild
    }
  }
  if (fresh) {
    index = nlohmann::json::object();
    index["fingerprint"] = fp;
    index["entries"] = nlohmann::json::object();
  }

  FeatureCacheResult result;
  result.fingerprint = fp;
  auto& jentries = index["entries"];

  for (const auto& e : man.entries) {
    const std::string stem = hex64(fnv1a64(e.utterance_id));
    const std::filesystem::path feat_path = cache_dir / (stem + ".feat");
    const std::filesystem::path mel_path = cache_dir / (stem + ".mel");
    const bool have = jentries.contains(e.utterance_id) && std::filesystem::exists(feat_path) &&
                      std::filesystem::exists(mel_path);
    if (have) {
      ++result.reused;
    } else {
      const AudioClip for_enc = load_audio(man.resolve_audio(e), enc.expected_sample_rate());
      const SSLFeatureMatrix feats = enc.extract(for_enc);
      save_features(feat_path, feats);

      const AudioClip for_mel = load_audio(man.resolve_audio(e), dsp.sample_rate);
      const MelSpectrogram mel = compute_mel(for_mel, dsp);
      MatrixContainer c;
      c.data = mel.frames;
      c.dim = static_cast<uint32_t>(dsp.n_mels);
      c.frames = static_cast<uint32_t>(mel.frames.rows());
      c.hop = static_cast<uint32_t>(dsp.hop_length);
      c.rate = static_cast<uint32_t>(dsp.sample_rate);
      write_container_file(mel_path, serialize_matrix_container(c));

      jentries[e.utterance_id] = {{"features", feat_path.filename().string()},
                                  {"mel", mel_path.filename().string()},
                                  {"feature_frames", feats.vectors.rows()},
                                  {"mel_frames", mel.frames.rows()}};
      ++result.built;
      if (log) *log << "cached " << e.utterance_id << "\n";
    }
    result.entries[e.utterance_id] = CachedUtterance{feat_path, mel_path};
  }

  std::ofstream out(index_path, std::ios::trunc);
  if (!out) throw IoError("cannot write cache index: " + index_path.string());
  out << index.dump(2) << "\n";
  return result;
}

// ---- training loop ------------------------------------------------------------

struct TrainResult {
  AcousticCheckpoint checkpoint;
  std::vector<double> loss_history;  // one masked L1 value per step
};

struct TrainJob {
  Manifest manifest;
  DspConfig dsp;
  AcousticConfig acoustic;
  RegulatorConfig regulator;
  TrainConfig train;
  std::filesystem::path cache_dir;
  ContentEncoder* encoder = nullptr;
  const AcousticCheckpoint* parent = nullptr;       // finetune warm start
  KeyValueConfig extra_config;                      // carried into the checkpoint
  std::ostream* log = nullptr;
};

namespace detail {

struct TrainItem {
  std::string id;
  MatF features;
  MatD teacher;
};

inline Manifest apply_data_budget(const Manifest& man, double budget_hours, std::ostream* log) {
  if (budget_hours <= 0.0) return man;
  std::vector<size_t> order(man.entries.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return man.entries[a].duration_sec < man.entries[b].duration_sec;
  });
  Manifest out;
  out.source_path = man.source_path;
  double acc = 0.0;
  const double budget_sec = budget_hours * 3600.0;
  for (size_t i : order) {
    if (acc + man.entries[i].duration_sec > budget_sec) break;  // sorted, nothing later fits either
    out.entries.push_back(man.entries[i]);
    acc += man.entries[i].duration_sec;
  }
  if (out.entries.empty()) throw InsufficientDataError("data budget admits no utterances");
  if (log)
    *log << "data budget " << budget_hours << "h: kept " << out.entries.size() << "/"
         << man.entries.size() << " utterances (" << acc / 3600.0 << "h)\n";
  return out;
}

}  // namespace detail

/// Shared loop behind the three phases. Bucket batches by target length,
/// teacher-force each utterance, average masked L1, AdamW with the linear
/// warmup/decay schedule.
inline TrainResult run_training(const TrainJob& job) {
  job.train.validate();
  job.acoustic.validate();
  job.dsp.validate();
  if (!job.encoder) throw ContractViolation("run_training: no content encoder");
  if (job.manifest.entries.empty()) throw InsufficientDataError("run_training: empty manifest");

  Manifest man = job.manifest;

  // phase preconditions
  if (job.train.phase == "standard") {
    if (man.speakers().size() != 1)
      throw ConfigError("standard training expects a single-speaker manifest, got " +
                        std::to_string(man.speakers().size()) + " speakers");
  } else if (job.train.phase == "pretrain") {
    if (job.log && man.languages().size() > 1) {
      *job.log << "pretrain: mixing " << man.languages().size() << " languages (";
      bool first = true;
      for (const auto& l : man.languages()) {
        if (!first) *job.log << ", ";
        *job.log << l;
        first = false;
      }
      *job.log << ")\n";
    }
  } else {  // finetune
    if (!job.parent) throw ConfigError("finetune requires a parent checkpoint");
    const AcousticConfig parent_cfg = job.parent->acoustic_config();
    if (parent_cfg != job.acoustic)
      throw ConfigError("finetune: acoustic config does not match the parent checkpoint");
    if (man.speakers().size() != 1)
      throw ConfigError("finetune expects a single-speaker manifest");
    man = detail::apply_data_budget(man, job.train.data_budget_hours, job.log);
  }

  const FeatureCacheResult cache = cache_features(man, *job.encoder, job.dsp, job.cache_dir, job.log);

  std::vector<detail::TrainItem> items;
  items.reserve(man.entries.size());
  for (const auto& e : man.entries) {
    const CachedUtterance& cu = cache.entries.at(e.utterance_id);
    detail::TrainItem item;
    item.id = e.utterance_id;
    item.features = load_features(cu.features).vectors;
    item.teacher = widen(parse_matrix_container(read_file_bytes(cu.mel)).data);
    items.push_back(std::move(item));
  }

  AcousticParams params =
      job.parent ? job.parent->params : init_acoustic_params(job.acoustic, job.train.seed);
  AdamWState opt = AdamWState::init(params);
  TrainResult result;

  // length-bucketed batches: sort by teacher length, chunk, shuffle chunk order
  std::vector<size_t> by_len(items.size());
  std::iota(by_len.begin(), by_len.end(), size_t{0});
  std::stable_sort(by_len.begin(), by_len.end(),
                   [&](size_t a, size_t b) { return items[a].teacher.rows() < items[b].teacher.rows(); });
  const size_t bsz = static_cast<size_t>(job.train.batch_size);
  std::vector<std::vector<size_t>> batches;
  for (size_t i = 0; i < by_len.size(); i += bsz) {
    std::vector<size_t> b(by_len.begin() + static_cast<ptrdiff_t>(i),
                          by_len.begin() + static_cast<ptrdiff_t>(std::min(i + bsz, by_len.size())));
    batches.push_back(std::move(b));
  }
  std::vector<size_t> batch_order(batches.size());

  for (int64_t step = 0; step < job.train.max_steps; ++step) {
    const size_t epoch = static_cast<size_t>(step) / batches.size();
    const size_t slot = static_cast<size_t>(step) % batches.size();
    if (slot == 0) {
      std::iota(batch_order.begin(), batch_order.end(), size_t{0});
      Rng shuffle_rng(derive_seed(job.train.seed, 0xB5, epoch));
      for (size_t i = batch_order.size(); i > 1; --i)
        std::swap(batch_order[i - 1],
                  batch_order[static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1))]);
    }
    const std::vector<size_t>& batch = batches[batch_order[slot]];

    const double lr = lr_at_step(step + 1, job.train);
    AcousticParams grads = zero_like(params);
    double loss_acc = 0.0;
    size_t elem_count = 0;
    for (size_t bi : batch) elem_count += items[bi].teacher.size();

    for (size_t k = 0; k < batch.size(); ++k) {
      const detail::TrainItem& item = items[batch[k]];
      const uint64_t fwd_seed = derive_seed(job.train.seed, static_cast<uint64_t>(step), batch[k]);
      AcousticTrace trace;
      const MatD pred = acoustic_teacher_forward(item.features, item.teacher, params, job.acoustic,
                                                 job.regulator, DropoutMode::train, fwd_seed, &trace);
      MatD grad_y(pred.rows(), pred.cols());
      for (size_t i = 0; i < pred.size(); ++i) {
        const double diff = pred.data()[i] - item.teacher.data()[i];
        loss_acc += std::abs(diff);
        grad_y.data()[i] = (diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0)) / static_cast<double>(elem_count);
      }
      acoustic_backward(trace, grad_y, params, job.acoustic, job.regulator, grads);
    }

    clip_grads(grads, job.train.grad_clip_norm);
    adamw_step(params, grads, opt, lr, job.train);
    result.loss_history.push_back(loss_acc / static_cast<double>(elem_count));
    if (job.log && (step % 50 == 0 || step + 1 == job.train.max_steps))
      *job.log << "step " << (step + 1) << "/" << job.train.max_steps << " lr " << lr << " loss "
               << result.loss_history.back() << "\n";
  }

  AcousticCheckpoint& ckpt = result.checkpoint;
  ckpt.config = job.extra_config;
  job.acoustic.to_config(ckpt.config);
  job.dsp.to_config(ckpt.config);
  job.train.to_config(ckpt.config);
  ckpt.meta.phase = job.train.phase;
  ckpt.meta.step = static_cast<uint64_t>(job.train.max_steps);
  ckpt.meta.seed = job.train.seed;
  ckpt.meta.source_manifest_hash = hex64(manifest_hash(man));
  ckpt.meta.parent_checkpoint_hash = job.parent ? hex64(checkpoint_hash(*job.parent)) : "";
  ckpt.meta.regulator = job.regulator;
  ckpt.params = std::move(params);
  return result;
}

/// Mean teacher-forced L1 over a cached corpus with dropout disabled;
/// comparable across runs and phases.
inline double eval_corpus_loss(const Manifest& man, const FeatureCacheResult& cache,
                               const AcousticParams& params, const AcousticConfig& acfg,
                               const RegulatorConfig& reg) {
  if (man.entries.empty()) throw InsufficientDataError("eval_corpus_loss: empty manifest");
  double acc = 0.0;
  size_t count = 0;
  for (const auto& e : man.entries) {
    const CachedUtterance& cu = cache.entries.at(e.utterance_id);
    const MatF feats = load_features(cu.features).vectors;
    const MatD teacher = widen(parse_matrix_container(read_file_bytes(cu.mel)).data);
    const MatD pred =
        acoustic_teacher_forward(feats, teacher, params, acfg, reg, DropoutMode::off, 0, nullptr);
    for (size_t i = 0; i < pred.size(); ++i) acc += std::abs(pred.data()[i] - teacher.data()[i]);
    count += pred.size();
  }
  return acc / static_cast<double>(count);
}

inline TrainResult train_standard(const TrainJob& job) {
  if (job.train.phase != "standard") throw ConfigError("train_standard: phase must be 'standard'");
  return run_training(job);
}

inline TrainResult pretrain_crosslingual(const TrainJob& job) {
  if (job.train.phase != "pretrain") throw ConfigError("pretrain_crosslingual: phase must be 'pretrain'");
  return run_training(job);
}

inline TrainResult fine_tune(const TrainJob& job) {
  if (job.train.phase != "finetune") throw ConfigError("fine_tune: phase must be 'finetune'");
  return run_training(job);
}

}  // namespace polyvc
