#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "polyvc/acoustic.hpp"
#include "polyvc/configfile.hpp"
#include "polyvc/features.hpp"
#include "polyvc/regulator.hpp"

namespace polyvc {

inline constexpr uint32_t kCheckpointMagic = 0x4B435650u;  // "PVCK"
inline constexpr uint32_t kCheckpointVersion = 1;

/// Training provenance carried inside every checkpoint. Deliberately free of
/// timestamps so identical runs serialize to identical bytes.
struct TrainMeta {
  std::string phase = "standard";  // standard | pretrain | finetune
  uint64_t step = 0;
  uint64_t seed = 0;
  std::string source_manifest_hash;    // hex of the training manifest
  std::string parent_checkpoint_hash;  // hex of the warm-start checkpoint, if any
  RegulatorConfig regulator;

  void to_config(KeyValueConfig& cfg) const {
    cfg.set("meta.phase", phase);
    cfg.set_int("meta.step", static_cast<int64_t>(step));
    cfg.set_int("meta.seed", static_cast<int64_t>(seed));
    cfg.set("meta.source_manifest_hash", source_manifest_hash);
    cfg.set("meta.parent_checkpoint_hash", parent_checkpoint_hash);
    cfg.set("meta.regulator_mode", to_string(regulator.mode));
    cfg.set("meta.regulator_placement", to_string(regulator.placement));
  }

  static TrainMeta from_config(const KeyValueConfig& cfg) {
    TrainMeta m;
    m.phase = cfg.get_string("meta.phase", m.phase);
    m.step = static_cast<uint64_t>(cfg.get_int("meta.step", 0));
    m.seed = static_cast<uint64_t>(cfg.get_int("meta.seed", 0));
    m.source_manifest_hash = cfg.get_string("meta.source_manifest_hash", "");
    m.parent_checkpoint_hash = cfg.get_string("meta.parent_checkpoint_hash", "");
    m.regulator.mode = regulator_mode_from_string(cfg.get_string("meta.regulator_mode", "nearest"));
    m.regulator.placement =
        regulator_placement_from_string(cfg.get_string("meta.regulator_placement", "after_encoder"));
    return m;
  }
};

struct AcousticCheckpoint {
  KeyValueConfig config;  // acoustic.* required; dsp.* and friends ride along
  TrainMeta meta;
  AcousticParams params;

  AcousticConfig acoustic_config() const { return AcousticConfig::from_config(config); }
};

inline std::vector<uint8_t> serialize_checkpoint(const AcousticCheckpoint& ckpt) {
  std::vector<uint8_t> buf;
  put_u32(buf, kCheckpointMagic);
  put_u32(buf, kCheckpointVersion);

  KeyValueConfig meta_cfg;
  ckpt.meta.to_config(meta_cfg);
  put_bytes(buf, ckpt.config.serialize());
  put_bytes(buf, meta_cfg.serialize());

  uint32_t n_tensors = 0;
  ckpt.params.for_each_tensor([&](const std::string&, const MatD&) { ++n_tensors; });
  put_u32(buf, n_tensors);
  ckpt.params.for_each_tensor([&](const std::string& name, const MatD& m) {
    put_bytes(buf, name);
    put_u32(buf, 2);  // rank
    put_u32(buf, static_cast<uint32_t>(m.rows()));
    put_u32(buf, static_cast<uint32_t>(m.cols()));
    for (size_t i = 0; i < m.size(); ++i) put_f32(buf, static_cast<float>(m.data()[i]));
  });
  return buf;
}

inline AcousticCheckpoint parse_checkpoint(const std::vector<uint8_t>& bytes) {
  ByteReader r(bytes);
  if (r.u32() != kCheckpointMagic) throw IoError("bad checkpoint magic");
  if (r.u32() != kCheckpointVersion) throw IoError("unsupported checkpoint version");

  AcousticCheckpoint ckpt;
  ckpt.config = KeyValueConfig::parse(r.bytes());
  ckpt.meta = TrainMeta::from_config(KeyValueConfig::parse(r.bytes()));

  const AcousticConfig acfg = ckpt.acoustic_config();
  ckpt.params = allocate_acoustic_params(acfg);

  std::unordered_map<std::string, MatD> loaded;
  const uint32_t n_tensors = r.u32();
  for (uint32_t i = 0; i < n_tensors; ++i) {
    const std::string name = r.bytes();
    if (r.u32() != 2) throw IoError("checkpoint tensor '" + name + "': unsupported rank");
    const uint32_t rows = r.u32(), cols = r.u32();
    MatD m(rows, cols);
    for (size_t j = 0; j < m.size(); ++j) m.data()[j] = static_cast<double>(r.f32());
    loaded.emplace(name, std::move(m));
  }
  if (!r.done()) throw IoError("checkpoint has trailing bytes");

  size_t used = 0;
  ckpt.params.for_each_tensor([&](const std::string& name, MatD& m) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw IoError("checkpoint missing tensor '" + name + "'");
    if (!it->second.same_shape(m))
      throw IoError("checkpoint tensor '" + name + "' shape mismatch against config");
    m = std::move(it->second);
    ++used;
  });
  if (used != loaded.size()) throw IoError("checkpoint contains unknown tensors");
  return ckpt;
}

inline void save_checkpoint(const std::filesystem::path& path, const AcousticCheckpoint& ckpt) {
  write_container_file(path, serialize_checkpoint(ckpt));
}

inline AcousticCheckpoint load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_file_bytes(path));
}

/// Identity of a checkpoint is the hash of its serialized bytes.
inline uint64_t checkpoint_hash(const AcousticCheckpoint& ckpt) {
  const std::vector<uint8_t> bytes = serialize_checkpoint(ckpt);
  return fnv1a64(bytes.data(), bytes.size());
}

}  // namespace polyvc
