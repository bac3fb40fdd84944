#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "polyvc/common.hpp"

namespace polyvc {

/// One corpus utterance. audio_path is stored relative to the manifest file.
struct ManifestEntry {
  std::string utterance_id;
  std::string audio_path;
  std::string speaker_id;
  std::string language_tag;  // BCP-47-ish, e.g. "en", "de", "zh-cn"
  std::string transcript;    // optional, empty when absent
  double duration_sec = 0.0;
};

struct Manifest {
  std::vector<ManifestEntry> entries;
  std::filesystem::path source_path;  // where it was loaded from, if anywhere

  std::filesystem::path resolve_audio(const ManifestEntry& e) const {
    const std::filesystem::path p(e.audio_path);
    if (p.is_absolute()) return p;
    return source_path.empty() ? p : source_path.parent_path() / p;
  }

  double total_duration_sec() const {
    double acc = 0.0;
    for (const auto& e : entries) acc += e.duration_sec;
    return acc;
  }

  std::set<std::string> speakers() const {
    std::set<std::string> s;
    for (const auto& e : entries) s.insert(e.speaker_id);
    return s;
  }

  std::set<std::string> languages() const {
    std::set<std::string> s;
    for (const auto& e : entries) s.insert(e.language_tag);
    return s;
  }
};

namespace detail {

inline nlohmann::json entry_to_json(const ManifestEntry& e) {
  nlohmann::json j;
  j["utterance_id"] = e.utterance_id;
  j["audio_path"] = e.audio_path;
  j["speaker_id"] = e.speaker_id;
  j["language_tag"] = e.language_tag;
  if (!e.transcript.empty()) j["transcript"] = e.transcript;
  j["duration_sec"] = e.duration_sec;
  return j;
}

inline ManifestEntry entry_from_json(const nlohmann::json& j, size_t line_no) {
  const auto need = [&](const char* key) -> const nlohmann::json& {
    auto it = j.find(key);
    if (it == j.end())
      throw IoError("manifest line " + std::to_string(line_no) + ": missing field '" + key + "'");
    return *it;
  };
  ManifestEntry e;
  try {
    e.utterance_id = need("utterance_id").get<std::string>();
    e.audio_path = need("audio_path").get<std::string>();
    e.speaker_id = need("speaker_id").get<std::string>();
    e.language_tag = need("language_tag").get<std::string>();
    if (j.contains("transcript")) e.transcript = j["transcript"].get<std::string>();
    e.duration_sec = need("duration_sec").get<double>();
  } catch (const nlohmann::json::exception& ex) {
    throw IoError("manifest line " + std::to_string(line_no) + ": " + ex.what());
  }
  return e;
}

}  // namespace detail

inline void validate_manifest(const Manifest& m) {
  std::set<std::string> ids;
  for (const auto& e : m.entries) {
    if (e.utterance_id.empty()) throw IoError("manifest: empty utterance_id");
    if (!ids.insert(e.utterance_id).second)
      throw IoError("manifest: duplicate utterance_id '" + e.utterance_id + "'");
    if (e.audio_path.empty()) throw IoError("manifest: empty audio_path for '" + e.utterance_id + "'");
    if (e.speaker_id.empty()) throw IoError("manifest: empty speaker_id for '" + e.utterance_id + "'");
    if (!(e.duration_sec > 0.0))
      throw IoError("manifest: non-positive duration for '" + e.utterance_id + "'");
  }
}

/// JSON-lines, one entry per line, key order fixed by serialization below.
inline std::string serialize_manifest(const Manifest& m) {
  std::string out;
  for (const auto& e : m.entries) out += detail::entry_to_json(e).dump() + "\n";
  return out;
}

inline Manifest parse_manifest(const std::string& text) {
  Manifest m;
  size_t line_no = 0, pos = 0;
  while (pos < text.size()) {
    size_t nl = text.find('\n', pos);
    if (nl == std::string::npos) nl = text.size();
    ++line_no;
    std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    bool blank = true;
    for (char ch : line)
      if (!std::isspace(static_cast<unsigned char>(ch))) blank = false;
    if (blank) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& ex) {
      throw IoError("manifest line " + std::to_string(line_no) + ": " + ex.what());
    }
    m.entries.push_back(detail::entry_from_json(j, line_no));
  }
  validate_manifest(m);
  return m;
}

inline Manifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path.string());
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Manifest m = parse_manifest(text);
  m.source_path = path;
  return m;
}

inline void save_manifest(const std::filesystem::path& path, const Manifest& m) {
  validate_manifest(m);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest: " + path.string());
  out << serialize_manifest(m);
}

/// Content hash over the canonical serialization; path-independent.
inline uint64_t manifest_hash(const Manifest& m) { return fnv1a64(serialize_manifest(m)); }

}  // namespace polyvc
