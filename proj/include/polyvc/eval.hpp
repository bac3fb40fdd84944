#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "polyvc/audio.hpp"
#include "polyvc/dsp.hpp"
#include "polyvc/manifest.hpp"

namespace polyvc {

using TokenSequence = std::vector<std::string>;

// ---- text normalization -------------------------------------------------------

/// Lowercases ASCII, turns ASCII punctuation into spaces, collapses runs of
/// whitespace. Non-ASCII bytes pass through untouched.
inline std::string normalize_text(const std::string& text) {
  std::string tmp;
  tmp.reserve(text.size());
  for (unsigned char ch : text) {
    if (ch < 0x80 && std::ispunct(ch)) {
      tmp.push_back(' ');
    } else if (ch < 0x80 && std::isspace(ch)) {
      tmp.push_back(' ');
    } else if (ch < 0x80) {
      tmp.push_back(static_cast<char>(std::tolower(ch)));
    } else {
      tmp.push_back(static_cast<char>(ch));
    }
  }
  std::string out;
  out.reserve(tmp.size());
  bool in_space = true;
  for (char ch : tmp) {
    if (ch == ' ') {
      if (!in_space) out.push_back(' ');
      in_space = true;
    } else {
      out.push_back(ch);
      in_space = false;
    }
  }
  while (!out.empty() && out.back() == ' ') out.pop_back();
  return out;
}

namespace detail {

/// Splits a UTF-8 string into codepoint substrings; malformed bytes become
/// single-byte tokens rather than failing.
inline std::vector<std::string> utf8_codepoints(const std::string& s) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < s.size()) {
    const unsigned char b = static_cast<unsigned char>(s[i]);
    size_t len = 1;
    if ((b & 0xE0) == 0xC0) len = 2;
    else if ((b & 0xF0) == 0xE0) len = 3;
    else if ((b & 0xF8) == 0xF0) len = 4;
    if (i + len > s.size()) len = 1;
    out.push_back(s.substr(i, len));
    i += len;
  }
  return out;
}

inline bool is_zh(const std::string& language_tag) {
  return language_tag.size() >= 2 && (language_tag[0] == 'z' || language_tag[0] == 'Z') &&
         (language_tag[1] == 'h' || language_tag[1] == 'H');
}

}  // namespace detail

/// Word-level tokens for most languages; per-codepoint tokens for zh*, where
/// whitespace does not delimit words.
inline TokenSequence tokenize(const std::string& text, const std::string& language_tag) {
  const std::string norm = normalize_text(text);
  TokenSequence tokens;
  if (detail::is_zh(language_tag)) {
    for (const std::string& cp : detail::utf8_codepoints(norm))
      if (cp != " ") tokens.push_back(cp);
    return tokens;
  }
  size_t pos = 0;
  while (pos < norm.size()) {
    size_t sp = norm.find(' ', pos);
    if (sp == std::string::npos) sp = norm.size();
    if (sp > pos) tokens.push_back(norm.substr(pos, sp - pos));
    pos = sp + 1;
  }
  return tokens;
}

// ---- edit distance --------------------------------------------------------------

struct EditCounts {
  size_t substitutions = 0;
  size_t insertions = 0;
  size_t deletions = 0;
  size_t total() const { return substitutions + insertions + deletions; }
};

/// Levenshtein alignment between reference and hypothesis, unit costs.
inline EditCounts edit_distance(const TokenSequence& ref, const TokenSequence& hyp) {
  const size_t n = ref.size(), m = hyp.size();
  // dp over (ref_prefix, hyp_prefix); backtrack to split the error kinds
  std::vector<std::vector<size_t>> dp(n + 1, std::vector<size_t>(m + 1, 0));
  for (size_t i = 0; i <= n; ++i) dp[i][0] = i;
  for (size_t j = 0; j <= m; ++j) dp[0][j] = j;
  for (size_t i = 1; i <= n; ++i) {
    for (size_t j = 1; j <= m; ++j) {
      const size_t sub = dp[i - 1][j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      const size_t del = dp[i - 1][j] + 1;
      const size_t ins = dp[i][j - 1] + 1;
      dp[i][j] = std::min({sub, del, ins});
    }
  }
  EditCounts c;
  size_t i = n, j = m;
  while (i > 0 || j > 0) {
    if (i > 0 && j > 0 && dp[i][j] == dp[i - 1][j - 1] && ref[i - 1] == hyp[j - 1]) {
      --i;
      --j;
    } else if (i > 0 && j > 0 && dp[i][j] == dp[i - 1][j - 1] + 1) {
      ++c.substitutions;
      --i;
      --j;
    } else if (i > 0 && dp[i][j] == dp[i - 1][j] + 1) {
      ++c.deletions;
      --i;
    } else {
      ++c.insertions;
      --j;
    }
  }
  return c;
}

/// (S + I + D) / |ref|. The reference must be non-empty.
inline double edit_distance_rate(const TokenSequence& ref, const TokenSequence& hyp) {
  if (ref.empty()) throw InsufficientDataError("edit_distance_rate: empty reference");
  return static_cast<double>(edit_distance(ref, hyp).total()) / static_cast<double>(ref.size());
}

// ---- speaker similarity -----------------------------------------------------------

using SpeakerEmbedding = std::vector<double>;

inline double cosine_similarity(const SpeakerEmbedding& a, const SpeakerEmbedding& b) {
  if (a.size() != b.size() || a.empty()) throw ContractViolation("cosine: dimension mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na <= 0.0 || nb <= 0.0) throw ContractViolation("cosine: zero-norm embedding");
  const double v = dot / (std::sqrt(na) * std::sqrt(nb));
  return std::max(-1.0, std::min(1.0, v));
}

// ---- adapters -----------------------------------------------------------------------

/// Speech recognizers are external; evaluation talks to them through this.
class AsrAdapter {
 public:
  virtual ~AsrAdapter() = default;
  virtual std::string id() const = 0;
  virtual std::string transcribe(const std::filesystem::path& audio_path,
                                 const std::string& language_tag) = 0;
};

/// Reads <audio stem>.txt beside the audio file. Stands in for a real ASR
/// system in tests and offline runs.
class SidecarAsr final : public AsrAdapter {
 public:
  std::string id() const override { return "sidecar"; }

  std::string transcribe(const std::filesystem::path& audio_path, const std::string&) override {
    std::filesystem::path sidecar = audio_path;
    sidecar.replace_extension(".txt");
    std::ifstream in(sidecar);
    if (!in)
      throw AdapterError("sidecar transcript not found: " + sidecar.string() +
                         " (the sidecar recognizer expects a .txt next to each wav)");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
    return text;
  }
};

class Phonemizer {
 public:
  virtual ~Phonemizer() = default;
  virtual std::string id() const = 0;
  virtual TokenSequence phonemes(const std::string& text, const std::string& language_tag) = 0;
};

/// Grapheme stand-in: each non-space codepoint of the normalized text is one
/// "phoneme". Language-agnostic and deterministic.
class GraphemePhonemizer final : public Phonemizer {
 public:
  std::string id() const override { return "grapheme"; }

  TokenSequence phonemes(const std::string& text, const std::string&) override {
    TokenSequence out;
    for (const std::string& cp : detail::utf8_codepoints(normalize_text(text)))
      if (cp != " ") out.push_back(cp);
    return out;
  }
};

class SpeakerEmbedder {
 public:
  virtual ~SpeakerEmbedder() = default;
  virtual std::string id() const = 0;
  virtual SpeakerEmbedding embed(const AudioClip& clip) = 0;
};

/// Mel-statistics embedding: per-band mean and per-band standard deviation,
/// concatenated. Crude but speaker-sensitive enough for regression tests.
class MelStatsEmbedder final : public SpeakerEmbedder {
 public:
  explicit MelStatsEmbedder(const DspConfig& dsp) : dsp_(dsp) { dsp_.validate(); }

  std::string id() const override { return "mel_stats"; }

  SpeakerEmbedding embed(const AudioClip& clip) override {
    const AudioClip at_rate =
        clip.sample_rate == dsp_.sample_rate ? clip : resample_clip(clip, dsp_.sample_rate);
    const MelSpectrogram mel = compute_mel(at_rate, dsp_);
    const size_t t_frames = mel.frames.rows(), n = mel.frames.cols();
    SpeakerEmbedding emb(2 * n, 0.0);
    for (size_t t = 0; t < t_frames; ++t)
      for (size_t i = 0; i < n; ++i) emb[i] += mel.frames(t, i);
    for (size_t i = 0; i < n; ++i) emb[i] /= static_cast<double>(t_frames);
    for (size_t t = 0; t < t_frames; ++t)
      for (size_t i = 0; i < n; ++i) {
        const double d = mel.frames(t, i) - emb[i];
        emb[n + i] += d * d;
      }
    for (size_t i = 0; i < n; ++i) emb[n + i] = std::sqrt(emb[n + i] / static_cast<double>(t_frames));
    return emb;
  }

 private:
  DspConfig dsp_;
};

// ---- target speaker profile ----------------------------------------------------------

struct TargetEmbedding {
  SpeakerEmbedding mean;
  size_t utterances_used = 0;
  bool degenerate = false;  // zero-norm mean, cosine against it is undefined
};

/// Mean embedding over the first n utterances of the target corpus, ordered
/// by utterance_id so the profile is stable across manifest shufflings.
inline TargetEmbedding target_speaker_embedding(const Manifest& target, SpeakerEmbedder& embedder,
                                                size_t n_utterances = 50) {
  if (target.entries.empty()) throw InsufficientDataError("target corpus is empty");
  if (n_utterances == 0) throw ContractViolation("target embedding needs n_utterances >= 1");

  std::vector<const ManifestEntry*> sorted;
  sorted.reserve(target.entries.size());
  for (const auto& e : target.entries) sorted.push_back(&e);
  std::sort(sorted.begin(), sorted.end(),
            [](const ManifestEntry* a, const ManifestEntry* b) { return a->utterance_id < b->utterance_id; });

  TargetEmbedding out;
  const size_t take = std::min(n_utterances, sorted.size());
  for (size_t i = 0; i < take; ++i) {
    const AudioClip clip = read_wav(target.resolve_audio(*sorted[i]));
    SpeakerEmbedding e = embedder.embed(clip);
    if (out.mean.empty()) out.mean.assign(e.size(), 0.0);
    if (e.size() != out.mean.size()) throw ContractViolation("target embedding: dimension drift");
    for (size_t k = 0; k < e.size(); ++k) out.mean[k] += e[k];
    ++out.utterances_used;
  }
  double norm = 0.0;
  for (double& v : out.mean) {
    v /= static_cast<double>(out.utterances_used);
    norm += v * v;
  }
  out.degenerate = norm <= 0.0;
  return out;
}

// ---- report ---------------------------------------------------------------------------

struct EvalUtteranceResult {
  std::string utterance_id;
  double wer = 0.0;
  double per = 0.0;
  double speaker_similarity = 0.0;
  size_t ref_words = 0;
  size_t ref_phonemes = 0;
};

struct EvalReport {
  std::vector<EvalUtteranceResult> utterances;
  double corpus_wer = 0.0;         // total word errors / total reference words
  double corpus_per = 0.0;         // total phoneme errors / total reference phonemes
  double mean_similarity = 0.0;
  std::string reference_mode;
  std::string asr_id, phonemizer_id, embedder_id;

  std::string serialize_jsonl() const {
    std::string out;
    for (const auto& u : utterances) {
      nlohmann::json j;
      j["utterance_id"] = u.utterance_id;
      j["wer"] = u.wer;
      j["per"] = u.per;
      j["speaker_similarity"] = u.speaker_similarity;
      out += j.dump() + "\n";
    }
    nlohmann::json agg;
    agg["aggregate"] = {{"utterances", utterances.size()},
                        {"wer", corpus_wer},
                        {"per", corpus_per},
                        {"speaker_similarity", mean_similarity},
                        {"reference_mode", reference_mode},
                        {"asr", asr_id},
                        {"phonemizer", phonemizer_id},
                        {"embedder", embedder_id}};
    out += agg.dump() + "\n";
    return out;
  }

  void print_table(std::ostream& os) const {
    os << "system                     WER      PER      SIM\n";
    os << "-------------------------------------------------\n";
    os << std::left << std::setw(24) << ("converted (" + reference_mode + ")") << std::right
       << std::fixed << std::setprecision(4) << std::setw(9) << corpus_wer << std::setw(9) << corpus_per
       << std::setw(9) << mean_similarity << "\n";
    os << "utterances: " << utterances.size() << "\n";
  }
};

struct EvalConfig {
  std::string reference_mode = "asr";  // "asr": refs from ASR on source audio; "transcript": manifest text
  size_t target_utterances = 50;
};

/// Scores converted audio against the source content and the target speaker.
/// converted maps utterance_id to a wav path; entries without a conversion are
/// skipped, and scoring nothing is an error.
inline EvalReport evaluate(const Manifest& source,
                           const std::map<std::string, std::filesystem::path>& converted,
                           const Manifest& target, AsrAdapter& asr, Phonemizer& phonemizer,
                           SpeakerEmbedder& embedder, const EvalConfig& cfg) {
  if (cfg.reference_mode != "asr" && cfg.reference_mode != "transcript")
    throw ConfigError("evaluate: reference_mode must be 'asr' or 'transcript'");

  const TargetEmbedding profile = target_speaker_embedding(target, embedder, cfg.target_utterances);
  if (profile.degenerate) throw ContractViolation("evaluate: degenerate target speaker embedding");

  EvalReport report;
  report.reference_mode = cfg.reference_mode;
  report.asr_id = asr.id();
  report.phonemizer_id = phonemizer.id();
  report.embedder_id = embedder.id();

  size_t word_errors = 0, word_total = 0, ph_errors = 0, ph_total = 0;
  double sim_acc = 0.0;

  for (const auto& e : source.entries) {
    auto it = converted.find(e.utterance_id);
    if (it == converted.end()) continue;

    std::string ref_text;
    if (cfg.reference_mode == "asr") {
      ref_text = asr.transcribe(source.resolve_audio(e), e.language_tag);
    } else {
      if (e.transcript.empty())
        throw ConfigError("evaluate: transcript mode needs a transcript for '" + e.utterance_id + "'");
      ref_text = e.transcript;
    }
    const std::string hyp_text = asr.transcribe(it->second, e.language_tag);

    const TokenSequence ref_words = tokenize(ref_text, e.language_tag);
    const TokenSequence hyp_words = tokenize(hyp_text, e.language_tag);
    if (ref_words.empty())
      throw InsufficientDataError("evaluate: empty reference for '" + e.utterance_id + "'");
    const EditCounts wc = edit_distance(ref_words, hyp_words);

    const TokenSequence ref_ph = phonemizer.phonemes(ref_text, e.language_tag);
    const TokenSequence hyp_ph = phonemizer.phonemes(hyp_text, e.language_tag);
    if (ref_ph.empty())
      throw InsufficientDataError("evaluate: empty phoneme reference for '" + e.utterance_id + "'");
    const EditCounts pc = edit_distance(ref_ph, hyp_ph);

    const AudioClip conv_clip = read_wav(it->second);
    const double sim = cosine_similarity(embedder.embed(conv_clip), profile.mean);

    EvalUtteranceResult r;
    r.utterance_id = e.utterance_id;
    r.wer = static_cast<double>(wc.total()) / static_cast<double>(ref_words.size());
    r.per = static_cast<double>(pc.total()) / static_cast<double>(ref_ph.size());
    r.speaker_similarity = sim;
    r.ref_words = ref_words.size();
    r.ref_phonemes = ref_ph.size();
    report.utterances.push_back(std::move(r));

    word_errors += wc.total();
    word_total += ref_words.size();
    ph_errors += pc.total();
    ph_total += ref_ph.size();
    sim_acc += sim;
  }

  if (report.utterances.empty())
    throw InsufficientDataError("evaluate: no converted utterances matched the source manifest");
  report.corpus_wer = static_cast<double>(word_errors) / static_cast<double>(word_total);
  report.corpus_per = static_cast<double>(ph_errors) / static_cast<double>(ph_total);
  report.mean_similarity = sim_acc / static_cast<double>(report.utterances.size());
  return report;
}

}  // namespace polyvc
