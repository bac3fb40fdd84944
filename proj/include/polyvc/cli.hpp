#pragma once

#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "polyvc/eval.hpp"
#include "polyvc/pipeline.hpp"
#include "polyvc/training.hpp"

namespace polyvc {

// Exit codes: 0 success, 1 usage/config/data error, 2 batch finished with
// failures, 3 missing or failing external adapter.
inline constexpr int kExitOk = 0;
inline constexpr int kExitError = 1;
inline constexpr int kExitPartial = 2;
inline constexpr int kExitAdapter = 3;

namespace climpl {

struct LogSink {
  std::ofstream file;
  std::unique_ptr<RunLog> log;

  // "-" streams events to out; empty path disables logging
  RunLog* open(const std::string& path, std::ostream& out) {
    if (path.empty()) return nullptr;
    if (path == "-") {
      log = std::make_unique<RunLog>(&out);
    } else {
      file.open(path, std::ios::trunc);
      if (!file) throw IoError("cannot open run log: " + path);
      log = std::make_unique<RunLog>(&file);
    }
    return log.get();
  }
};

inline int run_train_phase(const std::string& phase, const std::string& config_path,
                           const std::string& manifest_path, const std::string& out_path,
                           const std::string& cache_dir, const std::string& parent_path,
                           int64_t steps_override, std::ostream& out) {
  PipelineConfig cfg = PipelineConfig::from_file(config_path);
  cfg.train.phase = phase;
  if (steps_override >= 0) cfg.train.max_steps = steps_override;
  cfg.train.validate();

  TrainJob job;
  job.manifest = load_manifest(manifest_path);
  job.dsp = cfg.dsp;
  job.acoustic = cfg.acoustic;
  job.regulator = cfg.regulator;
  job.train = cfg.train;
  job.cache_dir = cache_dir;
  job.extra_config = cfg.raw;
  job.log = &out;

  std::unique_ptr<ContentEncoder> encoder = cfg.make_encoder();
  job.encoder = encoder.get();

  AcousticCheckpoint parent;
  if (!parent_path.empty()) {
    parent = load_checkpoint(parent_path);
    job.parent = &parent;
  }

  const TrainResult result = run_training(job);
  save_checkpoint(out_path, result.checkpoint);
  out << "phase " << phase << ": " << result.loss_history.size() << " steps";
  if (!result.loss_history.empty()) out << ", final loss " << result.loss_history.back();
  out << "\nwrote " << out_path << " (" << hex64(checkpoint_hash(result.checkpoint)) << ")\n";
  return kExitOk;
}

}  // namespace climpl

/// Front door for the polyvc binary; also callable from tests with captured
/// streams. args excludes the program name.
inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"any-to-one voice conversion pipeline"};
  app.set_version_flag("--version", std::string(kLibraryVersion));
  app.require_subcommand(1);

  // extract-features
  auto* cmd_extract = app.add_subcommand("extract-features", "cache content features and target mels");
  std::string ex_manifest, ex_config, ex_cache;
  cmd_extract->add_option("--manifest", ex_manifest, "corpus manifest (json lines)")->required();
  cmd_extract->add_option("--config", ex_config, "pipeline config file")->required();
  cmd_extract->add_option("--cache-dir", ex_cache, "feature cache directory")->required();

  // train / pretrain / finetune share most options
  std::string tr_manifest, tr_config, tr_out, tr_cache = "cache", tr_parent;
  int64_t tr_steps = -1;
  auto* cmd_train = app.add_subcommand("train", "single-speaker training from scratch");
  auto* cmd_pretrain = app.add_subcommand("pretrain", "multi-speaker pretraining");
  auto* cmd_finetune = app.add_subcommand("finetune", "adapt a pretrained checkpoint to one speaker");
  for (CLI::App* c : {cmd_train, cmd_pretrain, cmd_finetune}) {
    c->add_option("--manifest", tr_manifest, "training manifest")->required();
    c->add_option("--config", tr_config, "pipeline config file")->required();
    c->add_option("--out", tr_out, "output checkpoint path")->required();
    c->add_option("--cache-dir", tr_cache, "feature cache directory");
    c->add_option("--steps", tr_steps, "override train.max_steps");
  }
  cmd_finetune->add_option("--parent", tr_parent, "pretrained checkpoint to start from")->required();

  // convert
  auto* cmd_convert = app.add_subcommand("convert", "convert one utterance to the target voice");
  std::string cv_ckpt, cv_in, cv_out, cv_log;
  cmd_convert->add_option("--checkpoint", cv_ckpt, "trained checkpoint")->required();
  cmd_convert->add_option("--input", cv_in, "input wav")->required();
  cmd_convert->add_option("--output", cv_out, "output wav")->required();
  cmd_convert->add_option("--log", cv_log, "json-lines run log ('-' for stdout)");

  // convert-batch
  auto* cmd_batch = app.add_subcommand("convert-batch", "convert every utterance in a manifest");
  std::string cb_ckpt, cb_manifest, cb_outdir, cb_log;
  int cb_jobs = 1;
  cmd_batch->add_option("--checkpoint", cb_ckpt, "trained checkpoint")->required();
  cmd_batch->add_option("--manifest", cb_manifest, "manifest of clips to convert")->required();
  cmd_batch->add_option("--out-dir", cb_outdir, "directory for converted wavs")->required();
  cmd_batch->add_option("--jobs", cb_jobs, "parallel conversion workers");
  cmd_batch->add_option("--log", cb_log, "json-lines run log ('-' for stdout)");

  // evaluate
  auto* cmd_eval = app.add_subcommand("evaluate", "score converted audio (WER/PER/speaker similarity)");
  std::string ev_source, ev_dir, ev_target, ev_config, ev_mode = "asr", ev_report;
  std::string ev_asr = "sidecar", ev_phonemizer = "grapheme", ev_embedder = "mel_stats";
  uint64_t ev_target_n = 50;
  cmd_eval->add_option("--source-manifest", ev_source, "manifest of the source utterances")->required();
  cmd_eval->add_option("--converted-dir", ev_dir, "directory holding <utterance_id>.wav conversions")
      ->required();
  cmd_eval->add_option("--target-manifest", ev_target, "target speaker corpus")->required();
  cmd_eval->add_option("--config", ev_config, "pipeline config (for DSP settings)")->required();
  cmd_eval->add_option("--mode", ev_mode, "reference mode: asr (default) or transcript");
  cmd_eval->add_option("--target-utterances", ev_target_n, "utterances used for the speaker profile");
  cmd_eval->add_option("--asr", ev_asr, "asr adapter id");
  cmd_eval->add_option("--phonemizer", ev_phonemizer, "phonemizer adapter id");
  cmd_eval->add_option("--embedder", ev_embedder, "speaker embedder adapter id");
  cmd_eval->add_option("--report", ev_report, "write the json-lines report here");

  std::vector<const char*> argv;
  argv.push_back("polyvc");
  for (const std::string& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::CallForVersion&) {
    out << app.version() << "\n";
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitError;
  }

  try {
    if (app.got_subcommand(cmd_extract)) {
      const PipelineConfig cfg = PipelineConfig::from_file(ex_config);
      const Manifest man = load_manifest(ex_manifest);
      std::unique_ptr<ContentEncoder> enc = cfg.make_encoder();
      const FeatureCacheResult res = cache_features(man, *enc, cfg.dsp, ex_cache, &out);
      out << "cache " << ex_cache << ": " << res.built << " built, " << res.reused << " reused, fingerprint "
          << res.fingerprint << "\n";
      return kExitOk;
    }
    if (app.got_subcommand(cmd_train))
      return climpl::run_train_phase("standard", tr_config, tr_manifest, tr_out, tr_cache, "", tr_steps,
                                     out);
    if (app.got_subcommand(cmd_pretrain))
      return climpl::run_train_phase("pretrain", tr_config, tr_manifest, tr_out, tr_cache, "", tr_steps,
                                     out);
    if (app.got_subcommand(cmd_finetune))
      return climpl::run_train_phase("finetune", tr_config, tr_manifest, tr_out, tr_cache, tr_parent,
                                     tr_steps, out);
    if (app.got_subcommand(cmd_convert)) {
      climpl::LogSink sink;
      RunLog* log = sink.open(cv_log, out);
      Pipeline pipeline(load_checkpoint(cv_ckpt), log);
      const ConvertResult r = pipeline.convert(cv_in, cv_out);
      out << "wrote " << r.output.string() << " (" << r.mel_frames << " mel frames, " << r.samples
          << " samples)\n";
      return kExitOk;
    }
    if (app.got_subcommand(cmd_batch)) {
      climpl::LogSink sink;
      RunLog* log = sink.open(cb_log, out);
      Pipeline pipeline(load_checkpoint(cb_ckpt), log);
      const Manifest man = load_manifest(cb_manifest);
      const BatchReport report = pipeline.convert_batch(man, cb_outdir, cb_jobs);
      out << "converted " << report.succeeded.size() << "/" << man.entries.size() << " utterances\n";
      for (const auto& f : report.failed) err << "failed " << f.utterance_id << ": " << f.message << "\n";
      if (report.succeeded.empty()) return kExitError;
      return report.failed.empty() ? kExitOk : kExitPartial;
    }
    if (app.got_subcommand(cmd_eval)) {
      if (ev_asr != "sidecar")
        throw AdapterError("asr adapter '" + ev_asr +
                           "' is not bundled; external recognizers attach through the AsrAdapter "
                           "interface (use --asr sidecar)");
      if (ev_phonemizer != "grapheme")
        throw AdapterError("phonemizer '" + ev_phonemizer +
                           "' is not bundled (use --phonemizer grapheme)");
      if (ev_embedder != "mel_stats")
        throw AdapterError("speaker embedder '" + ev_embedder +
                           "' is not bundled (use --embedder mel_stats)");

      const PipelineConfig cfg = PipelineConfig::from_file(ev_config);
      const Manifest source = load_manifest(ev_source);
      const Manifest target = load_manifest(ev_target);

      std::map<std::string, std::filesystem::path> converted;
      for (const auto& e : source.entries) {
        const std::filesystem::path p = std::filesystem::path(ev_dir) / (e.utterance_id + ".wav");
        if (std::filesystem::exists(p)) converted[e.utterance_id] = p;
      }

      SidecarAsr asr;
      GraphemePhonemizer phonemizer;
      MelStatsEmbedder embedder(cfg.dsp);
      EvalConfig ecfg;
      ecfg.reference_mode = ev_mode;
      ecfg.target_utterances = static_cast<size_t>(ev_target_n);
      const EvalReport report = evaluate(source, converted, target, asr, phonemizer, embedder, ecfg);
      if (!ev_report.empty()) {
        std::ofstream rf(ev_report, std::ios::trunc);
        if (!rf) throw IoError("cannot write report: " + ev_report);
        rf << report.serialize_jsonl();
        out << "report written to " << ev_report << "\n";
      }
      report.print_table(out);
      return kExitOk;
    }
    err << "error: no command\n";
    return kExitError;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return e.kind() == ErrorKind::adapter ? kExitAdapter : kExitError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitError;
  }
}

}  // namespace polyvc
