#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <sstream>

#include "polyvc/training.hpp"
#include "support/synthetic.hpp"

using namespace polyvc;

namespace {

TrainConfig base_train() {
  TrainConfig t;
  t.batch_size = 32;
  t.max_steps = 200000;
  t.learning_rate = 1e-4;
  t.weight_decay = 0.01;
  t.warmup_steps = 4000;
  t.schedule = "warmup_linear";
  return t;
}

struct Corpus {
  Manifest manifest;
  std::filesystem::path dir;
};

Corpus make_corpus(const std::string& tag, int n, const std::string& speaker = "spk_a",
                   const std::string& lang = "en", double seconds = 0.4) {
  Corpus c;
  c.dir = testsup::fresh_dir(tag);
  c.manifest = testsup::build_corpus(c.dir, testsup::single_speaker_utts(n, speaker, lang, 50, seconds),
                                     16000);
  return c;
}

TrainJob make_job(const Corpus& corpus, SyntheticEncoder& enc, const std::string& phase,
                  int64_t steps, const std::filesystem::path& cache_dir) {
  TrainJob job;
  job.manifest = corpus.manifest;
  job.dsp = testsup::tiny_dsp();
  job.acoustic = testsup::tiny_acoustic();
  job.regulator.mode = RegulatorMode::nearest;
  job.regulator.placement = RegulatorPlacement::after_encoder;
  job.train = base_train();
  job.train.phase = phase;
  job.train.max_steps = steps;
  job.train.batch_size = 2;
  job.train.learning_rate = 1e-3;
  job.train.warmup_steps = steps > 2 ? 1 : 0;
  job.train.seed = 1;
  job.cache_dir = cache_dir;
  job.encoder = &enc;
  return job;
}

}  // namespace

TEST_CASE("lr schedule ramps then decays linearly", "[training]") {
  const TrainConfig cfg = base_train();
  REQUIRE(lr_at_step(0, cfg) == 0.0);
  REQUIRE(std::abs(lr_at_step(2000, cfg) - 5e-5) < 1e-18);   // half way up the ramp
  REQUIRE(std::abs(lr_at_step(4000, cfg) - 1e-4) < 1e-18);   // warmup end hits peak
  REQUIRE(std::abs(lr_at_step(102000, cfg) - 5e-5) < 1e-18); // decay midpoint is half peak
  REQUIRE(lr_at_step(200000, cfg) == 0.0);

  TrainConfig flat = cfg;
  flat.schedule = "constant";
  REQUIRE(lr_at_step(0, flat) == 1e-4);
  REQUIRE(lr_at_step(123456, flat) == 1e-4);

  REQUIRE_THROWS_AS(lr_at_step(-1, cfg), ContractViolation);
  REQUIRE_THROWS_AS(lr_at_step(200001, cfg), ContractViolation);

  TrainConfig bad = cfg;
  bad.warmup_steps = bad.max_steps + 1;
  REQUIRE_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("adamw scalar step matches the closed form", "[training]") {
  TrainConfig cfg = base_train();
  const double lr = 1e-3, p0 = 0.5, g = 0.2;

  AdamWScalarState st;
  const double p1 = adamw_update_scalar(p0, g, st, 1, lr, cfg);

  // t=1: bias correction makes m_hat = g and v_hat = g^2 exactly
  const double want = p0 - lr * (g / (std::sqrt(g * g) + cfg.adam_eps) + cfg.weight_decay * p0);
  REQUIRE(std::abs(p1 - want) < 1e-15);

  // two more steps against an independent simulation
  double m = (1 - cfg.beta1) * g, v = (1 - cfg.beta2) * g * g, p_ref = want;
  double p_cur = p1;
  const double grads[2] = {-0.1, 0.05};
  for (int t = 2; t <= 3; ++t) {
    const double gt = grads[t - 2];
    p_cur = adamw_update_scalar(p_cur, gt, st, t, lr, cfg);
    m = cfg.beta1 * m + (1 - cfg.beta1) * gt;
    v = cfg.beta2 * v + (1 - cfg.beta2) * gt * gt;
    const double mh = m / (1 - std::pow(cfg.beta1, t));
    const double vh = v / (1 - std::pow(cfg.beta2, t));
    p_ref = p_ref - lr * (mh / (std::sqrt(vh) + cfg.adam_eps) + cfg.weight_decay * p_ref);
    REQUIRE(std::abs(p_cur - p_ref) < 1e-14);
  }

  REQUIRE_THROWS_AS(adamw_update_scalar(p0, g, st, 0, lr, cfg), ContractViolation);
}

TEST_CASE("vectorized adamw agrees with the scalar update", "[training]") {
  const AcousticConfig acfg = testsup::grad_acoustic();
  TrainConfig cfg = base_train();
  const double lr = 3e-4;

  AcousticParams params = init_acoustic_params(acfg, 7);
  AcousticParams grads = init_acoustic_params(acfg, 8);  // arbitrary nonzero grads
  const AcousticParams params0 = params;

  AdamWState st = AdamWState::init(params);
  adamw_step(params, grads, st, lr, cfg);
  adamw_step(params, grads, st, lr, cfg);

  std::vector<const MatD*> p0s, ps, gs;
  params0.for_each_tensor([&](const std::string&, const MatD& m) { p0s.push_back(&m); });
  params.for_each_tensor([&](const std::string&, const MatD& m) { ps.push_back(&m); });
  grads.for_each_tensor([&](const std::string&, const MatD& m) { gs.push_back(&m); });

  for (size_t k = 0; k < ps.size(); ++k)
    for (size_t i = 0; i < ps[k]->size(); ++i) {
      AdamWScalarState sst;
      double p = adamw_update_scalar(p0s[k]->data()[i], gs[k]->data()[i], sst, 1, lr, cfg);
      p = adamw_update_scalar(p, gs[k]->data()[i], sst, 2, lr, cfg);
      REQUIRE(std::abs(p - ps[k]->data()[i]) < 1e-12);
    }
}

TEST_CASE("masked l1 ignores padded rows entirely", "[training]") {
  MatD p1(2, 2), t1(2, 2), p2(4, 2), t2(4, 2);
  p1.fill(1.0);
  t1.fill(0.0);                       // contributes |1| over 2*2 = 4 elements
  p2.fill(2.0);
  t2.fill(1.5);                       // contributes |0.5| over first 3 rows = 6 elements
  for (size_t c = 0; c < 2; ++c) {
    p2(3, c) = 999.0;                 // padding garbage must not matter
    t2(3, c) = -999.0;
  }
  const std::vector<size_t> lengths = {2, 3};
  const double loss = masked_l1_loss({p1, p2}, {t1, t2}, lengths);
  // (4*1 + 6*0.5) / 10 = 0.7
  REQUIRE(std::abs(loss - 0.7) < 1e-15);

  // altering the padding leaves the value untouched
  MatD p2b = p2;
  p2b(3, 0) = -123.0;
  REQUIRE(masked_l1_loss({p1, p2b}, {t1, t2}, lengths) == loss);

  REQUIRE_THROWS_AS(masked_l1_loss({p1}, {t1}, {3}), ContractViolation);          // length > rows
  REQUIRE_THROWS_AS(masked_l1_loss({}, {}, {}), ContractViolation);               // empty batch
  REQUIRE_THROWS_AS(masked_l1_loss({p1}, {p2}, {2}), ContractViolation);          // shape mismatch
}

TEST_CASE("plain l1 is the mean absolute difference", "[training]") {
  MatD a(2, 2), b(2, 2);
  a(0, 0) = 1.0; a(0, 1) = -1.0; a(1, 0) = 2.0; a(1, 1) = 0.0;
  b.fill(0.0);
  REQUIRE(std::abs(l1_mel_loss(a, b) - 1.0) < 1e-15);  // (1+1+2+0)/4
}

TEST_CASE("gradient clipping rescales to the global norm bound", "[training]") {
  const AcousticConfig acfg = testsup::grad_acoustic();
  AcousticParams g = init_acoustic_params(acfg, 3);

  const double before = global_grad_norm(g);
  REQUIRE(before > 1.0);  // init is large enough for this config

  AcousticParams clipped = g;
  clip_grads(clipped, 1.0);
  REQUIRE(std::abs(global_grad_norm(clipped) - 1.0) < 1e-12);

  // under the bound: untouched
  AcousticParams small = zero_like(g);
  small.ep1_w(0, 0) = 0.5;
  AcousticParams small2 = small;
  clip_grads(small2, 1.0);
  REQUIRE(small2.ep1_w(0, 0) == 0.5);

  // zero bound disables clipping
  AcousticParams free_grads = g;
  clip_grads(free_grads, 0.0);
  REQUIRE(std::abs(global_grad_norm(free_grads) - before) < 1e-12);
}

TEST_CASE("data budget keeps the shortest utterances that fit", "[training]") {
  Manifest m;
  const char* ids[4] = {"long", "mid", "short", "extra"};
  const double durs[4] = {3600.0, 1800.0, 900.0, 5400.0};
  for (int i = 0; i < 4; ++i) {
    ManifestEntry e;
    e.utterance_id = ids[i];
    e.audio_path = std::string(ids[i]) + ".wav";
    e.speaker_id = "s";
    e.language_tag = "en";
    e.duration_sec = durs[i];
    m.entries.push_back(e);
  }

  // budget 1.5h = 5400s: shortest-first greedy keeps 900 + 1800, then 3600 overflows
  Manifest kept = detail::apply_data_budget(m, 1.5, nullptr);
  REQUIRE(kept.entries.size() == 2);
  REQUIRE(kept.entries[0].utterance_id == "short");
  REQUIRE(kept.entries[1].utterance_id == "mid");

  // budget zero disables the filter
  REQUIRE(detail::apply_data_budget(m, 0.0, nullptr).entries.size() == 4);

  // nothing fits
  REQUIRE_THROWS_AS(detail::apply_data_budget(m, 0.1, nullptr), InsufficientDataError);
}

TEST_CASE("feature cache builds once and then reuses", "[training]") {
  Corpus c = make_corpus("cache_reuse", 3);
  SyntheticEncoder enc(testsup::kTinyEncoderDim, 16000, 320, testsup::kTinyEncoderSeed);
  const DspConfig dsp = testsup::tiny_dsp();
  auto cache_dir = testsup::fresh_dir("cache_reuse_store");

  FeatureCacheResult first = cache_features(c.manifest, enc, dsp, cache_dir);
  REQUIRE(first.built == 3);
  REQUIRE(first.reused == 0);
  REQUIRE(first.entries.size() == 3);
  for (const auto& [id, cu] : first.entries) {
    REQUIRE(std::filesystem::exists(cu.features));
    REQUIRE(std::filesystem::exists(cu.mel));
  }

  FeatureCacheResult second = cache_features(c.manifest, enc, dsp, cache_dir);
  REQUIRE(second.built == 0);
  REQUIRE(second.reused == 3);
  REQUIRE(second.fingerprint == first.fingerprint);

  // different encoder seed -> different fingerprint -> full rebuild
  SyntheticEncoder other(testsup::kTinyEncoderDim, 16000, 320, 99);
  FeatureCacheResult third = cache_features(c.manifest, other, dsp, cache_dir);
  REQUIRE(third.built == 3);
  REQUIRE(third.fingerprint != first.fingerprint);
}

TEST_CASE("cached features and mels reload with the right shapes", "[training]") {
  // 0.43s = 6880 samples: encoder floors to 21 frames, mel ceils to 22
  Corpus c = make_corpus("cache_shapes", 1, "spk_a", "en", 0.43);
  SyntheticEncoder enc(testsup::kTinyEncoderDim, 16000, 320, testsup::kTinyEncoderSeed);
  const DspConfig dsp = testsup::tiny_dsp();
  auto cache_dir = testsup::fresh_dir("cache_shapes_store");

  FeatureCacheResult cache = cache_features(c.manifest, enc, dsp, cache_dir);
  const CachedUtterance& cu = cache.entries.at("utt_000");
  SSLFeatureMatrix f = load_features(cu.features);
  MatrixContainer mel = parse_matrix_container(read_file_bytes(cu.mel));
  REQUIRE(f.length() == 21);
  REQUIRE(mel.data.rows() == 22);
  REQUIRE(mel.dim == static_cast<uint32_t>(dsp.n_mels));
}

TEST_CASE("training runs, logs, and stamps its checkpoint", "[training]") {
  Corpus c = make_corpus("train_basic", 4);
  SyntheticEncoder enc(testsup::kTinyEncoderDim, 16000, 320, testsup::kTinyEncoderSeed);
  auto cache_dir = testsup::fresh_dir("train_basic_cache");

  std::ostringstream log;
  TrainJob job = make_job(c, enc, "standard", 3, cache_dir);
  job.log = &log;
  TrainResult res = train_standard(job);

  REQUIRE(res.loss_history.size() == 3);
  for (double l : res.loss_history) REQUIRE(std::isfinite(l));
  REQUIRE(log.str().find("step") != std::string::npos);

  const AcousticCheckpoint& ck = res.checkpoint;
  REQUIRE(ck.meta.phase == "standard");
  REQUIRE(ck.meta.step == 3);
  REQUIRE(ck.meta.seed == 1);
  REQUIRE(ck.meta.source_manifest_hash == hex64(manifest_hash(c.manifest)));
  REQUIRE(ck.meta.parent_checkpoint_hash.empty());
  REQUIRE(ck.acoustic_config() == job.acoustic);

  bool all_finite = true;
  ck.params.for_each_tensor([&](const std::string&, const MatD& m) {
    if (!m.all_finite()) all_finite = false;
  });
  REQUIRE(all_finite);
}

TEST_CASE("training is reproducible per seed", "[training]") {
  Corpus c = make_corpus("train_repro", 3);
  SyntheticEncoder enc(testsup::kTinyEncoderDim, 16000, 320, testsup::kTinyEncoderSeed);

  TrainJob a = make_job(c, enc, "standard", 4, testsup::fresh_dir("train_repro_c1"));
  TrainJob b = make_job(c, enc, "standard", 4, testsup::fresh_dir("train_repro_c2"));
  TrainResult ra = train_standard(a);
  TrainResult rb = train_standard(b);
  REQUIRE(ra.loss_history == rb.loss_history);

  TrainJob d = make_job(c, enc, "standard", 4, testsup::fresh_dir("train_repro_c3"));
  d.train.seed = 2;
  TrainResult rd = train_standard(d);
  REQUIRE(ra.loss_history != rd.loss_history);
}

TEST_CASE("zero-step finetune reproduces the parent bit for bit", "[training]") {
  Corpus c = make_corpus("ft_identity", 3);
  SyntheticEncoder enc(testsup::kTinyEncoderDim, 16000, 320, testsup::kTinyEncoderSeed);

  TrainJob parent_job = make_job(c, enc, "standard", 2, testsup::fresh_dir("ft_identity_c1"));
  TrainResult parent = train_standard(parent_job);

  TrainJob ft = make_job(c, enc, "finetune", 0, testsup::fresh_dir("ft_identity_c2"));
  ft.train.schedule = "constant";
  ft.train.warmup_steps = 0;
  ft.parent = &parent.checkpoint;
  TrainResult child = fine_tune(ft);

  REQUIRE(child.loss_history.empty());
  REQUIRE(child.checkpoint.meta.phase == "finetune");
  REQUIRE(child.checkpoint.meta.parent_checkpoint_hash ==
          hex64(checkpoint_hash(parent.checkpoint)));

  std::vector<const MatD*> pa, pc;
  parent.checkpoint.params.for_each_tensor([&](const std::string&, const MatD& m) { pa.push_back(&m); });
  child.checkpoint.params.for_each_tensor([&](const std::string&, const MatD& m) { pc.push_back(&m); });
  REQUIRE(pa.size() == pc.size());
  for (size_t i = 0; i < pa.size(); ++i) REQUIRE(*pa[i] == *pc[i]);
}

TEST_CASE("finetune honors the data budget", "[training]") {
  Corpus c = make_corpus("ft_budget", 4, "spk_a", "en", 0.4);
  SyntheticEncoder enc(testsup::kTinyEncoderDim, 16000, 320, testsup::kTinyEncoderSeed);

  TrainJob parent_job = make_job(c, enc, "standard", 1, testsup::fresh_dir("ft_budget_c1"));
  TrainResult parent = train_standard(parent_job);

  TrainJob ft = make_job(c, enc, "finetune", 1, testsup::fresh_dir("ft_budget_c2"));
  ft.train.schedule = "constant";
  ft.train.warmup_steps = 0;
  ft.train.data_budget_hours = 2.0 * 0.4 / 3600.0;  // room for exactly two utterances
  ft.parent = &parent.checkpoint;
  std::ostringstream log;
  ft.log = &log;
  TrainResult res = fine_tune(ft);
  REQUIRE(log.str().find("kept 2/4") != std::string::npos);
  REQUIRE(res.loss_history.size() == 1);
}

TEST_CASE("phase gates reject invalid setups", "[training]") {
  SyntheticEncoder enc(testsup::kTinyEncoderDim, 16000, 320, testsup::kTinyEncoderSeed);

  // standard refuses multi-speaker corpora
  auto dir = testsup::fresh_dir("phase_two_speakers");
  auto utts = testsup::single_speaker_utts(2, "spk_a", "en", 60);
  auto utts_b = testsup::single_speaker_utts(2, "spk_b", "de", 70);
  utts_b[0].id = "utt_b0";
  utts_b[1].id = "utt_b1";
  utts.insert(utts.end(), utts_b.begin(), utts_b.end());
  Corpus mixed;
  mixed.dir = dir;
  mixed.manifest = testsup::build_corpus(dir, utts, 16000);

  TrainJob bad = make_job(mixed, enc, "standard", 1, testsup::fresh_dir("phase_cache1"));
  REQUIRE_THROWS_AS(train_standard(bad), ConfigError);

  // pretrain accepts it and mentions the language mix in the log
  TrainJob pre = make_job(mixed, enc, "pretrain", 1, testsup::fresh_dir("phase_cache2"));
  std::ostringstream log;
  pre.log = &log;
  TrainResult res = pretrain_crosslingual(pre);
  REQUIRE(res.loss_history.size() == 1);
  REQUIRE(log.str().find("languages") != std::string::npos);

  // finetune without a parent
  Corpus single = make_corpus("phase_single", 2);
  TrainJob ft = make_job(single, enc, "finetune", 1, testsup::fresh_dir("phase_cache3"));
  ft.train.schedule = "constant";
  ft.train.warmup_steps = 0;
  REQUIRE_THROWS_AS(fine_tune(ft), ConfigError);

  // finetune with a mismatched acoustic config
  ft.parent = &res.checkpoint;
  ft.acoustic.lstm_units += 2;
  REQUIRE_THROWS_AS(fine_tune(ft), ConfigError);

  // wrapper phase checks
  TrainJob wrong = make_job(single, enc, "pretrain", 1, testsup::fresh_dir("phase_cache4"));
  REQUIRE_THROWS_AS(train_standard(wrong), ConfigError);
}

TEST_CASE("train config round trips", "[training]") {
  TrainConfig t = base_train();
  t.phase = "pretrain";
  t.data_budget_hours = 2.0;
  KeyValueConfig kv;
  t.to_config(kv);
  const TrainConfig back = TrainConfig::from_config(kv);
  REQUIRE(back.batch_size == t.batch_size);
  REQUIRE(back.max_steps == t.max_steps);
  REQUIRE(back.learning_rate == t.learning_rate);
  REQUIRE(back.weight_decay == t.weight_decay);
  REQUIRE(back.warmup_steps == t.warmup_steps);
  REQUIRE(back.phase == t.phase);
  REQUIRE(back.schedule == t.schedule);
  REQUIRE(back.data_budget_hours == t.data_budget_hours);
}
