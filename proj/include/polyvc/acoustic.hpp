#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "polyvc/configfile.hpp"
#include "polyvc/matrix.hpp"
#include "polyvc/regulator.hpp"
#include "polyvc/rng.hpp"

namespace polyvc {

// Bottleneck acoustic model: a narrow prenet squeezes the content features,
// a convolutional encoder with instance norm strips speaker statistics, and
// an autoregressive LSTM decoder paints target-speaker mels. No attention,
// no stop token: the output length is fixed up front by the length regulator.

struct AcousticConfig {
  int input_dim = 1024;        // content feature width s
  int prenet_dim = 256;        // bottleneck width d, must stay well under s
  int conv_channels = 512;
  int conv_layers = 3;
  int kernel_size = 5;
  int lstm_units = 768;
  int lstm_layers = 3;
  int decoder_prenet_dim = 256;
  int n_mels = 128;
  double encoder_prenet_dropout = 0.5;  // active in training only
  double decoder_prenet_dropout = 0.5;  // active in training and inference

  void validate() const {
    if (input_dim < 1) throw ConfigError("acoustic: input_dim must be positive");
    if (prenet_dim < 1 || prenet_dim >= input_dim)
      throw ConfigError("acoustic: prenet_dim must satisfy 0 < d < input_dim");
    if (conv_channels < 1 || conv_layers < 1) throw ConfigError("acoustic: bad conv stack");
    if (kernel_size < 1 || kernel_size % 2 == 0) throw ConfigError("acoustic: kernel_size must be odd");
    if (lstm_units < 1 || lstm_layers < 1) throw ConfigError("acoustic: bad lstm stack");
    if (decoder_prenet_dim < 1) throw ConfigError("acoustic: decoder_prenet_dim must be positive");
    if (n_mels < 1) throw ConfigError("acoustic: n_mels must be positive");
    if (encoder_prenet_dropout < 0.0 || encoder_prenet_dropout >= 1.0 ||
        decoder_prenet_dropout < 0.0 || decoder_prenet_dropout >= 1.0)
      throw ConfigError("acoustic: dropout rates must lie in [0, 1)");
  }

  void to_config(KeyValueConfig& cfg) const {
    cfg.set_int("acoustic.input_dim", input_dim);
    cfg.set_int("acoustic.prenet_dim", prenet_dim);
    cfg.set_int("acoustic.conv_channels", conv_channels);
    cfg.set_int("acoustic.conv_layers", conv_layers);
    cfg.set_int("acoustic.kernel_size", kernel_size);
    cfg.set_int("acoustic.lstm_units", lstm_units);
    cfg.set_int("acoustic.lstm_layers", lstm_layers);
    cfg.set_int("acoustic.decoder_prenet_dim", decoder_prenet_dim);
    cfg.set_int("acoustic.n_mels", n_mels);
    cfg.set_double("acoustic.encoder_prenet_dropout", encoder_prenet_dropout);
    cfg.set_double("acoustic.decoder_prenet_dropout", decoder_prenet_dropout);
  }

  static AcousticConfig from_config(const KeyValueConfig& cfg) {
    AcousticConfig a;
    a.input_dim = static_cast<int>(cfg.get_int("acoustic.input_dim", a.input_dim));
    a.prenet_dim = static_cast<int>(cfg.get_int("acoustic.prenet_dim", a.prenet_dim));
    a.conv_channels = static_cast<int>(cfg.get_int("acoustic.conv_channels", a.conv_channels));
    a.conv_layers = static_cast<int>(cfg.get_int("acoustic.conv_layers", a.conv_layers));
    a.kernel_size = static_cast<int>(cfg.get_int("acoustic.kernel_size", a.kernel_size));
    a.lstm_units = static_cast<int>(cfg.get_int("acoustic.lstm_units", a.lstm_units));
    a.lstm_layers = static_cast<int>(cfg.get_int("acoustic.lstm_layers", a.lstm_layers));
    a.decoder_prenet_dim = static_cast<int>(cfg.get_int("acoustic.decoder_prenet_dim", a.decoder_prenet_dim));
    a.n_mels = static_cast<int>(cfg.get_int("acoustic.n_mels", a.n_mels));
    a.encoder_prenet_dropout = cfg.get_double("acoustic.encoder_prenet_dropout", a.encoder_prenet_dropout);
    a.decoder_prenet_dropout = cfg.get_double("acoustic.decoder_prenet_dropout", a.decoder_prenet_dropout);
    a.validate();
    return a;
  }

  bool operator==(const AcousticConfig& o) const {
    return input_dim == o.input_dim && prenet_dim == o.prenet_dim && conv_channels == o.conv_channels &&
           conv_layers == o.conv_layers && kernel_size == o.kernel_size && lstm_units == o.lstm_units &&
           lstm_layers == o.lstm_layers && decoder_prenet_dim == o.decoder_prenet_dim && n_mels == o.n_mels &&
           encoder_prenet_dropout == o.encoder_prenet_dropout &&
           decoder_prenet_dropout == o.decoder_prenet_dropout;
  }
  bool operator!=(const AcousticConfig& o) const { return !(*this == o); }
};

enum class DropoutMode { train, inference, off };

// ---- parameters ------------------------------------------------------------

/// All learnable tensors, double precision. Biases are 1 x n matrices so the
/// whole set walks through one visitor.
struct AcousticParams {
  MatD ep1_w, ep1_b, ep2_w, ep2_b;          // encoder prenet
  std::vector<MatD> conv_w, conv_b;         // conv weight rows: out_ch x (in_ch * k)
  MatD dp1_w, dp1_b, dp2_w, dp2_b;          // decoder prenet
  std::vector<MatD> lstm_wx, lstm_wh, lstm_b;  // gate order i,f,g,o stacked along rows
  MatD proj_w, proj_b;

  template <typename F>
  void for_each_tensor(F&& f) {
    f("enc_prenet.l1.w", ep1_w);
    f("enc_prenet.l1.b", ep1_b);
    f("enc_prenet.l2.w", ep2_w);
    f("enc_prenet.l2.b", ep2_b);
    for (size_t i = 0; i < conv_w.size(); ++i) {
      const std::string n = "conv" + std::to_string(i + 1);
      f(n + ".w", conv_w[i]);
      f(n + ".b", conv_b[i]);
    }
    f("dec_prenet.l1.w", dp1_w);
    f("dec_prenet.l1.b", dp1_b);
    f("dec_prenet.l2.w", dp2_w);
    f("dec_prenet.l2.b", dp2_b);
    for (size_t i = 0; i < lstm_wx.size(); ++i) {
      const std::string n = "lstm" + std::to_string(i + 1);
      f(n + ".wx", lstm_wx[i]);
      f(n + ".wh", lstm_wh[i]);
      f(n + ".b", lstm_b[i]);
    }
    f("proj.w", proj_w);
    f("proj.b", proj_b);
  }

  template <typename F>
  void for_each_tensor(F&& f) const {
    const_cast<AcousticParams*>(this)->for_each_tensor(
        [&](const std::string& n, MatD& m) { f(n, static_cast<const MatD&>(m)); });
  }

  size_t parameter_count() const {
    size_t n = 0;
    for_each_tensor([&](const std::string&, const MatD& m) { n += m.size(); });
    return n;
  }
};

namespace detail {

inline void init_fan_in(MatD& w, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(w.cols()));
  for (size_t i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-bound, bound);
}

/// Exact orthogonal matrix built from chains of random Givens rotations.
inline MatD orthogonal(size_t n, Rng& rng) {
  MatD a(n, n);
  for (size_t i = 0; i < n; ++i) a(i, i) = 1.0;
  if (n < 2) return a;

  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  int rounds = 2;
  for (size_t m = n; m > 1; m >>= 1) ++rounds;
  for (int r = 0; r < rounds; ++r) {
    for (size_t i = n - 1; i > 0; --i)
      std::swap(order[i], order[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i)))]);
    for (size_t p = 0; p + 1 < n; p += 2) {
      const size_t i = order[p], j = order[p + 1];
      const double th = rng.uniform(0.0, 6.283185307179586);
      const double c = std::cos(th), s = std::sin(th);
      double* ri = a.row(i);
      double* rj = a.row(j);
      for (size_t k = 0; k < n; ++k) {
        const double vi = ri[k], vj = rj[k];
        ri[k] = c * vi - s * vj;
        rj[k] = s * vi + c * vj;
      }
    }
  }
  return a;
}

inline MatD dropout_mask(size_t rows, size_t cols, double rate, Rng& rng) {
  MatD m(rows, cols);
  const double keep = 1.0 - rate;
  for (size_t i = 0; i < m.size(); ++i) m.data()[i] = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
  return m;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace detail

/// Allocates every tensor at its configured shape, zero filled.
inline AcousticParams allocate_acoustic_params(const AcousticConfig& cfg) {
  cfg.validate();
  AcousticParams p;
  const size_t s = static_cast<size_t>(cfg.input_dim);
  const size_t d = static_cast<size_t>(cfg.prenet_dim);
  const size_t c = static_cast<size_t>(cfg.conv_channels);
  const size_t k = static_cast<size_t>(cfg.kernel_size);
  const size_t h = static_cast<size_t>(cfg.lstm_units);
  const size_t dp = static_cast<size_t>(cfg.decoder_prenet_dim);
  const size_t nm = static_cast<size_t>(cfg.n_mels);

  p.ep1_w = MatD(d, s);
  p.ep1_b = MatD(1, d);
  p.ep2_w = MatD(d, d);
  p.ep2_b = MatD(1, d);
  for (int l = 0; l < cfg.conv_layers; ++l) {
    const size_t in_ch = l == 0 ? d : c;
    p.conv_w.emplace_back(c, in_ch * k);
    p.conv_b.emplace_back(1, c);
  }
  p.dp1_w = MatD(dp, nm);
  p.dp1_b = MatD(1, dp);
  p.dp2_w = MatD(dp, dp);
  p.dp2_b = MatD(1, dp);
  for (int l = 0; l < cfg.lstm_layers; ++l) {
    const size_t in = l == 0 ? c + dp : h;
    p.lstm_wx.emplace_back(4 * h, in);
    p.lstm_wh.emplace_back(4 * h, h);
    p.lstm_b.emplace_back(1, 4 * h);
  }
  p.proj_w = MatD(nm, h);
  p.proj_b = MatD(1, nm);
  return p;
}

inline AcousticParams init_acoustic_params(const AcousticConfig& cfg, uint64_t seed) {
  AcousticParams p = allocate_acoustic_params(cfg);
  Rng rng(derive_seed(seed, 0xAC));
  const size_t h = static_cast<size_t>(cfg.lstm_units);

  p.for_each_tensor([&](const std::string& name, MatD& m) {
    if (name.size() >= 2 && name.compare(name.size() - 2, 2, ".b") == 0) return;  // biases stay zero
    if (name.find(".wh") != std::string::npos) return;                            // handled below
    detail::init_fan_in(m, rng);
  });
  // recurrent weights: one orthogonal block per gate
  for (auto& wh : p.lstm_wh) {
    for (int gate = 0; gate < 4; ++gate) {
      MatD q = detail::orthogonal(h, rng);
      for (size_t r = 0; r < h; ++r)
        std::copy_n(q.row(r), h, wh.row(static_cast<size_t>(gate) * h + r));
    }
  }
  return p;
}

inline AcousticParams zero_like(const AcousticParams& src) {
  AcousticParams g;
  g.ep1_w = MatD(src.ep1_w.rows(), src.ep1_w.cols());
  g.ep1_b = MatD(src.ep1_b.rows(), src.ep1_b.cols());
  g.ep2_w = MatD(src.ep2_w.rows(), src.ep2_w.cols());
  g.ep2_b = MatD(src.ep2_b.rows(), src.ep2_b.cols());
  for (const auto& w : src.conv_w) g.conv_w.emplace_back(w.rows(), w.cols());
  for (const auto& b : src.conv_b) g.conv_b.emplace_back(b.rows(), b.cols());
  g.dp1_w = MatD(src.dp1_w.rows(), src.dp1_w.cols());
  g.dp1_b = MatD(src.dp1_b.rows(), src.dp1_b.cols());
  g.dp2_w = MatD(src.dp2_w.rows(), src.dp2_w.cols());
  g.dp2_b = MatD(src.dp2_b.rows(), src.dp2_b.cols());
  for (const auto& w : src.lstm_wx) g.lstm_wx.emplace_back(w.rows(), w.cols());
  for (const auto& w : src.lstm_wh) g.lstm_wh.emplace_back(w.rows(), w.cols());
  for (const auto& b : src.lstm_b) g.lstm_b.emplace_back(b.rows(), b.cols());
  g.proj_w = MatD(src.proj_w.rows(), src.proj_w.cols());
  g.proj_b = MatD(src.proj_b.rows(), src.proj_b.cols());
  return g;
}

// ---- forward ----------------------------------------------------------------

inline constexpr double kInstanceNormEps = 1e-5;

/// Everything the backward pass needs, captured during a teacher-forced run.
struct AcousticTrace {
  MatD x_in;  // features as fed to the prenet (post on_input regulation)
  // encoder prenet
  MatD ep_a0;  // dropout(relu(l1)) output
  MatD ep_z1, ep_z2;
  MatD ep_mask1, ep_mask2;
  MatD ep_out;
  // conv stack
  std::vector<MatD> conv_in;    // input to each conv layer
  std::vector<MatD> conv_pre;   // pre-relu
  std::vector<MatD> conv_relu;  // post-relu (instance norm input)
  std::vector<std::vector<double>> in_mean, in_var;  // per layer, per channel
  MatD enc_out;   // after last instance norm, T x C
  MatD dec_in;    // regulated encoder output, L x C
  // decoder, per output step
  MatD dp_input;  // L x n_mels, the prev frame actually fed (go frame then teacher)
  MatD dp_z1, dp_z2, dp_mask1, dp_mask2, dp_a1, dp_out;  // L x dp
  std::vector<MatD> lstm_x;      // per layer: L x in_dim
  std::vector<MatD> lstm_gates;  // per layer: L x 4H, post-activation i,f,g,o
  std::vector<MatD> lstm_c;      // per layer: L x H
  std::vector<MatD> lstm_h;      // per layer: L x H
  MatD y;  // L x n_mels
  size_t enc_frames = 0;
};

namespace detail {

inline MatD encoder_prenet_forward(const MatD& x, const AcousticParams& p, const AcousticConfig& cfg,
                                   DropoutMode mode, Rng& rng, AcousticTrace* trace) {
  const size_t t_frames = x.rows();
  const size_t d = static_cast<size_t>(cfg.prenet_dim);
  const bool drop = mode == DropoutMode::train && cfg.encoder_prenet_dropout > 0.0;

  MatD z1(t_frames, d), a0(t_frames, d), z2(t_frames, d), out(t_frames, d);
  MatD mask1 = drop ? dropout_mask(t_frames, d, cfg.encoder_prenet_dropout, rng) : MatD();
  MatD mask2 = drop ? dropout_mask(t_frames, d, cfg.encoder_prenet_dropout, rng) : MatD();
  for (size_t t = 0; t < t_frames; ++t) {
    matvec(p.ep1_w, x.row(t), p.ep1_b.row(0), z1.row(t));
    for (size_t i = 0; i < d; ++i) {
      double v = std::max(0.0, z1(t, i));
      if (drop) v *= mask1(t, i);
      a0(t, i) = v;
    }
    matvec(p.ep2_w, a0.row(t), p.ep2_b.row(0), z2.row(t));
    for (size_t i = 0; i < d; ++i) {
      double v = std::max(0.0, z2(t, i));
      if (drop) v *= mask2(t, i);
      out(t, i) = v;
    }
  }
  if (trace) {
    trace->ep_z1 = std::move(z1);
    trace->ep_a0 = std::move(a0);
    trace->ep_z2 = std::move(z2);
    trace->ep_mask1 = std::move(mask1);
    trace->ep_mask2 = std::move(mask2);
    trace->ep_out = out;
  }
  return out;
}

inline MatD conv1d_forward(const MatD& x, const MatD& w, const MatD& b, int kernel) {
  const size_t t_frames = x.rows(), in_ch = x.cols(), out_ch = w.rows();
  const int pad = kernel / 2;
  MatD y(t_frames, out_ch);
  for (size_t t = 0; t < t_frames; ++t) {
    for (size_t co = 0; co < out_ch; ++co) {
      const double* wr = w.row(co);
      double acc = b(0, co);
      for (int dk = 0; dk < kernel; ++dk) {
        const int64_t src = static_cast<int64_t>(t) + dk - pad;
        if (src < 0 || src >= static_cast<int64_t>(t_frames)) continue;  // zero padding
        const double* xr = x.row(static_cast<size_t>(src));
        for (size_t ci = 0; ci < in_ch; ++ci) acc += wr[ci * static_cast<size_t>(kernel) + dk] * xr[ci];
      }
      y(t, co) = acc;
    }
  }
  return y;
}

/// Per-channel normalization over the time axis, population statistics,
/// no learned affine.
inline MatD instance_norm_forward(const MatD& x, std::vector<double>* mean_out,
                                  std::vector<double>* var_out) {
  const size_t t_frames = x.rows(), ch = x.cols();
  std::vector<double> mean(ch, 0.0), var(ch, 0.0);
  for (size_t t = 0; t < t_frames; ++t)
    for (size_t c = 0; c < ch; ++c) mean[c] += x(t, c);
  for (size_t c = 0; c < ch; ++c) mean[c] /= static_cast<double>(t_frames);
  for (size_t t = 0; t < t_frames; ++t)
    for (size_t c = 0; c < ch; ++c) {
      const double dlt = x(t, c) - mean[c];
      var[c] += dlt * dlt;
    }
  for (size_t c = 0; c < ch; ++c) var[c] /= static_cast<double>(t_frames);

  MatD y(t_frames, ch);
  for (size_t c = 0; c < ch; ++c) {
    const double inv = 1.0 / std::sqrt(var[c] + kInstanceNormEps);
    for (size_t t = 0; t < t_frames; ++t) y(t, c) = (x(t, c) - mean[c]) * inv;
  }
  if (mean_out) *mean_out = std::move(mean);
  if (var_out) *var_out = std::move(var);
  return y;
}

inline MatD conv_stack_forward(const MatD& prenet_out, const AcousticParams& p, const AcousticConfig& cfg,
                               AcousticTrace* trace) {
  MatD cur = prenet_out;
  for (int l = 0; l < cfg.conv_layers; ++l) {
    if (trace) trace->conv_in.push_back(cur);
    MatD pre = conv1d_forward(cur, p.conv_w[static_cast<size_t>(l)], p.conv_b[static_cast<size_t>(l)],
                              cfg.kernel_size);
    MatD relu = pre;
    for (size_t i = 0; i < relu.size(); ++i) relu.data()[i] = std::max(0.0, relu.data()[i]);
    std::vector<double> mean, var;
    cur = instance_norm_forward(relu, &mean, &var);
    if (trace) {
      trace->conv_pre.push_back(std::move(pre));
      trace->conv_relu.push_back(std::move(relu));
      trace->in_mean.push_back(std::move(mean));
      trace->in_var.push_back(std::move(var));
    }
  }
  return cur;
}

struct DecoderStepCache {
  std::vector<double> dp_z1, dp_z2, dp_mask1, dp_mask2, dp_a1, dp_out;
  std::vector<std::vector<double>> gates;  // per layer, 4H post-activation
  std::vector<std::vector<double>> x;      // per layer input
};

}  // namespace detail

/// Recurrent state threaded through decoder steps.
struct DecoderState {
  std::vector<std::vector<double>> h, c;

  static DecoderState zeros(const AcousticConfig& cfg) {
    DecoderState s;
    s.h.assign(static_cast<size_t>(cfg.lstm_layers),
               std::vector<double>(static_cast<size_t>(cfg.lstm_units), 0.0));
    s.c = s.h;
    return s;
  }
};

/// One autoregressive step: decoder prenet on the previous frame, stacked
/// LSTMs over [encoder frame ; prenet out], linear projection to a mel frame.
inline std::vector<double> decoder_step(const AcousticParams& p, const AcousticConfig& cfg,
                                        const double* enc_frame, const double* prev_mel,
                                        DecoderState& state, DropoutMode mode, Rng& rng,
                                        detail::DecoderStepCache* cache = nullptr) {
  const size_t dp = static_cast<size_t>(cfg.decoder_prenet_dim);
  const size_t h = static_cast<size_t>(cfg.lstm_units);
  const size_t c_ch = static_cast<size_t>(cfg.conv_channels);
  const size_t nm = static_cast<size_t>(cfg.n_mels);
  const bool drop = mode != DropoutMode::off && cfg.decoder_prenet_dropout > 0.0;
  const double keep = 1.0 - cfg.decoder_prenet_dropout;

  // decoder prenet (dropout stays on at inference, by design)
  std::vector<double> z1(dp), a1(dp), z2(dp), a2(dp), mask1(dp, 1.0), mask2(dp, 1.0);
  matvec(p.dp1_w, prev_mel, p.dp1_b.row(0), z1.data());
  for (size_t i = 0; i < dp; ++i) {
    if (drop) mask1[i] = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
    a1[i] = std::max(0.0, z1[i]) * mask1[i];
  }
  matvec(p.dp2_w, a1.data(), p.dp2_b.row(0), z2.data());
  for (size_t i = 0; i < dp; ++i) {
    if (drop) mask2[i] = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
    a2[i] = std::max(0.0, z2[i]) * mask2[i];
  }

  if (cache) {
    cache->dp_z1 = z1;
    cache->dp_z2 = z2;
    cache->dp_mask1 = mask1;
    cache->dp_mask2 = mask2;
    cache->dp_a1 = a1;
    cache->dp_out = a2;
    cache->gates.clear();
    cache->x.clear();
  }

  std::vector<double> x;
  x.reserve(c_ch + dp);
  x.assign(enc_frame, enc_frame + c_ch);
  x.insert(x.end(), a2.begin(), a2.end());

  std::vector<double> pre(4 * h);
  for (int l = 0; l < cfg.lstm_layers; ++l) {
    const size_t li = static_cast<size_t>(l);
    if (cache) cache->x.push_back(x);
    matvec(p.lstm_wx[li], x.data(), p.lstm_b[li].row(0), pre.data());
    matvec_add(p.lstm_wh[li], state.h[li].data(), pre.data());
    std::vector<double> gates(4 * h);
    for (size_t i = 0; i < h; ++i) {
      const double gi = detail::sigmoid(pre[i]);
      const double gf = detail::sigmoid(pre[h + i]);
      const double gg = std::tanh(pre[2 * h + i]);
      const double go = detail::sigmoid(pre[3 * h + i]);
      gates[i] = gi;
      gates[h + i] = gf;
      gates[2 * h + i] = gg;
      gates[3 * h + i] = go;
      state.c[li][i] = gf * state.c[li][i] + gi * gg;
      state.h[li][i] = go * std::tanh(state.c[li][i]);
    }
    if (cache) cache->gates.push_back(std::move(gates));
    x = state.h[li];
  }

  std::vector<double> mel(nm);
  matvec(p.proj_w, x.data(), p.proj_b.row(0), mel.data());
  return mel;
}

/// Prenet squeeze on its own: (T x s) content features to (T x d).
inline MatD acoustic_prenet_forward(const MatF& feats, const AcousticParams& p, const AcousticConfig& cfg,
                                    DropoutMode mode, uint64_t seed) {
  if (static_cast<int>(feats.cols()) != cfg.input_dim)
    throw ContractViolation("prenet: feature dim " + std::to_string(feats.cols()) + " != input_dim " +
                            std::to_string(cfg.input_dim));
  Rng rng(derive_seed(seed, 0xE0));
  return detail::encoder_prenet_forward(widen(feats), p, cfg, mode, rng, nullptr);
}

/// Prenet plus conv stack: (T x s) to (T x conv_channels).
inline MatD acoustic_encoder_forward(const MatF& feats, const AcousticParams& p, const AcousticConfig& cfg,
                                     DropoutMode mode, uint64_t seed) {
  if (static_cast<int>(feats.cols()) != cfg.input_dim)
    throw ContractViolation("encoder: feature dim mismatch");
  Rng rng(derive_seed(seed, 0xE0));
  MatD pn = detail::encoder_prenet_forward(widen(feats), p, cfg, mode, rng, nullptr);
  return detail::conv_stack_forward(pn, p, cfg, nullptr);
}

namespace detail {

inline MatD run_model(const MatF& feats, const MatD* teacher, size_t out_len, const AcousticParams& p,
                      const AcousticConfig& cfg, const RegulatorConfig& reg, DropoutMode mode,
                      uint64_t seed, AcousticTrace* trace) {
  if (feats.rows() == 0) throw InsufficientDataError("acoustic: empty feature matrix");
  if (static_cast<int>(feats.cols()) != cfg.input_dim)
    throw ContractViolation("acoustic: feature dim " + std::to_string(feats.cols()) + " != input_dim " +
                            std::to_string(cfg.input_dim));
  if (out_len == 0) throw ContractViolation("acoustic: zero output length");
  if (teacher) {
    if (teacher->rows() != out_len) throw ContractViolation("acoustic: teacher length != output length");
    if (static_cast<int>(teacher->cols()) != cfg.n_mels)
      throw ContractViolation("acoustic: teacher mel dim mismatch");
  }

  Rng enc_rng(derive_seed(seed, 0xE0));
  Rng dec_rng(derive_seed(seed, 0xD0));

  MatD x = widen(feats);
  if (reg.placement == RegulatorPlacement::on_input) x = regulate(x, out_len, reg.mode);
  if (trace) trace->x_in = x;

  MatD pn = encoder_prenet_forward(x, p, cfg, mode, enc_rng, trace);
  MatD enc = conv_stack_forward(pn, p, cfg, trace);
  if (trace) {
    trace->enc_out = enc;
    trace->enc_frames = enc.rows();
  }

  MatD dec_in = reg.placement == RegulatorPlacement::after_encoder ? regulate(enc, out_len, reg.mode)
                                                                   : std::move(enc);
  if (dec_in.rows() != out_len) throw ContractViolation("acoustic: regulated length mismatch");
  if (trace) trace->dec_in = dec_in;

  const size_t nm = static_cast<size_t>(cfg.n_mels);
  const size_t dp = static_cast<size_t>(cfg.decoder_prenet_dim);
  const size_t h = static_cast<size_t>(cfg.lstm_units);
  MatD y(out_len, nm);
  DecoderState state = DecoderState::zeros(cfg);
  std::vector<double> prev(nm, 0.0);  // go frame

  if (trace) {
    trace->dp_input = MatD(out_len, nm);
    trace->dp_z1 = MatD(out_len, dp);
    trace->dp_z2 = MatD(out_len, dp);
    trace->dp_mask1 = MatD(out_len, dp);
    trace->dp_mask2 = MatD(out_len, dp);
    trace->dp_a1 = MatD(out_len, dp);
    trace->dp_out = MatD(out_len, dp);
    trace->lstm_x.clear();
    trace->lstm_gates.clear();
    trace->lstm_c.clear();
    trace->lstm_h.clear();
    for (int l = 0; l < cfg.lstm_layers; ++l) {
      const size_t in = l == 0 ? static_cast<size_t>(cfg.conv_channels) + dp : h;
      trace->lstm_x.emplace_back(out_len, in);
      trace->lstm_gates.emplace_back(out_len, 4 * h);
      trace->lstm_c.emplace_back(out_len, h);
      trace->lstm_h.emplace_back(out_len, h);
    }
  }

  DecoderStepCache cache;
  for (size_t t = 0; t < out_len; ++t) {
    if (trace) std::copy(prev.begin(), prev.end(), trace->dp_input.row(t));
    std::vector<double> mel =
        decoder_step(p, cfg, dec_in.row(t), prev.data(), state, mode, dec_rng, trace ? &cache : nullptr);
    std::copy(mel.begin(), mel.end(), y.row(t));
    if (trace) {
      std::copy(cache.dp_z1.begin(), cache.dp_z1.end(), trace->dp_z1.row(t));
      std::copy(cache.dp_z2.begin(), cache.dp_z2.end(), trace->dp_z2.row(t));
      std::copy(cache.dp_mask1.begin(), cache.dp_mask1.end(), trace->dp_mask1.row(t));
      std::copy(cache.dp_mask2.begin(), cache.dp_mask2.end(), trace->dp_mask2.row(t));
      std::copy(cache.dp_a1.begin(), cache.dp_a1.end(), trace->dp_a1.row(t));
      std::copy(cache.dp_out.begin(), cache.dp_out.end(), trace->dp_out.row(t));
      for (int l = 0; l < cfg.lstm_layers; ++l) {
        const size_t li = static_cast<size_t>(l);
        std::copy(cache.x[li].begin(), cache.x[li].end(), trace->lstm_x[li].row(t));
        std::copy(cache.gates[li].begin(), cache.gates[li].end(), trace->lstm_gates[li].row(t));
        std::copy(state.c[li].begin(), state.c[li].end(), trace->lstm_c[li].row(t));
        std::copy(state.h[li].begin(), state.h[li].end(), trace->lstm_h[li].row(t));
      }
    }
    if (teacher) {
      for (size_t i = 0; i < nm; ++i) prev[i] = (*teacher)(t, i);  // teacher forcing
    } else {
      prev = mel;  // free running
    }
  }
  if (trace) trace->y = y;
  return y;
}

}  // namespace detail

/// Teacher-forced pass over a whole utterance; fills the trace for backward.
inline MatD acoustic_teacher_forward(const MatF& feats, const MatD& teacher, const AcousticParams& p,
                                     const AcousticConfig& cfg, const RegulatorConfig& reg,
                                     DropoutMode mode, uint64_t seed, AcousticTrace* trace = nullptr) {
  return detail::run_model(feats, &teacher, teacher.rows(), p, cfg, reg, mode, seed, trace);
}

/// Free-running generation: feeds its own predictions back, runs exactly
/// out_len steps.
inline MatD acoustic_generate(const MatF& feats, size_t out_len, const AcousticParams& p,
                              const AcousticConfig& cfg, const RegulatorConfig& reg, DropoutMode mode,
                              uint64_t seed) {
  return detail::run_model(feats, nullptr, out_len, p, cfg, reg, mode, seed, nullptr);
}

// ---- backward ---------------------------------------------------------------

namespace detail {

inline void instance_norm_backward(const MatD& relu_out, const std::vector<double>& mean,
                                   const std::vector<double>& var, const MatD& grad_y, MatD& grad_x) {
  const size_t t_frames = relu_out.rows(), ch = relu_out.cols();
  const double n = static_cast<double>(t_frames);
  for (size_t c = 0; c < ch; ++c) {
    const double inv = 1.0 / std::sqrt(var[c] + kInstanceNormEps);
    double sum_dy = 0.0, sum_dy_y = 0.0;
    for (size_t t = 0; t < t_frames; ++t) {
      const double yv = (relu_out(t, c) - mean[c]) * inv;
      sum_dy += grad_y(t, c);
      sum_dy_y += grad_y(t, c) * yv;
    }
    for (size_t t = 0; t < t_frames; ++t) {
      const double yv = (relu_out(t, c) - mean[c]) * inv;
      grad_x(t, c) = inv * (grad_y(t, c) - sum_dy / n - yv * sum_dy_y / n);
    }
  }
}

inline void conv1d_backward(const MatD& x, const MatD& w, int kernel, const MatD& grad_y, MatD& grad_x,
                            MatD& grad_w, MatD& grad_b) {
  const size_t t_frames = x.rows(), in_ch = x.cols(), out_ch = w.rows();
  const int pad = kernel / 2;
  grad_x.fill(0.0);
  for (size_t t = 0; t < t_frames; ++t) {
    for (size_t co = 0; co < out_ch; ++co) {
      const double gy = grad_y(t, co);
      if (gy == 0.0) continue;
      grad_b(0, co) += gy;
      double* gwr = grad_w.row(co);
      const double* wr = w.row(co);
      for (int dk = 0; dk < kernel; ++dk) {
        const int64_t src = static_cast<int64_t>(t) + dk - pad;
        if (src < 0 || src >= static_cast<int64_t>(t_frames)) continue;
        const double* xr = x.row(static_cast<size_t>(src));
        double* gxr = grad_x.row(static_cast<size_t>(src));
        for (size_t ci = 0; ci < in_ch; ++ci) {
          gwr[ci * static_cast<size_t>(kernel) + dk] += gy * xr[ci];
          gxr[ci] += gy * wr[ci * static_cast<size_t>(kernel) + dk];
        }
      }
    }
  }
}

}  // namespace detail

/// Accumulates parameter gradients for d(loss)/d(y) = grad_y. The trace must
/// come from acoustic_teacher_forward with the same params and config.
/// Teacher-forced previous frames are data, so no gradient flows into them.
inline void acoustic_backward(const AcousticTrace& trace, const MatD& grad_y, const AcousticParams& p,
                              const AcousticConfig& cfg, const RegulatorConfig& reg,
                              AcousticParams& grads) {
  const size_t out_len = trace.y.rows();
  const size_t nm = static_cast<size_t>(cfg.n_mels);
  const size_t h = static_cast<size_t>(cfg.lstm_units);
  const size_t dp = static_cast<size_t>(cfg.decoder_prenet_dim);
  const size_t c_ch = static_cast<size_t>(cfg.conv_channels);
  const int layers = cfg.lstm_layers;
  if (grad_y.rows() != out_len || grad_y.cols() != nm)
    throw ContractViolation("acoustic_backward: grad shape mismatch");

  MatD grad_dec_in(out_len, c_ch);

  // dh/dc carried backwards through time, per layer
  std::vector<std::vector<double>> dh(static_cast<size_t>(layers), std::vector<double>(h, 0.0));
  std::vector<std::vector<double>> dc(static_cast<size_t>(layers), std::vector<double>(h, 0.0));
  std::vector<double> da(4 * h), dx_low;

  for (size_t t = out_len; t-- > 0;) {
    // projection
    const double* gy = grad_y.row(t);
    for (size_t i = 0; i < nm; ++i) grads.proj_b(0, i) += gy[i];
    outer_add(grads.proj_w, gy, trace.lstm_h[static_cast<size_t>(layers - 1)].row(t));
    // seed top-layer dh with projection pullback
    {
      std::vector<double>& d = dh[static_cast<size_t>(layers - 1)];
      for (size_t i = 0; i < nm; ++i) {
        const double* wr = p.proj_w.row(i);
        for (size_t j = 0; j < h; ++j) d[j] += gy[i] * wr[j];
      }
    }

    for (int l = layers - 1; l >= 0; --l) {
      const size_t li = static_cast<size_t>(l);
      const double* gates = trace.lstm_gates[li].row(t);
      const double* c_now = trace.lstm_c[li].row(t);
      const double* c_prev_row = t > 0 ? trace.lstm_c[li].row(t - 1) : nullptr;
      const double* h_prev_row = t > 0 ? trace.lstm_h[li].row(t - 1) : nullptr;
      std::vector<double>& dhl = dh[li];
      std::vector<double>& dcl = dc[li];

      for (size_t i = 0; i < h; ++i) {
        const double gi = gates[i], gf = gates[h + i], gg = gates[2 * h + i], go = gates[3 * h + i];
        const double tc = std::tanh(c_now[i]);
        const double d_o = dhl[i] * tc;
        double d_c = dcl[i] + dhl[i] * go * (1.0 - tc * tc);
        const double cp = c_prev_row ? c_prev_row[i] : 0.0;
        const double d_i = d_c * gg;
        const double d_g = d_c * gi;
        const double d_f = d_c * cp;
        dcl[i] = d_c * gf;  // flows to step t-1
        da[i] = d_i * gi * (1.0 - gi);
        da[h + i] = d_f * gf * (1.0 - gf);
        da[2 * h + i] = d_g * (1.0 - gg * gg);
        da[3 * h + i] = d_o * go * (1.0 - go);
      }

      const double* x_t = trace.lstm_x[li].row(t);
      const size_t in_dim = trace.lstm_x[li].cols();
      outer_add(grads.lstm_wx[li], da.data(), x_t);
      for (size_t i = 0; i < 4 * h; ++i) grads.lstm_b[li](0, i) += da[i];
      if (h_prev_row) outer_add(grads.lstm_wh[li], da.data(), h_prev_row);

      // pull back into previous h and into layer input
      std::fill(dhl.begin(), dhl.end(), 0.0);
      if (t > 0) matvec_transpose_add(p.lstm_wh[li], da.data(), dhl.data());
      dx_low.assign(in_dim, 0.0);
      matvec_transpose_add(p.lstm_wx[li], da.data(), dx_low.data());
      if (l > 0) {
        std::vector<double>& below = dh[static_cast<size_t>(l - 1)];
        for (size_t i = 0; i < h; ++i) below[i] += dx_low[i];
      }
    }

    // dx_low now holds the gradient wrt [enc frame ; decoder prenet out]
    for (size_t i = 0; i < c_ch; ++i) grad_dec_in(t, i) += dx_low[i];
    // decoder prenet backward for this step; its input was the previous
    // teacher frame (or the go frame), which is data and takes no gradient
    std::vector<double> d_a2(dp);
    for (size_t i = 0; i < dp; ++i) d_a2[i] = dx_low[c_ch + i];
    std::vector<double> d_z2(dp);
    for (size_t i = 0; i < dp; ++i)
      d_z2[i] = trace.dp_z2(t, i) > 0.0 ? d_a2[i] * trace.dp_mask2(t, i) : 0.0;
    outer_add(grads.dp2_w, d_z2.data(), trace.dp_a1.row(t));
    for (size_t i = 0; i < dp; ++i) grads.dp2_b(0, i) += d_z2[i];
    std::vector<double> d_a1(dp, 0.0);
    matvec_transpose_add(p.dp2_w, d_z2.data(), d_a1.data());
    std::vector<double> d_z1(dp);
    for (size_t i = 0; i < dp; ++i)
      d_z1[i] = trace.dp_z1(t, i) > 0.0 ? d_a1[i] * trace.dp_mask1(t, i) : 0.0;
    outer_add(grads.dp1_w, d_z1.data(), trace.dp_input.row(t));
    for (size_t i = 0; i < dp; ++i) grads.dp1_b(0, i) += d_z1[i];
  }

  // regulator pullback onto encoder frames
  MatD grad_enc = reg.placement == RegulatorPlacement::after_encoder
                      ? regulate_backward(grad_dec_in, trace.enc_frames, reg.mode)
                      : std::move(grad_dec_in);

  // conv stack, last to first
  MatD cur = std::move(grad_enc);
  for (int l = cfg.conv_layers - 1; l >= 0; --l) {
    const size_t li = static_cast<size_t>(l);
    const MatD& relu_out = trace.conv_relu[li];
    MatD d_relu(relu_out.rows(), relu_out.cols());
    detail::instance_norm_backward(relu_out, trace.in_mean[li], trace.in_var[li], cur, d_relu);
    const MatD& pre = trace.conv_pre[li];
    for (size_t i = 0; i < d_relu.size(); ++i)
      if (pre.data()[i] <= 0.0) d_relu.data()[i] = 0.0;
    MatD d_in(trace.conv_in[li].rows(), trace.conv_in[li].cols());
    detail::conv1d_backward(trace.conv_in[li], p.conv_w[li], cfg.kernel_size, d_relu, d_in,
                            grads.conv_w[li], grads.conv_b[li]);
    cur = std::move(d_in);
  }

  // encoder prenet backward
  const size_t t_frames = trace.x_in.rows();
  const size_t d_dim = static_cast<size_t>(cfg.prenet_dim);
  const bool drop = trace.ep_mask1.size() > 0;
  std::vector<double> d_z2e(d_dim), d_a0(d_dim), d_z1e(d_dim);
  for (size_t t = 0; t < t_frames; ++t) {
    for (size_t i = 0; i < d_dim; ++i) {
      double g = cur(t, i);
      if (drop) g *= trace.ep_mask2(t, i);
      d_z2e[i] = trace.ep_z2(t, i) > 0.0 ? g : 0.0;
    }
    outer_add(grads.ep2_w, d_z2e.data(), trace.ep_a0.row(t));
    for (size_t i = 0; i < d_dim; ++i) grads.ep2_b(0, i) += d_z2e[i];
    std::fill(d_a0.begin(), d_a0.end(), 0.0);
    matvec_transpose_add(p.ep2_w, d_z2e.data(), d_a0.data());
    for (size_t i = 0; i < d_dim; ++i) {
      double g = d_a0[i];
      if (drop) g *= trace.ep_mask1(t, i);
      d_z1e[i] = trace.ep_z1(t, i) > 0.0 ? g : 0.0;
    }
    outer_add(grads.ep1_w, d_z1e.data(), trace.x_in.row(t));
    for (size_t i = 0; i < d_dim; ++i) grads.ep1_b(0, i) += d_z1e[i];
  }
}

}  // namespace polyvc
