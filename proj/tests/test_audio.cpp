#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <vector>

#include "polyvc/audio.hpp"
#include "support/synthetic.hpp"

using namespace polyvc;

namespace {

// worst-case PCM16 quantization error after one encode/decode round trip
constexpr double kPcm16Tol = 1.5 / 32768.0;
constexpr double kPi = 3.14159265358979323846;

void push_u16(std::vector<uint8_t>& v, uint16_t x) {
  v.push_back(static_cast<uint8_t>(x));
  v.push_back(static_cast<uint8_t>(x >> 8));
}
void push_u32(std::vector<uint8_t>& v, uint32_t x) {
  for (int i = 0; i < 4; ++i) v.push_back(static_cast<uint8_t>(x >> (8 * i)));
}
void push_tag(std::vector<uint8_t>& v, const char* t) { v.insert(v.end(), t, t + 4); }

void write_bytes(const std::filesystem::path& p, const std::vector<uint8_t>& bytes) {
  std::ofstream f(p, std::ios::binary);
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

// hand-built WAV with arbitrary format/channel layout
std::vector<uint8_t> make_wav(uint16_t format, uint16_t channels, uint32_t rate, uint16_t bits,
                              const std::vector<uint8_t>& data) {
  std::vector<uint8_t> v;
  push_tag(v, "RIFF");
  push_u32(v, 36 + static_cast<uint32_t>(data.size()));
  push_tag(v, "WAVE");
  push_tag(v, "fmt ");
  push_u32(v, 16);
  push_u16(v, format);
  push_u16(v, channels);
  push_u32(v, rate);
  push_u32(v, rate * channels * bits / 8);
  push_u16(v, static_cast<uint16_t>(channels * bits / 8));
  push_u16(v, bits);
  push_tag(v, "data");
  push_u32(v, static_cast<uint32_t>(data.size()));
  v.insert(v.end(), data.begin(), data.end());
  return v;
}

}  // namespace

TEST_CASE("pcm16 wav round trip preserves samples within quantization", "[audio]") {
  auto dir = testsup::fresh_dir("audio_rt");
  AudioClip clip;
  clip.sample_rate = 16000;
  for (int i = 0; i < 1600; ++i)
    clip.samples.push_back(static_cast<float>(0.8 * std::sin(2.0 * kPi * 440.0 * i / 16000.0)));

  const auto path = dir / "tone.wav";
  write_wav_pcm16(path, clip);
  AudioClip back = read_wav(path);

  REQUIRE(back.sample_rate == 16000);
  REQUIRE(back.samples.size() == clip.samples.size());
  double max_err = 0.0;
  for (size_t i = 0; i < clip.samples.size(); ++i)
    max_err = std::max(max_err, std::abs(static_cast<double>(back.samples[i]) - clip.samples[i]));
  REQUIRE(max_err <= kPcm16Tol);
}

TEST_CASE("stereo wav is downmixed by channel average", "[audio]") {
  auto dir = testsup::fresh_dir("audio_stereo");
  // left = 8192/32768 = 0.25, right = -4096/32768 = -0.125 -> mean 0.0625
  std::vector<uint8_t> data;
  for (int i = 0; i < 100; ++i) {
    push_u16(data, static_cast<uint16_t>(int16_t(8192)));
    push_u16(data, static_cast<uint16_t>(int16_t(-4096)));
  }
  const auto path = dir / "stereo.wav";
  write_bytes(path, make_wav(1, 2, 8000, 16, data));

  AudioClip clip = read_wav(path);
  REQUIRE(clip.sample_rate == 8000);
  REQUIRE(clip.samples.size() == 100);
  for (float s : clip.samples) REQUIRE(std::abs(s - 0.0625) < 1e-7);
}

TEST_CASE("float32 wav reads sample values verbatim", "[audio]") {
  auto dir = testsup::fresh_dir("audio_f32");
  const float vals[3] = {0.5f, -0.25f, 1.0f};
  std::vector<uint8_t> data(sizeof(vals));
  std::memcpy(data.data(), vals, sizeof(vals));
  const auto path = dir / "f32.wav";
  write_bytes(path, make_wav(3, 1, 22050, 32, data));

  AudioClip clip = read_wav(path);
  REQUIRE(clip.sample_rate == 22050);
  REQUIRE(clip.samples.size() == 3);
  REQUIRE(clip.samples[0] == 0.5f);
  REQUIRE(clip.samples[1] == -0.25f);
  REQUIRE(clip.samples[2] == 1.0f);
}

TEST_CASE("resampling 32k to 16k halves length and preserves a tone", "[audio]") {
  const int src = 32000, dst = 16000;
  std::vector<float> x(16000);
  for (size_t i = 0; i < x.size(); ++i)
    x[i] = static_cast<float>(std::sin(2.0 * kPi * 440.0 * static_cast<double>(i) / src));

  std::vector<float> y = resample_sinc(x, src, dst);
  REQUIRE(y.size() == 8000);

  // Pearson correlation against the analytic 16 kHz tone, away from edges
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  size_t n = 0;
  for (size_t j = 100; j + 100 < y.size(); ++j) {
    const double ref = std::sin(2.0 * kPi * 440.0 * static_cast<double>(j) / dst);
    sx += ref;
    sy += y[j];
    sxx += ref * ref;
    syy += static_cast<double>(y[j]) * y[j];
    sxy += ref * y[j];
    ++n;
  }
  const double num = sxy - sx * sy / static_cast<double>(n);
  const double den = std::sqrt((sxx - sx * sx / n) * (syy - sy * sy / n));
  REQUIRE(num / den > 0.99);
}

TEST_CASE("same-rate resample is the identity", "[audio]") {
  std::vector<float> x = {0.1f, -0.2f, 0.3f};
  REQUIRE(resample_sinc(x, 16000, 16000) == x);
}

TEST_CASE("audio io errors carry the right types", "[audio]") {
  auto dir = testsup::fresh_dir("audio_err");
  REQUIRE_THROWS_AS(read_wav(dir / "missing.wav"), IoError);

  const auto garbage = dir / "garbage.wav";
  write_bytes(garbage, {'n', 'o', 't', 'a', 'w', 'a', 'v', '!', 'x', 'x', 'x', 'x'});
  REQUIRE_THROWS_AS(read_wav(garbage), IoError);

  REQUIRE_THROWS_AS(load_audio(dir / "missing.wav", 0), ContractViolation);

  AudioClip empty;
  empty.sample_rate = 16000;
  REQUIRE_THROWS_AS(write_wav_pcm16(dir / "empty.wav", empty), ContractViolation);
}

TEST_CASE("load_audio resamples to the requested rate", "[audio]") {
  auto dir = testsup::fresh_dir("audio_load");
  AudioClip clip;
  clip.sample_rate = 32000;
  clip.samples = testsup::speechlike_signal(0.25, 32000, 11);
  const auto path = dir / "src.wav";
  write_wav_pcm16(path, clip);

  AudioClip out = load_audio(path, 16000);
  REQUIRE(out.sample_rate == 16000);
  REQUIRE(out.samples.size() == clip.samples.size() / 2);
}
