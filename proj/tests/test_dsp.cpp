#include <doctest.h>

#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <random>
#include <algorithm>

#include "musrec/dsp.hpp"
#include "musrec/error.hpp"

using namespace musrec;
namespace fs = std::filesystem;

namespace {

Signal tone(double hz, double seconds, double amp = 0.5, double sr = 16000.0) {
  Signal s;
  s.sample_rate = sr;
  s.samples.resize(static_cast<std::size_t>(seconds * sr));
  for (std::size_t i = 0; i < s.samples.size(); ++i) s.samples[i] = amp * std::sin(2 * M_PI * hz * double(i) / sr);
  return s;
}

fs::path tmp(const std::string& name) { return fs::temp_directory_path() / ("musrec_test_" + name); }

}  // namespace

TEST_CASE("periodic Hann window") {
  const auto w = hann_window(8);
  CHECK(w[0] == 0.0);
  CHECK(w[4] == doctest::Approx(1.0));
  CHECK(w[2] == doctest::Approx(0.5));
  double s = 0.0;
  for (double x : w) s += x;
  CHECK(s == doctest::Approx(4.0));
}

TEST_CASE("stft frame count and agreement with a direct DFT") {
  Signal s = tone(1000.0, 0.25);
  for (std::size_t i = 0; i < s.samples.size(); ++i) s.samples[i] += 0.1 * std::cos(0.37 * double(i));
  const std::size_t n = 256, hop = 100;
  const StftFrames f = stft(s, n, hop);
  CHECK(f.frames == (s.samples.size() - n) / hop + 1);
  CHECK(f.bins == n / 2 + 1);
  const auto w = hann_window(n);
  for (std::size_t fr : {std::size_t{0}, std::size_t{7}}) {
    for (std::size_t k : {std::size_t{0}, std::size_t{16}, std::size_t{33}, std::size_t{128}}) {
      std::complex<double> acc = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        acc += w[i] * s.samples[fr * hop + i] * std::polar(1.0, -2 * M_PI * double(k * i) / double(n));
      CHECK(std::abs(f(fr, k) - acc) < 1e-9);
    }
  }
  CHECK_THROWS_AS(stft(s, 128, 0), ArgumentError);
  CHECK_THROWS_AS(stft(tone(440, 0.001), 256, 64), ArgumentError);
}

TEST_CASE("a bin-centred tone peaks at A*N/4") {
  const std::size_t n = 512;
  const double hz = 16000.0 * 32 / double(n);
  const StftFrames f = stft(tone(hz, 0.1, 0.8), n, 128);
  CHECK(std::abs(f(2, 32)) == doctest::Approx(0.8 * double(n) / 4).epsilon(1e-9));
}

TEST_CASE("mel scale") {
  CHECK(hz_to_mel(0.0) == 0.0);
  CHECK(hz_to_mel(700.0) == doctest::Approx(2595.0 * std::log10(2.0)));
  for (double hz : {50.0, 440.0, 7000.0}) CHECK(mel_to_hz(hz_to_mel(hz)) == doctest::Approx(hz).epsilon(1e-12));
  MelConfig cfg;
  const Matrix fb = mel_filterbank(cfg, 16000.0);
  CHECK(fb.rows() == cfg.n_mels);
  CHECK(fb.cols() == cfg.window / 2 + 1);
  for (std::size_t m = 0; m < fb.rows(); ++m) {
    double peak = 0.0;
    for (std::size_t k = 0; k < fb.cols(); ++k) {
      CHECK(fb(m, k) >= 0.0);
      peak = std::max(peak, fb(m, k));
    }
    CHECK(peak <= 1.0 + 1e-12);
    CHECK(peak > 0.0);
  }
  const auto centers = mel_band_centers(cfg, 16000.0);
  for (std::size_t i = 1; i < centers.size(); ++i) CHECK(centers[i] > centers[i - 1]);
}

TEST_CASE("mel spectrogram puts a tone's energy in the nearest band") {
  MelConfig cfg;
  const auto centers = mel_band_centers(cfg, 16000.0);
  const Matrix lm = mel_spectrogram(tone(centers[6], 0.5), cfg);
  std::size_t best = 0;
  for (std::size_t b = 1; b < cfg.n_mels; ++b)
    if (lm(3, b) > lm(3, best)) best = b;
  CHECK(best == 6);
  const Matrix silent = mel_spectrogram(Signal{std::vector<double>(8000, 0.0), 16000.0}, cfg);
  CHECK(silent(0, 0) == doctest::Approx(std::log(cfg.floor)));
}

TEST_CASE("pitch classes and chroma") {
  CHECK(pitch_class(440.0) == 9);
  CHECK(pitch_class(880.0) == 9);
  CHECK(pitch_class(261.6256) == 0);
  CHECK(pitch_class(246.9417) == 11);
  const Chromagram c = chroma_from_cqt(cqt(tone(440.0, 1.0)));
  CHECK(c.energies.rows() == 12);
  const std::size_t f = c.frames() / 2;
  std::size_t best = 0;
  double norm = 0.0;
  for (std::size_t p = 0; p < 12; ++p) {
    norm += c.energies(p, f) * c.energies(p, f);
    if (c.energies(p, f) > c.energies(best, f)) best = p;
  }
  CHECK(best == 9);
  CHECK(norm == doctest::Approx(1.0));
  const Chromagram z = chroma_from_cqt(cqt(Signal{std::vector<double>(16000, 0.0), 16000.0}));
  for (bool s : z.silent) CHECK(s);
}

TEST_CASE("cqt: OpenMP and reference paths agree; bin layout") {
  const Signal s = tone(330.0, 0.5);
  const CqtSpectrum a = cqt(s), b = cqt_reference(s);
  REQUIRE(a.magnitudes.size() == b.magnitudes.size());
  for (std::size_t i = 0; i < a.magnitudes.size(); ++i) CHECK(a.magnitudes[i] == doctest::Approx(b.magnitudes[i]).epsilon(1e-12));
  CHECK(a.bin_frequencies.size() == 84);
  CHECK(a.bin_frequencies[12] == doctest::Approx(2 * a.bin_frequencies[0]));
  CHECK(a.magnitudes.cols() == s.samples.size() / 512 + 1);
  CqtConfig bad;
  bad.octaves = 9;
  CHECK_THROWS_AS(cqt(s, bad), ArgumentError);
}

TEST_CASE("wav round trip and error paths") {
  const Signal s = tone(440.0, 0.1);
  const fs::path p = tmp("rt.wav");
  wav_write(p, s);
  const Signal r = wav_read(p);
  CHECK(r.sample_rate == s.sample_rate);
  REQUIRE(r.samples.size() == s.samples.size());
  for (std::size_t i = 0; i < s.samples.size(); ++i) CHECK(std::abs(r.samples[i] - s.samples[i]) <= 1.0 / 32767.0);

  CHECK_THROWS_AS(wav_read(tmp("does_not_exist.wav")), FileError);
  {
    std::ofstream os(tmp("bad.wav"), std::ios::binary);
    os << "RIFX not a wave file at all";
  }
  CHECK_THROWS_AS(wav_read(tmp("bad.wav")), FormatError);
  fs::remove(p);
  fs::remove(tmp("bad.wav"));
}

TEST_CASE("signal validation") {
  CHECK_THROWS_AS(validate(Signal{{0.0}, 0.0}), ArgumentError);
  CHECK_THROWS_AS(validate(Signal{{NAN}, 16000.0}), NumericError);
}

TEST_CASE("stft: zero input, Parseval and Hann leakage") {
  const Signal zero{std::vector<double>(2048, 0.0), 16000.0};
  const StftFrames z = stft(zero, 512, 256);
  for (const auto& x : z.data) CHECK(x == std::complex<double>(0.0, 0.0));

  Signal noise{std::vector<double>(4096), 16000.0};
  std::mt19937_64 rng(3);
  std::normal_distribution<double> d;
  for (double& x : noise.samples) x = d(rng);
  const std::size_t n = 512;
  const StftFrames f = stft(noise, n, 300);
  const auto w = hann_window(n);
  for (std::size_t fr = 0; fr < f.frames; ++fr) {
    double spec = 0.0, time = 0.0;
    for (std::size_t k = 0; k < f.bins; ++k) spec += (k == 0 || k == n / 2 ? 1.0 : 2.0) * std::norm(f(fr, k));
    for (std::size_t i = 0; i < n; ++i) time += std::pow(w[i] * noise.samples[fr * 300 + i], 2);
    CHECK(std::abs(spec / double(n) - time) <= 1e-9 * time);
  }

  const StftFrames t = stft(tone(16000.0 * 40 / double(n), 0.2), n, 128);
  const double peak = std::abs(t(1, 40));
  for (std::size_t k = 0; k < t.bins; ++k)
    if (k + 1 < 40 || k > 41) CHECK(std::abs(t(1, k)) < peak * std::pow(10.0, -30.0 / 20.0));
}

TEST_CASE("mel: positive for noise, power scales with amplitude squared, ladder is monotone") {
  MelConfig cfg;
  Signal noise{std::vector<double>(8000), 16000.0};
  std::mt19937_64 rng(5);
  std::normal_distribution<double> d;
  for (double& x : noise.samples) x = d(rng);
  const Matrix p = mel_power(noise, cfg);
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i] > 0.0);
  Signal loud = noise;
  for (double& x : loud.samples) x *= 3.0;
  const Matrix pl = mel_power(loud, cfg);
  for (std::size_t i = 0; i < p.size(); ++i) CHECK(pl[i] == doctest::Approx(9.0 * p[i]).epsilon(1e-12));

  std::size_t last = 0;
  for (double hz = 100.0; hz < 7500.0; hz *= 1.3) {
    const Matrix lm = mel_spectrogram(tone(hz, 0.2), cfg);
    std::size_t best = 0;
    for (std::size_t b = 1; b < cfg.n_mels; ++b)
      if (lm(2, b) > lm(2, best)) best = b;
    CHECK(best >= last);
    last = best;
  }
  CHECK(last >= cfg.n_mels - 2);
}

TEST_CASE("cqt: bin grid, A4 argmax, octave spacing, silence") {
  const CqtSpectrum a = cqt(tone(440.0, 1.0));
  for (std::size_t k = 1; k < a.bin_frequencies.size(); ++k)
    CHECK(a.bin_frequencies[k] / a.bin_frequencies[k - 1] == doctest::Approx(std::pow(2.0, 1.0 / 12)).epsilon(1e-14));
  auto argmax = [](const CqtSpectrum& c) {
    const std::size_t f = c.magnitudes.cols() / 2;
    std::size_t best = 0;
    for (std::size_t b = 1; b < c.magnitudes.rows(); ++b)
      if (c.magnitudes(b, f) > c.magnitudes(best, f)) best = b;
    return best;
  };
  std::size_t nearest = 0;
  for (std::size_t b = 1; b < a.bin_frequencies.size(); ++b)
    if (std::abs(std::log(a.bin_frequencies[b] / 440.0)) < std::abs(std::log(a.bin_frequencies[nearest] / 440.0)))
      nearest = b;
  CHECK(argmax(a) == nearest);
  CHECK(argmax(cqt(tone(880.0, 1.0))) == nearest + 12);
  const CqtSpectrum s = cqt(Signal{std::vector<double>(8000, 0.0), 16000.0});
  for (std::size_t i = 0; i < s.magnitudes.size(); ++i) CHECK(s.magnitudes[i] == 0.0);
}

TEST_CASE("chroma of a C major triad and the bins-per-octave guard") {
  Signal triad = tone(261.6256, 1.0);
  const Signal e = tone(329.6276, 1.0), g = tone(391.9954, 1.0);
  for (std::size_t i = 0; i < triad.samples.size(); ++i) triad.samples[i] += e.samples[i] + g.samples[i];
  const Chromagram c = chroma_from_cqt(cqt(triad));
  const std::size_t f = c.frames() / 2;
  std::vector<std::size_t> order(12);
  for (std::size_t i = 0; i < 12; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](auto x, auto y) { return c.energies(x, f) > c.energies(y, f); });
  std::vector<std::size_t> top(order.begin(), order.begin() + 3);
  std::sort(top.begin(), top.end());
  CHECK(top == std::vector<std::size_t>{0, 4, 7});

  CqtSpectrum odd = cqt(triad);
  odd.bins_per_octave = 18;
  CHECK_THROWS_AS(chroma_from_cqt(odd), ArgumentError);
}

TEST_CASE("wav: ramp round trip and truncation") {
  Signal ramp{std::vector<double>(1000), 22050.0};
  for (std::size_t i = 0; i < ramp.samples.size(); ++i) ramp.samples[i] = -1.0 + 2.0 * double(i) / 999.0;
  const fs::path p = tmp("ramp.wav");
  wav_write(p, ramp);
  const Signal r = wav_read(p);
  CHECK(r.sample_rate == 22050.0);
  for (std::size_t i = 0; i < ramp.samples.size(); ++i) CHECK(std::abs(r.samples[i] - ramp.samples[i]) <= 1.0 / 32768.0);
  fs::resize_file(p, 30);
  CHECK_THROWS_AS(wav_read(p), FormatError);
  fs::remove(p);
}
