#include "musrec/latent.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "binary_io.hpp"
#include "musrec/error.hpp"

namespace musrec {
namespace {

constexpr std::uint32_t kLatentVersion = 1;
// exp(40) keeps decoded amplitudes finite for wildly extrapolated latents.
constexpr double kMaxLogPower = 40.0;

}  // namespace

MelConfig latent_mel_config() {
  MelConfig cfg;
  cfg.n_mels = kMelBands;
  cfg.window = 1024;
  cfg.hop = 256;
  return cfg;
}

std::size_t latent_signal_length() {
  const MelConfig cfg = latent_mel_config();
  return (kLatentFrames - 1) * cfg.hop + cfg.window;
}

Latent log_mel_to_latent(const Matrix& log_mel) {
  if (log_mel.rows() != kLatentFrames || log_mel.cols() != kMelBands) {
    throw DimensionError("log_mel_to_latent: expected " + std::to_string(kLatentFrames) + "x" +
                         std::to_string(kMelBands) + ", got " + log_mel.shape_string());
  }
  Latent z(kLatentTokens, kLatentChannels);
  for (std::size_t f = 0; f < kLatentFrames; ++f) {
    const std::size_t token = f / kFramesPerToken;
    const std::size_t slot = f % kFramesPerToken;
    for (std::size_t b = 0; b < kMelBands; ++b) {
      z(token, slot * kMelBands + b) = (log_mel(f, b) - kLogMelOffset) / kLogMelScale;
    }
  }
  return z;
}

Matrix latent_to_log_mel(const Latent& latent) {
  if (latent.rows() != kLatentTokens || latent.cols() != kLatentChannels) {
    throw DimensionError("latent_to_log_mel: expected " + std::to_string(kLatentTokens) + "x" +
                         std::to_string(kLatentChannels) + ", got " + latent.shape_string());
  }
  Matrix mel(kLatentFrames, kMelBands);
  for (std::size_t f = 0; f < kLatentFrames; ++f) {
    const std::size_t token = f / kFramesPerToken;
    const std::size_t slot = f % kFramesPerToken;
    for (std::size_t b = 0; b < kMelBands; ++b) {
      mel(f, b) = latent(token, slot * kMelBands + b) * kLogMelScale + kLogMelOffset;
    }
  }
  return mel;
}

Latent encode_latent(const Signal& signal) {
  Signal padded{signal.samples, signal.sample_rate};
  padded.samples.resize(latent_signal_length(), 0.0);
  return log_mel_to_latent(mel_spectrogram(padded, latent_mel_config()));
}

Signal decode_latent(const Latent& latent, double sample_rate) {
  const MelConfig cfg = latent_mel_config();
  const Matrix log_mel = latent_to_log_mel(latent);
  const auto centers = mel_band_centers(cfg, sample_rate);
  const std::size_t len = latent_signal_length();
  const double half_window = static_cast<double>(cfg.window) / 2.0;
  // A sinusoid of amplitude A at a band center gives band power (A N / 4)^2
  // under a periodic Hann window of length N.
  const double amp_scale = 4.0 / static_cast<double>(cfg.window);

  Matrix amp(kLatentFrames, kMelBands);
  for (std::size_t i = 0; i < amp.size(); ++i) {
    amp[i] = amp_scale * std::sqrt(std::exp(std::min(log_mel[i], kMaxLogPower)));
  }

  Signal out{std::vector<double>(len, 0.0), sample_rate};
  for (std::size_t b = 0; b < kMelBands; ++b) {
    const double w = 2.0 * std::numbers::pi * centers[b] / sample_rate;
    for (std::size_t n = 0; n < len; ++n) {
      // Linear interpolation of the band amplitude between frame centers.
      const double pos = (static_cast<double>(n) - half_window) / static_cast<double>(cfg.hop);
      double a;
      if (pos <= 0.0) {
        a = amp(0, b);
      } else if (pos >= static_cast<double>(kLatentFrames - 1)) {
        a = amp(kLatentFrames - 1, b);
      } else {
        const auto f = static_cast<std::size_t>(pos);
        const double frac = pos - static_cast<double>(f);
        a = (1.0 - frac) * amp(f, b) + frac * amp(f + 1, b);
      }
      out.samples[n] += a * std::sin(w * static_cast<double>(n));
    }
  }
  return out;
}

void write_latent(const std::filesystem::path& path, const Latent& latent) {
  std::string b = "MRLT";
  binio::put_u32(b, kLatentVersion);
  binio::put_u64(b, latent.rows());
  binio::put_u64(b, latent.cols());
  for (double v : latent.values()) binio::put_f64(b, v);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FileError("cannot open " + path.string() + " for writing");
  os.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!os) throw FileError("failed writing " + path.string());
}

Latent read_latent(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FileError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  binio::Reader r(bytes, path.string());
  if (r.tag(4) != "MRLT") r.fail("bad latent magic");
  if (r.u32() != kLatentVersion) r.fail("unsupported latent version");
  const std::uint64_t rows = r.u64();
  const std::uint64_t cols = r.u64();
  if (rows == 0 || cols == 0 || r.remaining() != rows * cols * 8) r.fail("latent payload size mismatch");
  std::vector<double> data(rows * cols);
  for (double& v : data) v = r.f64();
  return Latent(rows, cols, std::move(data));
}

}  // namespace musrec
