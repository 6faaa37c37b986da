#include "musrec/dsp.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>
#include <tuple>

#include "musrec/error.hpp"
#include "musrec/kernels.hpp"

namespace musrec {

using kernels::CqtKernel;
namespace {

// fftw planning is not thread-safe; execution on fresh arrays is.
class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    double* in = fftw_alloc_real(n);
    fftw_complex* out = fftw_alloc_complex(n / 2 + 1);
    plan_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in, out, FFTW_ESTIMATE);
    fftw_free(in);
    fftw_free(out);
  }
  ~RealFft() { fftw_destroy_plan(plan_); }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  void execute(double* in, fftw_complex* out) const { fftw_execute_dft_r2c(plan_, in, out); }
  std::size_t size() const { return n_; }

 private:
  std::size_t n_;
  fftw_plan plan_;
};

const RealFft& fft_plan(std::size_t n) {
  static std::mutex mu;
  static std::map<std::size_t, std::unique_ptr<RealFft>> plans;
  std::lock_guard lock(mu);
  auto& slot = plans[n];
  if (!slot) slot = std::make_unique<RealFft>(n);
  return *slot;
}

std::vector<CqtKernel> build_cqt_kernels(const CqtConfig& cfg, double sample_rate,
                                         std::vector<double>& freqs) {
  const int bins = cfg.bins_per_octave * cfg.octaves;
  const double q = 1.0 / (std::pow(2.0, 1.0 / cfg.bins_per_octave) - 1.0);
  std::vector<CqtKernel> kernels(static_cast<std::size_t>(bins));
  freqs.resize(static_cast<std::size_t>(bins));
  for (int b = 0; b < bins; ++b) {
    const double f = cfg.f_min * std::pow(2.0, static_cast<double>(b) / cfg.bins_per_octave);
    freqs[static_cast<std::size_t>(b)] = f;
    auto n = static_cast<std::size_t>(std::ceil(q * sample_rate / f));
    n |= 1;  // odd length, centered tap at n/2
    std::vector<double> w(n);
    double wsum = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      w[j] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(j + 1) /
                                  static_cast<double>(n + 1));
      wsum += w[j];
    }
    auto& taps = kernels[static_cast<std::size_t>(b)].taps;
    taps.resize(n);
    const auto half = static_cast<double>(n / 2);
    for (std::size_t j = 0; j < n; ++j) {
      const double phase = -2.0 * std::numbers::pi * f * (static_cast<double>(j) - half) / sample_rate;
      taps[j] = std::polar(w[j] / wsum, phase);
    }
  }
  return kernels;
}

struct CqtKernelSet {
  std::vector<CqtKernel> kernels;
  std::vector<double> freqs;
};

const CqtKernelSet& cqt_kernels(const CqtConfig& cfg, double sample_rate) {
  static std::mutex mu;
  static std::map<std::tuple<double, int, int, double>, std::unique_ptr<CqtKernelSet>> cache;
  std::lock_guard lock(mu);
  auto& slot = cache[{cfg.f_min, cfg.bins_per_octave, cfg.octaves, sample_rate}];
  if (!slot) {
    slot = std::make_unique<CqtKernelSet>();
    slot->kernels = build_cqt_kernels(cfg, sample_rate, slot->freqs);
  }
  return *slot;
}

template <typename Kernel>
CqtSpectrum run_cqt(const Signal& signal, const CqtConfig& cfg, Kernel&& kernel) {
  validate(signal);
  if (cfg.bins_per_octave <= 0 || cfg.octaves <= 0 || cfg.hop == 0 || !(cfg.f_min > 0.0)) {
    throw ArgumentError("cqt: invalid configuration");
  }
  if (cfg.f_min * std::pow(2.0, cfg.octaves) >= signal.sample_rate / 2.0) {
    throw ArgumentError("cqt: top bin exceeds Nyquist (f_min * 2^octaves >= sample_rate / 2)");
  }
  const auto& set = cqt_kernels(cfg, signal.sample_rate);
  const std::size_t frames = signal.samples.size() / cfg.hop + 1;
  CqtSpectrum out;
  out.magnitudes = Matrix(set.kernels.size(), frames);
  out.bin_frequencies = set.freqs;
  out.bins_per_octave = cfg.bins_per_octave;
  out.f_min = cfg.f_min;
  kernel(std::span<const double>(signal.samples), std::span<const CqtKernel>(set.kernels), cfg.hop,
         frames, out.magnitudes.data());
  return out;
}

// Little-endian helpers for the WAV codec.
void put_u16(std::string& b, std::uint16_t v) {
  b.push_back(static_cast<char>(v & 0xff));
  b.push_back(static_cast<char>(v >> 8));
}
void put_u32(std::string& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
std::uint32_t get_u32(const std::string& b, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(b[off + i])) << (8 * i);
  return v;
}
std::uint16_t get_u16(const std::string& b, std::size_t off) {
  return static_cast<std::uint16_t>(static_cast<unsigned char>(b[off]) |
                                    (static_cast<unsigned char>(b[off + 1]) << 8));
}

[[noreturn]] void wav_fail(const std::filesystem::path& p, std::size_t off, const std::string& what) {
  throw FormatError(p.string() + ": " + what + " at byte offset " + std::to_string(off));
}

}  // namespace

void validate(const Signal& s) {
  if (!(s.sample_rate > 0.0)) throw ArgumentError("signal sample rate must be positive");
  for (double v : s.samples) {
    if (!std::isfinite(v)) throw NumericError("signal has non-finite samples");
  }
}

std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  }
  return w;
}

StftFrames stft(const Signal& signal, std::size_t window_len, std::size_t hop) {
  if (hop == 0 || window_len < hop) throw ArgumentError("stft: need window_len >= hop > 0");
  if (signal.samples.size() < window_len) {
    throw ArgumentError("stft: signal shorter than the window (" +
                        std::to_string(signal.samples.size()) + " < " + std::to_string(window_len) + ")");
  }
  validate(signal);
  StftFrames out;
  out.frames = (signal.samples.size() - window_len) / hop + 1;
  out.bins = window_len / 2 + 1;
  out.data.resize(out.frames * out.bins);
  const auto window = hann_window(window_len);
  const RealFft& plan = fft_plan(window_len);

#pragma omp parallel
  {
    double* in = fftw_alloc_real(window_len);
    fftw_complex* spec = fftw_alloc_complex(out.bins);
#pragma omp for schedule(static)
    for (std::ptrdiff_t ff = 0; ff < static_cast<std::ptrdiff_t>(out.frames); ++ff) {
      const auto f = static_cast<std::size_t>(ff);
      const double* x = signal.samples.data() + f * hop;
      for (std::size_t i = 0; i < window_len; ++i) in[i] = x[i] * window[i];
      plan.execute(in, spec);
      for (std::size_t k = 0; k < out.bins; ++k) out.data[f * out.bins + k] = {spec[k][0], spec[k][1]};
    }
    fftw_free(in);
    fftw_free(spec);
  }
  return out;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> mel_band_centers(const MelConfig& cfg, double sample_rate) {
  const double f_max = cfg.f_max > 0.0 ? cfg.f_max : sample_rate / 2.0;
  const double lo = hz_to_mel(cfg.f_min);
  const double hi = hz_to_mel(f_max);
  std::vector<double> centers(cfg.n_mels);
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    centers[m] = mel_to_hz(lo + (hi - lo) * static_cast<double>(m + 1) / static_cast<double>(cfg.n_mels + 1));
  }
  return centers;
}

Matrix mel_filterbank(const MelConfig& cfg, double sample_rate) {
  if (cfg.n_mels == 0 || cfg.window == 0) throw ArgumentError("mel_filterbank: empty configuration");
  const double f_max = cfg.f_max > 0.0 ? cfg.f_max : sample_rate / 2.0;
  const std::size_t bins = cfg.window / 2 + 1;
  const double lo = hz_to_mel(cfg.f_min);
  const double hi = hz_to_mel(f_max);
  std::vector<double> edges(cfg.n_mels + 2);
  for (std::size_t i = 0; i < edges.size(); ++i) {
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(cfg.n_mels + 1));
  }
  Matrix fb(cfg.n_mels, bins);
  for (std::size_t m = 0; m < cfg.n_mels; ++m) {
    const double f0 = edges[m], f1 = edges[m + 1], f2 = edges[m + 2];
    for (std::size_t k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(cfg.window);
      double w = 0.0;
      if (f > f0 && f <= f1) {
        w = (f - f0) / (f1 - f0);
      } else if (f > f1 && f < f2) {
        w = (f2 - f) / (f2 - f1);
      }
      fb(m, k) = w;
    }
  }
  return fb;
}

Matrix mel_power(const Signal& signal, const MelConfig& cfg) {
  const StftFrames spec = stft(signal, cfg.window, cfg.hop);
  const Matrix fb = mel_filterbank(cfg, signal.sample_rate);
  Matrix power(spec.frames, spec.bins);
  for (std::size_t i = 0; i < spec.data.size(); ++i) power[i] = std::norm(spec.data[i]);
  Matrix mel(spec.frames, cfg.n_mels);
  // mel = power * fb^T
  kernels::gemm_nt(power.data(), fb.data(), mel.data(), spec.frames, spec.bins, cfg.n_mels);
  return mel;
}

Matrix mel_spectrogram(const Signal& signal, const MelConfig& cfg) {
  Matrix mel = mel_power(signal, cfg);
  for (std::size_t i = 0; i < mel.size(); ++i) mel[i] = std::log(std::max(mel[i], cfg.floor));
  return mel;
}

CqtSpectrum cqt(const Signal& signal, const CqtConfig& cfg) {
  return run_cqt(signal, cfg, [](auto&&... a) { kernels::cqt_magnitudes(a...); });
}

CqtSpectrum cqt_reference(const Signal& signal, const CqtConfig& cfg) {
  return run_cqt(signal, cfg, [](auto&&... a) { kernels::reference::cqt_magnitudes(a...); });
}

int pitch_class(double hz) {
  const double midi = 69.0 + 12.0 * std::log2(hz / 440.0);
  const long r = std::lround(midi);
  return static_cast<int>(((r % 12) + 12) % 12);
}

Chromagram chroma_from_cqt(const CqtSpectrum& c) {
  if (c.bins_per_octave <= 0 || c.bins_per_octave % 12 != 0) {
    throw ArgumentError("chroma_from_cqt: bins_per_octave must be a positive multiple of 12");
  }
  constexpr double kSilence = 1e-9;
  constexpr double kVoicing = 1e-2;  // frames 40 dB under the loudest one count as silent
  const std::size_t frames = c.magnitudes.cols();
  Chromagram out{Matrix(12, frames), std::vector<bool>(frames, false)};
  std::vector<int> pc(c.bin_frequencies.size());
  for (std::size_t b = 0; b < pc.size(); ++b) pc[b] = pitch_class(c.bin_frequencies[b]);
  std::vector<double> norms(frames, 0.0);
  double loudest = 0.0;
  for (std::size_t f = 0; f < frames; ++f) {
    for (std::size_t b = 0; b < pc.size(); ++b) {
      out.energies(static_cast<std::size_t>(pc[b]), f) += c.magnitudes(b, f);
    }
    double norm = 0.0;
    for (std::size_t p = 0; p < 12; ++p) norm += out.energies(p, f) * out.energies(p, f);
    norms[f] = std::sqrt(norm);
    loudest = std::max(loudest, norms[f]);
  }
  const double gate = std::max(kSilence, kVoicing * loudest);
  for (std::size_t f = 0; f < frames; ++f) {
    if (norms[f] < gate) {
      out.silent[f] = true;
      for (std::size_t p = 0; p < 12; ++p) out.energies(p, f) = 0.0;
    } else {
      for (std::size_t p = 0; p < 12; ++p) out.energies(p, f) /= norms[f];
    }
  }
  return out;
}

void wav_write(const std::filesystem::path& path, const Signal& signal) {
  validate(signal);
  const auto n = static_cast<std::uint32_t>(signal.samples.size());
  std::string b;
  b.reserve(44 + 2 * n);
  b += "RIFF";
  put_u32(b, 36 + 2 * n);
  b += "WAVEfmt ";
  put_u32(b, 16);
  put_u16(b, 1);  // PCM
  put_u16(b, 1);  // mono
  const auto rate = static_cast<std::uint32_t>(std::lround(signal.sample_rate));
  put_u32(b, rate);
  put_u32(b, rate * 2);
  put_u16(b, 2);
  put_u16(b, 16);
  b += "data";
  put_u32(b, 2 * n);
  for (double x : signal.samples) {
    const long q = std::clamp(std::lround(x * 32768.0), -32768L, 32767L);
    put_u16(b, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FileError("cannot open " + path.string() + " for writing");
  os.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!os) throw FileError("failed writing " + path.string());
}

Signal wav_read(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FileError("cannot open " + path.string());
  const std::string b((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (b.size() < 12) wav_fail(path, b.size(), "truncated RIFF header");
  if (b.compare(0, 4, "RIFF") != 0) wav_fail(path, 0, "missing RIFF tag");
  if (b.compare(8, 4, "WAVE") != 0) wav_fail(path, 8, "missing WAVE tag");

  bool have_fmt = false;
  Signal out;
  std::size_t off = 12;
  while (true) {
    if (off + 8 > b.size()) wav_fail(path, off, have_fmt ? "missing data chunk" : "missing fmt chunk");
    const std::string id = b.substr(off, 4);
    const std::uint32_t len = get_u32(b, off + 4);
    const std::size_t body = off + 8;
    if (body + len > b.size()) wav_fail(path, off, "chunk '" + id + "' runs past end of file");
    if (id == "fmt ") {
      if (len < 16) wav_fail(path, body, "fmt chunk too short");
      if (get_u16(b, body) != 1) wav_fail(path, body, "unsupported encoding (only PCM)");
      if (get_u16(b, body + 2) != 1) wav_fail(path, body + 2, "unsupported channel count (only mono)");
      out.sample_rate = get_u32(b, body + 4);
      if (out.sample_rate <= 0) wav_fail(path, body + 4, "zero sample rate");
      if (get_u16(b, body + 14) != 16) wav_fail(path, body + 14, "unsupported bit depth (only 16)");
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) wav_fail(path, off, "data chunk before fmt chunk");
      if (len % 2 != 0) wav_fail(path, body, "odd data length for 16-bit samples");
      out.samples.resize(len / 2);
      for (std::size_t i = 0; i < out.samples.size(); ++i) {
        out.samples[i] = static_cast<std::int16_t>(get_u16(b, body + 2 * i)) / 32768.0;
      }
      return out;
    }
    off = body + len + (len & 1);
  }
}

}  // namespace musrec
