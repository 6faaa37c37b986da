#pragma once

#include <complex>
#include <filesystem>
#include <vector>

#include "musrec/matrix.hpp"

namespace musrec {

struct Signal {
  std::vector<double> samples;
  double sample_rate = 16000.0;
};

// Throws ArgumentError for a non-positive rate, NumericError for non-finite samples.
void validate(const Signal& s);

// One-sided complex spectra, frames x (window_len/2 + 1), row-major.
struct StftFrames {
  std::size_t frames = 0;
  std::size_t bins = 0;
  std::vector<std::complex<double>> data;
  std::complex<double> operator()(std::size_t f, std::size_t k) const { return data[f * bins + k]; }
};

// Periodic-Hann windowed frames; frame i starts at sample i*hop and the
// count is floor((len - window_len) / hop) + 1 (no padding).
StftFrames stft(const Signal& signal, std::size_t window_len, std::size_t hop);

std::vector<double> hann_window(std::size_t n);

struct MelConfig {
  std::size_t n_mels = 16;
  std::size_t window = 1024;
  std::size_t hop = 256;
  double f_min = 0.0;
  double f_max = 0.0;  // 0 selects sample_rate / 2
  double floor = 1e-10;
};

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Triangular filters on the HTK mel scale, unit peak; n_mels x (n_fft/2+1).
Matrix mel_filterbank(const MelConfig& cfg, double sample_rate);
// Center frequency of every mel band.
std::vector<double> mel_band_centers(const MelConfig& cfg, double sample_rate);

// Mel band power (frames x n_mels), before log compression.
Matrix mel_power(const Signal& signal, const MelConfig& cfg = {});
// log(max(power, floor)), frames x n_mels.
Matrix mel_spectrogram(const Signal& signal, const MelConfig& cfg = {});

struct CqtConfig {
  double f_min = 32.70319566257483;  // C1
  int bins_per_octave = 12;
  int octaves = 7;
  std::size_t hop = 512;
};

struct CqtSpectrum {
  Matrix magnitudes;  // bins x frames
  std::vector<double> bin_frequencies;
  int bins_per_octave = 12;
  double f_min = 0.0;
};

// Direct matched-kernel constant-Q transform. Frame f is centered at sample
// f*hop; there are len/hop + 1 frames.
CqtSpectrum cqt(const Signal& signal, const CqtConfig& cfg = {});
// Same transform computed with the serial reference kernel.
CqtSpectrum cqt_reference(const Signal& signal, const CqtConfig& cfg = {});

struct Chromagram {
  Matrix energies;          // 12 x frames, pitch classes C..B
  std::vector<bool> silent;  // per frame, below 1e-9 or 40 dB under the loudest frame; columns are zero
  std::size_t frames() const { return energies.cols(); }
};

// Folds CQT magnitudes into pitch classes and L2-normalizes every frame.
Chromagram chroma_from_cqt(const CqtSpectrum& c);

// Pitch class (0 = C) of a frequency.
int pitch_class(double hz);

// 16-bit PCM mono RIFF/WAVE.
Signal wav_read(const std::filesystem::path& path);
void wav_write(const std::filesystem::path& path, const Signal& signal);

}  // namespace musrec
