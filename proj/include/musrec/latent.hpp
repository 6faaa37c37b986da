#pragma once

// Fixed log-mel patch representation standing in for a learned audio
// autoencoder. A clip becomes 256 log-mel frames of 16 bands; every token
// groups 4 consecutive frames, giving 64 tokens of 64 channels
// (channel = frame_in_token * 16 + band).

#include <filesystem>

#include "musrec/dsp.hpp"
#include "musrec/flow.hpp"

namespace musrec {

inline constexpr std::size_t kLatentTokens = 64;
inline constexpr std::size_t kFramesPerToken = 4;
inline constexpr std::size_t kMelBands = 16;
inline constexpr std::size_t kLatentChannels = kFramesPerToken * kMelBands;
inline constexpr std::size_t kLatentFrames = kLatentTokens * kFramesPerToken;

// Affine map from natural-log mel power to latent units.
inline constexpr double kLogMelOffset = -4.0;
inline constexpr double kLogMelScale = 6.0;

MelConfig latent_mel_config();
// Samples covered by the latent frames (signals are zero-padded or cut to this).
std::size_t latent_signal_length();

Latent log_mel_to_latent(const Matrix& log_mel);  // frames x bands -> tokens x channels
Matrix latent_to_log_mel(const Latent& latent);

Latent encode_latent(const Signal& signal);

// Resynthesizes audio from a latent: one sinusoid per mel band at the band
// center, amplitude following the band power. There is no phase
// information in the latent, so this is only meant for metric evaluation.
Signal decode_latent(const Latent& latent, double sample_rate = 16000.0);

// Binary latent file: "MRLT", u32 version, u64 rows, u64 cols, row-major
// little-endian f64.
void write_latent(const std::filesystem::path& path, const Latent& latent);
Latent read_latent(const std::filesystem::path& path);

}  // namespace musrec
