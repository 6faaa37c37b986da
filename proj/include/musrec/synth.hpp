#pragma once

// Deterministic additive-synthesis corpus. Each clip is a monophonic melody
// rendered with one of four timbre profiles and one of four style
// envelopes, so melody, timbre and style are known exactly for every clip.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "musrec/dsp.hpp"
#include "musrec/flow.hpp"

namespace musrec {

enum class Timbre { bright = 0, hollow = 1, plucked = 2, bowed = 3 };
enum class Style { straight = 0, swing = 1, sustained = 2, staccato = 3 };
inline constexpr int kTimbreCount = 4;
inline constexpr int kStyleCount = 4;

const char* to_string(Timbre t);
const char* to_string(Style s);
std::optional<Timbre> timbre_from_string(const std::string& name);
std::optional<Style> style_from_string(const std::string& name);

// An editing target: one class along one axis. Class names are unique across
// axes, so a bare name ("hollow", "swing") identifies the axis.
struct ClassTarget {
  enum class Axis { timbre, style };
  Axis axis = Axis::timbre;
  int value = 0;

  static ClassTarget parse(const std::string& name);  // ArgumentError if unknown
  std::string name() const;
  friend bool operator==(const ClassTarget&, const ClassTarget&) = default;
};

struct Note {
  int midi_pitch = 60;
  double duration = 0.25;  // seconds
};

struct ClipSpec {
  std::vector<Note> melody;
  Timbre timbre = Timbre::bright;
  Style style = Style::straight;
  std::uint64_t seed = 0;
  double duration = 4.0;
  double sample_rate = 16000.0;

  ClassTarget class_on(ClassTarget::Axis axis) const;
  Conditioning conditioning() const {
    return Conditioning::labels(static_cast<int>(timbre), static_cast<int>(style));
  }
};

inline constexpr int kMinPitch = 36;
inline constexpr int kMaxPitch = 84;

// Throws ArgumentError for pitches outside [36, 84] or a melody whose total
// length misses the clip duration by more than one analysis hop.
void validate(const ClipSpec& spec);

struct RenderedClip {
  Signal signal;
  Latent latent;
};

Signal render_signal(const ClipSpec& spec);
RenderedClip render_clip(const ClipSpec& spec);

// Scale-degree random walk on a major scale filling `duration` seconds.
std::vector<Note> random_melody(std::mt19937_64& rng, double duration);

enum class Split { train, eval };
const char* to_string(Split s);

struct Clip {
  std::string id;
  ClipSpec spec;
  Signal signal;
  Latent latent;
  Split split = Split::eval;
};

struct Corpus {
  std::vector<Clip> clips;
};

// count_per_class clips for each timbre class (4 * count_per_class clips),
// cycling through the 16 timbre x style combinations.
Corpus make_corpus(std::size_t count_per_class, std::uint64_t seed, Split split = Split::eval);

struct GroundTruthEdit {
  RenderedClip clip;
  bool unchanged = false;  // target equals the source class
};

// Re-renders the same melody under the target class.
GroundTruthEdit ground_truth_edit(const ClipSpec& spec, const ClassTarget& target);
ClipSpec retarget(const ClipSpec& spec, const ClassTarget& target);

}  // namespace musrec
