#include "musrec/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

#include "musrec/error.hpp"
#include "musrec/latent.hpp"

namespace musrec {
namespace {

constexpr int kHarmonics = 8;
constexpr double kPeakLevel = 0.25;
constexpr double kDitherLevel = 1e-4;
constexpr double kPluckDecay = 0.06;     // s
constexpr double kSwingOffbeat = 0.45;  // level of the short note in a swung pair

std::array<double, kHarmonics> harmonic_profile(Timbre t) {
  std::array<double, kHarmonics> a{};
  for (int h = 1; h <= kHarmonics; ++h) {
    const double hd = h;
    switch (t) {
      case Timbre::bright:
      case Timbre::plucked:
        a[h - 1] = 1.0 / hd;
        break;
      case Timbre::hollow:
        a[h - 1] = (h % 2 == 1) ? 1.0 / hd : 0.0;
        break;
      case Timbre::bowed:
        a[h - 1] = 1.0 / (hd * hd);
        break;
    }
  }
  return a;
}

struct Articulation {
  double sounding = 0.85;  // fraction of the note slot that sounds
  double attack = 0.01;    // s
  double release = 0.03;   // s
  double vibrato_depth = 0.0;  // semitones
};

Articulation articulation(Timbre t, Style s) {
  Articulation a;
  switch (s) {
    case Style::straight:
      break;
    case Style::swing:
      a.sounding = 0.7;
      break;
    case Style::sustained:
      a.sounding = 1.0;
      a.attack = 0.06;
      a.release = 0.05;
      a.vibrato_depth = 0.25;
      break;
    case Style::staccato:
      a.sounding = 0.45;
      a.attack = 0.005;
      a.release = 0.02;
      break;
  }
  if (t == Timbre::bowed) a.attack = std::max(a.attack, 0.15 * a.sounding);
  return a;
}

double midi_to_hz(int midi) { return 440.0 * std::pow(2.0, (midi - 69) / 12.0); }

// splitmix64 finalizer: derives independent per-clip seeds.
std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

}  // namespace

const char* to_string(Timbre t) {
  switch (t) {
    case Timbre::bright: return "bright";
    case Timbre::hollow: return "hollow";
    case Timbre::plucked: return "plucked";
    case Timbre::bowed: return "bowed";
  }
  return "?";
}

const char* to_string(Style s) {
  switch (s) {
    case Style::straight: return "straight";
    case Style::swing: return "swing";
    case Style::sustained: return "sustained";
    case Style::staccato: return "staccato";
  }
  return "?";
}

const char* to_string(Split s) { return s == Split::train ? "train" : "eval"; }

std::optional<Timbre> timbre_from_string(const std::string& name) {
  for (int i = 0; i < kTimbreCount; ++i) {
    if (name == to_string(static_cast<Timbre>(i))) return static_cast<Timbre>(i);
  }
  return std::nullopt;
}

std::optional<Style> style_from_string(const std::string& name) {
  for (int i = 0; i < kStyleCount; ++i) {
    if (name == to_string(static_cast<Style>(i))) return static_cast<Style>(i);
  }
  return std::nullopt;
}

ClassTarget ClassTarget::parse(const std::string& name) {
  if (auto t = timbre_from_string(name)) return {Axis::timbre, static_cast<int>(*t)};
  if (auto s = style_from_string(name)) return {Axis::style, static_cast<int>(*s)};
  throw ArgumentError("unknown class '" + name + "'");
}

std::string ClassTarget::name() const {
  return axis == Axis::timbre ? to_string(static_cast<Timbre>(value)) : to_string(static_cast<Style>(value));
}

ClassTarget ClipSpec::class_on(ClassTarget::Axis axis) const {
  return axis == ClassTarget::Axis::timbre ? ClassTarget{axis, static_cast<int>(timbre)}
                                           : ClassTarget{axis, static_cast<int>(style)};
}

void validate(const ClipSpec& spec) {
  if (spec.melody.empty()) throw ArgumentError("clip spec has an empty melody");
  double total = 0.0;
  for (const Note& n : spec.melody) {
    if (n.midi_pitch < kMinPitch || n.midi_pitch > kMaxPitch) {
      throw ArgumentError("pitch " + std::to_string(n.midi_pitch) + " outside [36, 84]");
    }
    if (!(n.duration > 0.0)) throw ArgumentError("note duration must be positive");
    total += n.duration;
  }
  const double hop_s = static_cast<double>(latent_mel_config().hop) / spec.sample_rate;
  if (std::abs(total - spec.duration) > hop_s) {
    throw ArgumentError("melody length " + std::to_string(total) + " s does not match clip duration " +
                        std::to_string(spec.duration) + " s");
  }
}

Signal render_signal(const ClipSpec& spec) {
  validate(spec);
  const double sr = spec.sample_rate;
  const auto len = static_cast<std::size_t>(std::lround(spec.duration * sr));
  Signal out{std::vector<double>(len, 0.0), sr};
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * std::numbers::pi);

  const auto profile = harmonic_profile(spec.timbre);
  double profile_sum = 0.0;
  for (double a : profile) profile_sum += a;
  const Articulation art = articulation(spec.timbre, spec.style);

  // Swing re-times consecutive equal notes into a 2:1 long-short pair.
  std::vector<double> slots;
  for (std::size_t i = 0; i < spec.melody.size(); ++i) {
    const double d = spec.melody[i].duration;
    if (spec.style == Style::swing && i + 1 < spec.melody.size() &&
        spec.melody[i + 1].duration == d) {
      slots.push_back(d * 4.0 / 3.0);
      slots.push_back(d * 2.0 / 3.0);
      ++i;
    } else {
      slots.push_back(d);
    }
  }

  double start = 0.0;
  for (std::size_t i = 0; i < spec.melody.size(); ++i) {
    const double slot = slots[i];
    const double f0 = midi_to_hz(spec.melody[i].midi_pitch);
    const double sounding = slot * art.sounding;
    const double accent = (spec.style == Style::swing && slot < spec.melody[i].duration) ? kSwingOffbeat : 1.0;
    std::array<double, kHarmonics> phase{};
    for (double& p : phase) p = phase_dist(rng);

    const auto n0 = static_cast<std::size_t>(std::lround(start * sr));
    const auto n1 = std::min(len, static_cast<std::size_t>(std::lround((start + sounding + art.release) * sr)));
    double vib_phase = 0.0;
    for (std::size_t n = n0; n < n1; ++n) {
      const double tau = (static_cast<double>(n) - static_cast<double>(n0)) / sr;
      double env = std::min(1.0, tau / art.attack);
      if (tau > sounding) env *= std::max(0.0, 1.0 - (tau - sounding) / art.release);
      if (spec.timbre == Timbre::plucked) env *= std::exp(-tau / kPluckDecay);
      if (env <= 0.0) continue;
      double freq = f0;
      if (art.vibrato_depth > 0.0) {
        freq *= std::pow(2.0, art.vibrato_depth / 12.0 * std::sin(vib_phase));
        vib_phase += 2.0 * std::numbers::pi * 5.5 / sr;
      }
      double x = 0.0;
      for (int h = 0; h < kHarmonics; ++h) {
        const double fh = freq * (h + 1);
        if (profile[h] == 0.0 || fh >= sr / 2.0) continue;
        phase[h] += 2.0 * std::numbers::pi * fh / sr;
        x += profile[h] * std::sin(phase[h]);
      }
      out.samples[n] += kPeakLevel * accent * env * x / profile_sum;
    }
    start += slot;
  }

  std::normal_distribution<double> dither(0.0, kDitherLevel);
  for (double& s : out.samples) s += dither(rng);
  return out;
}

RenderedClip render_clip(const ClipSpec& spec) {
  RenderedClip clip;
  clip.signal = render_signal(spec);
  clip.latent = encode_latent(clip.signal);
  return clip;
}

std::vector<Note> random_melody(std::mt19937_64& rng, double duration) {
  static constexpr std::array<int, 7> kMajor = {0, 2, 4, 5, 7, 9, 11};
  std::uniform_int_distribution<int> tonic_dist(59, 62);
  std::discrete_distribution<int> step_dist({1, 3, 1, 3, 1});  // -2..+2 scale degrees
  std::bernoulli_distribution long_note(0.3);
  const int tonic = tonic_dist(rng);
  int degree = 0;
  std::vector<Note> melody;
  double total = 0.0;
  while (total < duration - 1e-9) {
    double d = long_note(rng) ? 0.5 : 0.25;
    d = std::min(d, duration - total);
    const int octave = degree >= 0 ? degree / 7 : -((-degree + 6) / 7);
    const int within = degree - 7 * octave;
    const int pitch = std::clamp(tonic + 12 * octave + kMajor[static_cast<std::size_t>(within)], kMinPitch, kMaxPitch);
    melody.push_back({pitch, d});
    total += d;
    degree = std::clamp(degree + step_dist(rng) - 2, -2, 5);
  }
  return melody;
}

Corpus make_corpus(std::size_t count_per_class, std::uint64_t seed, Split split) {
  if (count_per_class == 0) throw ArgumentError("make_corpus: count must be at least 1");
  const std::size_t total = count_per_class * kTimbreCount;
  Corpus corpus;
  corpus.clips.resize(total);
  const std::uint64_t stream = mix(seed ^ (split == Split::train ? 0x7261696eull : 0x6576616cull));
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(total); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const std::size_t combo = i % (kTimbreCount * kStyleCount);
    Clip& clip = corpus.clips[i];
    clip.split = split;
    clip.id = std::string(to_string(split)) + "_" + std::to_string(i / 100) + std::to_string(i / 10 % 10) +
              std::to_string(i % 10);
    clip.spec.seed = mix(stream + i);
    clip.spec.timbre = static_cast<Timbre>(combo % kTimbreCount);
    clip.spec.style = static_cast<Style>(combo / kTimbreCount);
    std::mt19937_64 rng(clip.spec.seed);
    clip.spec.melody = random_melody(rng, clip.spec.duration);
    RenderedClip r = render_clip(clip.spec);
    clip.signal = std::move(r.signal);
    clip.latent = std::move(r.latent);
  }
  return corpus;
}

ClipSpec retarget(const ClipSpec& spec, const ClassTarget& target) {
  ClipSpec out = spec;
  if (target.axis == ClassTarget::Axis::timbre) {
    if (target.value < 0 || target.value >= kTimbreCount) throw ArgumentError("timbre class out of range");
    out.timbre = static_cast<Timbre>(target.value);
  } else {
    if (target.value < 0 || target.value >= kStyleCount) throw ArgumentError("style class out of range");
    out.style = static_cast<Style>(target.value);
  }
  return out;
}

GroundTruthEdit ground_truth_edit(const ClipSpec& spec, const ClassTarget& target) {
  GroundTruthEdit e;
  e.unchanged = spec.class_on(target.axis) == target;
  e.clip = render_clip(e.unchanged ? spec : retarget(spec, target));
  return e;
}

}  // namespace musrec
