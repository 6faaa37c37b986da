#include "corpus_store.hpp"

#include <fstream>
#include <json.hpp>

#include "musrec/error.hpp"
#include "musrec/latent.hpp"

namespace musrec::store {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path write_corpus(const fs::path& dir, const Corpus& corpus, std::uint64_t seed) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw FileError("cannot create corpus directory " + dir.string());
  json clips = json::array();
  for (const Clip& c : corpus.clips) {
    const std::string wav = c.id + ".wav";
    const std::string lat = c.id + ".lat";
    wav_write(dir / wav, c.signal);
    write_latent(dir / lat, c.latent);
    json melody = json::array();
    for (const Note& n : c.spec.melody) melody.push_back({n.midi_pitch, n.duration});
    clips.push_back({{"id", c.id},
                     {"split", to_string(c.split)},
                     {"timbre", to_string(c.spec.timbre)},
                     {"style", to_string(c.spec.style)},
                     {"seed", c.spec.seed},
                     {"duration", c.spec.duration},
                     {"sample_rate", c.spec.sample_rate},
                     {"melody", melody},
                     {"wav", wav},
                     {"latent", lat}});
  }
  const json manifest = {{"format", "musrec-corpus"}, {"version", 1}, {"seed", seed},
                         {"count", corpus.clips.size()}, {"clips", clips}};
  const fs::path path = dir / "manifest.json";
  std::ofstream os(path);
  if (!os) throw FileError("cannot write " + path.string());
  os << manifest.dump(2) << '\n';
  if (!os) throw FileError("failed writing " + path.string());
  return path;
}

Corpus read_corpus(const fs::path& dir) {
  const fs::path path = dir / "manifest.json";
  std::ifstream is(path);
  if (!is) throw FileError("no corpus manifest at " + path.string());
  Corpus corpus;
  try {
    const json m = json::parse(is);
    if (m.at("format") != "musrec-corpus" || m.at("version") != 1) throw FormatError(path.string() + ": not a corpus manifest");
    for (const json& j : m.at("clips")) {
      Clip c;
      c.id = j.at("id").get<std::string>();
      c.split = j.at("split").get<std::string>() == "train" ? Split::train : Split::eval;
      const auto timbre = timbre_from_string(j.at("timbre").get<std::string>());
      const auto style = style_from_string(j.at("style").get<std::string>());
      if (!timbre || !style) throw FormatError(path.string() + ": unknown class in clip " + c.id);
      c.spec.timbre = *timbre;
      c.spec.style = *style;
      c.spec.seed = j.at("seed").get<std::uint64_t>();
      c.spec.duration = j.at("duration").get<double>();
      c.spec.sample_rate = j.at("sample_rate").get<double>();
      for (const json& n : j.at("melody")) c.spec.melody.push_back({n.at(0).get<int>(), n.at(1).get<double>()});
      c.signal = wav_read(dir / j.at("wav").get<std::string>());
      c.latent = read_latent(dir / j.at("latent").get<std::string>());
      corpus.clips.push_back(std::move(c));
    }
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (corpus.clips.empty()) throw FormatError(path.string() + ": corpus has no clips");
  return corpus;
}

}  // namespace musrec::store
