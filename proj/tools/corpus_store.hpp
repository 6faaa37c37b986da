#pragma once

// On-disk corpus: a directory with manifest.json plus one WAV and one latent
// file per clip.

#include <filesystem>

#include "musrec/synth.hpp"

namespace musrec::store {

// Writes every clip and the manifest; returns the manifest path.
std::filesystem::path write_corpus(const std::filesystem::path& dir, const Corpus& corpus, std::uint64_t seed);

// FileError if the directory or a referenced file is missing, FormatError
// on a malformed manifest.
Corpus read_corpus(const std::filesystem::path& dir);

}  // namespace musrec::store
