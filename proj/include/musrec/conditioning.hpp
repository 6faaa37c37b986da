#pragma once

namespace musrec {

// Conditioning signal for the velocity field. The toy model stands in for a
// text encoder with two label embeddings (timbre, style); the embedding
// lookup happens inside the network so that the tables are trainable.
// The null conditioning selects the learned "unconditional" rows.
struct Conditioning {
  int timbre = -1;
  int style = -1;
  bool is_null = true;

  static Conditioning null() { return {}; }
  static Conditioning labels(int timbre, int style) { return {timbre, style, false}; }

  friend bool operator==(const Conditioning&, const Conditioning&) = default;
};

}  // namespace musrec
