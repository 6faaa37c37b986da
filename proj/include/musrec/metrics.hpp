#pragma once

#include <array>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "musrec/dsp.hpp"
#include "musrec/synth.hpp"

namespace musrec {

// Mean framewise cosine between chromagrams; silent frames (in either input)
// are skipped. UndefinedMetricError when no frame is voiced in both.
double chroma_similarity(const Signal& x, const Signal& y);

// Pearson correlation of the time-averaged CQT magnitude vectors.
double cqt_pcc(const Signal& x, const Signal& y);

// Plain Pearson correlation; UndefinedMetricError on zero variance.
double pearson(std::span<const double> a, std::span<const double> b);

// Pearson correlation of ranks (ties get their average rank).
double spearman(std::span<const double> a, std::span<const double> b);

struct GaussianStats {
  std::vector<double> mean;
  Matrix covariance;  // d x d
  std::size_t count = 0;
  bool regularized = false;

  std::size_t dim() const { return mean.size(); }
};

inline constexpr double kCovarianceEpsilon = 1e-6;

// Sample mean and unbiased covariance. When the smallest eigenvalue falls
// below 1e-8 (and `regularize` is set) the covariance gets +1e-6 I.
GaussianStats gaussian_stats(std::span<const std::vector<double>> samples, bool regularize = true);

double frechet_distance(const GaussianStats& a, const GaussianStats& b);

inline constexpr std::size_t kEmbeddingDim = 32;

// 16 mel bands over 200-6000 Hz. The power floor sits roughly 25 dB under a
// full-level note so near-silent frames do not dominate the statistics.
MelConfig embedding_mel_config();

// Per mel band mean and population std of the log mel energy (16 + 16).
std::vector<double> embed_toy(const Signal& x);

double cosine(std::span<const double> a, std::span<const double> b);
double alignment(const Signal& x, std::span<const double> prototype);

// Class-mean embeddings for every timbre and style. A class with no clip
// keeps an empty vector and of() throws UndefinedMetricError for it.
struct PrototypeSet {
  std::array<std::vector<double>, kTimbreCount> timbre;
  std::array<std::vector<double>, kStyleCount> style;

  const std::vector<double>& of(const ClassTarget& c) const;
};

enum class PrototypeDomain {
  signal,   // embeddings of the rendered audio
  decoded,  // embeddings of decode_latent(clip latent)
};

PrototypeSet class_prototypes(const Corpus& corpus, PrototypeDomain domain);

// One CSV row of an editing evaluation.
struct MetricRow {
  std::string clip_id;
  std::string source_class;
  std::string target_class;
  std::string strategy;
  int n = 0;
  int m = 0;
  double chroma_sim = 0.0;
  double cqt_pcc = 0.0;
  double align_source = 0.0;
  double align_target = 0.0;
};

void write_metric_csv(std::ostream& os, std::span<const MetricRow> rows, std::optional<double> fad);

}  // namespace musrec
