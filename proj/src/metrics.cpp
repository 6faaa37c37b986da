#include "musrec/metrics.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <ostream>

#include "musrec/error.hpp"
#include "musrec/latent.hpp"

namespace musrec {
namespace {

using EMat = Eigen::MatrixXd;

EMat to_eigen(const Matrix& m) {
  EMat e(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (std::size_t c = 0; c < m.cols(); ++c) e(r, c) = m(r, c);
  return e;
}

EMat sym_sqrt(const EMat& a) {
  Eigen::SelfAdjointEigenSolver<EMat> es(0.5 * (a + a.transpose()));
  const Eigen::VectorXd lam = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
}

void require_comparable(const Signal& x, const Signal& y, const char* what) {
  validate(x);
  validate(y);
  if (x.sample_rate != y.sample_rate) throw ArgumentError(std::string(what) + ": sample rates differ");
  const auto hop = static_cast<double>(latent_mel_config().hop);
  const double dx = static_cast<double>(x.samples.size());
  const double dy = static_cast<double>(y.samples.size());
  if (std::abs(dx - dy) > hop) throw ArgumentError(std::string(what) + ": durations differ by more than one hop");
}

std::vector<double> mean_cqt(const Signal& s) {
  const CqtSpectrum c = cqt(s);
  const Matrix& m = c.magnitudes;
  std::vector<double> out(m.rows(), 0.0);
  for (std::size_t b = 0; b < m.rows(); ++b) {
    double acc = 0.0;
    for (std::size_t f = 0; f < m.cols(); ++f) acc += m(b, f);
    out[b] = acc / static_cast<double>(m.cols());
  }
  return out;
}

}  // namespace

double chroma_similarity(const Signal& x, const Signal& y) {
  require_comparable(x, y, "chroma_similarity");
  const Chromagram cx = chroma_from_cqt(cqt(x));
  const Chromagram cy = chroma_from_cqt(cqt(y));
  const std::size_t frames = std::min(cx.frames(), cy.frames());
  double acc = 0.0;
  std::size_t used = 0;
  for (std::size_t f = 0; f < frames; ++f) {
    if (cx.silent[f] || cy.silent[f]) continue;
    double dot = 0.0;
    for (std::size_t p = 0; p < 12; ++p) dot += cx.energies(p, f) * cy.energies(p, f);
    acc += dot;  // columns are unit norm
    ++used;
  }
  if (used == 0) throw UndefinedMetricError("chroma_similarity: no frame is voiced in both signals");
  return acc / static_cast<double>(used);
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) throw DimensionError("pearson: vectors differ in length");
  const auto n = static_cast<double>(a.size());
  double ma = 0.0, mb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa <= 0.0 || sbb <= 0.0) throw UndefinedMetricError("pearson: zero-variance input");
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> rank(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) rank[order[k]] = r;
    i = j + 1;
  }
  return rank;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw DimensionError("spearman: need two equal-length vectors of size >= 2");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  return pearson(ra, rb);
}

double cqt_pcc(const Signal& x, const Signal& y) {
  require_comparable(x, y, "cqt_pcc");
  const auto a = mean_cqt(x);
  const auto b = mean_cqt(y);
  return pearson(a, b);
}

GaussianStats gaussian_stats(std::span<const std::vector<double>> samples, bool regularize) {
  if (samples.size() < 2) throw ArgumentError("gaussian_stats: need at least 2 samples");
  const std::size_t d = samples[0].size();
  if (d == 0) throw DimensionError("gaussian_stats: empty vectors");
  for (const auto& s : samples) {
    if (s.size() != d) throw DimensionError("gaussian_stats: samples differ in dimension");
  }
  GaussianStats g;
  g.count = samples.size();
  g.mean.assign(d, 0.0);
  for (const auto& s : samples)
    for (std::size_t i = 0; i < d; ++i) g.mean[i] += s[i];
  for (double& v : g.mean) v /= static_cast<double>(g.count);

  g.covariance = Matrix(d, d);
  for (const auto& s : samples) {
    for (std::size_t i = 0; i < d; ++i) {
      const double di = s[i] - g.mean[i];
      for (std::size_t j = i; j < d; ++j) g.covariance(i, j) += di * (s[j] - g.mean[j]);
    }
  }
  const double denom = static_cast<double>(g.count - 1);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = i; j < d; ++j) {
      g.covariance(i, j) /= denom;
      g.covariance(j, i) = g.covariance(i, j);
    }
  }
  if (regularize) {
    Eigen::SelfAdjointEigenSolver<EMat> es(to_eigen(g.covariance), Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < 1e-8) {
      for (std::size_t i = 0; i < d; ++i) g.covariance(i, i) += kCovarianceEpsilon;
      g.regularized = true;
    }
  }
  return g;
}

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
  if (a.dim() != b.dim() || a.covariance.rows() != a.dim() || b.covariance.rows() != b.dim()) {
    throw DimensionError("frechet_distance: dimensions differ");
  }
  double mean_term = 0.0;
  for (std::size_t i = 0; i < a.dim(); ++i) mean_term += (a.mean[i] - b.mean[i]) * (a.mean[i] - b.mean[i]);
  const EMat sa = to_eigen(a.covariance);
  const EMat sb = to_eigen(b.covariance);
  const EMat ra = sym_sqrt(sa);
  const EMat cross = sym_sqrt(ra * sb * ra);
  const double fd = mean_term + sa.trace() + sb.trace() - 2.0 * cross.trace();
  return std::max(fd, 0.0);
}

MelConfig embedding_mel_config() {
  MelConfig cfg = latent_mel_config();
  cfg.f_min = 200.0;
  cfg.f_max = 6000.0;
  cfg.floor = 3.0;
  return cfg;
}

std::vector<double> embed_toy(const Signal& x) {
  validate(x);
  const Matrix mel = mel_spectrogram(x, embedding_mel_config());
  const std::size_t bands = mel.cols();
  const auto frames = static_cast<double>(mel.rows());
  std::vector<double> e(2 * bands, 0.0);
  for (std::size_t b = 0; b < bands; ++b) {
    double mean = 0.0;
    for (std::size_t f = 0; f < mel.rows(); ++f) mean += mel(f, b);
    mean /= frames;
    double var = 0.0;
    for (std::size_t f = 0; f < mel.rows(); ++f) var += (mel(f, b) - mean) * (mel(f, b) - mean);
    e[b] = mean;
    e[bands + b] = std::sqrt(var / frames);
  }
  return e;
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("cosine: vectors differ in length");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw UndefinedMetricError("cosine: zero vector");
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

double alignment(const Signal& x, std::span<const double> prototype) {
  return cosine(embed_toy(x), prototype);
}

const std::vector<double>& PrototypeSet::of(const ClassTarget& c) const {
  const std::vector<double>& p = c.axis == ClassTarget::Axis::timbre ? timbre.at(static_cast<std::size_t>(c.value))
                                                                     : style.at(static_cast<std::size_t>(c.value));
  if (p.empty()) throw UndefinedMetricError("no prototype for class " + c.name() + ": the corpus has no clip of it");
  return p;
}

PrototypeSet class_prototypes(const Corpus& corpus, PrototypeDomain domain) {
  const std::size_t n = corpus.clips.size();
  std::vector<std::vector<double>> emb(n);
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(n); ++i) {
    const Clip& c = corpus.clips[static_cast<std::size_t>(i)];
    emb[static_cast<std::size_t>(i)] =
        embed_toy(domain == PrototypeDomain::signal ? c.signal : decode_latent(c.latent, c.signal.sample_rate));
  }
  PrototypeSet p;
  std::array<int, kTimbreCount> tc{};
  std::array<int, kStyleCount> sc{};
  for (auto& v : p.timbre) v.assign(kEmbeddingDim, 0.0);
  for (auto& v : p.style) v.assign(kEmbeddingDim, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto t = static_cast<std::size_t>(corpus.clips[i].spec.timbre);
    const auto s = static_cast<std::size_t>(corpus.clips[i].spec.style);
    for (std::size_t k = 0; k < kEmbeddingDim; ++k) {
      p.timbre[t][k] += emb[i][k];
      p.style[s][k] += emb[i][k];
    }
    ++tc[t];
    ++sc[s];
  }
  for (std::size_t c = 0; c < p.timbre.size(); ++c) {
    if (tc[c] == 0) p.timbre[c].clear();
    for (double& v : p.timbre[c]) v /= tc[c];
  }
  for (std::size_t c = 0; c < p.style.size(); ++c) {
    if (sc[c] == 0) p.style[c].clear();
    for (double& v : p.style[c]) v /= sc[c];
  }
  return p;
}

void write_metric_csv(std::ostream& os, std::span<const MetricRow> rows, std::optional<double> fad) {
  const auto old_prec = os.precision(10);
  os << "clip_id,source_class,target_class,strategy,n,m,chroma_sim,cqt_pcc,align_source,align_target\n";
  for (const MetricRow& r : rows) {
    os << r.clip_id << ',' << r.source_class << ',' << r.target_class << ',' << r.strategy << ',' << r.n << ','
       << r.m << ',' << r.chroma_sim << ',' << r.cqt_pcc << ',' << r.align_source << ',' << r.align_target << '\n';
  }
  // Summary row: corpus FAD in the first metric column.
  if (fad) os << "FAD,,,,,," << *fad << ",,,\n";
  os.precision(old_prec);
}

}  // namespace musrec
