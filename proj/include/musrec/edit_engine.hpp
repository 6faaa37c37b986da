#pragma once

// Inversion-based editing: invert the source latent to noise while caching
// single-block attention tensors, then denoise under the target condition
// with those tensors injected.

#include <cstddef>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "musrec/metrics.hpp"
#include "musrec/rf_solver.hpp"
#include "musrec/synth.hpp"
#include "musrec/velocity_net.hpp"

namespace musrec {

struct EditConfig {
  std::size_t steps = 25;       // N
  double source_scale = 1.0;    // guidance during inversion
  double target_scale = 20.0;   // guidance during denoising
  InjectStrategy strategy = InjectStrategy::value;
  std::size_t injection_steps = 5;  // n, 0..N
  std::size_t block_start = 1;      // m, 1-based; blocks m..S are injected
  Stepper solver = Stepper::rf_solver;
  SolverConfig solver_config;
};

// ArgumentError unless n <= N, N >= 1 and (strategy none or 1 <= m <= S).
void validate(const EditConfig& cfg, std::size_t single_blocks);

// v_u + s (v_c - v_u). s == 1 evaluates the conditional branch only.
Latent guided_velocity(const VelocityField& field, const Latent& z, double t, const Conditioning& cond,
                       const Conditioning& null_cond, double scale);

// Denoising step j of N pairs with inversion step N - 1 - j.
std::size_t correspondence(std::size_t step, std::size_t steps);

// Cached K/V per (inversion step, single block). Blocks are 0-based here.
struct AttentionCache {
  std::map<std::size_t, std::map<std::size_t, AttentionRecord>> steps;

  std::size_t size() const;
  bool contains(std::size_t step, std::size_t block) const;
  // Entries for the final n inversion steps and blocks >= m (1-based) only.
  AttentionCache subset(std::size_t total_steps, std::size_t n, std::size_t m) const;
};

struct CachedInversion {
  Latent noise;
  AttentionCache cache;
  std::vector<FlowState> trajectory;  // t from 1 down to 0
};

// Inversion from t=1 to t=0 on N uniform steps. Only the main
// conditional evaluation of each cached step is recorded.
CachedInversion invert_and_cache(const VelocityNet& net, const Latent& source, const Conditioning& source_cond,
                                 const EditConfig& cfg);

struct StepDiagnostic {
  double t = 0.0;
  double velocity_norm = 0.0;  // guided velocity at the step's start state
  bool injected = false;
};

struct EditResult {
  Latent edited;
  Latent noise;
  std::vector<StepDiagnostic> steps;
  EditConfig config;
};

// Denoises from `noise` toward target_cond. CacheMissError if a step inside
// the injection window has no entry for some block >= m.
EditResult edit(const VelocityNet& net, const Latent& noise, const AttentionCache& cache,
                const Conditioning& target_cond, const EditConfig& cfg);

// invert_and_cache followed by edit.
EditResult edit_clip(const VelocityNet& net, const Latent& source, const Conditioning& source_cond,
                     const Conditioning& target_cond, const EditConfig& cfg);

// Conditioning after moving one axis to the target class.
Conditioning retarget(const Conditioning& cond, const ClassTarget& target);

// One editing job of a sweep or evaluation.
struct EditJob {
  std::string clip_id;
  Latent source;
  Conditioning source_cond;
  ClassTarget source_class;
  ClassTarget target;
};

struct EditMetrics {
  double chroma = 0.0;        // chroma similarity to the source (fidelity)
  double pcc = 0.0;           // CQT PCC to the source
  double align_source = 0.0;  // alignment with the source-class prototype
  double align_target = 0.0;  // alignment with the target-class prototype (transferability)
};

// Metrics of an edited latent against its source; both are decoded first.
EditMetrics score_edit(const Latent& source, const Latent& edited, const PrototypeSet& prototypes,
                       const ClassTarget& source_class, const ClassTarget& target);

struct SweepCell {
  std::size_t n = 0;
  std::size_t m = 0;
  double fidelity = 0.0;         // mean chroma similarity
  double transferability = 0.0;  // mean target alignment
  std::vector<MetricRow> rows;   // one per job
};

struct SweepResult {
  std::vector<SweepCell> cells;  // n-major
  // Mean over fixed m of Spearman(n, fidelity), and over fixed n of
  // Spearman(m, transferability). Empty when a grid axis has one value.
  std::optional<double> fidelity_vs_n;
  std::optional<double> transfer_vs_m;
};

// Every (n, m) cell reuses one full inversion per job.
SweepResult sweep(const VelocityNet& net, const std::vector<EditJob>& jobs, const std::vector<std::size_t>& n_values,
                  const std::vector<std::size_t>& m_values, const EditConfig& base, const PrototypeSet& prototypes);

}  // namespace musrec
