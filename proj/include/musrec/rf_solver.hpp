#pragma once

// Second-order rectified-flow solver: a Taylor step
//   z' = z + h v(z,t) + h^2/2 * dv/dt(z,t)
// where dv/dt is estimated from one extra field evaluation at a state
// advanced by an Euler microstep of length delta_t. Every step therefore
// costs exactly two field evaluations, and the first one is always the
// evaluation at (z, t).

#include <optional>
#include <string>
#include <vector>

#include "musrec/flow.hpp"

namespace musrec {

// Forward difference [v(z + dt v, t + dt) - v(z, t)] / dt. When t + dt would
// leave [0, 1] the backward difference [v(z, t) - v(z - dt v, t - dt)] / dt
// is used instead. `v_at_state` may carry an already computed v(z, t).
Latent estimate_time_derivative(const VelocityField& field, const FlowState& state, double dt,
                                const Conditioning& cond,
                                const Latent* v_at_state = nullptr);

FlowState rf_solver_step(const VelocityField& field, const FlowState& state, double h,
                         const SolverConfig& cfg, const Conditioning& cond);

// z + h v + (h^2/2) d, evaluated left to right so that d == 0 reproduces
// the Euler update bit for bit.
Latent taylor_update(const Latent& z, const Latent& v, const Latent& d, double h);

struct InversionResult {
  Latent noise_latent;
  std::vector<FlowState> trajectory;  // times decreasing from 1 to 0
  std::optional<double> reconstruction_error;
};

// Integrates data -> noise on a reverse grid.
InversionResult invert(const VelocityField& field, const Latent& data_latent,
                       const TimeGrid& reverse_grid, Stepper stepper, const Conditioning& cond,
                       const SolverConfig& cfg = {});

struct Reconstruction {
  Latent latent;
  double error = 0.0;
  // Set when the data norm was zero and `error` is absolute rather than relative.
  bool absolute = false;
};

// invert, then integrate forward on the mirrored grid.
Reconstruction reconstruct(const VelocityField& field, const Latent& data_latent,
                           const TimeGrid& reverse_grid, Stepper stepper, const Conditioning& cond,
                           const SolverConfig& cfg = {});

// Empirical global convergence order of both steppers on an analytic
// problem. Errors are the maximum absolute deviation from `exact` over the
// grid points of the coarsest grid, so every step count must be a multiple
// of the first one.
struct ConvergenceOptions {
  // Finite-difference perturbation as a fraction of the step; keeps the
  // derivative-estimate error below the truncation error.
  double delta_t_per_step = 0.5;
  double saturation_threshold = 1e-12;
};

struct OrderEstimate {
  std::vector<double> errors;
  std::optional<double> slope;  // empty when saturated at rounding level
  bool saturated() const { return !slope.has_value(); }
};

struct ConvergenceReport {
  std::vector<std::size_t> step_counts;
  OrderEstimate euler;
  OrderEstimate rf_solver;
};

using ExactSolution = std::function<Latent(double t)>;

ConvergenceReport convergence_order(const VelocityField& field, const ExactSolution& exact,
                                    const std::vector<std::size_t>& step_counts,
                                    const ConvergenceOptions& options = {});

// Least-squares slope of log(error) against log(1/K); positive for a
// converging method.
double log_log_slope(const std::vector<std::size_t>& step_counts,
                     const std::vector<double>& errors);

}  // namespace musrec
