#include "musrec/rf_solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "musrec/error.hpp"

namespace musrec {

Latent estimate_time_derivative(const VelocityField& field, const FlowState& state, double dt,
                                const Conditioning& cond, const Latent* v_at_state) {
  if (!(dt > 0.0)) throw ArgumentError("estimate_time_derivative: dt must be positive");
  const Latent v0 = v_at_state ? *v_at_state : field.velocity(state.z, state.t, cond);
  const bool forward = state.t + dt <= 1.0 + 1e-9;
  const double signed_dt = forward ? dt : -dt;

  Latent probe_z = state.z;
  for (std::size_t i = 0; i < probe_z.size(); ++i) probe_z[i] += signed_dt * v0[i];
  const Latent v1 = field.velocity(probe_z, state.t + signed_dt, cond);
  require_same_shape(v1, v0, "estimate_time_derivative");

  Latent d(v0.rows(), v0.cols());
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = (v1[i] - v0[i]) / signed_dt;
  return d;
}

Latent taylor_update(const Latent& z, const Latent& v, const Latent& d, double h) {
  require_same_shape(z, v, "taylor_update");
  require_same_shape(z, d, "taylor_update");
  const double half_h2 = 0.5 * h * h;
  Latent out(z.rows(), z.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = z[i] + h * v[i] + half_h2 * d[i];
  return out;
}

FlowState rf_solver_step(const VelocityField& field, const FlowState& state, double h,
                         const SolverConfig& cfg, const Conditioning& cond) {
  validate(cfg);
  const double end = state.t + h;
  if (!(state.t >= -1e-9 && state.t <= 1.0 + 1e-9 && end >= -1e-9 && end <= 1.0 + 1e-9)) {
    throw RangeError("rf_solver_step: step from " + std::to_string(state.t) + " by " +
                     std::to_string(h) + " leaves [0, 1]");
  }
  const Latent v = field.velocity(state.z, state.t, cond);
  require_same_shape(v, state.z, "rf_solver_step");
  const Latent d = estimate_time_derivative(field, state, cfg.delta_t, cond, &v);
  return {taylor_update(state.z, v, d, h), std::clamp(end, 0.0, 1.0)};
}

InversionResult invert(const VelocityField& field, const Latent& data_latent,
                       const TimeGrid& reverse_grid, Stepper stepper, const Conditioning& cond,
                       const SolverConfig& cfg) {
  if (reverse_grid.direction() != TimeGrid::Direction::reverse) {
    throw ArgumentError("invert: grid must run from t=1 to t=0");
  }
  InversionResult result;
  result.trajectory = integrate(field, {data_latent, 1.0}, reverse_grid, stepper, cond, cfg);
  result.noise_latent = result.trajectory.back().z;
  return result;
}

Reconstruction reconstruct(const VelocityField& field, const Latent& data_latent,
                           const TimeGrid& reverse_grid, Stepper stepper, const Conditioning& cond,
                           const SolverConfig& cfg) {
  const InversionResult inv = invert(field, data_latent, reverse_grid, stepper, cond, cfg);
  const auto forward =
      integrate(field, {inv.noise_latent, 0.0}, reverse_grid.mirrored(), stepper, cond, cfg);
  Reconstruction out;
  out.latent = forward.back().z;
  const double diff = l2_norm(out.latent - data_latent);
  const double norm = l2_norm(data_latent);
  if (norm == 0.0) {
    out.error = diff;
    out.absolute = true;
  } else {
    out.error = diff / norm;
  }
  return out;
}

double log_log_slope(const std::vector<std::size_t>& step_counts,
                     const std::vector<double>& errors) {
  if (step_counts.size() != errors.size()) throw DimensionError("log_log_slope: size mismatch");
  if (step_counts.size() < 3) throw ArgumentError("log_log_slope: need at least 3 points");
  const auto n = static_cast<double>(step_counts.size());
  double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < errors.size(); ++i) {
    const double x = std::log(static_cast<double>(step_counts[i]));
    const double y = std::log(errors[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  // error ~ K^-p, so the order is minus the slope against log K.
  return -(n * sxy - sx * sy) / (n * sxx - sx * sx);
}

namespace {

OrderEstimate measure(const VelocityField& field, const ExactSolution& exact,
                      const std::vector<std::size_t>& counts, Stepper stepper,
                      const ConvergenceOptions& options) {
  OrderEstimate est;
  const std::size_t coarse = counts.front();
  const Latent z0 = exact(0.0);
  double scale = 1.0;
  for (std::size_t i = 0; i <= coarse; ++i) {
    scale = std::max(scale, l2_norm(exact(static_cast<double>(i) / static_cast<double>(coarse))));
  }
  for (const std::size_t k : counts) {
    SolverConfig cfg;
    cfg.delta_t = std::min(0.1, options.delta_t_per_step / static_cast<double>(k));
    const auto traj =
        integrate(field, {z0, 0.0}, TimeGrid::uniform(k), stepper, Conditioning::null(), cfg);
    const std::size_t stride = k / coarse;
    double err = 0.0;
    for (std::size_t i = 0; i <= coarse; ++i) {
      const FlowState& s = traj[i * stride];
      err = std::max(err, max_abs_diff(s.z, exact(s.t)));
    }
    est.errors.push_back(err);
  }
  const bool saturated = std::all_of(est.errors.begin(), est.errors.end(), [&](double e) {
    return e <= options.saturation_threshold * scale;
  });
  if (!saturated) {
    for (double& e : est.errors) e = std::max(e, std::numeric_limits<double>::min());
    est.slope = log_log_slope(counts, est.errors);
  }
  return est;
}

}  // namespace

ConvergenceReport convergence_order(const VelocityField& field, const ExactSolution& exact,
                                    const std::vector<std::size_t>& step_counts,
                                    const ConvergenceOptions& options) {
  if (step_counts.size() < 3) throw ArgumentError("convergence_order: need at least 3 step counts");
  for (const std::size_t k : step_counts) {
    if (k == 0 || k % step_counts.front() != 0) {
      throw ArgumentError("convergence_order: step counts must be multiples of the first");
    }
  }
  ConvergenceReport report;
  report.step_counts = step_counts;
  report.euler = measure(field, exact, step_counts, Stepper::euler, options);
  report.rf_solver = measure(field, exact, step_counts, Stepper::rf_solver, options);
  return report;
}

}  // namespace musrec
