#include "musrec/flow.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "musrec/error.hpp"
#include "musrec/rf_solver.hpp"

namespace musrec {
namespace {

constexpr double kTimeSlack = 1e-9;

double clamp_time(double t) { return std::clamp(t, 0.0, 1.0); }

void check_time(double t, const char* what) {
  if (!(t >= -kTimeSlack && t <= 1.0 + kTimeSlack)) {
    throw RangeError(std::string(what) + ": time " + std::to_string(t) + " outside [0, 1]");
  }
}

}  // namespace

Schedule Schedule::canonical() {
  Schedule s;
  s.alpha = [](double t) { return 1.0 - t; };
  s.beta = [](double t) { return t; };
  s.alpha_dot = [](double) { return -1.0; };
  s.beta_dot = [](double) { return 1.0; };
  s.kind = Kind::canonical_linear;
  return s;
}

Schedule Schedule::custom(Fn alpha, Fn beta, Fn alpha_dot, Fn beta_dot) {
  constexpr double tol = 1e-12;
  if (std::abs(alpha(0.0) - 1.0) > tol || std::abs(beta(0.0)) > tol ||
      std::abs(alpha(1.0)) > tol || std::abs(beta(1.0) - 1.0) > tol) {
    throw ArgumentError("schedule violates alpha(0)=1, beta(0)=0, alpha(1)=0, beta(1)=1");
  }
  return Schedule{std::move(alpha), std::move(beta), std::move(alpha_dot), std::move(beta_dot),
                  Kind::custom};
}

void validate(const FlowState& state) {
  check_time(state.t, "flow state");
  if (!state.z.all_finite()) throw NumericError("flow state has non-finite entries");
}

TimeGrid TimeGrid::uniform(std::size_t steps, Direction direction) {
  if (steps < 1) throw ArgumentError("time grid needs at least one step");
  std::vector<double> t(steps + 1);
  for (std::size_t i = 0; i <= steps; ++i) t[i] = static_cast<double>(i) / static_cast<double>(steps);
  return from_partition(std::move(t), direction);
}

TimeGrid TimeGrid::from_partition(std::vector<double> ascending, Direction direction) {
  if (ascending.size() < 2) throw ArgumentError("time grid needs at least one step");
  if (ascending.front() != 0.0 || ascending.back() != 1.0) {
    throw ArgumentError("time grid must start at 0 and end at 1");
  }
  for (std::size_t i = 1; i < ascending.size(); ++i) {
    if (!(ascending[i] > ascending[i - 1])) throw ArgumentError("time grid is not strictly increasing");
  }
  if (direction == Direction::reverse) std::reverse(ascending.begin(), ascending.end());
  return TimeGrid(std::move(ascending), direction);
}

TimeGrid TimeGrid::mirrored() const {
  std::vector<double> t(times_.rbegin(), times_.rend());
  return TimeGrid(std::move(t),
                  direction_ == Direction::forward ? Direction::reverse : Direction::forward);
}

Latent interpolate(const Latent& z0, const Latent& z1, double t, const Schedule& s) {
  require_same_shape(z0, z1, "interpolate");
  check_time(t, "interpolate");
  // Exact copies at the endpoints, whatever the schedule rounds to.
  if (t == 0.0) return z0;
  if (t == 1.0) return z1;
  const double a = s.alpha(t);
  const double b = s.beta(t);
  Latent out(z0.rows(), z0.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + b * z1[i];
  return out;
}

Latent path_velocity(const Latent& z0, const Latent& z1, double t, const Schedule& s) {
  require_same_shape(z0, z1, "path_velocity");
  check_time(t, "path_velocity");
  Latent out(z0.rows(), z0.cols());
  if (s.kind == Schedule::Kind::canonical_linear) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = z1[i] - z0[i];
    return out;
  }
  const double ad = s.alpha_dot(t);
  const double bd = s.beta_dot(t);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad * z0[i] + bd * z1[i];
  return out;
}

double pairwise_sum(std::span<const double> values) {
  if (values.size() <= 8) {
    double s = 0.0;
    for (double v : values) s += v;
    return s;
  }
  const std::size_t half = values.size() / 2;
  return pairwise_sum(values.first(half)) + pairwise_sum(values.subspan(half));
}

double velocity_matching_loss(const VelocityField& field, const std::vector<FlowSample>& batch,
                              const Schedule& s, const Conditioning& cond) {
  if (batch.empty()) throw ArgumentError("velocity_matching_loss: empty batch");
  std::vector<double> per_item(batch.size());
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(batch.size()); ++ii) {
    const auto& item = batch[static_cast<std::size_t>(ii)];
    const Latent zt = interpolate(item.z0, item.z1, item.t, s);
    const Latent target = path_velocity(item.z0, item.z1, item.t, s);
    const Latent v = field.velocity(zt, item.t, cond);
    require_same_shape(v, target, "velocity_matching_loss");
    std::vector<double> sq(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      const double d = v[i] - target[i];
      sq[i] = d * d;
    }
    per_item[static_cast<std::size_t>(ii)] = pairwise_sum(sq) / static_cast<double>(v.size());
  }
  return pairwise_sum(per_item) / static_cast<double>(batch.size());
}

FlowState euler_step(const VelocityField& field, const FlowState& state, double h,
                     const Conditioning& cond) {
  check_time(state.t, "euler_step start");
  check_time(state.t + h, "euler_step end");
  const Latent v = field.velocity(state.z, state.t, cond);
  require_same_shape(v, state.z, "euler_step");
  FlowState next{state.z, clamp_time(state.t + h)};
  for (std::size_t i = 0; i < next.z.size(); ++i) next.z[i] = state.z[i] + h * v[i];
  return next;
}

void validate(const SolverConfig& cfg) {
  if (!(cfg.delta_t > 0.0) || cfg.delta_t > 0.1) {
    throw ArgumentError("solver delta_t must be in (0, 0.1], got " + std::to_string(cfg.delta_t));
  }
}

std::vector<FlowState> integrate(const VelocityField& field, const FlowState& initial,
                                 const TimeGrid& grid, Stepper stepper, const Conditioning& cond,
                                 const SolverConfig& cfg) {
  if (std::abs(initial.t - grid.time(0)) > 1e-12) {
    throw ArgumentError("integrate: initial time " + std::to_string(initial.t) +
                        " does not match grid start " + std::to_string(grid.time(0)));
  }
  if (stepper == Stepper::rf_solver) validate(cfg);
  std::vector<FlowState> trajectory;
  trajectory.reserve(grid.steps() + 1);
  trajectory.push_back({initial.z, grid.time(0)});
  for (std::size_t i = 0; i < grid.steps(); ++i) {
    const FlowState& cur = trajectory.back();
    const double h = grid.step(i);
    FlowState next = stepper == Stepper::euler ? euler_step(field, cur, h, cond)
                                               : rf_solver_step(field, cur, h, cfg, cond);
    if (!next.z.all_finite()) {
      throw NumericError("non-finite state after integration step " + std::to_string(i));
    }
    next.t = grid.time(i + 1);
    trajectory.push_back(std::move(next));
  }
  return trajectory;
}

const char* to_string(Stepper s) { return s == Stepper::euler ? "euler" : "rf2"; }

Stepper stepper_from_string(const std::string& name) {
  if (name == "euler") return Stepper::euler;
  if (name == "rf2" || name == "rf_solver") return Stepper::rf_solver;
  throw ArgumentError("unknown solver '" + name + "' (expected euler or rf2)");
}

}  // namespace musrec
