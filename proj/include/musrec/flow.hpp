#pragma once

// Rectified-flow primitives: interpolation path, target velocity, the
// velocity-matching objective and trajectory integration.
//
// Time convention: t = 0 is the prior (noise), t = 1 is data. Generation
// integrates 0 -> 1, inversion integrates 1 -> 0 with negative steps.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "musrec/conditioning.hpp"
#include "musrec/matrix.hpp"

namespace musrec {

using Latent = Matrix;

// z_t = alpha(t) z0 + beta(t) z1 with alpha(0)=1, beta(0)=0, alpha(1)=0, beta(1)=1.
struct Schedule {
  enum class Kind { canonical_linear, custom };

  using Fn = std::function<double(double)>;
  Fn alpha;
  Fn beta;
  Fn alpha_dot;
  Fn beta_dot;
  Kind kind = Kind::canonical_linear;

  static Schedule canonical();
  // Validates the endpoint constraints; throws ArgumentError otherwise.
  static Schedule custom(Fn alpha, Fn beta, Fn alpha_dot, Fn beta_dot);
};

struct FlowState {
  Latent z;
  double t = 0.0;
};

// Throws RangeError/NumericError if t is outside [0,1] or z has non-finite entries.
void validate(const FlowState& state);

class TimeGrid {
 public:
  enum class Direction { forward, reverse };

  // K uniform steps. Forward runs 0 -> 1, reverse runs 1 -> 0.
  static TimeGrid uniform(std::size_t steps, Direction direction = Direction::forward);
  // Custom partition 0 = t_0 < ... < t_K = 1 given in ascending order.
  static TimeGrid from_partition(std::vector<double> ascending,
                                 Direction direction = Direction::forward);

  Direction direction() const { return direction_; }
  std::size_t steps() const { return times_.size() - 1; }
  // Times in traversal order.
  const std::vector<double>& times() const { return times_; }
  double time(std::size_t i) const { return times_[i]; }
  // Signed step h_i = times[i+1] - times[i].
  double step(std::size_t i) const { return times_[i + 1] - times_[i]; }
  TimeGrid mirrored() const;

 private:
  TimeGrid(std::vector<double> traversal, Direction direction)
      : times_(std::move(traversal)), direction_(direction) {}
  std::vector<double> times_;
  Direction direction_;
};

// v_theta(z, t, cond). Implementations must be safe to call concurrently.
class VelocityField {
 public:
  virtual ~VelocityField() = default;
  virtual Latent velocity(const Latent& z, double t, const Conditioning& cond) const = 0;
};

// Adapts a plain callable; handy for analytic fields.
class FunctionField final : public VelocityField {
 public:
  using Fn = std::function<Latent(const Latent&, double)>;
  explicit FunctionField(Fn fn) : fn_(std::move(fn)) {}
  Latent velocity(const Latent& z, double t, const Conditioning&) const override {
    return fn_(z, t);
  }

 private:
  Fn fn_;
};

Latent interpolate(const Latent& z0, const Latent& z1, double t, const Schedule& s);
Latent path_velocity(const Latent& z0, const Latent& z1, double t, const Schedule& s);

struct FlowSample {
  Latent z0;  // prior draw
  Latent z1;  // data
  double t = 0.0;
};

// Mean over the batch of the per-element mean squared velocity error.
double velocity_matching_loss(const VelocityField& field, const std::vector<FlowSample>& batch,
                              const Schedule& s, const Conditioning& cond);

// Pairwise (tree) summation; fixed order independent of threading.
double pairwise_sum(std::span<const double> values);

FlowState euler_step(const VelocityField& field, const FlowState& state, double h,
                     const Conditioning& cond);

enum class Stepper { euler, rf_solver };

// Finite-difference perturbation used by the second-order stepper to
// estimate dv/dt. Must satisfy 0 < delta_t <= 0.1.
struct SolverConfig {
  double delta_t = 0.01;
};

void validate(const SolverConfig& cfg);

// Integrates over grid with the chosen stepper; the trajectory has K+1
// states. Non-finite states raise NumericError naming the step index.
std::vector<FlowState> integrate(const VelocityField& field, const FlowState& initial,
                                 const TimeGrid& grid, Stepper stepper, const Conditioning& cond,
                                 const SolverConfig& cfg = {});

const char* to_string(Stepper s);
Stepper stepper_from_string(const std::string& name);

}  // namespace musrec
