#include <doctest.h>

#include <cmath>

#include "musrec/error.hpp"
#include "musrec/rf_solver.hpp"
#include "test_util.hpp"

using namespace musrec;

namespace {

// dz/dt = sin(2 pi t) (1 + 0.1 z) has the closed form
// 1 + 0.1 z(t) = (1 + 0.1 z0) exp(0.1 (1 - cos(2 pi t)) / (2 pi)).
Matrix sine_exact(const Matrix& z0, double t) {
  const double g = std::exp(0.1 * (1.0 - std::cos(2.0 * M_PI * t)) / (2.0 * M_PI));
  Matrix z(z0.rows(), z0.cols());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = ((1.0 + 0.1 * z0[i]) * g - 1.0) / 0.1;
  return z;
}

FunctionField sine_field() {
  return FunctionField([](const Latent& z, double t) {
    Latent v(z.rows(), z.cols());
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = std::sin(2.0 * M_PI * t) * (1.0 + 0.1 * z[i]);
    return v;
  });
}

}  // namespace

TEST_CASE("RF step is exact on a field linear in t") {
  const Matrix a = test::random_matrix(2, 3, 11);
  const Matrix b = test::random_matrix(2, 3, 12);
  FunctionField field([&](const Latent&, double t) { return a + t * b; });
  const Matrix z0 = test::random_matrix(2, 3, 13);
  for (double h : {0.05, 0.3, 0.7}) {
    const double t0 = 0.2;
    const FlowState s = rf_solver_step(field, {z0, t0}, h, {}, Conditioning::null());
    const double t1 = t0 + h;
    for (std::size_t i = 0; i < z0.size(); ++i)
      CHECK(std::abs(s.z[i] - (z0[i] + a[i] * h + 0.5 * b[i] * (t1 * t1 - t0 * t0))) <= 1e-12);
  }
  // Backward near t = 1 and reverse steps are exact too.
  const FlowState back = rf_solver_step(field, {z0, 1.0}, -0.6, {}, Conditioning::null());
  for (std::size_t i = 0; i < z0.size(); ++i)
    CHECK(std::abs(back.z[i] - (z0[i] - 0.6 * a[i] + 0.5 * b[i] * (0.16 - 1.0))) <= 1e-12);
}

TEST_CASE("finite-difference derivative switches to a backward difference near t=1") {
  FunctionField quad([](const Latent& z, double t) { return Matrix(z.rows(), z.cols(), t * t); });
  const Matrix z(1, 1);
  const double dt = 0.01;
  const Latent fwd = estimate_time_derivative(quad, {z, 0.5}, dt, Conditioning::null());
  CHECK(fwd[0] == doctest::Approx(2 * 0.5 + dt).epsilon(1e-10));
  const Latent bwd = estimate_time_derivative(quad, {z, 0.995}, dt, Conditioning::null());
  CHECK(bwd[0] == doctest::Approx(2 * 0.995 - dt).epsilon(1e-10));
}

TEST_CASE("Taylor update with a zero derivative is the Euler update bit for bit") {
  const Matrix z = test::random_matrix(3, 3, 21);
  const Matrix v = test::random_matrix(3, 3, 22);
  FunctionField field([&](const Latent&, double) { return v; });
  const FlowState e = euler_step(field, {z, 0.4}, 0.1, Conditioning::null());
  CHECK(test::bitwise_equal(taylor_update(z, v, Matrix(3, 3), 0.1), e.z));
}

TEST_CASE("global convergence order on the sine field") {
  const Matrix z0 = test::random_matrix(1, 4, 31);
  const ExactSolution exact = [&](double t) { return sine_exact(z0, t); };
  const ConvergenceReport r =
      convergence_order(sine_field(), exact, {8, 16, 32, 64, 128});
  REQUIRE(r.euler.slope);
  REQUIRE(r.rf_solver.slope);
  CHECK(*r.euler.slope > 0.8);
  CHECK(*r.euler.slope < 1.2);
  CHECK(*r.rf_solver.slope > 1.7);
  CHECK(*r.rf_solver.slope < 2.3);
  for (std::size_t i = 0; i < r.step_counts.size(); ++i) CHECK(r.rf_solver.errors[i] < r.euler.errors[i]);
}

TEST_CASE("log-log slope of an exact power law") {
  const std::vector<std::size_t> ks{4, 8, 16, 32};
  std::vector<double> err;
  for (auto k : ks) err.push_back(3.0 / (double(k) * double(k)));
  CHECK(log_log_slope(ks, err) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK_THROWS_AS(log_log_slope({4, 8}, {1.0, 0.5}), ArgumentError);
}

TEST_CASE("reconstruction under a zero field is exact") {
  FunctionField zero([](const Latent& z, double) { return Matrix(z.rows(), z.cols()); });
  const Matrix x = test::random_matrix(4, 4, 41);
  const auto grid = TimeGrid::uniform(5, TimeGrid::Direction::reverse);
  for (Stepper s : {Stepper::euler, Stepper::rf_solver}) {
    const Reconstruction r = reconstruct(zero, x, grid, s, Conditioning::null());
    CHECK(r.error == 0.0);
    CHECK_FALSE(r.absolute);
  }
  const Reconstruction z = reconstruct(zero, Matrix(2, 2), grid, Stepper::euler, Conditioning::null());
  CHECK(z.absolute);
  CHECK_THROWS_AS(invert(zero, x, TimeGrid::uniform(5), Stepper::euler, Conditioning::null()), ArgumentError);
}

TEST_CASE("inversion round trip improves with the second-order solver") {
  const Matrix x = test::random_matrix(1, 6, 51);
  FunctionField f = sine_field();
  const auto grid = TimeGrid::uniform(16, TimeGrid::Direction::reverse);
  const double e1 = reconstruct(f, x, grid, Stepper::euler, Conditioning::null()).error;
  const double e2 = reconstruct(f, x, grid, Stepper::rf_solver, Conditioning::null()).error;
  CHECK(e2 < e1);
}

TEST_CASE("solver config bounds") {
  CHECK_THROWS_AS(validate(SolverConfig{0.0}), ArgumentError);
  CHECK_THROWS_AS(validate(SolverConfig{0.2}), ArgumentError);
  CHECK_NOTHROW(validate(SolverConfig{0.01}));
}

TEST_CASE("derivative estimates on simple fields") {
  FunctionField lin([](const Latent& z, double t) { return Matrix(z.rows(), z.cols(), t); });
  for (double dt : {0.001, 0.01, 0.1})
    CHECK(estimate_time_derivative(lin, {Matrix(1, 1), 0.3}, dt, Conditioning::null())[0] == doctest::Approx(1.0).epsilon(1e-12));
  FunctionField cst([](const Latent& z, double) { return Matrix(z.rows(), z.cols(), 4.0); });
  CHECK(estimate_time_derivative(cst, {Matrix(1, 1), 0.3}, 0.01, Conditioning::null())[0] == 0.0);
  CHECK_THROWS_AS(estimate_time_derivative(cst, {Matrix(1, 1), 0.3}, 0.0, Conditioning::null()), ArgumentError);
}

TEST_CASE("one RF step on v = t integrates the parabola exactly") {
  FunctionField lin([](const Latent& z, double t) { return Matrix(z.rows(), z.cols(), t); });
  const FlowState s = rf_solver_step(lin, {Matrix(1, 1), 0.0}, 1.0, {}, Conditioning::null());
  CHECK(s.z[0] == doctest::Approx(0.5).epsilon(1e-14));
  CHECK(s.t == 1.0);
  const Matrix z = test::random_matrix(2, 2, 61);
  CHECK(test::bitwise_equal(rf_solver_step(lin, {z, 0.5}, 0.0, {}, Conditioning::null()).z, z));
  FunctionField cst([](const Latent& z, double) { return Matrix(z.rows(), z.cols(), -2.5); });
  CHECK(test::bitwise_equal(rf_solver_step(cst, {z, 0.2}, 0.3, {}, Conditioning::null()).z,
                            euler_step(cst, {z, 0.2}, 0.3, Conditioning::null()).z));
}

TEST_CASE("inversion undoes generation where the RF step is exact") {
  FunctionField f([](const Latent& z, double t) { return Matrix(z.rows(), z.cols(), 2.0 - 5.0 * t); });
  const Matrix z0 = test::random_matrix(4, 4, 62);
  const auto gen = integrate(f, {z0, 0.0}, TimeGrid::uniform(10), Stepper::rf_solver, Conditioning::null());
  const auto rev = TimeGrid::uniform(10, TimeGrid::Direction::reverse);
  const InversionResult inv = invert(f, gen.back().z, rev, Stepper::rf_solver, Conditioning::null());
  for (std::size_t i = 0; i < z0.size(); ++i) CHECK(std::abs(inv.noise_latent[i] - z0[i]) <= 1e-10);
  for (std::size_t i = 1; i < inv.trajectory.size(); ++i) CHECK(inv.trajectory[i].t < inv.trajectory[i - 1].t);
  CHECK(reconstruct(f, gen.back().z, rev, Stepper::rf_solver, Conditioning::null()).error <= 1e-10);

  // Euler is only exact on constant fields
  FunctionField c([](const Latent& z, double) { return Matrix(z.rows(), z.cols(), 0.75); });
  CHECK(reconstruct(c, z0, rev, Stepper::euler, Conditioning::null()).error <= 1e-10);
  // and first order otherwise: doubling K roughly halves the round-trip error
  FunctionField w([](const Latent& z, double t) { return Matrix(z.rows(), z.cols(), std::cos(4.0 * t)); });
  const double e1 = reconstruct(w, z0, rev, Stepper::euler, Conditioning::null()).error;
  const double e2 =
      reconstruct(w, z0, TimeGrid::uniform(20, TimeGrid::Direction::reverse), Stepper::euler, Conditioning::null()).error;
  CHECK(e1 / e2 == doctest::Approx(2.0).epsilon(0.15));

  FunctionField zero([](const Latent& z, double) { return Matrix(z.rows(), z.cols()); });
  const InversionResult still =
      invert(zero, z0, TimeGrid::uniform(3, TimeGrid::Direction::reverse), Stepper::rf_solver, Conditioning::null());
  CHECK(test::bitwise_equal(still.noise_latent, z0));
}

TEST_CASE("order estimate saturates on exactly integrable fields") {
  FunctionField cst([](const Latent& z, double) { return Matrix(z.rows(), z.cols(), 0.5); });
  const Matrix z0(1, 2, 1.0);
  const ConvergenceReport c =
      convergence_order(cst, [&](double t) { return Matrix(1, 2, 1.0 + 0.5 * t); }, {8, 16, 32});
  CHECK(c.euler.saturated());
  CHECK(c.rf_solver.saturated());
  FunctionField lin([](const Latent& z, double t) { return Matrix(z.rows(), z.cols(), 1.0 + 2.0 * t); });
  const ConvergenceReport l =
      convergence_order(lin, [&](double t) { return Matrix(1, 2, 1.0 + t + t * t); }, {8, 16, 32});
  CHECK(l.rf_solver.saturated());
  REQUIRE_FALSE(l.euler.saturated());
  CHECK(*l.euler.slope == doctest::Approx(1.0).epsilon(0.05));
  CHECK_THROWS_AS(convergence_order(lin, [&](double t) { return Matrix(1, 2, t); }, {8, 16}), ArgumentError);
}
