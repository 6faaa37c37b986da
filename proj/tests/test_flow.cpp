#include <doctest.h>

#include <cmath>
#include <numeric>

#include "musrec/error.hpp"
#include "musrec/flow.hpp"
#include "test_util.hpp"

using namespace musrec;

TEST_CASE("interpolation hits both endpoints and the linear midpoint") {
  const Matrix z0 = test::random_matrix(3, 4, 1);
  const Matrix z1 = test::random_matrix(3, 4, 2);
  const Schedule s = Schedule::canonical();
  CHECK(test::bitwise_equal(interpolate(z0, z1, 0.0, s), z0));
  CHECK(test::bitwise_equal(interpolate(z0, z1, 1.0, s), z1));
  const Matrix mid = interpolate(z0, z1, 0.25, s);
  for (std::size_t i = 0; i < mid.size(); ++i) CHECK(mid[i] == doctest::Approx(0.75 * z0[i] + 0.25 * z1[i]).epsilon(1e-14));
}

TEST_CASE("canonical target velocity is z1 - z0 at every t") {
  const Matrix z0 = test::random_matrix(2, 5, 3);
  const Matrix z1 = test::random_matrix(2, 5, 4);
  for (double t : {0.0, 0.3, 1.0}) {
    const Matrix v = path_velocity(z0, z1, t, Schedule::canonical());
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(v[i] == doctest::Approx(z1[i] - z0[i]).epsilon(1e-15));
  }
}

TEST_CASE("custom schedules must meet the endpoint constraints") {
  auto one = [](double) { return 1.0; };
  auto zero = [](double) { return 0.0; };
  CHECK_THROWS_AS(Schedule::custom(one, one, zero, zero), ArgumentError);
  const Schedule cosine = Schedule::custom([](double t) { return std::cos(M_PI / 2 * t); },
                                           [](double t) { return std::sin(M_PI / 2 * t); },
                                           [](double t) { return -M_PI / 2 * std::sin(M_PI / 2 * t); },
                                           [](double t) { return M_PI / 2 * std::cos(M_PI / 2 * t); });
  CHECK(cosine.kind == Schedule::Kind::custom);
}

TEST_CASE("time grids") {
  const TimeGrid f = TimeGrid::uniform(4);
  CHECK(f.steps() == 4);
  CHECK(f.times() == std::vector<double>{0.0, 0.25, 0.5, 0.75, 1.0});
  const TimeGrid r = TimeGrid::uniform(4, TimeGrid::Direction::reverse);
  CHECK(r.time(0) == 1.0);
  CHECK(r.time(4) == 0.0);
  CHECK(r.step(0) == doctest::Approx(-0.25));
  CHECK(r.mirrored().times() == f.times());
  CHECK_THROWS_AS(TimeGrid::uniform(0), ArgumentError);
  CHECK_THROWS_AS(TimeGrid::from_partition({0.0, 0.5, 0.5, 1.0}), ArgumentError);
  CHECK_THROWS_AS(TimeGrid::from_partition({0.1, 1.0}), ArgumentError);
}

TEST_CASE("pairwise summation matches the exact integer sum") {
  std::vector<double> v(1000);
  std::iota(v.begin(), v.end(), 1.0);
  CHECK(pairwise_sum(v) == 500500.0);
  CHECK(pairwise_sum(std::vector<double>{}) == 0.0);
}

TEST_CASE("euler step on a constant field") {
  const Matrix c = test::random_matrix(2, 3, 5);
  FunctionField field([&](const Latent&, double) { return c; });
  const Matrix z = test::random_matrix(2, 3, 6);
  const FlowState next = euler_step(field, {z, 0.25}, 0.5, Conditioning::null());
  CHECK(next.t == 0.75);
  for (std::size_t i = 0; i < z.size(); ++i) CHECK(next.z[i] == doctest::Approx(z[i] + 0.5 * c[i]));
  CHECK_THROWS_AS(euler_step(field, {z, 0.75}, 0.5, Conditioning::null()), RangeError);
}

TEST_CASE("integrate returns K+1 states and rejects blow-ups") {
  FunctionField decay([](const Latent& z, double) { return -1.0 * z; });
  const auto traj = integrate(decay, {Matrix(1, 1, 1.0), 0.0}, TimeGrid::uniform(10), Stepper::euler,
                              Conditioning::null());
  CHECK(traj.size() == 11);
  CHECK(traj.back().z[0] == doctest::Approx(std::pow(0.9, 10)));

  FunctionField bad([](const Latent& z, double) { return Matrix(z.rows(), z.cols(), INFINITY); });
  CHECK_THROWS_AS(integrate(bad, {Matrix(1, 1, 1.0), 0.0}, TimeGrid::uniform(2), Stepper::euler, Conditioning::null()),
                  NumericError);
}

TEST_CASE("flow state validation") {
  CHECK_THROWS_AS(validate(FlowState{Matrix(1, 1), 1.5}), RangeError);
  CHECK_THROWS_AS(validate(FlowState{Matrix(1, 1, NAN), 0.5}), NumericError);
  CHECK_NOTHROW(validate(FlowState{Matrix(1, 1), 0.5}));
}

TEST_CASE("velocity-matching loss vanishes for the exact straight-line field") {
  const Matrix z0 = test::random_matrix(4, 4, 7);
  const Matrix z1 = test::random_matrix(4, 4, 8);
  FunctionField exact([&](const Latent&, double) { return z1 - z0; });
  std::vector<FlowSample> batch{{z0, z1, 0.1}, {z0, z1, 0.9}};
  CHECK(velocity_matching_loss(exact, batch, Schedule::canonical(), Conditioning::null()) == 0.0);

  // v = 0 leaves the loss at mean((z1 - z0)^2).
  FunctionField zero([](const Latent& z, double) { return Matrix(z.rows(), z.cols()); });
  double expect = 0.0;
  for (std::size_t i = 0; i < z0.size(); ++i) expect += (z1[i] - z0[i]) * (z1[i] - z0[i]);
  expect /= static_cast<double>(z0.size());
  CHECK(velocity_matching_loss(zero, batch, Schedule::canonical(), Conditioning::null()) ==
        doctest::Approx(expect).epsilon(1e-13));
}

TEST_CASE("solver names") {
  CHECK(stepper_from_string("euler") == Stepper::euler);
  CHECK(stepper_from_string("rf2") == Stepper::rf_solver);
  CHECK(std::string(to_string(Stepper::rf_solver)) == "rf2");
  CHECK_THROWS_AS(stepper_from_string("rk4"), ArgumentError);
}

TEST_CASE("hand-checked euler steps") {
  FunctionField one([](const Latent& z, double) { return Matrix(z.rows(), z.cols(), 1.0); });
  const FlowState a = euler_step(one, {Matrix(1, 1), 0.0}, 0.1, Conditioning::null());
  CHECK(a.z[0] == doctest::Approx(0.1));
  CHECK(a.t == doctest::Approx(0.1));
  const Matrix z = test::random_matrix(2, 2, 9);
  CHECK(test::bitwise_equal(euler_step(one, {z, 0.4}, 0.0, Conditioning::null()).z, z));

  // v = z from z = 1: one step of 0.5 gives 1.5 against e^0.5
  FunctionField grow([](const Latent& z, double) { return z; });
  const FlowState g = euler_step(grow, {Matrix(1, 1, 1.0), 0.0}, 0.5, Conditioning::null());
  CHECK(g.z[0] == 1.5);
  CHECK(std::exp(0.5) - g.z[0] == doctest::Approx(0.1487).epsilon(1e-3));
}

TEST_CASE("integrate: constant fields, single steps and Riemann sums") {
  const Matrix c = test::random_matrix(2, 3, 10);
  FunctionField cst([&](const Latent&, double) { return c; });
  const Matrix z0 = test::random_matrix(2, 3, 11);
  const TimeGrid uneven = TimeGrid::from_partition({0.0, 0.1, 0.35, 0.7, 1.0});
  for (Stepper s : {Stepper::euler, Stepper::rf_solver}) {
    const auto traj = integrate(cst, {z0, 0.0}, uneven, s, Conditioning::null());
    for (std::size_t i = 0; i < c.size(); ++i) CHECK(traj.back().z[i] == doctest::Approx(z0[i] + c[i]).epsilon(1e-14));
    CHECK(traj.back().t == 1.0);
  }
  FunctionField grow([](const Latent& z, double) { return z; });
  const auto one = integrate(grow, {z0, 0.0}, TimeGrid::uniform(1), Stepper::euler, Conditioning::null());
  CHECK(test::bitwise_equal(one.back().z, euler_step(grow, {z0, 0.0}, 1.0, Conditioning::null()).z));

  // left Riemann sum of 2t: 2 * 0.25 * (0 + 0.25 + 0.5 + 0.75)
  FunctionField ramp([](const Latent& z, double t) { return Matrix(z.rows(), z.cols(), 2.0 * t); });
  const auto r = integrate(ramp, {Matrix(1, 1), 0.0}, TimeGrid::uniform(4), Stepper::euler, Conditioning::null());
  CHECK(r.back().z[0] == doctest::Approx(0.75).epsilon(1e-15));
}

TEST_CASE("euler error on a z-independent field shrinks as K doubles") {
  FunctionField f([](const Latent& z, double t) { return Matrix(z.rows(), z.cols(), std::cos(3.0 * t)); });
  const double exact = std::sin(3.0) / 3.0;
  double last = INFINITY;
  for (std::size_t k : {4, 8, 16, 32, 64}) {
    const auto traj = integrate(f, {Matrix(1, 1), 0.0}, TimeGrid::uniform(k), Stepper::euler, Conditioning::null());
    const double err = std::abs(traj.back().z[0] - exact);
    CHECK(err < last);
    last = err;
  }
}

TEST_CASE("forward then reversed grid is the identity where the stepper is exact") {
  // Euler is exact for constant fields, the RF step for fields linear in t.
  FunctionField cst([](const Latent& z, double) { return Matrix(z.rows(), z.cols(), -1.25); });
  FunctionField lin([](const Latent& z, double t) { return Matrix(z.rows(), z.cols(), 0.5 - 3.0 * t); });
  const Matrix z0 = test::random_matrix(3, 3, 12);
  const TimeGrid g = TimeGrid::from_partition({0.0, 0.05, 0.3, 0.31, 0.8, 1.0});
  const TimeGrid r = TimeGrid::from_partition({0.0, 0.05, 0.3, 0.31, 0.8, 1.0}, TimeGrid::Direction::reverse);
  for (auto [field, s] : {std::pair<const VelocityField*, Stepper>{&cst, Stepper::euler}, {&lin, Stepper::rf_solver}}) {
    const auto fwd = integrate(*field, {z0, 0.0}, g, s, Conditioning::null());
    const auto back = integrate(*field, fwd.back(), r, s, Conditioning::null());
    for (std::size_t i = 0; i < z0.size(); ++i) CHECK(std::abs(back.back().z[i] - z0[i]) <= 1e-12);
  }
}

TEST_CASE("loss of a predictor offset by a constant is c squared per element") {
  const Matrix z0 = test::random_matrix(3, 4, 13);
  const Matrix z1 = test::random_matrix(3, 4, 14);
  const double c = 0.7;
  FunctionField off([&](const Latent&, double) { return (z1 - z0) + Matrix(3, 4, c); });
  std::vector<FlowSample> batch{{z0, z1, 0.2}, {z0, z1, 0.6}};
  CHECK(velocity_matching_loss(off, batch, Schedule::canonical(), Conditioning::null()) ==
        doctest::Approx(c * c).epsilon(1e-12));

  // single item against a brute-force squared norm over dim
  FunctionField other([](const Latent& z, double t) { return t * z; });
  const Latent zt = interpolate(z0, z1, 0.3, Schedule::canonical());
  double sq = 0.0;
  for (std::size_t i = 0; i < zt.size(); ++i) sq += std::pow(0.3 * zt[i] - (z1[i] - z0[i]), 2);
  const std::vector<FlowSample> single{{z0, z1, 0.3}};
  CHECK(std::abs(velocity_matching_loss(other, single, Schedule::canonical(), Conditioning::null()) - sq / 12.0) <=
        1e-12);
}
