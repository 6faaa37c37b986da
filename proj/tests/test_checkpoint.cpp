#include <doctest.h>

#include <cmath>

#include "musrec/edit_engine.hpp"
#include "musrec/rf_solver.hpp"
#include "musrec/synth.hpp"
#include "test_util.hpp"

using namespace musrec;

namespace {

const VelocityNet& toy() {
  static const VelocityNet net = load_checkpoint(MUSREC_CHECKPOINT);
  return net;
}

double rel_l2(const Latent& a, const Latent& b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

}  // namespace

TEST_CASE("shipped checkpoint: rf2 reconstructs better than euler at K = 25") {
  const Clip& c = make_corpus(1, 2).clips[0];
  const TimeGrid grid = TimeGrid::uniform(25, TimeGrid::Direction::reverse);
  const double eu = reconstruct(toy(), c.latent, grid, Stepper::euler, c.spec.conditioning()).error;
  const double rf = reconstruct(toy(), c.latent, grid, Stepper::rf_solver, c.spec.conditioning()).error;
  CHECK(rf < eu);
}

TEST_CASE("shipped checkpoint: the null condition changes the output") {
  const Clip& c = make_corpus(1, 2).clips[1];
  const Latent z = interpolate(test::random_matrix(64, 64, 3), c.latent, 0.5, Schedule::canonical());
  CHECK(rel_l2(toy().velocity(z, 0.5, Conditioning::null()), toy().velocity(z, 0.5, c.spec.conditioning())) > 0.0);
}

TEST_CASE("shipped checkpoint: same-class KV injection reconstructs at least as well as none" *
          doctest::test_suite("kv_reconstruction")) {
  for (const Clip& c : make_corpus(1, 2).clips) {
    EditConfig cfg;
    cfg.strategy = InjectStrategy::key_value;
    cfg.injection_steps = cfg.steps;
    cfg.block_start = 1;
    cfg.target_scale = cfg.source_scale;
    const CachedInversion inv = invert_and_cache(toy(), c.latent, c.spec.conditioning(), cfg);
    const Latent kv = edit(toy(), inv.noise, inv.cache, c.spec.conditioning(), cfg).edited;
    cfg.strategy = InjectStrategy::none;
    const Latent none = edit(toy(), inv.noise, {}, c.spec.conditioning(), cfg).edited;
    CHECK(rel_l2(kv, c.latent) <= rel_l2(none, c.latent));
  }
}
