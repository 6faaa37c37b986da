#include <boost/crc.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "binary_io.hpp"
#include "musrec/error.hpp"
#include "musrec/velocity_net.hpp"

namespace musrec {
namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

Latent gaussian_like(const Latent& shape, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Latent z(shape.rows(), shape.cols());
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = normal(rng);
  return z;
}

// Sums buffers[1..] into buffers[0] in a fixed pairwise order.
void tree_reduce(std::vector<std::vector<double>>& buffers) {
  for (std::size_t stride = 1; stride < buffers.size(); stride *= 2) {
    for (std::size_t i = 0; i + stride < buffers.size(); i += 2 * stride) {
      auto& dst = buffers[i];
      const auto& src = buffers[i + stride];
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
    }
  }
}

}  // namespace

TrainResult train(VelocityNet& net, std::span<const TrainingExample> data, const TrainConfig& cfg,
                  const TrainObserver& observer) {
  if (data.empty()) throw ArgumentError("train: empty dataset");
  if (cfg.batch_size == 0) throw ArgumentError("train: batch size must be positive");
  if (!(cfg.learning_rate > 0.0)) throw ArgumentError("train: learning rate must be positive");
  if (cfg.final_lr_fraction < 0.0 || cfg.final_lr_fraction > 1.0)
    throw ArgumentError("train: final_lr_fraction must be in [0, 1]");
  if (cfg.cond_dropout < 0.0 || cfg.cond_dropout > 1.0) throw ArgumentError("train: dropout must be in [0, 1]");

  const std::size_t np = net.params().size();
  std::vector<double> m1(np, 0.0), m2(np, 0.0);
  std::vector<std::vector<double>> grads(cfg.batch_size, std::vector<double>(np, 0.0));
  std::vector<double> losses(cfg.batch_size, 0.0);
  std::vector<FlowSample> batch(cfg.batch_size);
  std::vector<Conditioning> conds(cfg.batch_size);

  std::mt19937_64 rng(cfg.seed);
  std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  TrainResult result;
  result.loss_curve.reserve(cfg.steps);
  double b1t = 1.0, b2t = 1.0;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    for (std::size_t i = 0; i < cfg.batch_size; ++i) {
      const TrainingExample& ex = data[pick(rng)];
      batch[i].z1 = ex.z1;
      batch[i].z0 = ex.z0 ? *ex.z0 : gaussian_like(ex.z1, rng);
      batch[i].t = unit(rng);
      conds[i] = unit(rng) < cfg.cond_dropout ? Conditioning::null() : ex.cond;
    }
    const double scale = 1.0 / static_cast<double>(cfg.batch_size);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(cfg.batch_size); ++ii) {
      const auto i = static_cast<std::size_t>(ii);
      std::fill(grads[i].begin(), grads[i].end(), 0.0);
      losses[i] = net.loss_and_gradient(batch[i], conds[i], grads[i], scale);
    }
    tree_reduce(grads);
    double loss = 0.0;
    for (double l : losses) loss += l;
    loss *= scale;
    const std::vector<double>& g = grads[0];
    if (!std::isfinite(loss) || !std::all_of(g.begin(), g.end(), [](double v) { return std::isfinite(v); })) {
      throw TrainingError("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(loss) + ")");
    }

    b1t *= cfg.beta1;
    b2t *= cfg.beta2;
    const double progress = static_cast<double>(step) / static_cast<double>(cfg.steps);
    const double lr = cfg.learning_rate *
                      (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * 0.5 *
                                                   (1.0 + std::cos(std::numbers::pi * progress)));
    const double lr_t = lr * std::sqrt(1.0 - b2t) / (1.0 - b1t);
    auto params = net.params();
    for (std::size_t k = 0; k < np; ++k) {
      m1[k] = cfg.beta1 * m1[k] + (1.0 - cfg.beta1) * g[k];
      m2[k] = cfg.beta2 * m2[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      params[k] -= lr_t * m1[k] / (std::sqrt(m2[k]) + cfg.adam_epsilon);
    }
    result.loss_curve.push_back(loss);
    if (observer && !observer(step, loss)) break;
  }
  return result;
}

LossProbe make_loss_probe(std::span<const TrainingExample> data, std::size_t draws_per_example,
                          std::uint64_t seed) {
  if (data.empty() || draws_per_example == 0) throw ArgumentError("make_loss_probe: nothing to draw");
  LossProbe probe;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (const TrainingExample& ex : data) {
    for (std::size_t k = 0; k < draws_per_example; ++k) {
      FlowSample s;
      s.z1 = ex.z1;
      s.z0 = ex.z0 ? *ex.z0 : gaussian_like(ex.z1, rng);
      s.t = unit(rng);
      probe.samples.push_back(std::move(s));
      probe.conds.push_back(ex.cond);
    }
  }
  return probe;
}

double probe_loss(const VelocityNet& net, const LossProbe& probe) {
  std::vector<double> losses(probe.samples.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(losses.size()); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    losses[i] = net.loss_and_gradient(probe.samples[i], probe.conds[i], {});
  }
  return pairwise_sum(losses) / static_cast<double>(losses.size());
}

GradientCheckResult gradient_check(const VelocityNet& net, const FlowSample& sample, const Conditioning& cond,
                                   std::size_t coordinates, double eps, std::uint64_t seed, double floor) {
  if (coordinates == 0) throw ArgumentError("gradient_check: need at least one coordinate");
  std::vector<double> grad(net.params().size(), 0.0);
  net.loss_and_gradient(sample, cond, grad);
  VelocityNet probe = net;
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, grad.size() - 1);
  GradientCheckResult r;
  r.coordinates = coordinates;
  for (std::size_t c = 0; c < coordinates; ++c) {
    const std::size_t i = pick(rng);
    const double orig = probe.params()[i];
    probe.params()[i] = orig + eps;
    const double up = probe.loss_and_gradient(sample, cond, {});
    probe.params()[i] = orig - eps;
    const double down = probe.loss_and_gradient(sample, cond, {});
    probe.params()[i] = orig;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = std::abs(grad[i] - numeric) / std::max({std::abs(grad[i]), std::abs(numeric), floor});
    if (err > r.max_relative_error) {
      r.max_relative_error = err;
      r.worst_index = i;
    }
  }
  return r;
}

void save_checkpoint(const std::filesystem::path& path, const VelocityNet& net) {
  const NetConfig& c = net.config();
  std::string b = "MRCK";
  binio::put_u32(b, kCheckpointVersion);
  for (std::uint64_t v : {std::uint64_t{c.model_dim}, std::uint64_t{c.head_count}, std::uint64_t{c.double_blocks},
                          std::uint64_t{c.single_blocks}, std::uint64_t{c.audio_tokens},
                          std::uint64_t{c.latent_channels}, std::uint64_t{c.text_tokens},
                          std::uint64_t{c.timbre_vocab}, std::uint64_t{c.style_vocab}, std::uint64_t{c.mlp_ratio},
                          c.seed}) {
    binio::put_u64(b, v);
  }
  binio::put_u64(b, net.params().size());
  for (double v : net.params()) binio::put_f64(b, v);
  boost::crc_32_type crc;
  crc.process_bytes(b.data(), b.size());
  binio::put_u32(b, crc.checksum());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FileError("cannot open " + path.string() + " for writing");
  os.write(b.data(), static_cast<std::streamsize>(b.size()));
  if (!os) throw FileError("failed writing " + path.string());
}

VelocityNet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FileError("cannot open checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (bytes.size() < 8) throw FormatError(path.string() + ": file too short for a checkpoint");
  boost::crc_32_type crc;
  crc.process_bytes(bytes.data(), bytes.size() - 4);
  binio::Reader tail(bytes.substr(bytes.size() - 4), path.string());
  if (tail.u32() != crc.checksum()) throw FormatError(path.string() + ": checksum mismatch");

  binio::Reader r(bytes, path.string());
  if (r.tag(4) != "MRCK") r.fail("bad checkpoint magic");
  if (r.u32() != kCheckpointVersion) r.fail("unsupported checkpoint version");
  NetConfig c;
  c.model_dim = r.u64();
  c.head_count = r.u64();
  c.double_blocks = r.u64();
  c.single_blocks = r.u64();
  c.audio_tokens = r.u64();
  c.latent_channels = r.u64();
  c.text_tokens = r.u64();
  c.timbre_vocab = r.u64();
  c.style_vocab = r.u64();
  c.mlp_ratio = r.u64();
  c.seed = r.u64();
  try {
    validate(c);
  } catch (const ArgumentError& e) {
    r.fail(std::string("invalid config: ") + e.what());
  }
  const std::uint64_t count = r.u64();
  if (count != parameter_count(c)) r.fail("parameter count does not match the config");
  if (r.remaining() != count * 8 + 4) r.fail("payload size mismatch");
  std::vector<double> params(count);
  for (double& v : params) v = r.f64();
  return VelocityNet(c, std::move(params));
}

}  // namespace musrec
