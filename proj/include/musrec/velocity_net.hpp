#pragma once

// Toy diffusion transformer used as the rectified-flow velocity field.
//
// Two text tokens (a timbre embedding and a style embedding) and 64 audio
// tokens go through D double-stream blocks (separate weights per stream,
// joint attention) and then S single-stream blocks over the concatenated
// sequence. Every block is modulated (shift, scale, gate) from the time
// embedding plus a coarse condition vector. Only the single blocks expose
// their attention inputs to an AttentionTap.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "musrec/conditioning.hpp"
#include "musrec/flow.hpp"

namespace musrec {

struct NetConfig {
  std::size_t model_dim = 64;
  std::size_t head_count = 4;
  std::size_t double_blocks = 2;
  std::size_t single_blocks = 4;
  std::size_t audio_tokens = 64;
  std::size_t latent_channels = 64;
  std::size_t text_tokens = 2;  // timbre token + style token
  std::size_t timbre_vocab = 4;
  std::size_t style_vocab = 4;
  std::size_t mlp_ratio = 2;
  std::uint64_t seed = 0;

  std::size_t mlp_dim() const { return model_dim * mlp_ratio; }
  std::size_t tokens() const { return text_tokens + audio_tokens; }
  friend bool operator==(const NetConfig&, const NetConfig&) = default;
};

// ArgumentError on a config the network cannot be built from.
void validate(const NetConfig& cfg);

// Closed-form parameter count.
std::size_t parameter_count(const NetConfig& cfg);

enum class TapMode { passthrough, record, replace };

// Which recorded tensors replace the live ones in replace mode.
enum class InjectStrategy { none, value, key, key_value };

const char* to_string(InjectStrategy s);
InjectStrategy strategy_from_string(const std::string& name);  // "none", "V", "K", "KV"

// Attention inputs of one single-stream block, all tokens (text rows first).
struct AttentionRecord {
  Matrix q, k, v;
};

// Per-call hook on the single-block attentions. Blocks are numbered from 0;
// only blocks >= first_block are recorded or replaced.
struct AttentionTap {
  TapMode mode = TapMode::passthrough;
  InjectStrategy strategy = InjectStrategy::none;
  std::size_t first_block = 0;
  std::map<std::size_t, AttentionRecord> slots;  // filled by record, read by replace

  bool capture_probs = false;
  std::vector<Matrix> probs;  // per single block: heads*tokens x tokens softmax weights
};

struct ForwardCache;

class VelocityNet final : public VelocityField {
 public:
  // Freshly initialized parameters (deterministic in cfg.seed).
  explicit VelocityNet(const NetConfig& cfg);
  VelocityNet(const NetConfig& cfg, std::vector<double> params);

  const NetConfig& config() const { return cfg_; }
  std::span<const double> params() const { return params_; }
  std::span<double> params() { return params_; }

  Latent forward(const Latent& z, double t, const Conditioning& cond, AttentionTap* tap = nullptr) const;
  Latent velocity(const Latent& z, double t, const Conditioning& cond) const override {
    return forward(z, t, cond, nullptr);
  }

  // Velocity-matching loss (mean squared error over the latent) of one
  // sample; adds scale * dLoss/dParams into grad when grad is non-empty.
  double loss_and_gradient(const FlowSample& sample, const Conditioning& cond, std::span<double> grad,
                           double scale = 1.0) const;

  // Index of the first output-head bias parameter (latent_channels of them).
  std::size_t output_bias_offset() const;
  // Range of the output-head weight and bias, which start at zero.
  std::pair<std::size_t, std::size_t> output_head_range() const;

  struct Layout;  // parameter offsets, defined in the implementation

 private:
  Latent run(const Latent& z, double t, const Conditioning& cond, AttentionTap* tap, ForwardCache* cache) const;
  void backward(const ForwardCache& cache, const Matrix& dout, std::span<double> grad) const;

  NetConfig cfg_;
  std::vector<double> params_;
  std::shared_ptr<const Layout> layout_;
};

std::vector<double> init_params(const NetConfig& cfg);

// Training.
struct TrainingExample {
  Latent z1;
  Conditioning cond;
  std::optional<Latent> z0;  // fixed noise partner; drawn fresh per step when empty
};

struct TrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 8;
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  double cond_dropout = 0.1;  // probability of training a sample unconditionally
  double final_lr_fraction = 1.0;  // cosine decay to learning_rate * this over `steps`
  std::uint64_t seed = 0;
};

struct TrainResult {
  std::vector<double> loss_curve;  // mean batch loss per step
};

// Optional per-step observer; returning false stops training early.
using TrainObserver = std::function<bool(std::size_t step, double batch_loss)>;

// Adam on the batch-mean velocity-matching loss with t ~ U(0,1) and
// z0 ~ N(0, I). Throws TrainingError naming the step if the loss or a
// gradient stops being finite.
TrainResult train(VelocityNet& net, std::span<const TrainingExample> data, const TrainConfig& cfg,
                  const TrainObserver& observer = {});

// Fixed evaluation set: one (z0, t) draw per example, deterministic in seed.
struct LossProbe {
  std::vector<FlowSample> samples;
  std::vector<Conditioning> conds;
};
LossProbe make_loss_probe(std::span<const TrainingExample> data, std::size_t draws_per_example,
                          std::uint64_t seed);
double probe_loss(const VelocityNet& net, const LossProbe& probe);

struct GradientCheckResult {
  double max_relative_error = 0.0;
  std::size_t coordinates = 0;
  std::size_t worst_index = 0;
};

// Central differences on `coordinates` randomly chosen parameters. The
// relative error is |a - n| / max(|a|, |n|, floor).
GradientCheckResult gradient_check(const VelocityNet& net, const FlowSample& sample, const Conditioning& cond,
                                   std::size_t coordinates, double eps = 1e-5, std::uint64_t seed = 0,
                                   double floor = 1e-6);

// Checkpoint: "MRCK", u32 version, NetConfig fields as u64, u64 parameter
// count, f64 parameters, u32 CRC-32 of everything before it.
void save_checkpoint(const std::filesystem::path& path, const VelocityNet& net);
VelocityNet load_checkpoint(const std::filesystem::path& path);

}  // namespace musrec
