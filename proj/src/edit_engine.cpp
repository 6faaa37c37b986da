#include "musrec/edit_engine.hpp"

#include <cmath>

#include "musrec/error.hpp"
#include "musrec/latent.hpp"

namespace musrec {
namespace {

Latent combine(const Latent& uncond, const Latent& cond, double scale) {
  Latent out(uncond.rows(), uncond.cols());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = uncond[i] + scale * (cond[i] - uncond[i]);
  return out;
}

// Guided network field for one trajectory. Solvers call velocity() once or
// twice per step and the first call is always the step's main evaluation,
// so the tap schedule is set per step and the call counter tells the main
// evaluation apart from the derivative probe.
class StepField final : public VelocityField {
 public:
  StepField(const VelocityNet& net, double scale) : net_(net), scale_(scale) {}

  // record: tap used on the main conditional evaluation only.
  // replace: tap used on every evaluation of the step.
  void begin_step(AttentionTap* record, AttentionTap* replace) {
    record_ = record;
    replace_ = replace;
    calls_ = 0;
  }
  double main_norm() const { return main_norm_; }

  Latent velocity(const Latent& z, double t, const Conditioning& cond) const override {
    const bool main = calls_++ == 0;
    AttentionTap* cond_tap = replace_ ? replace_ : (main ? record_ : nullptr);
    Latent v;
    if (scale_ == 1.0) {
      v = net_.forward(z, t, cond, cond_tap);
    } else {
      const Latent vc = net_.forward(z, t, cond, cond_tap);
      const Latent vu = net_.forward(z, t, Conditioning::null(), replace_);
      v = scale_ == 0.0 ? vu : combine(vu, vc, scale_);
    }
    if (main) main_norm_ = l2_norm(v);
    return v;
  }

 private:
  const VelocityNet& net_;
  double scale_;
  AttentionTap* record_ = nullptr;
  AttentionTap* replace_ = nullptr;
  mutable std::size_t calls_ = 0;
  mutable double main_norm_ = 0.0;
};

FlowState advance(const VelocityField& field, const FlowState& s, double h, const EditConfig& cfg,
                  const Conditioning& cond) {
  FlowState next = cfg.solver == Stepper::euler ? euler_step(field, s, h, cond)
                                                : rf_solver_step(field, s, h, cfg.solver_config, cond);
  for (std::size_t i = 0; i < next.z.size(); ++i) {
    if (!std::isfinite(next.z[i])) throw NumericError("edit: state became non-finite at t=" + std::to_string(next.t));
  }
  return next;
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

// A grid line with a constant metric (n = 0 ignores m) has no rank order.
void push_defined(std::vector<double>& rhos, const std::vector<double>& x, const std::vector<double>& y) {
  try {
    rhos.push_back(spearman(x, y));
  } catch (const UndefinedMetricError&) {
  }
}

}  // namespace

void validate(const EditConfig& cfg, std::size_t single_blocks) {
  if (cfg.steps == 0) throw ArgumentError("edit: step count must be positive");
  if (cfg.injection_steps > cfg.steps) throw ArgumentError("edit: injection steps n must not exceed N");
  if (cfg.strategy != InjectStrategy::none && (cfg.block_start < 1 || cfg.block_start > single_blocks)) {
    throw ArgumentError("edit: block start m must be in 1.." + std::to_string(single_blocks));
  }
  if (!std::isfinite(cfg.source_scale) || !std::isfinite(cfg.target_scale))
    throw ArgumentError("edit: guidance scales must be finite");
  validate(cfg.solver_config);
}

Latent guided_velocity(const VelocityField& field, const Latent& z, double t, const Conditioning& cond,
                       const Conditioning& null_cond, double scale) {
  if (scale == 1.0) return field.velocity(z, t, cond);
  const Latent vc = field.velocity(z, t, cond);
  const Latent vu = field.velocity(z, t, null_cond);
  if (scale == 0.0) return vu;
  return combine(vu, vc, scale);
}

std::size_t correspondence(std::size_t step, std::size_t steps) {
  if (step >= steps) {
    throw RangeError("correspondence: step " + std::to_string(step) + " outside 0.." + std::to_string(steps - 1));
  }
  return steps - 1 - step;
}

std::size_t AttentionCache::size() const {
  std::size_t n = 0;
  for (const auto& [k, blocks] : steps) n += blocks.size();
  return n;
}

bool AttentionCache::contains(std::size_t step, std::size_t block) const {
  const auto it = steps.find(step);
  return it != steps.end() && it->second.count(block) != 0;
}

AttentionCache AttentionCache::subset(std::size_t total_steps, std::size_t n, std::size_t m) const {
  if (n > total_steps) throw ArgumentError("cache subset: n exceeds the step count");
  if (m < 1) throw ArgumentError("cache subset: m is 1-based");
  AttentionCache out;
  for (std::size_t k = total_steps - n; k < total_steps; ++k) {
    const auto it = steps.find(k);
    if (it == steps.end()) throw CacheMissError("cache subset: no entries for inversion step " + std::to_string(k));
    for (const auto& [b, rec] : it->second) {
      if (b + 1 >= m) out.steps[k][b] = rec;
    }
  }
  return out;
}

CachedInversion invert_and_cache(const VelocityNet& net, const Latent& source, const Conditioning& source_cond,
                                 const EditConfig& cfg) {
  const std::size_t S = net.config().single_blocks;
  validate(cfg, S);
  const TimeGrid grid = TimeGrid::uniform(cfg.steps, TimeGrid::Direction::reverse);
  StepField field(net, cfg.source_scale);
  CachedInversion out;
  FlowState s{source, 1.0};
  validate(s);
  out.trajectory.push_back(s);
  const bool caching = cfg.strategy != InjectStrategy::none && cfg.injection_steps > 0;
  for (std::size_t k = 0; k < grid.steps(); ++k) {
    AttentionTap tap;
    const bool record = caching && k >= cfg.steps - cfg.injection_steps;
    if (record) {
      tap.mode = TapMode::record;
      tap.first_block = cfg.block_start - 1;
    }
    field.begin_step(record ? &tap : nullptr, nullptr);
    s = advance(field, s, grid.step(k), cfg, source_cond);
    s.t = grid.time(k + 1);
    out.trajectory.push_back(s);
    if (record) {
      for (auto& [b, rec] : tap.slots) rec.q = Matrix();  // only K and V are ever injected
      out.cache.steps[k] = std::move(tap.slots);
    }
  }
  const std::size_t expected = caching ? cfg.injection_steps * (S - cfg.block_start + 1) : 0;
  if (out.cache.size() != expected) {
    throw NumericError("attention cache holds " + std::to_string(out.cache.size()) + " entries, expected " +
                       std::to_string(expected));
  }
  out.noise = s.z;
  return out;
}

EditResult edit(const VelocityNet& net, const Latent& noise, const AttentionCache& cache,
                const Conditioning& target_cond, const EditConfig& cfg) {
  validate(cfg, net.config().single_blocks);
  const TimeGrid grid = TimeGrid::uniform(cfg.steps, TimeGrid::Direction::forward);
  StepField field(net, cfg.target_scale);
  EditResult out;
  out.noise = noise;
  out.config = cfg;
  FlowState s{noise, 0.0};
  validate(s);
  const bool injecting = cfg.strategy != InjectStrategy::none;
  for (std::size_t j = 0; j < grid.steps(); ++j) {
    const bool inject = injecting && j < cfg.injection_steps;
    AttentionTap tap;
    const std::size_t k = correspondence(j, cfg.steps);
    if (inject) {
      const auto it = cache.steps.find(k);
      if (it == cache.steps.end())
        throw CacheMissError("no cached attention for inversion step " + std::to_string(k));
      tap.mode = TapMode::replace;
      tap.strategy = cfg.strategy;
      tap.first_block = cfg.block_start - 1;
      tap.slots = it->second;
    }
    field.begin_step(nullptr, inject ? &tap : nullptr);
    const double t0 = s.t;
    s = advance(field, s, grid.step(j), cfg, target_cond);
    s.t = grid.time(j + 1);
    out.steps.push_back({t0, field.main_norm(), inject});
  }
  out.edited = s.z;
  return out;
}

EditResult edit_clip(const VelocityNet& net, const Latent& source, const Conditioning& source_cond,
                     const Conditioning& target_cond, const EditConfig& cfg) {
  const CachedInversion inv = invert_and_cache(net, source, source_cond, cfg);
  return edit(net, inv.noise, inv.cache, target_cond, cfg);
}

Conditioning retarget(const Conditioning& cond, const ClassTarget& target) {
  if (cond.is_null) throw ArgumentError("cannot retarget the null conditioning");
  Conditioning out = cond;
  if (target.axis == ClassTarget::Axis::timbre) {
    out.timbre = target.value;
  } else {
    out.style = target.value;
  }
  return out;
}

EditMetrics score_edit(const Latent& source, const Latent& edited, const PrototypeSet& prototypes,
                       const ClassTarget& source_class, const ClassTarget& target) {
  const Signal src = decode_latent(source);
  const Signal out = decode_latent(edited);
  EditMetrics m;
  m.chroma = chroma_similarity(src, out);
  m.pcc = cqt_pcc(src, out);
  const std::vector<double> e = embed_toy(out);
  m.align_source = cosine(e, prototypes.of(source_class));
  m.align_target = cosine(e, prototypes.of(target));
  return m;
}

SweepResult sweep(const VelocityNet& net, const std::vector<EditJob>& jobs, const std::vector<std::size_t>& n_values,
                  const std::vector<std::size_t>& m_values, const EditConfig& base, const PrototypeSet& prototypes) {
  if (jobs.empty() || n_values.empty() || m_values.empty()) throw ArgumentError("sweep: empty jobs or grid");
  for (std::size_t n : n_values) {
    EditConfig c = base;
    c.injection_steps = n;
    for (std::size_t m : m_values) {
      c.block_start = m;
      validate(c, net.config().single_blocks);
    }
  }
  EditConfig full = base;
  full.injection_steps = base.steps;
  full.block_start = 1;
  if (full.strategy == InjectStrategy::none) full.strategy = InjectStrategy::value;  // caching only

  const std::size_t cells = n_values.size() * m_values.size();
  std::vector<std::vector<MetricRow>> rows(cells, std::vector<MetricRow>(jobs.size()));
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t jj = 0; jj < static_cast<std::ptrdiff_t>(jobs.size()); ++jj) {
    const auto ji = static_cast<std::size_t>(jj);
    const EditJob& job = jobs[ji];
    const CachedInversion inv = invert_and_cache(net, job.source, job.source_cond, full);
    const Conditioning target_cond = retarget(job.source_cond, job.target);
    for (std::size_t a = 0; a < n_values.size(); ++a) {
      for (std::size_t b = 0; b < m_values.size(); ++b) {
        EditConfig c = base;
        c.injection_steps = n_values[a];
        c.block_start = m_values[b];
        const AttentionCache cache = inv.cache.subset(base.steps, c.injection_steps, c.block_start);
        const EditResult r = edit(net, inv.noise, cache, target_cond, c);
        const EditMetrics em = score_edit(job.source, r.edited, prototypes, job.source_class, job.target);
        MetricRow& row = rows[a * m_values.size() + b][ji];
        row.clip_id = job.clip_id;
        row.source_class = job.source_class.name();
        row.target_class = job.target.name();
        row.strategy = to_string(c.strategy);
        row.n = static_cast<int>(c.injection_steps);
        row.m = static_cast<int>(c.block_start);
        row.chroma_sim = em.chroma;
        row.cqt_pcc = em.pcc;
        row.align_source = em.align_source;
        row.align_target = em.align_target;
      }
    }
  }

  SweepResult out;
  for (std::size_t a = 0; a < n_values.size(); ++a) {
    for (std::size_t b = 0; b < m_values.size(); ++b) {
      SweepCell cell;
      cell.n = n_values[a];
      cell.m = m_values[b];
      cell.rows = std::move(rows[a * m_values.size() + b]);
      std::vector<double> fid, tr;
      for (const MetricRow& r : cell.rows) {
        fid.push_back(r.chroma_sim);
        tr.push_back(r.align_target);
      }
      cell.fidelity = mean(fid);
      cell.transferability = mean(tr);
      out.cells.push_back(std::move(cell));
    }
  }
  auto at = [&](std::size_t a, std::size_t b) -> const SweepCell& { return out.cells[a * m_values.size() + b]; };
  if (n_values.size() > 1) {
    std::vector<double> rhos;
    std::vector<double> ns(n_values.begin(), n_values.end());
    for (std::size_t b = 0; b < m_values.size(); ++b) {
      std::vector<double> f;
      for (std::size_t a = 0; a < n_values.size(); ++a) f.push_back(at(a, b).fidelity);
      push_defined(rhos, ns, f);
    }
    if (!rhos.empty()) out.fidelity_vs_n = mean(rhos);
  }
  if (m_values.size() > 1) {
    std::vector<double> rhos;
    std::vector<double> ms(m_values.begin(), m_values.end());
    for (std::size_t a = 0; a < n_values.size(); ++a) {
      std::vector<double> tr;
      for (std::size_t b = 0; b < m_values.size(); ++b) tr.push_back(at(a, b).transferability);
      push_defined(rhos, ms, tr);
    }
    if (!rhos.empty()) out.transfer_vs_m = mean(rhos);
  }
  return out;
}

}  // namespace musrec
