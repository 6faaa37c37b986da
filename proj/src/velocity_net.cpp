#include "musrec/velocity_net.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "musrec/error.hpp"
#include "musrec/kernels.hpp"

namespace musrec {
namespace {

constexpr double kLayerNormEps = 1e-6;
constexpr double kTimeScale = 1000.0;

// Offsets of one affine map y = x W + b inside the flat parameter vector.
struct Linear {
  std::size_t w = 0;
  std::size_t b = 0;
  std::size_t in = 0;
  std::size_t out = 0;
};

struct StreamParams {
  Linear mod, qkv, proj, fc1, fc2;
};

struct DoubleParams {
  StreamParams txt, aud;
};

struct SingleParams {
  Linear mod, lin1, lin2;
};

class Allocator {
 public:
  std::size_t take(std::size_t n) {
    const std::size_t at = total_;
    total_ += n;
    return at;
  }
  Linear linear(std::size_t in, std::size_t out) {
    Linear l{0, 0, in, out};
    l.w = take(in * out);
    l.b = take(out);
    return l;
  }
  std::size_t total() const { return total_; }

 private:
  std::size_t total_ = 0;
};

double silu(double x) { return x / (1.0 + std::exp(-x)); }
double silu_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
// tanh through exp: noticeably cheaper than std::tanh and exact to rounding.
double fast_tanh(double u) {
  if (u > 20.0) return 1.0;
  if (u < -20.0) return -1.0;
  return 1.0 - 2.0 / (1.0 + std::exp(2.0 * u));
}
double gelu(double x) { return 0.5 * x * (1.0 + fast_tanh(kGeluC * (x + 0.044715 * x * x * x))); }
double gelu_grad(double x) {
  const double th = fast_tanh(kGeluC * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

struct LayerNormCache {
  Matrix y;
  std::vector<double> inv_sigma;
};

void layer_norm(const Matrix& x, LayerNormCache& c) {
  const std::size_t n = x.rows(), d = x.cols();
  c.y = Matrix(n, d);
  c.inv_sigma.assign(n, 0.0);
  for (std::size_t r = 0; r < n; ++r) {
    const double* xr = x.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    c.inv_sigma[r] = inv;
    double* yr = c.y.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) yr[j] = (xr[j] - mean) * inv;
  }
}

// dx += LN backward of dy.
void layer_norm_backward(const LayerNormCache& c, const Matrix& dy, Matrix& dx) {
  const std::size_t n = c.y.rows(), d = c.y.cols();
  for (std::size_t r = 0; r < n; ++r) {
    const double* yr = c.y.data() + r * d;
    const double* gr = dy.data() + r * d;
    double mg = 0.0, mgy = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      mg += gr[j];
      mgy += gr[j] * yr[j];
    }
    mg /= static_cast<double>(d);
    mgy /= static_cast<double>(d);
    double* dr = dx.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) dr[j] += c.inv_sigma[r] * (gr[j] - mg - yr[j] * mgy);
  }
}

// h = y * (1 + scale) + shift, row-broadcast.
Matrix modulate(const Matrix& y, const double* shift, const double* scale) {
  Matrix h(y.rows(), y.cols());
  for (std::size_t r = 0; r < y.rows(); ++r)
    for (std::size_t j = 0; j < y.cols(); ++j) h(r, j) = y(r, j) * (1.0 + scale[j]) + shift[j];
  return h;
}

// Given dh, returns dy and accumulates dshift / dscale.
Matrix modulate_backward(const Matrix& y, const Matrix& dh, const double* scale, double* dshift, double* dscale) {
  Matrix dy(y.rows(), y.cols());
  for (std::size_t r = 0; r < y.rows(); ++r) {
    for (std::size_t j = 0; j < y.cols(); ++j) {
      const double g = dh(r, j);
      dy(r, j) = g * (1.0 + scale[j]);
      dshift[j] += g;
      dscale[j] += g * y(r, j);
    }
  }
  return dy;
}

}  // namespace

struct VelocityNet::Layout {
  std::size_t text_timbre = 0, text_style = 0, coarse_timbre = 0, coarse_style = 0;
  Linear time1, time2, input;
  std::size_t pos = 0;
  std::vector<DoubleParams> dbl;
  std::vector<SingleParams> sgl;
  Linear final_mod, out;
  std::size_t total = 0;

  explicit Layout(const NetConfig& c) {
    const std::size_t d = c.model_dim, h = c.mlp_dim();
    Allocator a;
    text_timbre = a.take((c.timbre_vocab + 1) * d);
    text_style = a.take((c.style_vocab + 1) * d);
    coarse_timbre = a.take((c.timbre_vocab + 1) * d);
    coarse_style = a.take((c.style_vocab + 1) * d);
    time1 = a.linear(d, d);
    time2 = a.linear(d, d);
    input = a.linear(c.latent_channels, d);
    pos = a.take(c.audio_tokens * d);
    dbl.resize(c.double_blocks);
    for (auto& blk : dbl) {
      for (StreamParams* s : {&blk.txt, &blk.aud}) {
        s->mod = a.linear(d, 6 * d);
        s->qkv = a.linear(d, 3 * d);
        s->proj = a.linear(d, d);
        s->fc1 = a.linear(d, h);
        s->fc2 = a.linear(h, d);
      }
    }
    sgl.resize(c.single_blocks);
    for (auto& blk : sgl) {
      blk.mod = a.linear(d, 3 * d);
      blk.lin1 = a.linear(d, 3 * d + h);
      blk.lin2 = a.linear(d + h, d);
    }
    final_mod = a.linear(d, 2 * d);
    out = a.linear(d, c.latent_channels);
    total = a.total();
  }
};

namespace {

using Layout = VelocityNet::Layout;

void linear_forward(const double* p, const Linear& l, const Matrix& x, Matrix& y) {
  y = Matrix(x.rows(), l.out);
  kernels::gemm(x.data(), p + l.w, y.data(), x.rows(), l.in, l.out);
  const double* b = p + l.b;
  for (std::size_t r = 0; r < y.rows(); ++r)
    for (std::size_t j = 0; j < l.out; ++j) y(r, j) += b[j];
}

// Accumulates dW, db into g and, when dx is non-null, dx += dy W^T.
void linear_backward(const double* p, const Linear& l, const Matrix& x, const Matrix& dy, double* g, Matrix* dx) {
  kernels::gemm_tn_acc(x.data(), dy.data(), g + l.w, x.rows(), l.in, l.out);
  double* db = g + l.b;
  for (std::size_t r = 0; r < dy.rows(); ++r)
    for (std::size_t j = 0; j < l.out; ++j) db[j] += dy(r, j);
  if (dx) kernels::gemm_nt(dy.data(), p + l.w, dx->data(), dy.rows(), l.out, l.in, true);
}

Matrix rows_of(const Matrix& m, std::size_t begin, std::size_t count) {
  Matrix out(count, m.cols());
  std::copy(m.data() + begin * m.cols(), m.data() + (begin + count) * m.cols(), out.data());
  return out;
}

Matrix cols_of(const Matrix& m, std::size_t begin, std::size_t count) {
  Matrix out(m.rows(), count);
  for (std::size_t r = 0; r < m.rows(); ++r)
    std::copy(m.data() + r * m.cols() + begin, m.data() + r * m.cols() + begin + count, out.data() + r * count);
  return out;
}

void put_cols(Matrix& dst, std::size_t begin, const Matrix& src) {
  for (std::size_t r = 0; r < src.rows(); ++r)
    std::copy(src.data() + r * src.cols(), src.data() + (r + 1) * src.cols(), dst.data() + r * dst.cols() + begin);
}

Matrix vstack(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() + b.rows(), a.cols());
  std::copy(a.data(), a.data() + a.size(), out.data());
  std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
  return out;
}

}  // namespace

struct StreamCache {
  Matrix x_in;
  Matrix mod;  // 1 x 6d
  LayerNormCache n1;
  Matrix h1;
  Matrix attn;  // this stream's rows of the joint attention
  Matrix o;
  Matrix x_mid;
  LayerNormCache n2;
  Matrix h2;
  Matrix f1;  // pre-activation
  Matrix g1;  // gelu(f1)
  Matrix m;
};

struct DoubleCache {
  StreamCache txt, aud;
  Matrix q, k, v;  // joint, text rows first
  std::vector<double> probs;
};

struct SingleCache {
  Matrix x_in;
  Matrix mod;  // 1 x 3d
  LayerNormCache n;
  Matrix h;
  Matrix q, k, v;  // the tensors actually attended with
  Matrix pre;      // mlp pre-activation
  Matrix cat;      // [attn, gelu(pre)]
  Matrix o;
  std::vector<double> probs;
};

struct ForwardCache {
  std::size_t timbre_row = 0, style_row = 0;
  Matrix tf, th, ta, vec, sv;  // 1 x d each
  Matrix z;
  std::vector<DoubleCache> dbl;
  std::vector<SingleCache> sgl;
  Matrix x_final;
  Matrix fmod;
  LayerNormCache nf;
  Matrix hf;
};

void validate(const NetConfig& c) {
  if (c.model_dim == 0 || c.head_count == 0 || c.model_dim % c.head_count != 0)
    throw ArgumentError("model_dim must be a positive multiple of head_count");
  if (c.model_dim % 2 != 0) throw ArgumentError("model_dim must be even for the time embedding");
  if (c.double_blocks < 1) throw ArgumentError("need at least one double-stream block");
  if (c.single_blocks < 1) throw ArgumentError("need at least one single-stream block");
  if (c.audio_tokens == 0 || c.latent_channels == 0) throw ArgumentError("latent shape must be nonzero");
  if (c.text_tokens != 2) throw ArgumentError("text_tokens must be 2 (timbre and style)");
  if (c.timbre_vocab == 0 || c.style_vocab == 0) throw ArgumentError("condition vocabularies must be nonempty");
  if (c.mlp_ratio == 0) throw ArgumentError("mlp_ratio must be positive");
}

std::size_t parameter_count(const NetConfig& c) {
  validate(c);
  const std::size_t d = c.model_dim, h = c.mlp_dim(), C = c.latent_channels;
  const std::size_t tables = 2 * (c.timbre_vocab + 1) * d + 2 * (c.style_vocab + 1) * d;
  const std::size_t time = 2 * (d * d + d);
  const std::size_t input = C * d + d + c.audio_tokens * d;
  const std::size_t stream = (d * 6 * d + 6 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (d * h + h) + (h * d + d);
  const std::size_t single = (d * 3 * d + 3 * d) + (d * (3 * d + h) + 3 * d + h) + ((d + h) * d + d);
  const std::size_t final_layer = (d * 2 * d + 2 * d) + (d * C + C);
  return tables + time + input + c.double_blocks * 2 * stream + c.single_blocks * single + final_layer;
}

const char* to_string(InjectStrategy s) {
  switch (s) {
    case InjectStrategy::none: return "none";
    case InjectStrategy::value: return "V";
    case InjectStrategy::key: return "K";
    case InjectStrategy::key_value: return "KV";
  }
  return "?";
}

InjectStrategy strategy_from_string(const std::string& name) {
  if (name == "none") return InjectStrategy::none;
  if (name == "V") return InjectStrategy::value;
  if (name == "K") return InjectStrategy::key;
  if (name == "KV") return InjectStrategy::key_value;
  throw ArgumentError("unknown injection strategy '" + name + "' (expected none, V, K or KV)");
}

std::vector<double> init_params(const NetConfig& cfg) {
  validate(cfg);
  const Layout lay(cfg);
  std::vector<double> p(lay.total, 0.0);
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto fill = [&](std::size_t at, std::size_t n, double sd) {
    for (std::size_t i = 0; i < n; ++i) p[at + i] = sd * normal(rng);
  };
  auto weights = [&](const Linear& l, double gain) { fill(l.w, l.in * l.out, gain / std::sqrt(static_cast<double>(l.in))); };
  const std::size_t d = cfg.model_dim;
  fill(lay.text_timbre, (cfg.timbre_vocab + 1) * d, 1.0);
  fill(lay.text_style, (cfg.style_vocab + 1) * d, 1.0);
  fill(lay.coarse_timbre, (cfg.timbre_vocab + 1) * d, 0.5);
  fill(lay.coarse_style, (cfg.style_vocab + 1) * d, 0.5);
  weights(lay.time1, 1.0);
  weights(lay.time2, 1.0);
  weights(lay.input, 1.0);
  fill(lay.pos, cfg.audio_tokens * d, 0.1);
  for (const auto& blk : lay.dbl) {
    for (const StreamParams* s : {&blk.txt, &blk.aud}) {
      weights(s->mod, 0.1);
      weights(s->qkv, 1.0);
      weights(s->proj, 1.0);
      weights(s->fc1, 1.0);
      weights(s->fc2, 1.0);
    }
  }
  for (const auto& blk : lay.sgl) {
    weights(blk.mod, 0.1);
    weights(blk.lin1, 1.0);
    weights(blk.lin2, 1.0);
  }
  weights(lay.final_mod, 0.1);
  // The output head starts at zero, so the initial velocity is exactly 0.
  return p;
}

VelocityNet::VelocityNet(const NetConfig& cfg) : VelocityNet(cfg, init_params(cfg)) {}

VelocityNet::VelocityNet(const NetConfig& cfg, std::vector<double> params)
    : cfg_(cfg), params_(std::move(params)) {
  validate(cfg_);
  layout_ = std::make_shared<const Layout>(cfg_);
  if (params_.size() != layout_->total) {
    throw DimensionError("parameter vector has " + std::to_string(params_.size()) + " entries, config needs " +
                         std::to_string(layout_->total));
  }
}

std::size_t VelocityNet::output_bias_offset() const { return layout_->out.b; }

std::pair<std::size_t, std::size_t> VelocityNet::output_head_range() const {
  return {layout_->out.w, layout_->out.b + layout_->out.out};
}

Latent VelocityNet::forward(const Latent& z, double t, const Conditioning& cond, AttentionTap* tap) const {
  return run(z, t, cond, tap, nullptr);
}

Latent VelocityNet::run(const Latent& z, double t, const Conditioning& cond, AttentionTap* tap,
                        ForwardCache* cache) const {
  const NetConfig& c = cfg_;
  const Layout& L = *layout_;
  const double* p = params_.data();
  const std::size_t d = c.model_dim, hd = c.mlp_dim(), nt = c.text_tokens, na = c.audio_tokens, n = c.tokens();

  if (z.rows() != na || z.cols() != c.latent_channels) {
    throw DimensionError("velocity net expects a " + std::to_string(na) + "x" + std::to_string(c.latent_channels) +
                         " latent, got " + z.shape_string());
  }
  if (!std::isfinite(t)) throw NumericError("velocity net: time is not finite");
  std::size_t ti = c.timbre_vocab, si = c.style_vocab;  // null rows
  if (!cond.is_null) {
    if (cond.timbre < 0 || static_cast<std::size_t>(cond.timbre) >= c.timbre_vocab || cond.style < 0 ||
        static_cast<std::size_t>(cond.style) >= c.style_vocab) {
      throw ArgumentError("conditioning label out of range");
    }
    ti = static_cast<std::size_t>(cond.timbre);
    si = static_cast<std::size_t>(cond.style);
  }
  ForwardCache local;
  ForwardCache& fc = cache ? *cache : local;
  const bool keep = cache != nullptr;
  fc.timbre_row = ti;
  fc.style_row = si;

  // Time and condition vector.
  fc.tf = Matrix(1, d);
  const std::size_t half = d / 2;
  for (std::size_t j = 0; j < half; ++j) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(j) / static_cast<double>(half));
    const double arg = kTimeScale * t * freq;
    fc.tf[j] = std::cos(arg);
    fc.tf[half + j] = std::sin(arg);
  }
  linear_forward(p, L.time1, fc.tf, fc.th);
  fc.ta = fc.th;
  for (std::size_t j = 0; j < d; ++j) fc.ta[j] = silu(fc.th[j]);
  linear_forward(p, L.time2, fc.ta, fc.vec);
  for (std::size_t j = 0; j < d; ++j) fc.vec[j] += p[L.coarse_timbre + ti * d + j] + p[L.coarse_style + si * d + j];
  fc.sv = fc.vec;
  for (std::size_t j = 0; j < d; ++j) fc.sv[j] = silu(fc.vec[j]);

  // Token streams.
  Matrix xt(nt, d);
  std::copy(p + L.text_timbre + ti * d, p + L.text_timbre + (ti + 1) * d, xt.data());
  std::copy(p + L.text_style + si * d, p + L.text_style + (si + 1) * d, xt.data() + d);
  Matrix xa;
  linear_forward(p, L.input, z, xa);
  for (std::size_t r = 0; r < na; ++r)
    for (std::size_t j = 0; j < d; ++j) xa(r, j) += p[L.pos + r * d + j];
  if (keep) fc.z = z;

  fc.dbl.assign(keep ? c.double_blocks : 0, {});
  for (std::size_t b = 0; b < c.double_blocks; ++b) {
    DoubleCache tmp;
    DoubleCache& dc = keep ? fc.dbl[b] : tmp;
    const DoubleParams& P = L.dbl[b];
    Matrix qkv_t, qkv_a;
    auto pre = [&](const StreamParams& sp, const Matrix& x, StreamCache& sc, Matrix& qkv) {
      sc.x_in = x;
      linear_forward(p, sp.mod, fc.sv, sc.mod);
      layer_norm(x, sc.n1);
      sc.h1 = modulate(sc.n1.y, sc.mod.data(), sc.mod.data() + d);
      linear_forward(p, sp.qkv, sc.h1, qkv);
    };
    pre(P.txt, xt, dc.txt, qkv_t);
    pre(P.aud, xa, dc.aud, qkv_a);
    const Matrix qkv = vstack(qkv_t, qkv_a);
    dc.q = cols_of(qkv, 0, d);
    dc.k = cols_of(qkv, d, d);
    dc.v = cols_of(qkv, 2 * d, d);
    Matrix attn(n, d);
    if (keep) dc.probs.assign(c.head_count * n * n, 0.0);
    kernels::attention(dc.q.data(), dc.k.data(), dc.v.data(), attn.data(), n, n, d, c.head_count,
                       keep ? dc.probs.data() : nullptr);
    auto post = [&](const StreamParams& sp, Matrix& x, StreamCache& sc, std::size_t row0, std::size_t rows) {
      sc.attn = rows_of(attn, row0, rows);
      linear_forward(p, sp.proj, sc.attn, sc.o);
      const double* gate1 = sc.mod.data() + 2 * d;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) x(r, j) += gate1[j] * sc.o(r, j);
      sc.x_mid = x;
      layer_norm(x, sc.n2);
      sc.h2 = modulate(sc.n2.y, sc.mod.data() + 3 * d, sc.mod.data() + 4 * d);
      linear_forward(p, sp.fc1, sc.h2, sc.f1);
      sc.g1 = sc.f1;
      for (std::size_t i = 0; i < sc.g1.size(); ++i) sc.g1[i] = gelu(sc.f1[i]);
      linear_forward(p, sp.fc2, sc.g1, sc.m);
      const double* gate2 = sc.mod.data() + 5 * d;
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) x(r, j) += gate2[j] * sc.m(r, j);
    };
    post(P.txt, xt, dc.txt, 0, nt);
    post(P.aud, xa, dc.aud, nt, na);
  }

  Matrix x = vstack(xt, xa);
  if (tap) tap->probs.clear();
  fc.sgl.assign(keep ? c.single_blocks : 0, {});
  for (std::size_t b = 0; b < c.single_blocks; ++b) {
    SingleCache tmp;
    SingleCache& sc = keep ? fc.sgl[b] : tmp;
    const SingleParams& P = L.sgl[b];
    sc.x_in = x;
    linear_forward(p, P.mod, fc.sv, sc.mod);
    layer_norm(x, sc.n);
    sc.h = modulate(sc.n.y, sc.mod.data(), sc.mod.data() + d);
    Matrix pl;
    linear_forward(p, P.lin1, sc.h, pl);
    sc.q = cols_of(pl, 0, d);
    sc.k = cols_of(pl, d, d);
    sc.v = cols_of(pl, 2 * d, d);
    sc.pre = cols_of(pl, 3 * d, hd);

    if (tap && b >= tap->first_block) {
      if (tap->mode == TapMode::record) {
        tap->slots[b] = AttentionRecord{sc.q, sc.k, sc.v};
      } else if (tap->mode == TapMode::replace && tap->strategy != InjectStrategy::none) {
        const auto it = tap->slots.find(b);
        if (it == tap->slots.end()) throw CacheMissError("no cached attention for single block " + std::to_string(b));
        const AttentionRecord& rec = it->second;
        const bool key = tap->strategy == InjectStrategy::key || tap->strategy == InjectStrategy::key_value;
        const bool value = tap->strategy == InjectStrategy::value || tap->strategy == InjectStrategy::key_value;
        if ((key && !rec.k.same_shape(sc.k)) || (value && !rec.v.same_shape(sc.v))) {
          throw DimensionError("cached attention tensors do not match block " + std::to_string(b));
        }
        if (key) sc.k = rec.k;
        if (value) sc.v = rec.v;
      }
    }

    const bool want_probs = keep || (tap && tap->capture_probs);
    std::vector<double> probs_local;
    std::vector<double>& probs = keep ? sc.probs : probs_local;
    if (want_probs) probs.assign(c.head_count * n * n, 0.0);
    Matrix attn(n, d);
    kernels::attention(sc.q.data(), sc.k.data(), sc.v.data(), attn.data(), n, n, d, c.head_count,
                       want_probs ? probs.data() : nullptr);
    if (tap && tap->capture_probs) tap->probs.emplace_back(c.head_count * n, n, probs);

    sc.cat = Matrix(n, d + hd);
    put_cols(sc.cat, 0, attn);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < hd; ++j) sc.cat(r, d + j) = gelu(sc.pre(r, j));
    linear_forward(p, P.lin2, sc.cat, sc.o);
    const double* gate = sc.mod.data() + 2 * d;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < d; ++j) x(r, j) += gate[j] * sc.o(r, j);
  }

  fc.x_final = rows_of(x, nt, na);
  linear_forward(p, L.final_mod, fc.sv, fc.fmod);
  layer_norm(fc.x_final, fc.nf);
  fc.hf = modulate(fc.nf.y, fc.fmod.data(), fc.fmod.data() + d);
  Matrix out;
  linear_forward(p, L.out, fc.hf, out);
  return out;
}

void VelocityNet::backward(const ForwardCache& fc, const Matrix& dout, std::span<double> grad) const {
  const NetConfig& c = cfg_;
  const Layout& L = *layout_;
  const double* p = params_.data();
  double* g = grad.data();
  const std::size_t d = c.model_dim, hd = c.mlp_dim(), nt = c.text_tokens, na = c.audio_tokens, n = c.tokens();

  Matrix dsv(1, d);

  // Final layer.
  Matrix dhf(na, d);
  linear_backward(p, L.out, fc.hf, dout, g, &dhf);
  Matrix dfmod(1, 2 * d);
  const Matrix dnf = modulate_backward(fc.nf.y, dhf, fc.fmod.data() + d, dfmod.data(), dfmod.data() + d);
  linear_backward(p, L.final_mod, fc.sv, dfmod, g, &dsv);
  Matrix dx(n, d);
  {
    Matrix dxa(na, d);
    layer_norm_backward(fc.nf, dnf, dxa);
    std::copy(dxa.data(), dxa.data() + dxa.size(), dx.data() + nt * d);
  }

  // Single blocks, last first. dx is the gradient w.r.t. the block output.
  for (std::size_t bb = c.single_blocks; bb-- > 0;) {
    const SingleCache& sc = fc.sgl[bb];
    const SingleParams& P = L.sgl[bb];
    Matrix dmod(1, 3 * d);
    const double* gate = sc.mod.data() + 2 * d;
    Matrix dO(n, d);
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t j = 0; j < d; ++j) {
        dO(r, j) = dx(r, j) * gate[j];
        dmod[2 * d + j] += dx(r, j) * sc.o(r, j);
      }
    }
    Matrix dcat(n, d + hd);
    linear_backward(p, P.lin2, sc.cat, dO, g, &dcat);
    const Matrix dattn = cols_of(dcat, 0, d);
    Matrix dpl(n, 3 * d + hd);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t j = 0; j < hd; ++j) dpl(r, 3 * d + j) = dcat(r, d + j) * gelu_grad(sc.pre(r, j));
    Matrix dq(n, d), dk(n, d), dv(n, d);
    kernels::attention_backward(sc.q.data(), sc.k.data(), sc.v.data(), sc.probs.data(), dattn.data(), dq.data(),
                                dk.data(), dv.data(), n, n, d, c.head_count);
    put_cols(dpl, 0, dq);
    put_cols(dpl, d, dk);
    put_cols(dpl, 2 * d, dv);
    Matrix dh(n, d);
    linear_backward(p, P.lin1, sc.h, dpl, g, &dh);
    const Matrix dn = modulate_backward(sc.n.y, dh, sc.mod.data() + d, dmod.data(), dmod.data() + d);
    layer_norm_backward(sc.n, dn, dx);  // residual path already in dx
    linear_backward(p, P.mod, fc.sv, dmod, g, &dsv);
  }

  Matrix dxt = rows_of(dx, 0, nt);
  Matrix dxa = rows_of(dx, nt, na);

  for (std::size_t bb = c.double_blocks; bb-- > 0;) {
    const DoubleCache& dc = fc.dbl[bb];
    const DoubleParams& P = L.dbl[bb];
    Matrix dattn(n, d);
    Matrix dmod_t(1, 6 * d), dmod_a(1, 6 * d);
    // MLP half and attention projection, per stream.
    auto post_back = [&](const StreamParams& sp, const StreamCache& sc, Matrix& dxs, Matrix& dmod, std::size_t row0) {
      const std::size_t rows = dxs.rows();
      const double* gate2 = sc.mod.data() + 5 * d;
      Matrix dm(rows, d);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
          dm(r, j) = dxs(r, j) * gate2[j];
          dmod[5 * d + j] += dxs(r, j) * sc.m(r, j);
        }
      }
      Matrix dg1(rows, hd);
      linear_backward(p, sp.fc2, sc.g1, dm, g, &dg1);
      for (std::size_t i = 0; i < dg1.size(); ++i) dg1[i] *= gelu_grad(sc.f1[i]);
      Matrix dh2(rows, d);
      linear_backward(p, sp.fc1, sc.h2, dg1, g, &dh2);
      const Matrix dn2 = modulate_backward(sc.n2.y, dh2, sc.mod.data() + 4 * d, dmod.data() + 3 * d, dmod.data() + 4 * d);
      layer_norm_backward(sc.n2, dn2, dxs);
      const double* gate1 = sc.mod.data() + 2 * d;
      Matrix dO(rows, d);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < d; ++j) {
          dO(r, j) = dxs(r, j) * gate1[j];
          dmod[2 * d + j] += dxs(r, j) * sc.o(r, j);
        }
      }
      Matrix da(rows, d);
      linear_backward(p, sp.proj, sc.attn, dO, g, &da);
      std::copy(da.data(), da.data() + da.size(), dattn.data() + row0 * d);
    };
    post_back(P.txt, dc.txt, dxt, dmod_t, 0);
    post_back(P.aud, dc.aud, dxa, dmod_a, nt);

    Matrix dq(n, d), dk(n, d), dv(n, d);
    kernels::attention_backward(dc.q.data(), dc.k.data(), dc.v.data(), dc.probs.data(), dattn.data(), dq.data(),
                                dk.data(), dv.data(), n, n, d, c.head_count);
    auto pre_back = [&](const StreamParams& sp, const StreamCache& sc, Matrix& dxs, Matrix& dmod, std::size_t row0) {
      const std::size_t rows = dxs.rows();
      Matrix dqkv(rows, 3 * d);
      put_cols(dqkv, 0, rows_of(dq, row0, rows));
      put_cols(dqkv, d, rows_of(dk, row0, rows));
      put_cols(dqkv, 2 * d, rows_of(dv, row0, rows));
      Matrix dh1(rows, d);
      linear_backward(p, sp.qkv, sc.h1, dqkv, g, &dh1);
      const Matrix dn1 = modulate_backward(sc.n1.y, dh1, sc.mod.data() + d, dmod.data(), dmod.data() + d);
      layer_norm_backward(sc.n1, dn1, dxs);
      linear_backward(p, sp.mod, fc.sv, dmod, g, &dsv);
    };
    pre_back(P.txt, dc.txt, dxt, dmod_t, 0);
    pre_back(P.aud, dc.aud, dxa, dmod_a, nt);
  }

  // Audio input projection and positions.
  linear_backward(p, L.input, fc.z, dxa, g, nullptr);
  for (std::size_t i = 0; i < na * d; ++i) g[L.pos + i] += dxa[i];
  // Text tokens are table rows.
  for (std::size_t j = 0; j < d; ++j) {
    g[L.text_timbre + fc.timbre_row * d + j] += dxt(0, j);
    g[L.text_style + fc.style_row * d + j] += dxt(1, j);
  }
  // Condition vector.
  Matrix dvec(1, d);
  for (std::size_t j = 0; j < d; ++j) dvec[j] = dsv[j] * silu_grad(fc.vec[j]);
  for (std::size_t j = 0; j < d; ++j) {
    g[L.coarse_timbre + fc.timbre_row * d + j] += dvec[j];
    g[L.coarse_style + fc.style_row * d + j] += dvec[j];
  }
  Matrix dta(1, d);
  linear_backward(p, L.time2, fc.ta, dvec, g, &dta);
  for (std::size_t j = 0; j < d; ++j) dta[j] *= silu_grad(fc.th[j]);
  linear_backward(p, L.time1, fc.tf, dta, g, nullptr);
}

double VelocityNet::loss_and_gradient(const FlowSample& sample, const Conditioning& cond, std::span<double> grad,
                                      double scale) const {
  require_same_shape(sample.z0, sample.z1, "loss_and_gradient");
  if (!grad.empty() && grad.size() != params_.size()) throw DimensionError("gradient buffer has the wrong size");
  static const Schedule kSchedule = Schedule::canonical();
  const Latent zt = interpolate(sample.z0, sample.z1, sample.t, kSchedule);
  ForwardCache fc;
  const Latent pred = run(zt, sample.t, cond, nullptr, grad.empty() ? nullptr : &fc);
  const Latent target = sample.z1 - sample.z0;
  const auto count = static_cast<double>(pred.size());
  std::vector<double> sq(pred.size());
  Matrix dout(pred.rows(), pred.cols());
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double r = pred[i] - target[i];
    sq[i] = r * r;
    dout[i] = 2.0 * r / count * scale;
  }
  // Pairwise summation keeps the loss accurate enough for finite differences.
  const double loss = pairwise_sum(sq) / count;
  if (!grad.empty()) backward(fc, dout, grad);
  return loss;
}

}  // namespace musrec
