#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <sstream>

#include "corpus_store.hpp"
#include "musrec/edit_engine.hpp"
#include "musrec/error.hpp"
#include "musrec/latent.hpp"
#include "musrec/metrics.hpp"
#include "musrec/velocity_net.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace musrec;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EditOptions {
  std::size_t steps = 25;
  double s_src = 1.0;
  double s_tgt = 20.0;
  std::string strategy = "V";
  std::size_t n = 5;
  std::size_t m = 1;
  std::string solver = "rf2";

  void add(CLI::App* app, bool with_nm) {
    app->add_option("--steps", steps, "Diffusion steps N");
    app->add_option("--s-src", s_src, "Guidance scale during inversion");
    app->add_option("--s-tgt", s_tgt, "Guidance scale during denoising");
    app->add_option("--strategy", strategy, "Injection strategy: none, V, K, KV");
    app->add_option("--solver", solver, "euler or rf2");
    if (with_nm) {
      app->add_option("--n", n, "Injection steps");
      app->add_option("--m", m, "First injected single block (1-based)");
    }
  }
  EditConfig config() const {
    EditConfig c;
    c.steps = steps;
    c.source_scale = s_src;
    c.target_scale = s_tgt;
    c.strategy = strategy_from_string(strategy);
    c.injection_steps = n;
    c.block_start = m;
    c.solver = stepper_from_string(solver);
    return c;
  }
};

const Clip& find_clip(const Corpus& corpus, const std::string& id) {
  for (const Clip& c : corpus.clips)
    if (c.id == id) return c;
  throw FileError("clip '" + id + "' not in corpus");
}

std::ofstream open_out(const fs::path& path, std::ios::openmode mode = std::ios::out) {
  std::ofstream os(path, mode);
  if (!os) throw FileError("cannot write " + path.string());
  return os;
}

// Appends rows, writing the header only when the file is new or empty.
void append_metric_rows(const fs::path& path, std::span<const MetricRow> rows) {
  const bool fresh = !fs::exists(path) || fs::file_size(path) == 0;
  std::ostringstream ss;
  write_metric_csv(ss, rows, std::nullopt);
  std::string text = ss.str();
  if (!fresh) text = text.substr(text.find('\n') + 1);
  auto os = open_out(path, std::ios::app);
  os << text;
}

ClassTarget timbre_class(const Clip& c) { return c.spec.class_on(ClassTarget::Axis::timbre); }

ClassTarget default_target(const Clip& c) {
  return {ClassTarget::Axis::timbre, (static_cast<int>(c.spec.timbre) + 1) % kTimbreCount};
}

int cmd_gen_corpus(const fs::path& out, std::size_t count, std::uint64_t seed, const std::string& split) {
  if (count == 0 || count % kTimbreCount != 0)
    throw ArgumentError("--count must be a positive multiple of " + std::to_string(kTimbreCount));
  if (split != "train" && split != "eval") throw ArgumentError("--split must be train or eval");
  const Corpus corpus = make_corpus(count / kTimbreCount, seed, split == "train" ? Split::train : Split::eval);
  std::cout << store::write_corpus(out, corpus, seed).string() << '\n';
  return kOk;
}

struct TrainOptions {
  fs::path corpus, out, loss_csv;
  TrainConfig train;
  NetConfig net;
};

int cmd_train(TrainOptions o) {
  const Corpus corpus = store::read_corpus(o.corpus);
  std::vector<TrainingExample> data;
  for (const Clip& c : corpus.clips) data.push_back({c.latent, c.spec.conditioning(), std::nullopt});
  o.net.audio_tokens = data.front().z1.rows();
  o.net.latent_channels = data.front().z1.cols();
  o.net.seed = o.train.seed;
  VelocityNet net(o.net);
  const LossProbe probe = make_loss_probe(data, 2, o.train.seed + 1);
  const double before = probe_loss(net, probe);
  const TrainResult r = train(net, data, o.train);
  const double after = probe_loss(net, probe);
  save_checkpoint(o.out, net);
  if (o.loss_csv.empty()) o.loss_csv = o.out.string() + ".loss.csv";
  auto os = open_out(o.loss_csv);
  os << "step,loss\n";
  os.precision(10);
  for (std::size_t i = 0; i < r.loss_curve.size(); ++i) os << i << ',' << r.loss_curve[i] << '\n';
  std::cout << "probe loss " << before << " -> " << after << '\n' << o.out.string() << '\n';
  if (!(after < before)) {
    std::cerr << "error: training did not reduce the loss\n";
    return kNumeric;
  }
  return kOk;
}

int cmd_reconstruct(const fs::path& ckpt, const fs::path& corpus_dir, const std::string& clip, std::size_t steps,
                    const std::string& solver, const fs::path& out) {
  if (steps == 0) throw ArgumentError("--steps must be positive");
  const VelocityNet net = load_checkpoint(ckpt);
  const Corpus corpus = store::read_corpus(corpus_dir);
  std::vector<const Clip*> clips;
  if (clip.empty()) {
    for (const Clip& c : corpus.clips) clips.push_back(&c);
  } else {
    clips.push_back(&find_clip(corpus, clip));
  }
  std::vector<Stepper> steppers;
  if (solver == "both") {
    steppers = {Stepper::euler, Stepper::rf_solver};
  } else {
    steppers = {stepper_from_string(solver)};
  }
  const TimeGrid grid = TimeGrid::uniform(steps, TimeGrid::Direction::reverse);
  std::vector<double> errors(clips.size() * steppers.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(errors.size()); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const Clip& c = *clips[i / steppers.size()];
    errors[i] = reconstruct(net, c.latent, grid, steppers[i % steppers.size()], c.spec.conditioning()).error;
  }
  std::ostringstream ss;
  ss.precision(10);
  ss << "clip_id,solver,steps,rel_error\n";
  for (std::size_t i = 0; i < errors.size(); ++i) {
    ss << clips[i / steppers.size()]->id << ',' << to_string(steppers[i % steppers.size()]) << ',' << steps << ','
       << errors[i] << '\n';
  }
  std::cout << ss.str();
  if (!out.empty()) open_out(out) << ss.str();
  return kOk;
}

struct EditCommand {
  fs::path checkpoint, corpus, prototypes, out, csv, manifest;
  std::string clip, target;
  std::uint64_t seed = 0;
  EditOptions edit;
};

int cmd_edit(const EditCommand& o) {
  const EditConfig cfg = o.edit.config();
  const ClassTarget target = ClassTarget::parse(o.target);
  const VelocityNet net = load_checkpoint(o.checkpoint);
  const Corpus corpus = store::read_corpus(o.corpus);
  const Clip& clip = find_clip(corpus, o.clip);
  const Corpus proto_corpus = o.prototypes.empty() ? corpus : store::read_corpus(o.prototypes);
  const PrototypeSet protos = class_prototypes(proto_corpus, PrototypeDomain::decoded);

  const Conditioning cond = clip.spec.conditioning();
  const EditResult r = edit_clip(net, clip.latent, cond, retarget(cond, target), cfg);
  write_latent(o.out, r.edited);
  const ClassTarget source_class = clip.spec.class_on(target.axis);
  const EditMetrics em = score_edit(clip.latent, r.edited, protos, source_class, target);
  const MetricRow row{clip.id, source_class.name(), target.name(), to_string(cfg.strategy),
                      static_cast<int>(cfg.injection_steps), static_cast<int>(cfg.block_start), em.chroma, em.pcc,
                      em.align_source, em.align_target};
  write_metric_csv(std::cout, std::span(&row, 1), std::nullopt);
  if (!o.csv.empty()) append_metric_rows(o.csv, std::span(&row, 1));
  if (!o.manifest.empty()) {
    const json m = {{"source_file", (o.corpus / (clip.id + ".lat")).string()},
                    {"source_label", source_class.name()},
                    {"target_label", target.name()},
                    {"N", cfg.steps},
                    {"s_src", cfg.source_scale},
                    {"s_tgt", cfg.target_scale},
                    {"strategy", to_string(cfg.strategy)},
                    {"n", cfg.injection_steps},
                    {"m", cfg.block_start},
                    {"solver", to_string(cfg.solver)},
                    {"seed", o.seed},
                    {"output", o.out.string()}};
    open_out(o.manifest) << m.dump(2) << '\n';
  }
  return kOk;
}

std::vector<std::size_t> parse_grid(const std::string& text, const char* name) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t pos = 0;
      const long v = std::stol(item, &pos);
      if (pos != item.size() || v < 0) throw std::invalid_argument(item);
      out.push_back(static_cast<std::size_t>(v));
    } catch (const std::exception&) {
      throw ArgumentError(std::string(name) + ": '" + item + "' is not a non-negative integer");
    }
  }
  if (out.empty()) throw ArgumentError(std::string(name) + " is empty");
  return out;
}

struct SweepCommand {
  fs::path checkpoint, corpus, prototypes, out, rows_csv;
  std::string target, n_grid = "0,2,5,10", m_grid = "1,2,3,4";
  std::size_t limit = 0;
  EditOptions edit;
};

int cmd_sweep(const SweepCommand& o) {
  const EditConfig base = o.edit.config();
  const auto ns = parse_grid(o.n_grid, "--n-grid");
  const auto ms = parse_grid(o.m_grid, "--m-grid");
  const VelocityNet net = load_checkpoint(o.checkpoint);
  const Corpus corpus = store::read_corpus(o.corpus);
  const Corpus proto_corpus = o.prototypes.empty() ? corpus : store::read_corpus(o.prototypes);
  const PrototypeSet protos = class_prototypes(proto_corpus, PrototypeDomain::decoded);

  std::vector<EditJob> jobs;
  for (const Clip& c : corpus.clips) {
    if (o.limit && jobs.size() == o.limit) break;
    const ClassTarget target = o.target.empty() ? default_target(c) : ClassTarget::parse(o.target);
    const ClassTarget source_class = c.spec.class_on(target.axis);
    if (source_class == target) continue;
    jobs.push_back({c.id, c.latent, c.spec.conditioning(), source_class, target});
  }
  const SweepResult r = sweep(net, jobs, ns, ms, base, protos);
  std::ostringstream ss;
  ss.precision(10);
  ss << "n,m,strategy,fidelity,transferability,clips\n";
  for (const SweepCell& c : r.cells)
    ss << c.n << ',' << c.m << ',' << to_string(base.strategy) << ',' << c.fidelity << ',' << c.transferability << ','
       << c.rows.size() << '\n';
  std::cout << ss.str();
  if (r.fidelity_vs_n) std::cout << "spearman(fidelity, n) " << *r.fidelity_vs_n << '\n';
  if (r.transfer_vs_m) std::cout << "spearman(transferability, m) " << *r.transfer_vs_m << '\n';
  if (!o.out.empty()) open_out(o.out) << ss.str();
  if (!o.rows_csv.empty()) {
    std::vector<MetricRow> rows;
    for (const SweepCell& c : r.cells) rows.insert(rows.end(), c.rows.begin(), c.rows.end());
    auto os = open_out(o.rows_csv);
    write_metric_csv(os, rows, std::nullopt);
  }
  return kOk;
}

int cmd_eval(const fs::path& a_dir, const fs::path& b_dir, const fs::path& out) {
  const Corpus a = store::read_corpus(a_dir);
  const Corpus b = store::read_corpus(b_dir);
  if (a.clips.size() != b.clips.size()) {
    throw DimensionError("corpora differ in length (" + std::to_string(a.clips.size()) + " vs " +
                         std::to_string(b.clips.size()) + ")");
  }
  const PrototypeSet protos = class_prototypes(a, PrototypeDomain::signal);
  std::vector<MetricRow> rows(a.clips.size());
  std::vector<std::vector<double>> ea(a.clips.size()), eb(b.clips.size());
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t ii = 0; ii < static_cast<std::ptrdiff_t>(rows.size()); ++ii) {
    const auto i = static_cast<std::size_t>(ii);
    const Clip& x = a.clips[i];
    const Clip& y = b.clips[i];
    ea[i] = embed_toy(x.signal);
    eb[i] = embed_toy(y.signal);
    const ClassTarget sc = timbre_class(x), tc = timbre_class(y);
    rows[i] = {x.id + "|" + y.id, sc.name(), tc.name(), "none", 0, 0,
               chroma_similarity(x.signal, y.signal), cqt_pcc(x.signal, y.signal),
               cosine(eb[i], protos.of(sc)), cosine(eb[i], protos.of(tc))};
  }
  const double fad = frechet_distance(gaussian_stats(ea), gaussian_stats(eb));
  std::ostringstream ss;
  write_metric_csv(ss, rows, fad);
  std::cout << ss.str();
  if (!out.empty()) open_out(out) << ss.str();
  return kOk;
}

// Expands `--config file.json` into `--key value` tokens placed before the
// command-line arguments, so explicit flags (parsed later, last one wins)
// override the file. Unknown keys fail CLI parsing like unknown flags.
std::vector<std::string> expand_config(std::vector<std::string> args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] != "--config") continue;
    if (i + 1 >= args.size()) throw UsageError("--config needs a file");
    const fs::path path = args[i + 1];
    std::ifstream is(path);
    if (!is) throw FileError("cannot open config " + path.string());
    json cfg;
    try {
      cfg = json::parse(is);
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ": " + e.what());
    }
    if (!cfg.is_object()) throw FormatError(path.string() + ": config must be a JSON object");
    std::vector<std::string> tokens;
    for (const auto& [key, value] : cfg.items()) {
      std::string flag = "--" + key;
      std::replace(flag.begin(), flag.end(), '_', '-');
      std::string text;
      if (value.is_string()) {
        text = value.get<std::string>();
      } else if (value.is_array()) {
        for (const json& v : value) text += (text.empty() ? "" : ",") + (v.is_string() ? v.get<std::string>() : v.dump());
      } else if (value.is_number() || value.is_boolean()) {
        text = value.dump();
      } else {
        throw FormatError(path.string() + ": unsupported value for '" + key + "'");
      }
      tokens.push_back(flag);
      tokens.push_back(text);
    }
    args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i) + 2);
    // tokens go right after the subcommand name
    const std::size_t at = args.empty() ? 0 : 1;
    args.insert(args.begin() + static_cast<std::ptrdiff_t>(at), tokens.begin(), tokens.end());
    break;
  }
  return args;
}

int run(int argc, char** argv) {
  CLI::App app{"Rectified-flow music editing toolkit"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  std::function<int()> action;

  auto* gen = app.add_subcommand("gen-corpus", "Render a synthetic corpus");
  fs::path gen_out;
  std::size_t gen_count = 40;
  std::uint64_t gen_seed = 0;
  std::string gen_split = "eval";
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--count", gen_count, "Number of clips (multiple of 4)");
  gen->add_option("--seed", gen_seed, "Corpus seed");
  gen->add_option("--split", gen_split, "train or eval");
  gen->callback([&] { action = [&] { return cmd_gen_corpus(gen_out, gen_count, gen_seed, gen_split); }; });

  auto* tr = app.add_subcommand("train", "Train the velocity network");
  TrainOptions to;
  tr->add_option("--corpus", to.corpus, "Corpus directory")->required();
  tr->add_option("--out", to.out, "Checkpoint path")->required();
  tr->add_option("--loss-csv", to.loss_csv, "Loss curve CSV (default <out>.loss.csv)");
  tr->add_option("--steps", to.train.steps, "Optimizer steps");
  tr->add_option("--batch-size", to.train.batch_size, "Samples per step");
  tr->add_option("--lr", to.train.learning_rate, "Adam learning rate");
  tr->add_option("--final-lr-fraction", to.train.final_lr_fraction, "Cosine decay target as a fraction of --lr");
  tr->add_option("--cond-dropout", to.train.cond_dropout, "Probability of a null condition");
  tr->add_option("--seed", to.train.seed, "Seed for initialization and sampling");
  tr->add_option("--model-dim", to.net.model_dim, "Hidden width");
  tr->add_option("--heads", to.net.head_count, "Attention heads");
  tr->add_option("--double-blocks", to.net.double_blocks, "Double-stream blocks");
  tr->add_option("--single-blocks", to.net.single_blocks, "Single-stream blocks");
  tr->callback([&] { action = [&] { return cmd_train(to); }; });

  auto* rec = app.add_subcommand("reconstruct", "Invert and regenerate clips, report relative L2 error");
  fs::path rec_ckpt, rec_corpus, rec_out;
  std::string rec_clip, rec_solver = "both";
  std::size_t rec_steps = 25;
  rec->add_option("--checkpoint", rec_ckpt, "Checkpoint")->required();
  rec->add_option("--corpus", rec_corpus, "Corpus directory")->required();
  rec->add_option("--clip", rec_clip, "Clip id (default: all)");
  rec->add_option("--steps", rec_steps, "Steps N");
  rec->add_option("--solver", rec_solver, "euler, rf2 or both");
  rec->add_option("--out", rec_out, "CSV output");
  rec->callback([&] {
    action = [&] { return cmd_reconstruct(rec_ckpt, rec_corpus, rec_clip, rec_steps, rec_solver, rec_out); };
  });

  auto* ed = app.add_subcommand("edit", "Edit one clip toward a target class");
  EditCommand eo;
  ed->add_option("--checkpoint", eo.checkpoint, "Checkpoint")->required();
  ed->add_option("--corpus", eo.corpus, "Corpus directory")->required();
  ed->add_option("--clip", eo.clip, "Clip id")->required();
  ed->add_option("--target", eo.target, "Target class, e.g. hollow or swing")->required();
  ed->add_option("--out", eo.out, "Edited latent file")->required();
  ed->add_option("--csv", eo.csv, "Metric CSV to append to");
  ed->add_option("--manifest", eo.manifest, "Edit manifest JSON");
  ed->add_option("--prototypes", eo.prototypes, "Corpus for class prototypes (default: --corpus)");
  ed->add_option("--seed", eo.seed, "Recorded in the manifest");
  eo.edit.add(ed, true);
  ed->callback([&] { action = [&] { return cmd_edit(eo); }; });

  auto* sw = app.add_subcommand("sweep", "Fidelity/transferability over an (n, m) grid");
  SweepCommand so;
  sw->add_option("--checkpoint", so.checkpoint, "Checkpoint")->required();
  sw->add_option("--corpus", so.corpus, "Corpus directory")->required();
  sw->add_option("--target", so.target, "Target class (default: next timbre)");
  sw->add_option("--n-grid", so.n_grid, "Comma-separated n values");
  sw->add_option("--m-grid", so.m_grid, "Comma-separated m values");
  sw->add_option("--limit", so.limit, "Use at most this many clips");
  sw->add_option("--prototypes", so.prototypes, "Corpus for class prototypes (default: --corpus)");
  sw->add_option("--out", so.out, "Cell CSV");
  sw->add_option("--rows-csv", so.rows_csv, "Per-clip metric CSV");
  so.edit.add(sw, false);
  sw->callback([&] { action = [&] { return cmd_sweep(so); }; });

  auto* ev = app.add_subcommand("eval", "Compare two aligned corpora");
  fs::path ev_a, ev_b, ev_out;
  ev->add_option("--a", ev_a, "Reference corpus")->required();
  ev->add_option("--b", ev_b, "Compared corpus")->required();
  ev->add_option("--out", ev_out, "CSV output");
  ev->callback([&] { action = [&] { return cmd_eval(ev_a, ev_b, ev_out); }; });

  std::vector<std::string> args(argv + 1, argv + argc);
  args = expand_config(args);
  std::reverse(args.begin(), args.end());  // CLI11 consumes the vector from the back
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }
  return action();
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumeric;
  } catch (const UndefinedMetricError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kNumeric;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
}
