// fckit: data preparation, training, evaluation, prediction, model
// inspection and gradient checks for FaceChannel / FaceChannelS.
//
// Exit codes: 0 success, 1 validation error, 2 I/O error, 3 internal failure.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "fckit/datapipe.hpp"
#include "fckit/gradcheck.hpp"
#include "fckit/metrics.hpp"
#include "fckit/model.hpp"
#include "fckit/training.hpp"
#include "fckit/weights_io.hpp"

namespace fs = std::filesystem;
using namespace fckit;

namespace {

constexpr int kExitValidation = 1;
constexpr int kExitIo = 2;
constexpr int kExitInternal = 3;

int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::validation: return kExitValidation;
    case ErrorCategory::io: return kExitIo;
    case ErrorCategory::invariant: return kExitInternal;
  }
  return kExitInternal;
}

void write_text(const fs::path& path, const std::string& text) { detail::write_file_bytes(path.string(), text); }

// Refuses to write over a file the command reads.
void guard_output(const fs::path& out, const std::vector<std::string>& inputs) {
  for (const auto& in : inputs) {
    std::error_code ec;
    if (fs::exists(out, ec) && fs::equivalent(out, in, ec))
      fail(Errc::invalid_argument, "refusing to overwrite input file '" + in + "'");
  }
}

std::string with_commas(std::size_t n) {
  auto s = std::to_string(n);
  for (auto i = static_cast<std::ptrdiff_t>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

// ---------------------------------------------------------------------------
// prep

struct PrepArgs {
  std::string manifest;
  std::string out_dir;
  bool filter = false;
  std::string balance = "none";
  bool stats = false;
  std::uint64_t seed = kDefaultSeed;
  int classes = kDefaultClasses;
  double neutral_threshold = 0.5;
  std::string neutral_rule = "and";
};

int run_prep(const PrepArgs& a) {
  auto samples = parse_manifest(a.manifest, a.classes);
  const fs::path out(a.out_dir);
  if (!a.out_dir.empty()) fs::create_directories(out);

  if (a.filter) {
    FilterThresholds t;
    t.neutral_threshold = a.neutral_threshold;
    t.neutral_requires_both = a.neutral_rule == "and";
    auto result = filter_coherence(samples, t);
    const auto text = format_filter_report(result.report);
    std::cout << text;
    if (!a.out_dir.empty()) write_text(out / "filter_report.txt", text);
    samples = std::move(result.kept);
  }
  if (a.balance == "cat")
    samples = balance_categorical(samples, a.seed, a.classes);
  else if (a.balance == "dim")
    samples = balance_dimensional(samples, a.seed);

  if (!a.out_dir.empty() && (a.filter || a.balance != "none")) {
    guard_output(out / "manifest.csv", {a.manifest});
    // augmented rows point at their source images, which stay next to the input manifest
    const auto src_dir = manifest_dir(a.manifest);
    for (auto& s : samples) s.path = fs::absolute(resolve_path(src_dir, s.path)).lexically_normal().string();
    write_manifest((out / "manifest.csv").string(), samples);
  }
  if (a.stats) {
    const auto r = stats(samples, a.classes);
    const auto text = format_stats(r);
    std::cout << text;
    if (!a.out_dir.empty()) {
      write_text(out / "stats.txt", text);
      write_text(out / "class_counts.csv", class_counts_csv(r));
      write_text(out / "histogram.csv", histogram_csv(r));
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::string train_manifest, val_manifest, out_dir, base_weights, variant, tasks;
  bool resume = false;
  bool quiet = false;
};

Dataset make_dataset(const std::vector<Sample>& samples, const std::string& base_dir, Variant v) {
  if (v == Variant::frame) return Dataset::from_samples(samples, base_dir);
  return Dataset::from_clips(window_sequences(samples), base_dir);
}

// Keeps decoded images in memory when they fit comfortably.
void maybe_preload(Dataset& d) {
  const std::size_t per_item = kImageValues * (d.variant() == Variant::frame ? 1 : kClipLength);
  if (d.size() * per_item * sizeof(float) <= (std::size_t{1} << 30)) d.preload();
}

int run_train(const TrainArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : load_config(a.config);
  // precedence: defaults < config file < --set < dedicated flags
  for (const auto& kv : a.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) fail(Errc::invalid_argument, "--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, std::string(detail::trim(kv.substr(0, eq))), std::string(detail::trim(kv.substr(eq + 1))));
  }
  if (a.seed) cfg.seed = *a.seed;
  if (a.epochs) cfg.epochs = *a.epochs;
  if (a.batch_size) cfg.batch_size = *a.batch_size;
  if (!a.train_manifest.empty()) cfg.train_manifest = a.train_manifest;
  if (!a.val_manifest.empty()) cfg.val_manifest = a.val_manifest;
  if (!a.out_dir.empty()) cfg.out_dir = a.out_dir;
  if (!a.base_weights.empty()) cfg.base_weights = a.base_weights;
  if (!a.variant.empty()) set_config_value(cfg, "variant", a.variant);
  if (!a.tasks.empty()) cfg.tasks = parse_task_mask(a.tasks);
  cfg.validate();
  require(!cfg.train_manifest.empty(), Errc::invalid_argument, "no training manifest (train_manifest)");
  require(!cfg.out_dir.empty(), Errc::invalid_argument, "no output directory (out_dir)");
  if (cfg.variant == Variant::sequence)
    require(!cfg.base_weights.empty(), Errc::invalid_argument, "FC-S training requires --base-weights");

  auto train_samples = parse_manifest(cfg.train_manifest, cfg.num_classes);
  if (cfg.filter) train_samples = filter_coherence(train_samples, cfg.thresholds).kept;
  // clips are windowed from the unbalanced stream so frames stay consecutive
  if (cfg.variant == Variant::frame) {
    if (cfg.balance == Balance::categorical) train_samples = balance_categorical(train_samples, cfg.seed, cfg.num_classes);
    if (cfg.balance == Balance::dimensional) train_samples = balance_dimensional(train_samples, cfg.seed);
  }
  auto train_set = make_dataset(train_samples, manifest_dir(cfg.train_manifest), cfg.variant);
  require(train_set.size() > 0, Errc::empty_dataset,
          cfg.variant == Variant::frame ? "training set is empty" : "training set yields no 10-frame clips");
  maybe_preload(train_set);
  std::optional<Dataset> val_set;
  if (!cfg.val_manifest.empty()) {
    val_set = make_dataset(parse_manifest(cfg.val_manifest, cfg.num_classes), manifest_dir(cfg.val_manifest), cfg.variant);
    maybe_preload(*val_set);
  }

  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  guard_output(out / "train.log", {cfg.train_manifest});
  TrainState state = a.resume ? load_checkpoint((out / "last").string(), cfg.adam) : initial_state(cfg);
  if (a.resume)
    require(state.model.variant() == cfg.variant, Errc::invalid_argument, "checkpoint variant differs from config");
  const bool fresh = !a.resume;
  std::ofstream log(out / "train.log", fresh ? std::ios::trunc : std::ios::app);
  std::ofstream val_log(out / "val.log", fresh ? std::ios::trunc : std::ios::app);
  if (!log || !val_log) fail(Errc::io_error, "cannot open logs in '" + cfg.out_dir + "'");
  if (fresh) {
    log << log_header() << "\n";
    val_log << val_log_header() << "\n";
  }
  TrainHooks hooks{&log, &val_log, [&](const EpochStats& e) {
                     if (!a.quiet) {
                       std::printf("epoch %zu  loss %.6f  (arousal %.6f, valence %.6f, expression %.6f)", e.epoch,
                                   e.loss.total, e.loss.arousal, e.loss.valence, e.loss.expression);
                       if (e.validation) std::printf("  val %.6f%s", e.validation->loss.total, e.improved ? " *" : "");
                       std::printf("\n");
                       std::fflush(stdout);
                     }
                     return true;
                   }};
  train(state, cfg, train_set, val_set ? &*val_set : nullptr, hooks);
  save_weights(state.model, (out / "final.fcw").string());
  if (!a.quiet) std::printf("wrote %s\n", (out / "final.fcw").string().c_str());
  return 0;
}

// ---------------------------------------------------------------------------
// eval / predict

struct EvalArgs {
  std::string weights, manifest, metrics_out, confusion_out, f1 = "macro";
  std::size_t batch_size = 32;
};

int run_eval(const EvalArgs& a) {
  const auto model = load_weights(a.weights);
  auto data = make_dataset(parse_manifest(a.manifest, model.num_classes()), manifest_dir(a.manifest), model.variant());
  require(data.size() > 0, Errc::empty_dataset, "evaluation set is empty");
  const auto pred = predict_all(model, data, a.batch_size);
  const auto report = score(pred, data.labels(), model.num_classes(),
                            a.f1 == "weighted" ? F1Averaging::weighted : F1Averaging::macro);
  std::cout << table_header() << "\n" << table_row(report) << "\n";
  if (!a.metrics_out.empty()) {
    guard_output(a.metrics_out, {a.manifest, a.weights});
    write_text(a.metrics_out, metrics_csv(report));
  }
  if (!a.confusion_out.empty()) {
    guard_output(a.confusion_out, {a.manifest, a.weights});
    std::vector<std::string> names;
    for (int k = 0; k < model.num_classes(); ++k) names.push_back(class_name(k));
    write_text(a.confusion_out, confusion_csv(report.confusion, names));
  }
  return 0;
}

struct PredictArgs {
  std::string weights;
  std::vector<std::string> inputs;
};

int run_predict(const PredictArgs& a) {
  const auto model = load_weights(a.weights);
  Tensorf x;
  if (model.variant() == Variant::frame) {
    x = Tensorf({a.inputs.size(), kImageSize, kImageSize, kImageChannels});
  } else {
    require(a.inputs.size() == kClipLength, Errc::invalid_argument,
            "FC-S prediction takes exactly " + std::to_string(kClipLength) + " frame images, got " +
                std::to_string(a.inputs.size()));
    x = Tensorf({1, kClipLength, kImageSize, kImageSize, kImageChannels});
  }
  parallel_for(a.inputs.size(), [&](std::size_t i) {
    const auto img = decode_image(a.inputs[i]);
    std::copy(img.values().begin(), img.values().end(), x.data() + i * kImageValues);
  });
  const auto triples = to_triples(forward(model, x));
  std::cout << "arousal,valence,class,confidence\n";
  for (const auto& t : triples) {
    const int k = t.predicted_class();
    std::printf("%.6f,%.6f,%d,%.6f\n", t.arousal, t.valence, k, t.class_distribution[static_cast<std::size_t>(k)]);
  }
  return 0;
}

// ---------------------------------------------------------------------------
// inspect / gradcheck

struct InspectArgs {
  std::string target;
  std::string variant = "fc";
  int classes = kDefaultClasses;
  std::string wiring = "sequential";
};

bool looks_like_weights(const std::string& path) {
  if (detail::has_suffix(path, ".fcw")) return true;
  std::ifstream in(path, std::ios::binary);
  char magic[4] = {};
  in.read(magic, 4);
  return in.gcount() == 4 && std::equal(magic, magic + 4, kWeightsMagic);
}

void print_layers(const ModelGraph& m) {
  std::printf("%-16s %-8s %-14s %-8s %12s\n", "layer", "kind", "output", "act", "params");
  for (const auto& l : m.layers()) {
    std::size_t n = 0;
    for (const auto& p : l.params) n += m.param(p).value.size();
    std::printf("%-16s %-8s %-14s %-8s %12s\n", l.name.c_str(), to_string(l.kind), shape_str(l.output).c_str(),
                to_string(l.activation), with_commas(n).c_str());
  }
  std::printf("variant %s, classes %d\n", m.variant() == Variant::frame ? "FC" : "FC-S", m.num_classes());
  std::printf("conv layers %zu, pool layers %zu\n", m.count_layers(LayerKind::conv), m.count_layers(LayerKind::pool));
  std::printf("trainable parameters %s\n", with_commas(count_trainable_params(m)).c_str());
  std::printf("total parameters %s\n", with_commas(count_params(m)).c_str());
}

int run_inspect(const InspectArgs& a) {
  ModelGraph m;
  if (!a.target.empty() && looks_like_weights(a.target)) {
    m = load_weights(a.target);
  } else {
    TrainConfig cfg;
    if (!a.target.empty()) {
      cfg = load_config(a.target);
    } else {
      set_config_value(cfg, "variant", a.variant);
      set_config_value(cfg, "wiring", a.wiring);
      cfg.num_classes = a.classes;
    }
    m = build_facechannel(cfg.num_classes, cfg.seed);
    if (cfg.variant == Variant::sequence)
      m = build_facechannels(m, cfg.freeze_trunk ? FcsMode::freeze_trunk : FcsMode::fine_tune, cfg.seed + 1, cfg.wiring);
  }
  print_layers(m);
  return 0;
}

struct GradcheckArgs {
  int seeds = 10;
  double tolerance = kGradCheckTolerance;
  std::uint64_t first_seed = 1;
};

int run_gradcheck(const GradcheckArgs& a) {
  require(a.seeds >= 1, Errc::invalid_argument, "--seeds must be >= 1");
  bool ok = true;
  std::printf("%-14s %14s  %s\n", "primitive", "max_rel_error", "status");
  for (const auto& op : gradcheck_primitives()) {
    const auto r = grad_check_seeds(op, a.seeds, a.first_seed, kGradCheckStep, a.tolerance);
    ok = ok && r.passed();
    std::printf("%-14s %14.3e  %s\n", op.c_str(), r.max_rel_error, r.passed() ? "PASS" : "FAIL");
  }
  std::printf("%d seeds per primitive, tolerance %.1e: %s\n", a.seeds, a.tolerance, ok ? "all passed" : "FAILED");
  return ok ? 0 : kExitInternal;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FaceChannel toolkit: prep, train, eval, predict, inspect, gradcheck"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "fckit 1.0");

  PrepArgs prep;
  auto* p = app.add_subcommand("prep", "filter, balance and summarize a manifest");
  p->add_option("manifest", prep.manifest, "input manifest CSV")->required();
  p->add_option("-o,--out-dir", prep.out_dir, "directory for the prepared manifest and reports");
  p->add_flag("--filter", prep.filter, "apply the label-coherence filter");
  p->add_option("--balance", prep.balance, "oversample classes (cat) or valence bins (dim)")
      ->check(CLI::IsMember({"none", "cat", "dim"}));
  p->add_flag("--stats", prep.stats, "print label distributions");
  p->add_option("--seed", prep.seed, "random seed (default " + std::to_string(kDefaultSeed) + ")");
  p->add_option("--classes", prep.classes, "number of expression classes")->check(CLI::Range(2, 1000));
  p->add_option("--neutral-threshold", prep.neutral_threshold, "magnitude limit of the neutral rule");
  p->add_option("--neutral-rule", prep.neutral_rule, "combine valence/arousal limits with and|or")
      ->check(CLI::IsMember({"and", "or"}));

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train FC or FC-S");
  t->add_option("-c,--config", tr.config, "key = value config file");
  t->add_option("--set", tr.sets, "override a config key (key=value), repeatable");
  t->add_option("--seed", tr.seed, "random seed (default " + std::to_string(kDefaultSeed) + ")");
  t->add_option("--epochs", tr.epochs, "number of epochs");
  t->add_option("--batch-size", tr.batch_size, "mini-batch size");
  t->add_option("--train-manifest", tr.train_manifest, "training manifest");
  t->add_option("--val-manifest", tr.val_manifest, "validation manifest");
  t->add_option("-o,--out-dir", tr.out_dir, "output directory for logs and checkpoints");
  t->add_option("--base-weights", tr.base_weights, "FC weights to start FC-S from");
  t->add_option("--variant", tr.variant, "fc or fcs")->check(CLI::IsMember({"fc", "fcs"}));
  t->add_option("--tasks", tr.tasks, "all, or a subset of arousal,valence,expression");
  t->add_flag("--resume", tr.resume, "continue from <out-dir>/last");
  t->add_flag("-q,--quiet", tr.quiet, "no per-epoch output");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate weights on a manifest");
  e->add_option("-w,--weights", ev.weights, "weights file")->required();
  e->add_option("-m,--manifest", ev.manifest, "labeled manifest")->required();
  e->add_option("--metrics-out", ev.metrics_out, "write metric,value CSV");
  e->add_option("--confusion-out", ev.confusion_out, "write the confusion matrix CSV");
  e->add_option("--f1", ev.f1, "F1 averaging")->check(CLI::IsMember({"macro", "weighted"}));
  e->add_option("--batch-size", ev.batch_size, "inference batch size")->check(CLI::PositiveNumber);

  PredictArgs pr;
  auto* d = app.add_subcommand("predict", "predict arousal, valence and class for images or one clip");
  d->add_option("-w,--weights", pr.weights, "weights file")->required();
  d->add_option("inputs", pr.inputs, "image files (FC) or the 10 frames of one clip (FC-S)")->required();

  InspectArgs in;
  auto* i = app.add_subcommand("inspect", "print the layer table and parameter counts");
  i->add_option("target", in.target, "weights file or config file (omit to build from flags)");
  i->add_option("--variant", in.variant, "fc or fcs")->check(CLI::IsMember({"fc", "fcs"}));
  i->add_option("--classes", in.classes, "number of expression classes")->check(CLI::Range(2, 1000));
  i->add_option("--wiring", in.wiring, "FC-S head wiring")->check(CLI::IsMember({"sequential", "concat"}));

  GradcheckArgs gc;
  auto* g = app.add_subcommand("gradcheck", "finite-difference check of every primitive");
  g->add_option("--seeds", gc.seeds, "random seeds per primitive");
  g->add_option("--tolerance", gc.tolerance, "maximum relative error");
  g->add_option("--first-seed", gc.first_seed, "first seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& s) {
    return app.exit(s);
  } catch (const CLI::ParseError& err) {
    app.exit(err);
    return kExitValidation;
  }

  try {
    if (*p) return run_prep(prep);
    if (*t) return run_train(tr);
    if (*e) return run_eval(ev);
    if (*d) return run_predict(pr);
    if (*i) return run_inspect(in);
    if (*g) return run_gradcheck(gc);
  } catch (const Error& err) {
    std::cerr << "fckit: " << err.what() << "\n";
    return exit_code(err.category());
  } catch (const fs::filesystem_error& err) {
    std::cerr << "fckit: i/o error: " << err.what() << "\n";
    return kExitIo;
  } catch (const std::exception& err) {
    std::cerr << "fckit: internal error: " << err.what() << "\n";
    return kExitInternal;
  }
  return kExitInternal;
}
