#include "clmae/cli.hpp"

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>

#include "clmae/checkpoint.hpp"
#include "clmae/config.hpp"
#include "clmae/dataset.hpp"
#include "clmae/errors.hpp"
#include "clmae/eval.hpp"
#include "clmae/gradsuite.hpp"
#include "clmae/training.hpp"

namespace clmae {

namespace fs = std::filesystem;

namespace {

constexpr double kGradTolerance = 1e-4;

std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + path.string());
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

/// Flags shared by the training and evaluation commands.
struct RunFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string dataset;
  std::vector<std::string> sets;

  void attach(CLI::App* app, bool with_out = true) {
    app->add_option("--config", config, "key = value configuration file");
    app->add_option("--seed", seed, "overrides the configured seed");
    if (with_out) app->add_option("--out", out, "output directory");
    app->add_option("--dataset", dataset, "dataset file (overrides the configured one)");
    app->add_option("--set", sets, "key=value override, repeatable");
  }

  /// defaults < file < --set < dedicated flags. `fallback` is read when no
  /// --config was given and it exists.
  TrainConfig resolve(const fs::path& fallback = {}) const {
    std::string text;
    if (!config.empty()) {
      text = read_text(config);
    } else if (!fallback.empty() && fs::exists(fallback)) {
      text = read_text(fallback);
    }
    std::map<std::string, std::string> overrides;
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      overrides[s.substr(0, eq)] = s.substr(eq + 1);
    }
    if (seed) overrides["seed"] = std::to_string(*seed);
    if (!out.empty()) overrides["out"] = out;
    if (!dataset.empty()) overrides["dataset"] = dataset;
    TrainConfig c = resolve_config(text, overrides);
    c.validate();
    return c;
  }
};

Dataset training_data(const TrainConfig& c) {
  if (c.dataset.empty()) throw ConfigError("no dataset given (use --dataset or the 'dataset' key)");
  return read_dataset(c.dataset);
}

template <typename T>
int pretrain_as(const TrainConfig& c, TrainMode mode, const std::optional<CheckpointData>& resume, std::ostream& out) {
  const Dataset data = training_data(c);
  auto result = run_training<T>(c, data, mode, {}, resume);
  const auto& last = result.metrics.back();
  out << "finished step " << last.step << " loss_mae " << last.loss_mae << " -> " << c.out << "\n";
  return kExitOk;
}

int pretrain(const TrainConfig& c, TrainMode mode, const std::optional<CheckpointData>& resume, std::ostream& out) {
  return c.precision == Precision::f64 ? pretrain_as<double>(c, mode, resume, out)
                                       : pretrain_as<float>(c, mode, resume, out);
}

/// Run configuration of a checkpoint: --config if given, else the run's own
/// config.txt next to it.
TrainConfig checkpoint_config(const RunFlags& flags, const fs::path& ckpt) {
  return flags.resolve(ckpt.parent_path() / "config.txt");
}

TrainMode checkpoint_mode(const CheckpointData& d) {
  for (const auto& r : d.params)
    if (r.name.starts_with("cmm.")) return TrainMode::curriculum;
  return TrainMode::baseline;
}

template <typename T>
TrainState<T> restored_state(const TrainConfig& c, const CheckpointData& d, std::size_t dataset_size) {
  TrainState<T> s = init_state<T>(c, std::max<std::size_t>(dataset_size, 1), checkpoint_mode(d));
  restore_checkpoint(s, c, d);
  return s;
}

/// Train/test features for the evaluation commands.
struct EvalInputs {
  FeatureSet train, test;
  std::string backbone;
};

struct EvalFlags {
  std::string checkpoint;
  bool pixels = false;
  std::string train, test, data;
  std::size_t train_per_class = 0;
  std::string backbone;
  std::string results;
  RunFlags run;

  void attach(CLI::App* app) {
    app->add_option("--checkpoint", checkpoint, "trained checkpoint whose encoder supplies the features");
    app->add_flag("--pixels", pixels, "use raw pixels as features instead of an encoder");
    app->add_option("--train", train, "labelled training set");
    app->add_option("--test", test, "labelled test set");
    app->add_option("--data", data, "single dataset split per class (with --train-per-class)");
    app->add_option("--train-per-class", train_per_class, "records per class used for training when splitting --data");
    app->add_option("--backbone", backbone, "tag written to the results (default: derived from the source)");
    app->add_option("--results", results, "append result rows to this CSV");
    run.attach(app, false);
  }

  DatasetSplit datasets() const {
    if (!data.empty()) {
      if (!train.empty() || !test.empty()) throw ConfigError("use either --data or --train/--test");
      if (train_per_class == 0) throw ConfigError("--data needs --train-per-class");
      return split_per_class(read_dataset(data), train_per_class);
    }
    if (train.empty() || test.empty()) throw ConfigError("need --train and --test (or --data)");
    return {read_dataset(train), read_dataset(test)};
  }

  EvalInputs load() const {
    if (pixels == !checkpoint.empty()) throw ConfigError("give exactly one of --checkpoint or --pixels");
    const DatasetSplit split = datasets();
    if (pixels) return {pixel_features(split.train), pixel_features(split.test), backbone.empty() ? "pixels" : backbone};
    const CheckpointData d = load_checkpoint(checkpoint);
    const TrainConfig c = checkpoint_config(run, checkpoint);
    const std::string tag = !backbone.empty() ? backbone
                            : checkpoint_mode(d) == TrainMode::curriculum ? "clmae"
                                                                          : "mae";
    auto features = [&](auto zero) -> EvalInputs {
      using T = decltype(zero);
      const auto s = restored_state<T>(c, d, split.train.count());
      return {extract_features(s.mae, split.train, c.geometry.patch), extract_features(s.mae, split.test, c.geometry.patch),
              tag};
    };
    return d.f64 ? features(0.0) : features(0.0f);
  }

  void emit(const std::vector<ProbeResult>& rows, const std::string& tag, std::ostream& out) const {
    out << kResultsHeader << "\n";
    for (const auto& r : rows) out << format_result_row(r, tag) << "\n";
    if (results.empty()) return;
    const bool fresh = !fs::exists(results) || fs::file_size(results) == 0;
    std::ofstream os(results, std::ios::app);
    if (!os) throw ConfigError("cannot write " + results);
    if (fresh) os << kResultsHeader << "\n";
    for (const auto& r : rows) os << format_result_row(r, tag) << "\n";
  }
};

std::vector<std::size_t> parse_shots(const std::string& text) {
  std::vector<std::size_t> shots;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    unsigned long v = 0;
    try {
      v = std::stoul(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || item.empty() || v == 0) throw CLI::ValidationError("--shots", "expected positive integers, got '" + text + "'");
    shots.push_back(v);
  }
  return shots;
}

double binary_entropy_bits(double z) {
  if (z <= 0.0 || z >= 1.0) return 0.0;
  return -(z * std::log2(z) + (1 - z) * std::log2(1 - z));
}

template <typename T>
void dump_masks(const TrainConfig& c, const CheckpointData& d, const Dataset& data, std::size_t count, const fs::path& dir,
                std::ostream& out) {
  const auto state = restored_state<T>(c, d, data.count());
  count = std::min(count, data.count());
  std::vector<std::size_t> idx(count);
  for (std::size_t i = 0; i < count; ++i) idx[i] = i;
  const auto grid = load_batch<T>(data, idx, c.geometry.patch);
  std::vector<SoftMask> soft;
  const auto masks = predict_masks(state.cmm, grid, &soft);
  fs::create_directories(dir);
  std::ofstream index(dir / "index.csv");
  if (!index) throw ConfigError("cannot write " + (dir / "index.csv").string());
  index << "sample,label,file,mean_z,fraction_masked,entropy_bits\n" << std::setprecision(17);
  for (std::size_t i = 0; i < count; ++i) {
    const std::string file = mask_filename(d.step, i);
    write_mask_pgm(dir / file, masks[i], grid.grid_h(), grid.grid_w(), grid.p);
    double mean_z = 0, entropy = 0;
    for (double z : soft[i].z) {
      mean_z += z;
      entropy += binary_entropy_bits(z);
    }
    const double n = static_cast<double>(soft[i].z.size());
    const double masked = static_cast<double>(masks[i].count_masked()) / n;
    index << i << "," << data.labels[i] << "," << file << "," << mean_z / n << "," << masked << "," << entropy / n << "\n";
  }
  out << "wrote " << count << " masks to " << dir.string() << "\n";
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Curriculum-masked autoencoder pretraining and evaluation", "clmae"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  // gen-data
  SyntheticSpec synth;
  std::string data_out;
  std::size_t side = 32;
  auto* gen = app.add_subcommand("gen-data", "write a synthetic labelled image set");
  gen->add_option("--out", data_out, "output file")->required();
  gen->add_option("--classes", synth.classes, "number of classes")->check(CLI::Range(2, 65535));
  gen->add_option("--per-class", synth.per_class, "records per class")->check(CLI::PositiveNumber);
  gen->add_option("--size", side, "image height and width")->check(CLI::PositiveNumber);
  gen->add_option("--channels", synth.c, "channels (1 or 3)")->check(CLI::IsMember({1, 3}));
  gen->add_option("--patch", synth.patch, "patch size the extents must divide")->check(CLI::PositiveNumber);
  gen->add_option("--noise", synth.noise, "pixel noise standard deviation")->check(CLI::NonNegativeNumber);
  std::uint64_t gen_seed = 0;
  gen->add_option("--seed", gen_seed, "generator seed");

  // pretrain / pretrain-baseline / resume
  RunFlags train_flags, base_flags, resume_flags;
  auto* pre = app.add_subcommand("pretrain", "train the autoencoder with the learned masking curriculum");
  train_flags.attach(pre);
  auto* base = app.add_subcommand("pretrain-baseline", "train the autoencoder with uniform random masks");
  base_flags.attach(base);
  std::string resume_ckpt;
  auto* res = app.add_subcommand("resume", "continue a run from one of its checkpoints");
  res->add_option("--checkpoint", resume_ckpt, "checkpoint to continue from")->required();
  resume_flags.attach(res);

  // evaluation
  EvalFlags nn_flags, probe_flags, few_flags;
  ProbeOptions probe_opts, few_opts;
  auto* enn = app.add_subcommand("eval-nn", "nearest-neighbour classification on frozen features");
  nn_flags.attach(enn);
  auto* epr = app.add_subcommand("eval-probe", "linear probe on frozen features");
  probe_flags.attach(epr);
  std::string shots_text = "1,2,4,8,16";
  auto* efs = app.add_subcommand("eval-fewshot", "few-shot linear probes on frozen features");
  few_flags.attach(efs);
  efs->add_option("--shots", shots_text, "comma-separated shots per class");
  for (auto [cmd, opts] : {std::pair{epr, &probe_opts}, std::pair{efs, &few_opts}}) {
    cmd->add_option("--epochs", opts->epochs, "full-batch epochs")->check(CLI::PositiveNumber);
    cmd->add_option("--lr", opts->lr, "probe learning rate")->check(CLI::PositiveNumber);
    cmd->add_option("--probe-seed", opts->seed, "seed of the first run");
    cmd->add_option("--runs", opts->runs, "runs averaged")->check(CLI::PositiveNumber);
  }

  // dump-masks
  std::string dump_ckpt, dump_data, dump_dir;
  std::size_t dump_count = 8;
  RunFlags dump_flags;
  auto* dm = app.add_subcommand("dump-masks", "write thresholded masks and soft-mask statistics");
  dm->add_option("--checkpoint", dump_ckpt, "curriculum checkpoint")->required();
  dm->add_option("--data", dump_data, "images to mask (default: the run's dataset)");
  dm->add_option("--count", dump_count, "leading records to mask")->check(CLI::PositiveNumber);
  dm->add_option("--out", dump_dir, "output directory")->required();
  dump_flags.attach(dm, false);

  // grad-check
  std::uint64_t grad_seed = 0;
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of every differentiable component");
  gc->add_option("--seed", grad_seed, "input seed");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kExitUsage;
  }

  try {
    if (gen->parsed()) {
      synth.h = synth.w = side;
      synth.seed = gen_seed;
      const Dataset data = gen_synthetic(synth);
      const double acc = pixel_nn_accuracy(data);
      const double chance = 100.0 / static_cast<double>(synth.classes);
      out << "records " << data.count() << ", pixel-space leave-one-out 1-NN " << acc << "% (chance " << chance << "%)\n";
      if (!(acc > chance && acc < 100.0)) {
        throw DatasetError("pixel-space 1-NN accuracy " + std::to_string(acc) +
                           "% is not strictly between chance and 100%; the set is not useful for evaluation");
      }
      write_dataset(data_out, data);
      return kExitOk;
    }
    if (pre->parsed()) return pretrain(train_flags.resolve(), TrainMode::curriculum, std::nullopt, out);
    if (base->parsed()) return pretrain(base_flags.resolve(), TrainMode::baseline, std::nullopt, out);
    if (res->parsed()) {
      const CheckpointData d = load_checkpoint(resume_ckpt);
      const TrainConfig c = checkpoint_config(resume_flags, resume_ckpt);
      if (d.f64 != (c.precision == Precision::f64)) throw CheckpointError("checkpoint precision differs from the configured precision");
      return pretrain(c, checkpoint_mode(d), d, out);
    }
    if (enn->parsed()) {
      const EvalInputs in = nn_flags.load();
      nn_flags.emit({nn_classify(in.train, in.test)}, in.backbone, out);
      return kExitOk;
    }
    if (epr->parsed()) {
      const EvalInputs in = probe_flags.load();
      probe_flags.emit({linear_probe(in.train, in.test, probe_opts)}, in.backbone, out);
      return kExitOk;
    }
    if (efs->parsed()) {
      std::vector<std::size_t> shots;
      try {
        shots = parse_shots(shots_text);
      } catch (const CLI::ValidationError& e) {
        err << "error: " << e.what() << "\n\n" << efs->help();
        return kExitUsage;
      }
      const EvalInputs in = few_flags.load();
      std::vector<ProbeResult> rows;
      for (std::size_t k : shots) rows.push_back(few_shot_probe(in.train, in.test, k, few_opts));
      few_flags.emit(rows, in.backbone, out);
      return kExitOk;
    }
    if (dm->parsed()) {
      const CheckpointData d = load_checkpoint(dump_ckpt);
      if (checkpoint_mode(d) != TrainMode::curriculum) throw CheckpointError(dump_ckpt + " holds no masking module");
      const TrainConfig c = checkpoint_config(dump_flags, dump_ckpt);
      const Dataset data = dump_data.empty() ? training_data(c) : read_dataset(dump_data);
      if (data.h != c.geometry.image_h || data.w != c.geometry.image_w || data.c != c.geometry.channels) {
        throw ConfigError("dataset geometry does not match the model");
      }
      if (d.f64) {
        dump_masks<double>(c, d, data, dump_count, dump_dir, out);
      } else {
        dump_masks<float>(c, d, data, dump_count, dump_dir, out);
      }
      return kExitOk;
    }
    if (gc->parsed()) {
      bool ok = true;
      out << std::left;
      for (const auto& r : run_grad_suite(grad_seed)) {
        const bool pass = r.max_rel_error < kGradTolerance;
        ok = ok && pass;
        out << std::setw(24) << r.component << " " << std::scientific << std::setprecision(3) << r.max_rel_error
            << (pass ? "  ok" : "  FAIL") << "\n";
      }
      out << (ok ? "all components within " : "some components exceed ") << kGradTolerance << "\n";
      return ok ? kExitOk : kExitFailure;
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  err << app.help();
  return kExitUsage;
}

}  // namespace clmae
