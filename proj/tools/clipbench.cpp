// clipbench: train, evaluate, analyze corpora, synthesize data, verify.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <string>
#include <vector>

#include "clipbench/config.hpp"
#include "clipbench/corpus_stats.hpp"
#include "clipbench/trainer.hpp"
#include "clipbench/verify.hpp"
#include "clipbench/zeroshot.hpp"

namespace fs = std::filesystem;
using namespace clipbench;

namespace {

enum Exit { kOk = 0, kFailure = 1, kUsage = 2, kMismatch = 3 };

struct RunArgs {
  std::string config;
  std::vector<std::string> overrides;
  std::string variant;
  long epochs = -1;
  bool light = false;
  bool validate_only = false;
};

void add_run_args(CLI::App* cmd, RunArgs& a) {
  cmd->add_option("-c,--config", a.config, "INI config file");
  cmd->add_option("--set", a.overrides, "override, section.key=value (repeatable)");
  cmd->add_option("--variant", a.variant, "clip, slip, filip, declip or defilip");
  cmd->add_option("--epochs", a.epochs, "training epochs");
  cmd->add_flag("--light", a.light, "smaller encoders for quick single-core runs");
  cmd->add_flag("--validate-only", a.validate_only, "check the configuration and exit");
}

RunConfig resolve(const RunArgs& a) {
  RunConfig cfg = a.config.empty() ? RunConfig{} : load_run_config(a.config);
  if (a.light) apply_light_preset(cfg);
  for (const auto& o : a.overrides) apply_override(cfg, o);
  if (!a.variant.empty()) cfg.set_checked("train.variant", a.variant);
  if (a.epochs >= 0) cfg.train.epochs = static_cast<std::size_t>(a.epochs);
  cfg.validate();
  return cfg;
}

TrainingData load_data(const RunConfig& cfg) {
  if (cfg.data.train_manifest.empty()) throw ConfigError("data.train_manifest is required");
  TrainingData d;
  d.train = read_manifest(cfg.data.train_manifest);
  if (!cfg.data.val_manifest.empty()) {
    if (cfg.data.classes.empty()) throw ConfigError("data.classes is required when data.val_manifest is set");
    d.val = read_manifest(cfg.data.val_manifest);
  }
  if (!cfg.data.classes.empty()) d.class_names = read_lines(cfg.data.classes, "class list");
  return d;
}

TrainSetup make_setup(const RunConfig& cfg) {
  TrainSetup s;
  s.model = cfg.model;
  s.train = cfg.train;
  s.loss = cfg.resolved_loss();
  s.image_aug = cfg.image_aug;
  s.text_aug = cfg.text_policy();
  if (!cfg.data.synonyms.empty()) s.text_aug.synonyms = SynonymTable::load(cfg.data.synonyms);
  if (!cfg.data.prompts.empty()) s.prompts = PromptSet::load(cfg.data.prompts);
  s.out_dir = cfg.out_dir;
  s.resume_from = cfg.resume_from;
  return s;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path);
  os << text;
}

std::string acc_str(double a) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", a);
  return a < 0 ? "n/a" : buf;
}

int cmd_train(const RunArgs& a) {
  RunConfig cfg = resolve(a);
  TrainingData data = load_data(cfg);
  TrainSetup setup = make_setup(cfg);
  if (a.validate_only) {
    std::cout << "config ok\n";
    return kOk;
  }
  fs::create_directories(cfg.out_dir);
  write_text(cfg.out_dir + "/config.ini", to_ini(cfg.to_kv()));
  setup.progress = &std::cout;
  const TrainResult r = train(std::move(setup), data);
  for (const auto& w : r.warnings) std::cerr << "warning: " << w << "\n";
  std::cout << "steps=" << r.steps << " final_val_top1=" << acc_str(r.final_accuracy)
            << " best_val_top1=" << acc_str(r.best_accuracy) << (r.stopped_early ? " stopped_early=1" : "") << "\n";
  return kOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& manifest, const std::string& prompts,
             const std::string& classes, const std::string& report_path) {
  LoadedModel m = load_model(checkpoint);
  const PromptSet ps = prompts.empty() ? PromptSet::defaults() : PromptSet::load(prompts);
  const auto names = classes.empty() ? m.class_names : read_lines(classes, "class list");
  if (names.empty()) throw ConfigError("no class names: pass --classes or use a checkpoint that stores them");
  const auto records = read_manifest(manifest);
  if (records.empty()) throw ConfigError(manifest + ": no records");
  std::vector<Image> images;
  std::vector<std::size_t> labels;
  for (const auto& r : records) {
    if (!r.label) throw ConfigError(manifest + ": record " + r.image_ref + " has no label");
    if (*r.label >= names.size()) throw ArtifactMismatchError("label " + std::to_string(*r.label) + " outside the class list");
    images.push_back(load_image(r, m.model->config().image_size()));
    labels.push_back(*r.label);
  }
  const ClassifierMatrix c = build_classifier(names, ps, *m.model, m.vocab);
  const EvalReport rep = make_report(names, classify(images, c, *m.model), labels);
  std::cout << rep.to_text();
  if (!report_path.empty()) write_text(report_path, rep.to_text());
  return kOk;
}

int cmd_stats(const std::string& path, const std::string& format, const FilterPolicy& policy, bool with_filter,
              const std::string& kept_path) {
  CaptionFormat fmt = CaptionFormat::Auto;
  if (format == "plain") fmt = CaptionFormat::Plain;
  else if (format == "manifest") fmt = CaptionFormat::Manifest;
  else if (format != "auto") throw ConfigError("--format must be auto, plain or manifest");
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read corpus " + path);
  if (!with_filter) {
    const CorpusReport r = analyze(is, fmt);
    std::cout << r.to_text() << r.to_kv();
    return kOk;
  }
  policy.validate();
  CorpusAccumulator before, after;
  std::ofstream kept;
  if (!kept_path.empty()) kept.open(kept_path);
  FilterTally tally;
  for_each_caption(is, fmt, [&](const std::string& caption) {
    const auto words = split_words(caption);
    before.add_words(words);
    if (accept(words, policy, tally)) {
      after.add_words(words);
      if (kept) kept << caption << "\n";
    }
  });
  std::cout << "before filtering\n" << before.report().to_text() << before.report().to_kv();
  std::cout << "rejected=" << tally.rejected << "\nrejected_length=" << tally.length
            << "\nrejected_ratio=" << tally.ratio << "\n";
  std::cout << "after filtering\n" << after.report().to_text() << after.report().to_kv();
  return kOk;
}

int cmd_synth(std::size_t classes, std::size_t per_class, std::size_t val_per_class, std::uint64_t seed,
              const std::string& out, bool write_images) {
  fs::create_directories(out);
  const SyntheticDataset train = generate_synthetic(classes, per_class, seed);
  const SyntheticDataset val = generate_synthetic(classes, val_per_class, derive_seed(seed, 0x76616cULL));
  auto emit = [&](const SyntheticDataset& ds, const std::string& name) {
    std::vector<PairRecord> records = ds.records;
    if (write_images) {
      fs::create_directories(out + "/images");
      for (std::size_t i = 0; i < records.size(); ++i) {
        const std::string file = out + "/images/" + name + "_" + std::to_string(i) + ".ff";
        farbfeld::write(file, render_synthetic(SyntheticSpec::parse(records[i].image_ref), 32));
        records[i].image_ref = file;
      }
    }
    write_manifest(out + "/" + name + ".tsv", records);
  };
  if (per_class) emit(train, "train");
  if (val_per_class) emit(val, "val");
  std::string names;
  for (const auto& n : train.class_names) names += n + "\n";
  write_text(out + "/classes.txt", names);
  std::cout << "wrote " << classes * per_class << " train and " << classes * val_per_class << " val records to " << out
            << "\n";
  return kOk;
}

int cmd_verify(bool list, const std::vector<std::string>& only) {
  const auto& checks = all_checks();
  if (list) {
    for (const auto& c : checks) std::cout << c.name << "  " << c.description << "\n";
    return kOk;
  }
  bool all = true;
  for (const auto& c : checks) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.name) == only.end()) continue;
    CheckResult r;
    try {
      r = c.run();
    } catch (const std::exception& e) {
      r.fail(std::string("threw: ") + e.what());
    }
    std::cout << (r.passed ? "PASS " : "FAIL ") << c.name << "  " << r.detail << "\n";
    all = all && r.passed;
  }
  if (!all) std::cout << "verification failed\n";
  return all ? kOk : kFailure;
}

int cmd_sweep(const RunArgs& a, const std::vector<std::size_t>& depths, bool parallel, bool require_above_chance) {
  if (depths.empty()) throw ConfigError("--depths must not be empty");
  RunConfig base = resolve(a);
  TrainingData data = load_data(base);
  if (data.val.empty()) throw ConfigError("the depth sweep needs data.val_manifest");
  if (a.validate_only) {
    std::cout << "config ok\n";
    return kOk;
  }
  struct Row {
    std::size_t depth, text_params, total_params;
    double accuracy;
  };
  auto run_one = [&](std::size_t depth) {
    RunConfig cfg = base;
    cfg.model.text.depth = depth;
    cfg.out_dir = base.out_dir + "/depth_" + std::to_string(depth);
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    write_text(cfg.out_dir + "/config.ini", to_ini(cfg.to_kv()));
    const TrainResult r = train(make_setup(cfg), data);
    return Row{depth, cfg.model.text.parameter_count(), ClipModel(cfg.model, 0).params().scalar_count(),
               r.final_accuracy};
  };
  std::vector<Row> rows;
  if (parallel) {
    std::vector<std::future<Row>> jobs;
    for (auto d : depths) jobs.push_back(std::async(std::launch::async, run_one, d));
    for (auto& j : jobs) rows.push_back(j.get());
  } else {
    for (auto d : depths) {
      std::cout << "training text depth " << d << "\n" << std::flush;
      rows.push_back(run_one(d));
    }
  }
  const double chance = 1.0 / static_cast<double>(data.class_names.size());
  std::string table = "text_depth  text_params  total_params  val_top1\n";
  bool above = true;
  for (const auto& r : rows) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%10zu  %11zu  %12zu  %8.4f\n", r.depth, r.text_params, r.total_params, r.accuracy);
    table += buf;
    above = above && r.accuracy > chance;
  }
  char buf[64];
  std::snprintf(buf, sizeof buf, "chance=%.4f\n", chance);
  table += buf;
  std::cout << table;
  write_text(base.out_dir + "/sweep.txt", table);
  return require_above_chance && !above ? kFailure : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Contrastive language-image pretraining workbench"};
  app.require_subcommand(1);

  RunArgs train_args;
  auto* train_cmd = app.add_subcommand("train", "train a model");
  add_run_args(train_cmd, train_args);

  std::string ckpt, manifest, prompts, classes, report;
  auto* eval_cmd = app.add_subcommand("eval", "zero-shot top-1 evaluation of a checkpoint");
  eval_cmd->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--manifest", manifest, "labelled manifest")->required();
  eval_cmd->add_option("--prompts", prompts, "prompt template file");
  eval_cmd->add_option("--classes", classes, "class names, one per line");
  eval_cmd->add_option("--report", report, "also write the report here");

  std::string corpus, format = "auto", kept;
  FilterPolicy policy;
  auto* stats_cmd = app.add_subcommand("stats", "caption corpus statistics");
  stats_cmd->add_option("corpus", corpus, "captions file or manifest")->required();
  stats_cmd->add_option("--format", format, "auto, plain or manifest");
  auto* o_min = stats_cmd->add_option("--min-length", policy.min_length, "filter: minimum tokens");
  auto* o_max = stats_cmd->add_option("--max-length", policy.max_length, "filter: maximum tokens");
  auto* o_ratio = stats_cmd->add_option("--min-en-ratio", policy.min_english_ratio, "filter: minimum English ratio");
  stats_cmd->add_option("--kept", kept, "write kept captions here");

  std::size_t k = 8, per_class = 100, val_per_class = 25;
  std::uint64_t seed = 0;
  std::string out;
  bool images = false;
  auto* synth_cmd = app.add_subcommand("synth", "generate the synthetic shapes dataset");
  synth_cmd->add_option("--classes", k, "number of classes")->check(CLI::Range(2ul, kMaxSyntheticClasses));
  synth_cmd->add_option("--per-class", per_class, "training records per class");
  synth_cmd->add_option("--val-per-class", val_per_class, "validation records per class");
  synth_cmd->add_option("--seed", seed, "generator seed");
  synth_cmd->add_option("--out", out, "output directory")->required();
  synth_cmd->add_flag("--images", images, "write farbfeld files instead of inline specs");

  bool list = false;
  std::vector<std::string> only;
  auto* verify_cmd = app.add_subcommand("verify", "run the oracle suite");
  verify_cmd->add_flag("--list", list, "list checks without running them");
  verify_cmd->add_option("--only", only, "run only the named checks");
  verify_cmd->add_flag("--break-filip-tiebreak", faults().filip_tiebreak, "fault: FILIP ties prefer the last index");
  verify_cmd->add_flag("--break-matmul-grad", faults().matmul_grad, "fault: halve the matmul left gradient");
  verify_cmd->add_flag("--break-info-nce-transpose", faults().info_nce_transpose,
                       "fault: text-side InfoNCE reuses the image side");
  verify_cmd->add_flag("--break-queue-fifo", faults().queue_fifo, "fault: queue evicts the newest entry");

  RunArgs sweep_args;
  std::vector<std::size_t> depths{1, 2, 3, 4};
  bool parallel = false, require_above = false;
  auto* sweep_cmd = app.add_subcommand("sweep-text-depth", "train one model per text encoder depth");
  add_run_args(sweep_cmd, sweep_args);
  sweep_cmd->add_option("--depths", depths, "depths to train")->delimiter(',');
  sweep_cmd->add_flag("--parallel", parallel, "run depths concurrently");
  sweep_cmd->add_flag("--require-above-chance", require_above, "exit 1 unless every depth beats chance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*train_cmd) return cmd_train(train_args);
    if (*eval_cmd) return cmd_eval(ckpt, manifest, prompts, classes, report);
    if (*stats_cmd) return cmd_stats(corpus, format, policy, *o_min || *o_max || *o_ratio, kept);
    if (*synth_cmd) return cmd_synth(k, per_class, val_per_class, seed, out, images);
    if (*verify_cmd) return cmd_verify(list, only);
    if (*sweep_cmd) return cmd_sweep(sweep_args, depths, parallel, require_above);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ArtifactMismatchError& e) {
    std::cerr << "artifact mismatch: " << e.what() << "\n";
    return kMismatch;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
  return kUsage;
}
