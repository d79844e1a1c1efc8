#pragma once

// `mcpnet` command line. run_cli() is the whole program; tools/mcpnet.cpp
// only forwards argv.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include "mcpnet/config.hpp"
#include "mcpnet/dataset.hpp"
#include "mcpnet/evaluation.hpp"
#include "mcpnet/trainer.hpp"
#include "mcpnet/verify.hpp"

namespace mcpnet {

namespace cli {

namespace fs = std::filesystem;

struct Options {
  std::string config;
  std::vector<std::string> sets;
  long long threads = -1;
  std::string fault;
};

inline RunConfig load_config(const Options& o) {
  if (o.config.empty()) throw ConfigError("no --config given; expected keys:\n" + expected_keys_text());
  RunConfig cfg;
  cfg.load(o.config);
  for (const auto& s : o.sets) cfg.apply_override(s);
  if (o.threads >= 0) cfg.set("run.threads", std::to_string(o.threads), "--threads");
  cfg.validate();
  return cfg;
}

inline fs::path prepare_out_dir(const RunConfig& cfg) {
  const fs::path dir = cfg.out_dir();
  fs::create_directories(dir);
  std::ofstream echo(dir / "config.resolved");
  if (!echo) throw std::runtime_error("cannot write " + (dir / "config.resolved").string());
  echo << cfg.resolved();
  return dir;
}

inline std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  return os;
}

inline DatasetStore load_split(const RunConfig& cfg, Split split) {
  const std::string& dir = cfg.text("dataset.dir");
  if (!dir.empty()) return load_mcpv((fs::path(dir) / (std::string(split_name(split)) + ".mcpv")).string(), split);
  return generate_synthetic_dataset(cfg.dataset(split), split, split == Split::Train ? 0 : cfg.test_first_id());
}

// The model under evaluation: a checkpoint, or the pretraining init for "none".
inline ParameterStore<float> load_model(const RunConfig& cfg, std::ostream& log) {
  const ArchConfig arch = cfg.arch();
  std::string path = cfg.text("eval.checkpoint");
  if (path == "none") {
    log << "evaluating randomly initialised encoder\n";
    return init_params<float>(derive_seed(cfg.train().seed, "init"), arch);
  }
  if (path.empty()) path = (fs::path(cfg.out_dir()) / "final.mcpc").string();
  log << "evaluating " << path << '\n';
  ParameterStore<float> store = load_checkpoint<float>(path);
  check_compatible(store, arch);
  return store;
}

inline int make_dataset(const RunConfig& cfg, std::ostream& out) {
  const fs::path dir = prepare_out_dir(cfg);
  for (Split split : {Split::Train, Split::Test}) {
    const DatasetStore data = load_split(cfg, split);
    const std::string name = split_name(split);
    save_mcpv((dir / (name + ".mcpv")).string(), data);
    auto manifest = open_out(dir / (name + "_manifest.tsv"));
    manifest << "id\tlabel\tframes\n";
    write_manifest(manifest, data);
    out << name << ": " << data.size() << " videos -> " << (dir / (name + ".mcpv")).string() << '\n';
  }
  return 0;
}

inline int pretrain_cmd(const RunConfig& cfg, std::ostream& out, std::ostream& log) {
  const fs::path dir = prepare_out_dir(cfg);
  const DatasetStore train = load_split(cfg, Split::Train);
  auto metrics = open_out(dir / "metrics.csv");
  PretrainOptions opts;
  opts.metrics = &metrics;
  opts.checkpoint_dir = dir.string();
  opts.on_epoch = [&](std::size_t e, const EpochLoss& l) {
    log << "epoch " << e << " mip " << l.mip << " cip " << l.cip << " total " << l.total << '\n';
  };
  try {
    const Checkpoint ck = pretrain(train, cfg.train(), cfg.arch(), opts);
    out << "pretrained " << ck.epoch << " epochs -> " << (dir / "final.mcpc").string() << '\n';
  } catch (const PretrainDiverged& e) {
    save_full_checkpoint((dir / "last_good.mcpc").string(), e.last_good());
    throw;
  }
  return 0;
}

inline int eval_retrieval(const RunConfig& cfg, std::ostream& out, std::ostream& log) {
  const fs::path dir = prepare_out_dir(cfg);
  const ParameterStore<float> store = load_model(cfg, log);
  const ArchConfig arch = cfg.arch();
  const EvalConfig ec = cfg.eval();
  const FeatureBank train = extract_features(load_split(cfg, Split::Train), store, arch, ec);
  const FeatureBank test = extract_features(load_split(cfg, Split::Test), store, arch, ec);
  const RetrievalMetrics m = retrieval_accuracy(test, train);
  auto csv = open_out(dir / "retrieval.csv");
  write_retrieval_csv(csv, m);
  write_retrieval_csv(out, m);
  return 0;
}

inline int eval_classify(const RunConfig& cfg, std::ostream& out, std::ostream& log) {
  const fs::path dir = prepare_out_dir(cfg);
  const bool scratch = cfg.text("eval.checkpoint") == "none";
  std::unique_ptr<ParameterStore<float>> store;
  if (scratch) {
    log << "fine-tuning from scratch\n";
  } else {
    store = std::make_unique<ParameterStore<float>>(load_model(cfg, log));
  }
  const ClassifyResult r = finetune_classify(store.get(), load_split(cfg, Split::Train), load_split(cfg, Split::Test),
                                             cfg.finetune(), cfg.arch());
  char buf[64];
  auto csv = open_out(dir / "classify.csv");
  csv << "init,classify_top1\n";
  std::snprintf(buf, sizeof buf, "%s,%.6f\n", scratch ? "scratch" : "pretrained", r.top1);
  csv << buf;
  out << buf;
  auto losses = open_out(dir / "finetune_loss.csv");
  losses << "epoch,loss\n";
  for (std::size_t e = 0; e < r.epoch_loss.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%zu,%.6g\n", e, r.epoch_loss[e]);
    losses << buf;
  }
  return 0;
}

inline int ablate_cmd(const RunConfig& cfg, std::ostream& out, std::ostream& log) {
  const fs::path dir = prepare_out_dir(cfg);
  const DatasetStore train = load_split(cfg, Split::Train), test = load_split(cfg, Split::Test);
  AblationSetup setup;
  setup.train = &train;
  setup.test = &test;
  setup.base = cfg.train();
  setup.finetune = cfg.finetune();
  setup.arch = cfg.arch();
  setup.eval = cfg.eval();
  setup.seeds.clear();
  for (long long s : cfg.int_list("ablate.seeds")) setup.seeds.push_back(static_cast<std::uint64_t>(s));
  AblationGrid grid;
  grid.table1 = grid.table2 = grid.table3 = false;
  for (long long t : cfg.int_list("ablate.tables")) (t == 1 ? grid.table1 : t == 2 ? grid.table2 : grid.table3) = true;
  ablate(setup, grid, dir.string(), [&](const std::string& line) { log << line << '\n'; });
  out << "tables written to " << dir.string() << '\n';
  return 0;
}

inline int verify_cmd(const Options& o, std::ostream& out) {
  if (!o.fault.empty()) {
    if (o.fault != "conv-grad") throw ConfigError("unknown fault '" + o.fault + "'");
    hooks::corrupt_conv_kernel_grad = true;
  }
  const std::vector<CheckResult> results = run_verification();
  hooks::corrupt_conv_kernel_grad = false;
  bool all = true;
  char buf[512];
  for (const CheckResult& r : results) {
    std::snprintf(buf, sizeof buf, "%-4s  %-56s %7.2fs  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds,
                  r.detail.c_str());
    out << buf;
    all = all && r.passed;
  }
  out << (all ? "all checks passed\n" : "verification FAILED\n");
  return all ? 0 : 1;
}

}  // namespace cli

inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"MCPNet desk-scale self-supervised video pipeline", "mcpnet"};
  app.require_subcommand(1);
  cli::Options o;
  auto common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", o.config, "config file of section.key = value lines");
    sub->add_option("--set", o.sets, "override section.key=value (repeatable)")->allow_extra_args(false);
    sub->add_option("--threads", o.threads, "worker thread cap");
    return sub;
  };
  auto* make = common(app.add_subcommand("make-dataset", "write train.mcpv, test.mcpv and manifests"));
  auto* pre = common(app.add_subcommand("pretrain", "joint MIP/CIP pretraining"));
  auto* ret = common(app.add_subcommand("eval-retrieval", "k-NN retrieval of test videos against train videos"));
  auto* cls = common(app.add_subcommand("eval-classify", "fine-tune a classifier and report test top-1"));
  auto* abl = common(app.add_subcommand("ablate", "ablation tables"));
  auto* ver = app.add_subcommand("verify", "fast invariant suite");
  ver->add_option("-c,--config", o.config, "ignored; accepted for symmetry");
  ver->add_option("--inject-fault", o.fault)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }
  try {
    if (ver->parsed()) return cli::verify_cmd(o, out);
    const RunConfig cfg = cli::load_config(o);
    if (make->parsed()) return cli::make_dataset(cfg, out);
    if (pre->parsed()) return cli::pretrain_cmd(cfg, out, err);
    if (ret->parsed()) return cli::eval_retrieval(cfg, out, err);
    if (cls->parsed()) return cli::eval_classify(cfg, out, err);
    if (abl->parsed()) return cli::ablate_cmd(cfg, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

}  // namespace mcpnet
