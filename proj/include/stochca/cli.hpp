#pragma once

#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stochca/harness.hpp"

namespace stochca::cli {

inline constexpr const char* kOutEnv = "STOCHCA_OUT";

enum ExitCode : int { ok = 0, failure = 1, bad_config = 2, corrupt = 3, usage = 64 };

struct Options {
  std::string config;
  std::string out;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> methods;
  std::optional<double> p, lambda;
  std::vector<double> rates;
  std::optional<std::size_t> steps;
  std::string frozen;
  std::string model;
  std::string task = "target";
  bool verbose = false;
};

inline std::string default_out_dir() {
  const char* env = std::getenv(kOutEnv);
  return env && *env ? env : "runs";
}

inline json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
}

/// Config file, then flag overrides, parsed strictly as one document.
inline RunConfig effective_config(const Options& o, std::string_view command) {
  json j = o.config.empty() ? json::object() : read_json_file(o.config);
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  if (command == "train" || command == "analyze") j["protocol"] = "TL";
  if (command == "dg") j["protocol"] = "DG";
  if (command == "sweep") j["protocol"] = "ablation";
  if (!o.seeds.empty()) j["seeds"] = o.seeds;
  if (!o.methods.empty()) j["methods"] = o.methods;
  if (o.p) j["p"] = *o.p;
  if (o.lambda) j["lambda"] = *o.lambda;
  if (!o.rates.empty()) j["sampling_rates"] = o.rates;
  if (!o.frozen.empty()) j["frozen_checkpoint"] = o.frozen;
  if (o.steps) {
    if (command == "pretrain") j["pretrain"]["steps"] = *o.steps;
    else j["optimizer"]["total_steps"] = *o.steps;
  }
  if (command == "analyze") {
    RunConfig base = parse_run_config(j);
    j["sampling_rates"] = std::vector<double>{base.analysis_rate};
    j["similarity"] = true;
    if (o.methods.empty() && !j.contains("methods")) j["methods"] = {"FT", "StochCA", "L2Reg"};
  }
  return parse_run_config(j);
}

class Runner {
 public:
  Runner(const Options& o, std::string command, std::ostream& out, std::ostream& err)
      : o_(o), command_(std::move(command)), out_(out), err_(err), dir_(o.out.empty() ? default_out_dir() : o.out) {}

  int run() {
    if (command_ == "ckpt-info") return ckpt_info();
    if (command_ == "eval") return eval();
    const RunConfig cfg = effective_config(o_, command_);
    std::filesystem::create_directories(dir_);
    write_file(dir_ / "config.json", run_config_json(cfg).dump(2) + "\n");
    log("config " + (dir_ / "config.json").string());
    if (command_ == "pretrain") return pretrain(cfg);
    const FrozenModel frozen = resolve_frozen(cfg);
    if (command_ == "train") return finish(write_report(run_transfer(cfg, frozen), dir_), cfg, frozen.hash);
    if (command_ == "analyze") {
      const TransferReport r = run_transfer(cfg, frozen);
      const auto sims = mean_similarity(r, cfg.analysis_rate);
      return finish(write_report_files(dir_, report_stem("analysis", cfg), to_json(r), similarity_table(sims),
                                       similarity_csv(sims), r.wall_seconds),
                    cfg, frozen.hash);
    }
    if (command_ == "dg") return finish(write_report(run_dg(cfg, frozen), dir_), cfg, frozen.hash);
    if (command_ == "sweep") return finish(write_report(sweep_p(cfg, frozen), dir_), cfg, frozen.hash);
    throw ConfigError("unknown subcommand " + command_);
  }

 private:
  void log(const std::string& line) {
    log_ += line + "\n";
    if (o_.verbose) err_ << line << "\n";
  }

  int finish(const WrittenReport& w, const RunConfig& cfg, const std::string& frozen_hash) {
    for (const auto& f : w.files) log("wrote " + f.string());
    std::ostringstream head;
    head << kCodeVersion << "\ncommand " << command_ << "\nseeds";
    for (auto s : cfg.seeds) head << " " << s;
    head << "\nfrozen " << frozen_hash << "\n";
    write_file(dir_ / "run.log", head.str() + log_);
    std::ifstream txt(w.files.at(1));
    out_ << txt.rdbuf();
    return ok;
  }

  int pretrain(const RunConfig& cfg) {
    if (!cfg.frozen_checkpoint.empty()) throw ConfigError("pretrain: frozen_checkpoint must be empty");
    const FrozenModel f = resolve_frozen(cfg);
    const auto ckpt = dir_ / "frozen.json";
    save_checkpoint(f.model, ckpt);
    const json report{{"code_version", kCodeVersion},
                      {"protocol", "pretrain"},
                      {"frozen_sha256", f.hash},
                      {"checkpoint", ckpt.filename().string()},
                      {"source_train_accuracy", f.source_train_accuracy.value_or(0.0)},
                      {"steps", cfg.pretrain.steps},
                      {"seed", cfg.pretrain.seed},
                      {"config", run_config_json(cfg)}};
    write_file(dir_ / "pretrain.json", report.dump(2) + "\n");
    log("wrote " + ckpt.string());
    write_file(dir_ / "run.log", std::string(kCodeVersion) + "\ncommand pretrain\nfrozen " + f.hash + "\n" + log_);
    out_ << "frozen " << f.hash << "\nsource train accuracy " << percent(*f.source_train_accuracy) << "%\n"
         << "checkpoint " << ckpt.string() << "\n";
    return ok;
  }

  int ckpt_info() {
    if (o_.model.empty()) throw ConfigError("ckpt-info: --model is required");
    if (!std::filesystem::exists(o_.model)) throw ConfigError("checkpoint '" + o_.model + "' does not exist");
    const ViTModel m = load_checkpoint(o_.model);
    out_ << json{{"config", to_json(m.config)},
                 {"parameter_sha256", parameter_hash(m)},
                 {"feature_extractor_sha256", feature_extractor_hash(m)},
                 {"parameters", m.parameters().size()}}
                .dump(2)
         << "\n";
    return ok;
  }

  // Accuracy of a saved model on the source task's samples or the target test split.
  int eval() {
    if (o_.model.empty()) throw ConfigError("eval: --model is required");
    if (!std::filesystem::exists(o_.model)) throw ConfigError("checkpoint '" + o_.model + "' does not exist");
    if (o_.task != "source" && o_.task != "target") throw ConfigError("eval: --task must be source or target");
    const RunConfig cfg = effective_config(o_, "eval");
    const ViTModel m = load_checkpoint(o_.model);
    const LabeledDataset ds = o_.task == "source" ? source_dataset(cfg) : target_dataset(cfg);
    if (m.config.num_classes != ds.num_classes)
      throw ConfigError("eval: model has " + std::to_string(m.config.num_classes) + " classes, task has " +
                        std::to_string(ds.num_classes));
    const SampleSet set = o_.task == "source" ? SampleSet::of(ds, {Split::train}, Phase::test)
                                              : SampleSet::of(ds, {Split::test}, Phase::test);
    const double acc = accuracy(m, set);
    const json report{{"code_version", kCodeVersion},      {"protocol", "eval"},
                      {"model_sha256", parameter_hash(m)}, {"task", o_.task},
                      {"samples", set.size()},             {"accuracy", acc}};
    std::filesystem::create_directories(dir_);
    write_file(dir_ / "eval.json", report.dump(2) + "\n");
    out_ << o_.task << " accuracy " << percent(acc) << "% on " << set.size() << " samples\n";
    return ok;
  }

  static std::string similarity_table(const std::map<BaselineKind, SimilarityReport>& sims) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    os << "Cosine similarity to the frozen model (layer average)\n";
    os << std::left << std::setw(14) << "Method" << std::setw(10) << "Q" << std::setw(10) << "K" << "V\n";
    for (const auto& [k, s] : sims)
      os << std::setw(14) << method_name(k) << std::setw(10) << s.q_avg << std::setw(10) << s.k_avg << s.v_avg << "\n";
    return os.str();
  }

  const Options& o_;
  std::string command_;
  std::ostream& out_;
  std::ostream& err_;
  std::filesystem::path dir_;
  std::string log_;
};

inline void add_run_options(CLI::App* sub, Options& o) {
  sub->add_option("-c,--config", o.config, "JSON run config");
  sub->add_option("-o,--out", o.out, std::string("output directory (default $") + kOutEnv + " or ./runs)");
  sub->add_option("--seed", o.seeds, "seed; repeat for several")->take_all();
  sub->add_flag("-v,--verbose", o.verbose);
}

inline void add_training_options(CLI::App* sub, Options& o) {
  sub->add_option("--method", o.methods, "FT, StochCA, L2Reg, FTCA, FTCA_onlySA; repeatable")->take_all();
  sub->add_option("--p", o.p, "fixed cross-attention probability (skips selection)");
  sub->add_option("--lambda", o.lambda, "fixed L2Reg weight (skips selection)");
  sub->add_option("--rate", o.rates, "sampling rate; repeatable")->take_all();
  sub->add_option("--steps", o.steps, "optimizer steps");
  sub->add_option("--frozen", o.frozen, "frozen model checkpoint (default: pretrain in process)");
}

/// Entry point; returns the process exit code.
inline int parse_and_dispatch(int argc, const char* const* argv, std::ostream& out = std::cout,
                              std::ostream& err = std::cerr) {
  CLI::App app{"Stochastic cross-attention fine-tuning for small vision transformers"};
  app.require_subcommand(1);
  Options o;

  auto* pre = app.add_subcommand("pretrain", "pretrain the frozen model on the source task");
  add_run_options(pre, o);
  pre->add_option("--steps", o.steps, "pretraining steps");

  for (auto [name, help] : {std::pair{"train", "transfer-learning grid over methods, rates and seeds"},
                            std::pair{"sweep", "cross-attention probability sweep"},
                            std::pair{"dg", "leave-one-domain-out domain generalization"},
                            std::pair{"analyze", "Q/K/V similarity of fine-tuned models to the frozen model"}}) {
    auto* sub = app.add_subcommand(name, help);
    add_run_options(sub, o);
    add_training_options(sub, o);
  }

  auto* ev = app.add_subcommand("eval", "accuracy of a saved checkpoint");
  add_run_options(ev, o);
  ev->add_option("--model", o.model, "checkpoint manifest")->required();
  ev->add_option("--task", o.task, "source or target");

  auto* info = app.add_subcommand("ckpt-info", "verify a checkpoint and print its hash");
  info->add_option("--model", o.model, "checkpoint manifest")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? ok : usage;
  }

  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return Runner(o, command, out, err).run();
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return bad_config;
  } catch (const CorruptionError& e) {
    err << "error: " << e.what() << "\n";
    return corrupt;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return failure;
  }
}

}  // namespace stochca::cli
