#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "stochca/analysis.hpp"
#include "stochca/config.hpp"

namespace stochca {

/// Mean and sample standard deviation (n - 1); std is 0 for a single value.
struct MeanStd {
  double mean = 0.0;
  double std = 0.0;
};

inline MeanStd mean_std(const std::vector<double>& xs) {
  if (xs.empty()) return {};
  double s = 0.0;
  for (double x : xs) s += x;
  MeanStd r;
  r.mean = s / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return r;
}

/// The frozen reference model of a run.
struct FrozenModel {
  ViTModel model;
  std::string hash;
  std::optional<double> source_train_accuracy;  // set when pretrained in process
};

inline LabeledDataset source_dataset(const RunConfig& cfg) {
  return generate_domain(cfg.data.source, cfg.data.source_per_class, cfg.data.seed);
}

/// Loads cfg.frozen_checkpoint, or pretrains on the source task when none is named.
inline FrozenModel resolve_frozen(const RunConfig& cfg) {
  FrozenModel f;
  if (!cfg.frozen_checkpoint.empty()) {
    if (!std::filesystem::exists(cfg.frozen_checkpoint))
      throw ConfigError("frozen checkpoint '" + cfg.frozen_checkpoint + "' does not exist");
    f.model = load_checkpoint(cfg.frozen_checkpoint);
    ViTConfig want = cfg.model;
    if (!f.model.config.same_architecture(want))
      throw ConfigError("frozen checkpoint '" + cfg.frozen_checkpoint + "' does not match the configured model");
    f.model.set_frozen(true);
  } else {
    ViTConfig mc = cfg.model;
    mc.num_classes = cfg.data.source.classes.size();
    const LabeledDataset src = source_dataset(cfg);
    f.model = pretrain_toy(mc, src, cfg.pretrain.steps, cfg.pretrain.seed, cfg.pretrain.optimizer);
    f.source_train_accuracy = accuracy(f.model, SampleSet::of(src, {Split::train}, Phase::train));
  }
  f.hash = parameter_hash(f.model);
  return f;
}

/// Target pool split into train / val / test; identical for every seed of a run.
inline LabeledDataset target_dataset(const RunConfig& cfg) {
  LabeledDataset ds = generate_domain(cfg.data.target, cfg.data.target_per_class, cfg.data.seed + 1);
  stratified_split(ds, Split::train, Split::test, cfg.data.test_fraction, cfg.data.seed);
  stratified_split(ds, Split::train, Split::val, cfg.val_fraction, cfg.data.seed);
  return ds;
}

/// Method hyperparameter value tried during selection.
struct Candidate {
  double value = 0.0;
  double val_accuracy = 0.0;
  std::vector<std::pair<std::size_t, double>> curve;  // (step, val accuracy)
};

struct SeedResult {
  std::uint64_t seed = 0;
  double test_accuracy = 0.0;
  std::optional<double> selected;  // p or lambda
  std::vector<Candidate> candidates;
  std::optional<SimilarityReport> similarity;
};

struct CellResult {
  BaselineKind method = BaselineKind::FT;
  double rate = 1.0;
  std::vector<SeedResult> seeds;
  MeanStd test;
};

/// Name of the tuned hyperparameter of a method, if any.
inline std::optional<std::string> hyperparameter_name(BaselineKind k) {
  if (k == BaselineKind::StochCA) return "p";
  if (k == BaselineKind::L2Reg) return "lambda";
  return std::nullopt;
}

/// Values to select from; a single fixed value means no selection phase.
inline std::vector<double> candidate_values(const RunConfig& cfg, BaselineKind k) {
  std::vector<double> v;
  if (k == BaselineKind::StochCA) v = cfg.p ? std::vector<double>{*cfg.p} : cfg.p_grid;
  else if (k == BaselineKind::L2Reg) v = cfg.lambda ? std::vector<double>{*cfg.lambda} : cfg.lambda_grid;
  std::sort(v.begin(), v.end());
  v.erase(std::unique(v.begin(), v.end()), v.end());
  return v;
}

inline TrainSpec train_spec(const RunConfig& cfg, BaselineKind k, double value, std::uint64_t seed) {
  TrainSpec s;
  s.method = training_method(k);
  if (k == BaselineKind::StochCA) s.p = value;
  if (k == BaselineKind::L2Reg) s.lambda = value;
  s.optimizer = cfg.optimizer;
  s.gate_mode = cfg.gate_mode;
  s.ftca_loss = cfg.ftca_loss;
  s.seed = seed;
  return s;
}

/// Fresh target: frozen weights with a new classifier for `classes` labels.
inline ViTModel fresh_target(const ViTModel& frozen, std::size_t classes, std::uint64_t seed) {
  return trainable_copy(replace_classifier(frozen, classes, seed));
}

/// Largest validation accuracy wins; ties go to the first (smallest) value.
inline std::size_t select_best(const std::vector<Candidate>& c) {
  if (c.empty()) throw ContractError("select_best: no candidates");
  std::size_t best = 0;
  for (std::size_t i = 1; i < c.size(); ++i)
    if (c[i].val_accuracy > c[best].val_accuracy) best = i;
  return best;
}

/// Data of one (rate, seed) or (fold, seed) unit, with access accounting.
struct UnitData {
  SampleSet train, val, trainval, test;
  std::size_t classes = 0;
};

/// Trains one candidate on the train split and scores it on validation.
inline Candidate evaluate_candidate(const RunConfig& cfg, BaselineKind k, double value, const ViTModel& frozen,
                                    const UnitData& d, std::uint64_t seed) {
  Candidate c;
  c.value = value;
  ViTModel model = fresh_target(frozen, d.classes, seed);
  std::function<void(std::size_t, const ViTModel&)> hook;
  if (cfg.validation_every > 0)
    hook = [&](std::size_t step, const ViTModel& m) {
      if (step % cfg.validation_every == 0 && step != cfg.optimizer.total_steps)
        c.curve.emplace_back(step, accuracy(k, m, frozen, d.val));
    };
  train(model, frozen, d.train, train_spec(cfg, k, value, seed), hook);
  c.val_accuracy = accuracy(k, model, frozen, d.val);
  c.curve.emplace_back(cfg.optimizer.total_steps, c.val_accuracy);
  return c;
}

/**
 * Selection on validation (when the method has more than one candidate),
 * then one retrain on train+val. Returns the final model.
 */
inline ViTModel fit_unit(const RunConfig& cfg, BaselineKind k, const ViTModel& frozen, const UnitData& d,
                         std::uint64_t seed, SeedResult& out) {
  out.seed = seed;
  const auto values = candidate_values(cfg, k);
  double chosen = 0.0;
  if (values.size() > 1) {
    for (double v : values) out.candidates.push_back(evaluate_candidate(cfg, k, v, frozen, d, seed));
    chosen = out.candidates[select_best(out.candidates)].value;
  } else if (!values.empty()) {
    chosen = values.front();
  }
  if (hyperparameter_name(k)) out.selected = chosen;
  ViTModel model = fresh_target(frozen, d.classes, seed);
  train(model, frozen, d.trainval, train_spec(cfg, k, chosen, seed));
  return model;
}

/// fit_unit followed by a test evaluation.
inline ViTModel run_unit(const RunConfig& cfg, BaselineKind k, const ViTModel& frozen, const UnitData& d,
                         std::uint64_t seed, SeedResult& out) {
  ViTModel model = fit_unit(cfg, k, frozen, d, seed, out);
  out.test_accuracy = accuracy(k, model, frozen, d.test);
  return model;
}

inline ImageBatch images_of(const SampleSet& s) {
  ImageBatch out;
  for (const Sample* x : s.samples()) out.push_back(&x->image);
  return out;
}

struct TransferReport {
  RunConfig config;
  std::string frozen_hash;
  std::optional<double> source_train_accuracy;
  std::vector<CellResult> cells;  // method-major, then rate
  std::map<BaselineKind, MethodCost> costs;
  std::size_t cost_batch = 0;
  AccessLog access;
  double wall_seconds = 0.0;

  const CellResult* cell(BaselineKind k, double rate) const {
    for (const auto& c : cells)
      if (c.method == k && c.rate == rate) return &c;
    return nullptr;
  }
};

/**
 * Transfer-learning protocol: for every sampling rate, seed and method,
 * subsample the target train split, select the method hyperparameter on
 * validation, retrain on train+val and report test accuracy.
 */
inline TransferReport run_transfer(const RunConfig& cfg, const FrozenModel& frozen) {
  const auto t0 = std::chrono::steady_clock::now();
  TransferReport rep;
  rep.config = cfg;
  rep.frozen_hash = frozen.hash;
  rep.source_train_accuracy = frozen.source_train_accuracy;
  if (!frozen.model.frozen()) throw ContractError("run_transfer: the reference model is not frozen");
  const LabeledDataset base = target_dataset(cfg);
  const std::size_t classes = base.num_classes;

  std::map<std::pair<std::size_t, std::uint64_t>, ViTModel> ftca_models;  // (rate index, seed)
  for (BaselineKind k : cfg.methods)
    for (std::size_t ri = 0; ri < cfg.sampling_rates.size(); ++ri) {
      const double rate = cfg.sampling_rates[ri];
      CellResult cell;
      cell.method = k;
      cell.rate = rate;
      std::vector<double> accs;
      for (std::uint64_t seed : cfg.seeds) {
        const LabeledDataset ds = subsample(base, rate, seed);
        UnitData d;
        d.classes = classes;
        d.train = SampleSet::of(ds, {Split::train}, Phase::train, &rep.access);
        d.val = SampleSet::of(ds, {Split::val}, Phase::select, &rep.access);
        d.trainval = SampleSet::of(ds, {Split::train, Split::val}, Phase::retrain, &rep.access);
        d.test = SampleSet::of(ds, {Split::test}, Phase::test, &rep.access);
        SeedResult r;
        const bool ftca_family = training_method(k) == BaselineKind::FTCA;
        auto cached = ftca_models.find({ri, seed});
        const ViTModel* model = nullptr;
        std::optional<ViTModel> trained;
        if (ftca_family && cached != ftca_models.end()) {
          r.seed = seed;
          model = &cached->second;
          r.test_accuracy = accuracy(k, *model, frozen.model, d.test);
        } else {
          trained = run_unit(cfg, k, frozen.model, d, seed, r);
          model = &*trained;
        }
        if (cfg.similarity) r.similarity = cosine_similarity_report(*model, frozen.model, images_of(d.test));
        if (ftca_family && cached == ftca_models.end()) ftca_models.emplace(std::pair{ri, seed}, std::move(*trained));
        accs.push_back(r.test_accuracy);
        cell.seeds.push_back(std::move(r));
      }
      cell.test = mean_std(accs);
      rep.cells.push_back(std::move(cell));
    }

  // Instrumented cost of one training step and one inference pass per method.
  const SampleSet train_all = SampleSet::of(base, {Split::train}, Phase::train);
  std::vector<std::size_t> idx(std::min(cfg.optimizer.batch_size, train_all.size()));
  std::iota(idx.begin(), idx.end(), 0);
  const Batch batch = train_all.batch(idx);
  rep.cost_batch = idx.size();
  const ViTModel probe = fresh_target(frozen.model, classes, 0);
  for (BaselineKind k : cfg.methods)
    rep.costs[k] = measure_cost(k, probe, frozen.model, batch, cfg.p.value_or(cfg.p_grid.empty() ? 0.5 : cfg.p_grid.front()),
                                cfg.lambda.value_or(cfg.lambda_grid.empty() ? 1.0 : cfg.lambda_grid.front()), 0);
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

inline TransferReport run_transfer(const RunConfig& cfg) { return run_transfer(cfg, resolve_frozen(cfg)); }

/// Seed-averaged similarity per method at `rate`, for methods that have one.
inline std::map<BaselineKind, SimilarityReport> mean_similarity(const TransferReport& rep, double rate) {
  std::map<BaselineKind, SimilarityReport> out;
  for (const auto& c : rep.cells) {
    if (c.rate != rate || c.seeds.empty() || !c.seeds.front().similarity) continue;
    SimilarityReport m = *c.seeds.front().similarity;
    const std::size_t L = m.q.size();
    std::fill(m.q.begin(), m.q.end(), 0.0);
    std::fill(m.k.begin(), m.k.end(), 0.0);
    std::fill(m.v.begin(), m.v.end(), 0.0);
    m.zero_norm_vectors = 0;
    m.images = 0;
    for (const auto& s : c.seeds) {
      for (std::size_t l = 0; l < L; ++l) {
        m.q[l] += s.similarity->q[l];
        m.k[l] += s.similarity->k[l];
        m.v[l] += s.similarity->v[l];
      }
      m.zero_norm_vectors += s.similarity->zero_norm_vectors;
      m.images += s.similarity->images;
    }
    const double n = static_cast<double>(c.seeds.size());
    for (std::size_t l = 0; l < L; ++l) {
      m.q[l] /= n;
      m.k[l] /= n;
      m.v[l] /= n;
    }
    m.q_avg = detail::mean(m.q);
    m.k_avg = detail::mean(m.k);
    m.v_avg = detail::mean(m.v);
    out[c.method] = m;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Domain generalization

struct FoldResult {
  int held_out = 0;
  std::string name;
  std::vector<SeedResult> seeds;
  MeanStd test;
  bool isolated = true;  // held-out domain never read outside the test phase
};

struct DGMethodResult {
  BaselineKind method = BaselineKind::FT;
  std::vector<FoldResult> folds;
  double average = 0.0;
};

struct DGReport {
  RunConfig config;
  std::string frozen_hash;
  std::vector<DGMethodResult> methods;
  std::vector<AccessLog> access;  // one per fold
  double wall_seconds = 0.0;
};

inline std::uint64_t domain_seed(const RunConfig& cfg, const DomainSpec& d) {
  return cfg.data.seed + 101 * static_cast<std::uint64_t>(d.domain_id + 1);
}

/**
 * Leave-one-domain-out: for each domain, train on the pooled train splits of
 * the others, select on their pooled validation splits, retrain on
 * train+val, and test on the held-out domain.
 */
inline DGReport run_dg(const RunConfig& cfg, const FrozenModel& frozen) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto& domains = cfg.data.domains;
  if (domains.size() < 3)
    throw ContractError("run_dg: need at least 2 source domains besides the held-out one, got " +
                        std::to_string(domains.size()) + " domains in total");
  DGReport rep;
  rep.config = cfg;
  rep.frozen_hash = frozen.hash;
  rep.access.resize(domains.size());
  for (BaselineKind k : cfg.methods) rep.methods.push_back({k, {}, 0.0});

  for (std::size_t h = 0; h < domains.size(); ++h) {
    AccessLog& log = rep.access[h];
    std::vector<LabeledDataset> sources;
    for (std::size_t i = 0; i < domains.size(); ++i) {
      if (i == h) continue;
      LabeledDataset ds = generate_domain(domains[i], cfg.data.domain_per_class, domain_seed(cfg, domains[i]));
      stratified_split(ds, Split::train, Split::val, cfg.dg_val_fraction, domain_seed(cfg, domains[i]));
      sources.push_back(std::move(ds));
    }
    auto pooled = [&](std::initializer_list<Split> splits, Phase phase) {
      std::vector<const Sample*> all;
      for (const auto& ds : sources)
        for (const Sample& s : ds.samples)
          if (std::find(splits.begin(), splits.end(), s.split) != splits.end()) all.push_back(&s);
      return SampleSet(std::move(all), phase, &log);
    };
    UnitData d;
    d.classes = domains.front().classes.size();
    d.train = pooled({Split::train}, Phase::train);
    d.val = pooled({Split::val}, Phase::select);
    d.trainval = pooled({Split::train, Split::val}, Phase::retrain);

    for (std::size_t mi = 0; mi < cfg.methods.size(); ++mi) {
      const BaselineKind k = cfg.methods[mi];
      FoldResult fold;
      fold.held_out = domains[h].domain_id;
      fold.name = domains[h].name;
      std::vector<double> accs;
      std::vector<ViTModel> models;
      for (std::uint64_t seed : cfg.seeds) {
        SeedResult r;
        models.push_back(fit_unit(cfg, k, frozen.model, d, seed, r));
        fold.seeds.push_back(std::move(r));
      }
      // The held-out domain is rendered only now, after every training and selection decision.
      const LabeledDataset unseen =
          generate_domain(domains[h], cfg.data.domain_per_class, domain_seed(cfg, domains[h]));
      const SampleSet test = SampleSet::of(unseen, {Split::train, Split::val, Split::test}, Phase::test, &log);
      for (std::size_t si = 0; si < models.size(); ++si) {
        fold.seeds[si].test_accuracy = accuracy(k, models[si], frozen.model, test);
        accs.push_back(fold.seeds[si].test_accuracy);
      }
      fold.test = mean_std(accs);
      rep.methods[mi].folds.push_back(std::move(fold));
    }
  }
  for (auto& m : rep.methods) {
    double s = 0.0;
    for (auto& f : m.folds) {
      const int id = f.held_out;
      const auto& log = rep.access[&f - m.folds.data()];
      f.isolated = log.count(id, Phase::train) == 0 && log.count(id, Phase::select) == 0 &&
                   log.count(id, Phase::retrain) == 0;
      s += f.test.mean;
    }
    m.average = s / static_cast<double>(m.folds.size());
  }
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

inline DGReport run_dg(const RunConfig& cfg) { return run_dg(cfg, resolve_frozen(cfg)); }

// ---------------------------------------------------------------------------
// Probability sweep

struct SweepRow {
  std::string label;
  double p = 0.0;
  std::vector<double> val, test;  // per seed
  MeanStd val_stats, test_stats;
};

struct SweepTable {
  double rate = 1.0;
  std::vector<SweepRow> rows;  // first row is the p = 0 (FT) row
  double selected_p = 0.0;
};

struct SweepReport {
  RunConfig config;
  std::string frozen_hash;
  std::vector<SweepTable> tables;  // one per sampling rate
  double wall_seconds = 0.0;
};

inline std::string p_label(double p) {
  std::ostringstream os;
  os << p;
  return os.str();
}

/**
 * One row per p: train on train for validation accuracy, retrain on
 * train+val for test accuracy. The selected p maximizes mean validation
 * accuracy over the grid, smallest p on ties.
 */
inline SweepReport sweep_p(const RunConfig& cfg, const FrozenModel& frozen, std::vector<double> grid) {
  if (std::find(cfg.methods.begin(), cfg.methods.end(), BaselineKind::StochCA) == cfg.methods.end())
    throw ContractError("sweep_p: the run's method must be StochCA");
  if (grid.empty()) throw ContractError("sweep_p: empty grid");
  const auto t0 = std::chrono::steady_clock::now();
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  SweepReport rep;
  rep.config = cfg;
  rep.frozen_hash = frozen.hash;
  const LabeledDataset base = target_dataset(cfg);
  RunConfig fixed = cfg;
  for (double rate : cfg.sampling_rates) {
    SweepTable table;
    table.rate = rate;
    table.rows.push_back({"No (= FT)", 0.0, {}, {}, {}, {}});
    for (double p : grid)
      if (p > 0.0) table.rows.push_back({p_label(p), p, {}, {}, {}, {}});
    for (std::uint64_t seed : cfg.seeds) {
      const LabeledDataset ds = subsample(base, rate, seed);
      UnitData d;
      d.classes = base.num_classes;
      d.train = SampleSet::of(ds, {Split::train}, Phase::train);
      d.val = SampleSet::of(ds, {Split::val}, Phase::select);
      d.trainval = SampleSet::of(ds, {Split::train, Split::val}, Phase::retrain);
      d.test = SampleSet::of(ds, {Split::test}, Phase::test);
      for (auto& row : table.rows) {
        const BaselineKind k = row.p == 0.0 ? BaselineKind::FT : BaselineKind::StochCA;
        row.val.push_back(evaluate_candidate(cfg, k, row.p, frozen.model, d, seed).val_accuracy);
        fixed.p = row.p;
        SeedResult r;
        run_unit(fixed, k, frozen.model, d, seed, r);
        row.test.push_back(r.test_accuracy);
      }
    }
    std::size_t best = 0;
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
      auto& row = table.rows[i];
      row.val_stats = mean_std(row.val);
      row.test_stats = mean_std(row.test);
      if (row.p > 0.0 && (best == 0 || row.val_stats.mean > table.rows[best].val_stats.mean)) best = i;
    }
    table.selected_p = best == 0 ? 0.0 : table.rows[best].p;
    rep.tables.push_back(std::move(table));
  }
  rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

inline SweepReport sweep_p(const RunConfig& cfg, const FrozenModel& frozen) { return sweep_p(cfg, frozen, cfg.p_grid); }

// ---------------------------------------------------------------------------
// Report serialization

inline std::string percent(double x) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * x;
  return os.str();
}

inline std::string rate_label(double r) {
  std::ostringstream os;
  os << std::llround(100.0 * r) << "%";
  return os.str();
}

inline json similarity_json(const SimilarityReport& s) {
  return json{{"q", s.q},         {"k", s.k},         {"v", s.v},
              {"q_avg", s.q_avg}, {"k_avg", s.k_avg}, {"v_avg", s.v_avg},
              {"zero_norm_vectors", s.zero_norm_vectors}, {"images", s.images}};
}

inline json counts_json(const OpCounts& c) {
  return json{{"target_attention", c.target_attention},
              {"frozen_attention", c.frozen_attention},
              {"frozen_forwards", c.frozen_forwards}};
}

inline json seed_json(const SeedResult& r) {
  json j{{"seed", r.seed}, {"test_accuracy", r.test_accuracy}};
  if (r.selected) j["selected"] = *r.selected;
  if (!r.candidates.empty()) {
    json c = json::array();
    for (const auto& x : r.candidates) {
      json cj{{"value", x.value}, {"val_accuracy", x.val_accuracy}};
      if (x.curve.size() > 1) {
        json curve = json::array();
        for (auto [step, acc] : x.curve) curve.push_back({{"step", step}, {"val_accuracy", acc}});
        cj["curve"] = curve;
      }
      c.push_back(cj);
    }
    j["candidates"] = c;
  }
  if (r.similarity) j["similarity"] = similarity_json(*r.similarity);
  return j;
}

inline json report_header(const char* protocol, const RunConfig& cfg, const std::string& frozen_hash) {
  return json{{"format", "stochca-run-report"},
              {"version", 1},
              {"code_version", kCodeVersion},
              {"protocol", protocol},
              {"frozen_hash", frozen_hash},
              {"std", "sample standard deviation over seeds (n - 1)"},
              {"config", run_config_json(cfg)}};
}

inline json to_json(const TransferReport& r) {
  json j = report_header("TL", r.config, r.frozen_hash);
  if (r.source_train_accuracy) j["source_train_accuracy"] = *r.source_train_accuracy;
  j["similarity_aggregation"] =
      "per-token cosine of concatenated-head Q/K/V rows, pure self-attention, averaged over tokens then test images";
  json cells = json::array();
  for (const auto& c : r.cells) {
    json seeds = json::array();
    for (const auto& s : c.seeds) seeds.push_back(seed_json(s));
    json cj{{"method", method_name(c.method)}, {"rate", c.rate}, {"mean", c.test.mean}, {"std", c.test.std}};
    if (auto h = hyperparameter_name(c.method)) cj["hyperparameter"] = *h;
    cj["seeds"] = seeds;
    cells.push_back(cj);
  }
  j["results"] = cells;
  json costs = json::object();
  for (const auto& [k, c] : r.costs)
    costs[std::string(method_name(k))] = {{"train_step", counts_json(c.train_step)}, {"inference", counts_json(c.inference)}};
  j["op_counts"] = {{"batch", r.cost_batch}, {"methods", costs}};
  json access = json::array();
  for (const auto& [key, n] : r.access.entries())
    access.push_back({{"domain", key.first}, {"phase", phase_name(key.second)}, {"samples", n}});
  j["access"] = access;
  return j;
}

/// Table 1 layout: one row per method, one "mean ± std" column per rate; '*' marks the best mean.
inline std::string transfer_table(const TransferReport& r) {
  std::ostringstream os;
  os << "Transfer learning: test accuracy (%), mean ± std over " << r.config.seeds.size() << " seeds\n";
  os << std::left << std::setw(14) << "Method";
  for (double rate : r.config.sampling_rates) os << std::setw(18) << rate_label(rate);
  os << "\n";
  std::map<double, double> best;
  for (const auto& c : r.cells) best[c.rate] = std::max(best.count(c.rate) ? best[c.rate] : -1.0, c.test.mean);
  for (BaselineKind k : r.config.methods) {
    os << std::setw(14) << method_name(k);
    for (double rate : r.config.sampling_rates) {
      const CellResult* c = r.cell(k, rate);
      std::string s = percent(c->test.mean) + " ± " + percent(c->test.std) + (c->test.mean == best[rate] ? "*" : "");
      // setw counts bytes; '±' is two.
      os << s << std::string(s.size() < 19 ? 19 - s.size() : 1, ' ');
    }
    os << "\n";
  }
  return os.str();
}

inline std::string transfer_csv(const TransferReport& r) {
  std::ostringstream os;
  os << "method,rate,mean,std,seeds\n";
  for (const auto& c : r.cells)
    os << method_name(c.method) << "," << c.rate << "," << c.test.mean << "," << c.test.std << "," << c.seeds.size()
       << "\n";
  return os.str();
}

/// Table 5 layout: rows are layers then Avg.; columns are Q, K, V for each method.
inline std::string similarity_csv(const std::map<BaselineKind, SimilarityReport>& sims) {
  std::vector<BaselineKind> order;
  for (BaselineKind k : {BaselineKind::FT, BaselineKind::StochCA, BaselineKind::L2Reg, BaselineKind::FTCA,
                         BaselineKind::FTCA_onlySA})
    if (sims.count(k)) order.push_back(k);
  if (order.empty()) return "";
  std::ostringstream os;
  os << std::setprecision(6) << std::fixed;
  os << "layer";
  for (const char* q : {"Q", "K", "V"})
    for (BaselineKind k : order) os << "," << q << "_" << method_name(k);
  os << "\n";
  const std::size_t L = sims.at(order.front()).q.size();
  for (std::size_t l = 0; l <= L; ++l) {
    os << (l < L ? std::to_string(l + 1) : "Avg.");
    for (int which = 0; which < 3; ++which)
      for (BaselineKind k : order) {
        const auto& s = sims.at(k);
        const auto& col = which == 0 ? s.q : which == 1 ? s.k : s.v;
        const double avg = which == 0 ? s.q_avg : which == 1 ? s.k_avg : s.v_avg;
        os << "," << (l < L ? col[l] : avg);
      }
    os << "\n";
  }
  return os.str();
}

inline json to_json(const DGReport& r) {
  json j = report_header("DG", r.config, r.frozen_hash);
  json methods = json::array();
  for (const auto& m : r.methods) {
    json folds = json::array();
    for (const auto& f : m.folds) {
      json seeds = json::array();
      for (const auto& s : f.seeds) seeds.push_back(seed_json(s));
      folds.push_back({{"held_out", f.held_out},
                       {"name", f.name},
                       {"mean", f.test.mean},
                       {"std", f.test.std},
                       {"isolated", f.isolated},
                       {"seeds", seeds}});
    }
    methods.push_back({{"method", method_name(m.method)}, {"domains", folds}, {"avg", m.average}});
  }
  j["results"] = methods;
  json access = json::array();
  for (std::size_t h = 0; h < r.access.size(); ++h) {
    json entries = json::array();
    for (const auto& [key, n] : r.access[h].entries())
      entries.push_back({{"domain", key.first}, {"phase", phase_name(key.second)}, {"samples", n}});
    access.push_back({{"held_out", r.config.data.domains[h].domain_id}, {"reads", entries}});
  }
  j["access"] = access;
  return j;
}

/// Per-domain columns plus Avg., as in the DG tables.
inline std::string dg_table(const DGReport& r) {
  std::ostringstream os;
  os << "Domain generalization: held-out domain accuracy (%), mean ± std over " << r.config.seeds.size()
     << " seeds\n";
  os << std::left << std::setw(14) << "Method";
  for (const auto& d : r.config.data.domains) os << std::setw(18) << d.name;
  os << "Avg.\n";
  for (const auto& m : r.methods) {
    os << std::setw(14) << method_name(m.method);
    for (const auto& f : m.folds) {
      const std::string s = percent(f.test.mean) + " ± " + percent(f.test.std);
      os << s << std::string(s.size() < 19 ? 19 - s.size() : 1, ' ');
    }
    os << percent(m.average) << "\n";
  }
  return os.str();
}

inline std::string dg_csv(const DGReport& r) {
  std::ostringstream os;
  os << "method";
  for (const auto& d : r.config.data.domains) os << "," << d.name;
  os << ",Avg.\n";
  for (const auto& m : r.methods) {
    os << method_name(m.method);
    for (const auto& f : m.folds) os << "," << f.test.mean;
    os << "," << m.average << "\n";
  }
  return os.str();
}

inline json to_json(const SweepReport& r) {
  json j = report_header("ablation", r.config, r.frozen_hash);
  json tables = json::array();
  for (const auto& t : r.tables) {
    json rows = json::array();
    for (const auto& row : t.rows)
      rows.push_back({{"label", row.label},
                      {"p", row.p},
                      {"val_mean", row.val_stats.mean},
                      {"test_mean", row.test_stats.mean},
                      {"test_std", row.test_stats.std},
                      {"val", row.val},
                      {"test", row.test},
                      {"selected", row.p == t.selected_p && row.p > 0.0}});
    tables.push_back({{"rate", t.rate}, {"selected_p", t.selected_p}, {"rows", rows}});
  }
  j["results"] = tables;
  return j;
}

inline std::string sweep_table(const SweepReport& r) {
  std::ostringstream os;
  for (const auto& t : r.tables) {
    os << "Cross-attention probability sweep at " << rate_label(t.rate) << " (mean over " << r.config.seeds.size()
       << " seeds; '<' marks the validation-selected p)\n";
    os << std::left << std::setw(14) << "p" << std::setw(12) << "val (%)" << "test (%)\n";
    for (const auto& row : t.rows) {
      const std::string s = percent(row.test_stats.mean) + " ± " + percent(row.test_stats.std);
      os << std::setw(14) << row.label << std::setw(12) << percent(row.val_stats.mean) << s
         << (row.p > 0.0 && row.p == t.selected_p ? " <" : "") << "\n";
    }
  }
  return os.str();
}

inline std::string sweep_csv(const SweepReport& r) {
  std::ostringstream os;
  os << "rate,label,p,val_mean,test_mean,test_std,selected\n";
  for (const auto& t : r.tables)
    for (const auto& row : t.rows)
      os << t.rate << "," << row.label << "," << row.p << "," << row.val_stats.mean << "," << row.test_stats.mean
         << "," << row.test_stats.std << "," << (row.p > 0.0 && row.p == t.selected_p ? 1 : 0) << "\n";
  return os.str();
}

/// File stem encoding protocol, methods and seeds.
inline std::string report_stem(std::string_view protocol, const RunConfig& cfg) {
  std::string s(protocol);
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  s += "_";
  for (std::size_t i = 0; i < cfg.methods.size(); ++i) s += (i ? "-" : "") + std::string(method_name(cfg.methods[i]));
  s += "_seeds";
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) s += (i ? "-" : "") + std::to_string(cfg.seeds[i]);
  return s;
}

/// Writes through a temporary file so a crash never leaves a partial report.
inline void write_file(const std::filesystem::path& path, const std::string& content) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out << content;
    if (!out) throw ConfigError("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

struct WrittenReport {
  std::vector<std::filesystem::path> files;  // deterministic files
  std::filesystem::path timing;
};

inline WrittenReport write_report_files(const std::filesystem::path& dir, const std::string& stem, const json& j,
                                        const std::string& text, const std::string& csv, double wall_seconds,
                                        const std::vector<std::pair<std::string, std::string>>& extra = {}) {
  std::filesystem::create_directories(dir);
  WrittenReport w;
  auto put = [&](const std::string& name, const std::string& content) {
    write_file(dir / name, content);
    w.files.push_back(dir / name);
  };
  put(stem + ".json", j.dump(2) + "\n");
  put(stem + ".txt", text);
  put(stem + ".csv", csv);
  for (const auto& [suffix, content] : extra) put(stem + suffix, content);
  w.timing = dir / (stem + ".timing.json");
  write_file(w.timing, json{{"wall_seconds", wall_seconds}}.dump(2) + "\n");
  return w;
}

inline WrittenReport write_report(const TransferReport& r, const std::filesystem::path& dir) {
  std::vector<std::pair<std::string, std::string>> extra;
  const auto sims = mean_similarity(r, r.config.analysis_rate);
  if (!sims.empty()) extra.emplace_back(".similarity.csv", similarity_csv(sims));
  return write_report_files(dir, report_stem("TL", r.config), to_json(r), transfer_table(r), transfer_csv(r),
                            r.wall_seconds, extra);
}

inline WrittenReport write_report(const DGReport& r, const std::filesystem::path& dir) {
  return write_report_files(dir, report_stem("DG", r.config), to_json(r), dg_table(r), dg_csv(r), r.wall_seconds);
}

inline WrittenReport write_report(const SweepReport& r, const std::filesystem::path& dir) {
  return write_report_files(dir, report_stem("ablation", r.config), to_json(r), sweep_table(r), sweep_csv(r),
                            r.wall_seconds);
}

}  // namespace stochca
