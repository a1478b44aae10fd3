// Acceptance suite: one [PASS]/[FAIL] line per criterion; nonzero exit when any criterion fails.

#include <unistd.h>

#include <array>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>

#include "oracles.hpp"
#include "stochca/cli.hpp"

using namespace stochca;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

int failures = 0;

void report(int id, const std::string& name, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("threw: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!o.pass) ++failures;
  std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << id << " " << name << ": " << o.detail << " (" << fmt("%.1f", secs)
            << " s)" << std::endl;
}

ImageBatch view(const std::vector<Tensor>& xs) {
  ImageBatch b;
  for (const Tensor& x : xs) b.push_back(&x);
  return b;
}

std::vector<Tensor> random_images(std::mt19937_64& rng, const ViTConfig& c, std::size_t n) {
  std::vector<Tensor> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(oracle::random_tensor(rng, {c.channels, c.image_size, c.image_size}));
  return out;
}

ViTModel drift(const ViTModel& m, std::uint64_t seed, double scale) {
  ViTModel out = trainable_copy(m);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (Parameter* p : out.parameters())
    for (double& v : p->value.values()) v += n(rng);
  return out;
}

Outcome kernel_oracle() {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<std::size_t> len(1, 8), width(1, 16);
  double worst = 0.0;
  std::size_t cases = 0;
  for (int i = 0; i < 250; ++i) {
    const std::size_t n = len(rng), dh = width(rng);
    const bool cross = i % 2 == 1;
    const std::size_t m = cross ? len(rng) : n;  // cross-attention reads keys/values of another sequence
    const Tensor q = oracle::random_tensor(rng, {n, dh}, -3, 3);
    const Tensor k = oracle::random_tensor(rng, {m, dh}, -3, 3);
    const Tensor v = oracle::random_tensor(rng, {m, dh}, -3, 3);
    Tape t(Tape::Mode::inference);
    const Tensor got = scaled_dot_attention(t.constant(q), t.constant(k), t.constant(v)).value();
    const auto want = oracle::attention(oracle::to_matrix(q), oracle::to_matrix(k), oracle::to_matrix(v));
    worst = std::max(worst, oracle::max_abs_diff(oracle::to_matrix(got), want));
    ++cases;
  }
  return {worst <= 1e-12 && cases >= 100, "max |diff| " + fmt("%.2e", worst) + " over " + std::to_string(cases) + " SA/CA cases"};
}

Outcome gradient_check() {
  ViTConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.depth = 2;
  c.dim = 8;
  c.heads = 2;
  c.num_classes = 3;
  const ViTModel frozen = frozen_copy(ViTModel::create(c, 5));
  ViTModel target = drift(frozen, 6, 0.2);
  std::mt19937_64 rng(7);
  const auto imgs = random_images(rng, c, 2);
  const std::vector<int> labels{2, 0};
  const KVCache cache = extract_kv(frozen, view(imgs));
  double worst = 0.0;
  std::ostringstream per;
  for (const Gates& g : {Gates{0, 0}, Gates{1, 0}, Gates{0, 1}, Gates{1, 1}}) {
    const double err = oracle::fd_max_rel_error(target.parameters(), [&](Tape& t) {
      const Var logits = g == Gates{0, 0} ? forward(t, target, view(imgs)) : stochca_forward(t, target, cache, g, view(imgs));
      return ops::cross_entropy(logits, labels);
    });
    per << " " << int(g[0]) << int(g[1]) << ":" << fmt("%.1e", err);
    worst = std::max(worst, err);
  }
  return {worst <= 1e-5, "max rel error " + fmt("%.2e", worst) + " (gates" + per.str() + ")"};
}

Outcome reductions() {
  const RunConfig cfg = parse_run_config(json::parse(R"({"data": {"target_per_class": 20}})"));
  ViTConfig c = cfg.model;
  c.num_classes = 4;
  const ViTModel frozen = frozen_copy(drift(ViTModel::create(c, 11), 12, 0.1));
  const LabeledDataset ds = target_dataset(cfg);
  const SampleSet data = SampleSet::of(ds, {Split::train}, Phase::train);
  TrainSpec ft, sca;
  ft.optimizer = sca.optimizer = cfg.optimizer;
  ft.optimizer.total_steps = sca.optimizer.total_steps = 40;
  ft.seed = sca.seed = 3;
  sca.method = BaselineKind::StochCA;
  sca.p = 0.0;
  ViTModel a = trainable_copy(frozen), b = trainable_copy(frozen);
  const TrainLog la = train(a, frozen, data, ft);
  const TrainLog lb = train(b, frozen, data, sca);
  const bool p0 = parameter_hash(a) == parameter_hash(b) && la.losses == lb.losses && lb.counts.frozen_forwards == 0;

  std::mt19937_64 rng(13);
  const auto imgs = random_images(rng, c, 6);
  const ViTModel init = trainable_copy(frozen);
  const KVCache cache = extract_kv(frozen, view(imgs));
  const Gates all(c.depth, 1);
  const bool ca_init = stochca_forward(init, cache, all, view(imgs)) == forward(init, view(imgs));

  instrument::Scope scope;
  infer(drift(frozen, 14, 0.3), view(imgs));
  const bool no_frozen = scope.counts().frozen_forwards == 0 && scope.counts().frozen_attention == 0;
  return {p0 && ca_init && no_frozen, std::string("p=0 vs FT bit-identical: ") + (p0 ? "yes" : "no") +
                                          "; all-CA at init == SA: " + (ca_init ? "yes" : "no") +
                                          "; frozen calls at inference: " + std::to_string(scope.counts().frozen_forwards)};
}

Outcome gate_statistics() {
  bool ok = true;
  std::ostringstream d;
  for (double p : {0.1, 0.3, 0.5, 0.7}) {
    const std::size_t layers = 12, draws = 10000;
    GateSchedule s(p, 2024);
    std::size_t ca = 0;
    for (std::size_t i = 0; i < draws / layers + 1; ++i)
      for (auto g : s.next(layers)) ca += g;
    const double n = static_cast<double>((draws / layers + 1) * layers);
    const double freq = static_cast<double>(ca) / n;
    const double band = 3.0 * std::sqrt(p * (1 - p) / n);
    const bool in = std::abs(freq - p) <= band && (p != 0.1 || (freq >= 0.09 && freq <= 0.11));
    ok = ok && in;
    d << (d.tellp() ? ", " : "") << "p=" << p << ": " << fmt("%.4f", freq) << (in ? "" : " OUT");
  }
  return {ok, d.str() + " (10k+ layer draws each, 3 sigma bands)"};
}

Outcome frozen_immutability(const FrozenModel& f, const RunConfig& cfg) {
  const LabeledDataset ds = target_dataset(cfg);
  const SampleSet data = SampleSet::of(ds, {Split::train}, Phase::train);
  std::ostringstream d;
  bool ok = true;
  for (BaselineKind k : kAllMethods) {
    if (k == BaselineKind::FTCA_onlySA) continue;  // trains exactly as FTCA
    TrainSpec s = train_spec(cfg, k, k == BaselineKind::StochCA ? 0.5 : 0.1, 1);
    s.optimizer.total_steps = 500;
    ViTModel target = fresh_target(f.model, ds.num_classes, 1);
    train(target, f.model, data, s);
    const bool same = parameter_hash(f.model) == f.hash && f.model.frozen();
    ok = ok && same;
    d << (d.tellp() ? ", " : "") << method_name(k) << (same ? " unchanged" : " CHANGED");
  }
  return {ok, d.str() + " after 500 steps each"};
}

std::filesystem::path report_dir() {
  const char* env = std::getenv(cli::kOutEnv);
  return std::filesystem::path(env && *env ? env : ".") / "acceptance_reports";
}

Outcome similarity_ordering(const TransferReport& r, const FrozenModel& f, const RunConfig& cfg) {
  const auto sims = mean_similarity(r, cfg.analysis_rate);
  const SimilarityReport& ft = sims.at(BaselineKind::FT);
  const SimilarityReport& sca = sims.at(BaselineKind::StochCA);
  const SimilarityReport& l2 = sims.at(BaselineKind::L2Reg);
  std::cout << "Layer-averaged similarity at " << rate_label(cfg.analysis_rate) << " (FT / StochCA / L2Reg)\n";
  bool ordered = true;
  const std::array<std::pair<const char*, double SimilarityReport::*>, 3> cols{
      {{"Q", &SimilarityReport::q_avg}, {"K", &SimilarityReport::k_avg}, {"V", &SimilarityReport::v_avg}}};
  for (const auto& [name, m] : cols) {
    std::cout << "  " << name << ": " << fmt("%.4f", ft.*m) << " / " << fmt("%.4f", sca.*m) << " / " << fmt("%.4f", l2.*m) << "\n";
    ordered = ordered && ft.*m <= sca.*m && sca.*m <= l2.*m;
  }
  const LabeledDataset ds = target_dataset(cfg);
  const auto imgs = images_of(SampleSet::of(ds, {Split::test}, Phase::test));
  const SimilarityReport self = cosine_similarity_report(f.model, f.model, imgs);
  bool ones = self.q_avg == 1.0 && self.k_avg == 1.0 && self.v_avg == 1.0;
  for (std::size_t l = 0; l < self.q.size(); ++l) ones = ones && self.q[l] == 1.0 && self.k[l] == 1.0 && self.v[l] == 1.0;
  return {ordered && ones, std::string("FT <= StochCA <= L2Reg on Q, K, V: ") + (ordered ? "yes" : "no") +
                               "; self-similarity exactly 1.0: " + (ones ? "yes" : "no")};
}

Outcome dg_integrity(const FrozenModel& f, RunConfig cfg) {
  cfg.protocol = Protocol::DG;
  cfg.methods = {BaselineKind::FT, BaselineKind::StochCA};
  const DGReport r = run_dg(cfg, f);
  write_report(r, report_dir());
  const std::string table = dg_table(r);
  std::cout << table;
  bool isolated = true, layout = table.find("Avg.") != std::string::npos;
  std::size_t leaked = 0;
  for (std::size_t h = 0; h < cfg.data.domains.size(); ++h) {
    const int id = cfg.data.domains[h].domain_id;
    leaked += r.access[h].count(id) - r.access[h].count(id, Phase::test);
    layout = layout && table.find(cfg.data.domains[h].name) != std::string::npos;
  }
  for (const auto& m : r.methods) {
    double s = 0.0;
    for (const auto& fold : m.folds) isolated = isolated && fold.isolated, s += fold.test.mean;
    layout = layout && m.folds.size() == 3 && std::abs(m.average - s / 3.0) < 1e-15;
  }
  return {isolated && leaked == 0 && layout && cfg.data.domains.size() == 3,
          "3 folds; held-out reads outside test: " + std::to_string(leaked) + "; per-domain + Avg. layout: " +
              (layout ? "yes" : "no")};
}

Outcome cost_accounting(const RunConfig& cfg) {
  ViTConfig c = cfg.model;
  c.num_classes = 4;
  const ViTModel frozen = frozen_copy(ViTModel::create(c, 21));
  const ViTModel target = drift(frozen, 22, 0.1);
  std::mt19937_64 rng(23);
  const auto imgs = random_images(rng, c, 8);
  const Batch batch{view(imgs), {0, 1, 2, 3, 0, 1, 2, 3}};
  const MethodCost ft = measure_cost(BaselineKind::FT, target, frozen, batch);
  const MethodCost ftca = measure_cost(BaselineKind::FTCA, target, frozen, batch);
  const MethodCost sca = measure_cost(BaselineKind::StochCA, target, frozen, batch, 0.5);
  const std::uint64_t L = c.depth, B = imgs.size();
  const bool ok = ft.train_step.target_attention == L * B && ftca.train_step.target_attention == 2 * L * B &&
                  sca.inference == ft.inference && sca.inference.frozen_forwards == 0;
  return {ok, "per image: FT " + std::to_string(ft.train_step.target_attention / B) + ", FT+CA " +
                  std::to_string(ftca.train_step.target_attention / B) + " (L = " + std::to_string(L) +
                  "); StochCA inference == FT inference: " + (sca.inference == ft.inference ? "yes" : "no")};
}

std::map<std::string, std::string> snapshot(const std::filesystem::path& dir) {
  std::map<std::string, std::string> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file() || e.path().string().ends_with(".timing.json")) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    files[std::filesystem::relative(e.path(), dir).string()] = os.str();
  }
  return files;
}

Outcome cli_reproducibility() {
  const auto root = std::filesystem::temp_directory_path() / ("stochca_accept_" + std::to_string(::getpid()));
  std::filesystem::remove_all(root);
  std::filesystem::create_directories(root);
  const auto cfg = root / "tiny.json";
  std::ofstream(cfg) << R"({"pretrain": {"steps": 40}, "optimizer": {"total_steps": 15, "batch_size": 8},
    "seeds": [0, 1], "sampling_rates": [0.5, 1.0], "p_grid": [0.1, 0.5], "lambda_grid": [0.1],
    "data": {"source_per_class": 10, "target_per_class": 20, "domain_per_class": 10}})";
  const std::string c = cfg.string(), ckpt = (root / "pre" / "frozen.json").string();
  const std::vector<std::vector<std::string>> commands{
      {"pretrain", "--config", c, "--out", (root / "pre").string()},
      {"train", "--config", c, "--frozen", ckpt, "--method", "FT", "--method", "StochCA", "--method", "L2Reg",
       "--method", "FTCA", "--method", "FTCA_onlySA", "--out", (root / "train").string()},
      {"sweep", "--config", c, "--frozen", ckpt, "--out", (root / "sweep").string()},
      {"dg", "--config", c, "--frozen", ckpt, "--out", (root / "dg").string()},
      {"analyze", "--config", c, "--frozen", ckpt, "--out", (root / "analyze").string()},
      {"eval", "--config", c, "--model", ckpt, "--task", "source", "--out", (root / "eval").string()}};
  std::size_t compared = 0;
  std::string bad;
  for (const auto& cmd : commands) {
    std::vector<std::map<std::string, std::string>> runs;
    for (int rep = 0; rep < 2; ++rep) {
      std::vector<const char*> argv{"stochca"};
      for (const auto& a : cmd) argv.push_back(a.c_str());
      std::ostringstream out, err;
      if (cli::parse_and_dispatch(static_cast<int>(argv.size()), argv.data(), out, err) != 0)
        return {false, cmd[0] + " failed: " + err.str()};
      runs.push_back(snapshot(cmd.back()));
    }
    for (const auto& [name, content] : runs[0]) {
      ++compared;
      if (!runs[1].count(name) || runs[1].at(name) != content) bad += " " + cmd[0] + "/" + name;
    }
    if (runs[0].size() != runs[1].size()) bad += " " + cmd[0] + "(file set)";
  }
  std::filesystem::remove_all(root);
  return {bad.empty() && compared > 0,
          std::to_string(commands.size()) + " subcommands, " + std::to_string(compared) + " report files" +
              (bad.empty() ? " byte-identical" : "; differing:" + bad)};
}

}  // namespace

int main() {
  const RunConfig cfg = default_run_config();
  std::cout << "stochca acceptance suite (" << kCodeVersion << ")" << std::endl;

  report(1, "kernel oracle equivalence", kernel_oracle);
  report(2, "finite-difference gradients", gradient_check);
  report(3, "reductions", reductions);
  report(4, "gate statistics", gate_statistics);
  report(9, "cost accounting", [&] { return cost_accounting(cfg); });

  std::optional<FrozenModel> frozen;
  std::optional<TransferReport> grid;
  auto need_frozen = [&]() -> const FrozenModel& {
    if (!frozen) {
      frozen = resolve_frozen(cfg);
      std::cout << "frozen model " << frozen->hash.substr(0, 16) << ", source train accuracy "
                << percent(*frozen->source_train_accuracy) << "%" << std::endl;
    }
    return *frozen;
  };

  report(5, "frozen immutability", [&] { return frozen_immutability(need_frozen(), cfg); });
  report(6, "directional transfer result at 15%", [&]() -> Outcome {
    RunConfig c = cfg;
    c.methods.assign(std::begin(kAllMethods), std::end(kAllMethods));
    grid = run_transfer(c, need_frozen());
    write_report(*grid, report_dir());
    std::cout << transfer_table(*grid);
    const CellResult* ft = grid->cell(BaselineKind::FT, 0.15);
    const CellResult* sca = grid->cell(BaselineKind::StochCA, 0.15);
    const bool full = grid->cells.size() == 5 * 4 && ft && sca && ft->seeds.size() >= 5;
    return {full && sca->test.mean >= ft->test.mean,
            "StochCA " + percent(sca->test.mean) + "% vs FT " + percent(ft->test.mean) + "% over " +
                std::to_string(ft->seeds.size()) + " seeds; " + std::to_string(grid->cells.size()) + " grid cells"};
  });
  report(7, "similarity ordering", [&]() -> Outcome {
    if (!grid) return {false, "no transfer grid"};
    return similarity_ordering(*grid, need_frozen(), cfg);
  });
  report(8, "domain generalization integrity", [&] { return dg_integrity(need_frozen(), cfg); });
  report(10, "CLI reproducibility", cli_reproducibility);

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
