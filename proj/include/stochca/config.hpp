#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "stochca/checkpoint.hpp"
#include "stochca/training.hpp"

namespace stochca {

inline constexpr const char* kCodeVersion = "stochca 1.0.0";

enum class Protocol { TL, DG, ablation };

inline std::string_view protocol_name(Protocol p) {
  switch (p) {
    case Protocol::TL: return "TL";
    case Protocol::DG: return "DG";
    case Protocol::ablation: return "ablation";
  }
  return "?";
}

struct DataConfig {
  std::uint64_t seed = 7;
  DomainSpec source;
  std::size_t source_per_class = 80;
  DomainSpec target;
  std::size_t target_per_class = 100;
  double test_fraction = 0.4;
  std::vector<DomainSpec> domains;
  std::size_t domain_per_class = 60;
};

struct PretrainConfig {
  std::size_t steps = 1500;
  std::uint64_t seed = 1;
  OptimizerConfig optimizer = default_pretrain_optimizer();
};

/// Full description of one experiment. `model.num_classes` is taken from the data.
struct RunConfig {
  Protocol protocol = Protocol::TL;
  std::vector<BaselineKind> methods{BaselineKind::FT, BaselineKind::StochCA};
  std::optional<double> p;  // fixed StochCA probability; skips selection
  std::vector<double> p_grid{0.1, 0.3, 0.5, 0.7};
  std::optional<double> lambda;  // fixed L2Reg weight; skips selection
  std::vector<double> lambda_grid{0.01, 0.1, 1.0};
  std::vector<double> sampling_rates{0.15, 0.30, 0.50, 1.00};
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  OptimizerConfig optimizer;
  GateMode gate_mode = GateMode::batch;
  FtcaLoss ftca_loss = FtcaLoss::average_logits;
  double val_fraction = 0.2;     // TL
  double dg_val_fraction = 0.2;  // DG, per source domain
  std::size_t validation_every = 0;  // 0: validate only after training
  bool similarity = true;
  double analysis_rate = 0.15;
  ViTConfig model;
  PretrainConfig pretrain;
  DataConfig data;
  std::string frozen_checkpoint;  // empty: pretrain in process
};

namespace config_detail {

/// Reads the members of one JSON object and rejects anything left unread.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where() + ": expected an object");
  }

  const json* find(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown config key '" + field(it.key()) + "'");
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

inline double as_double(const json& v, const std::string& f) {
  if (!v.is_number()) throw ConfigError(f + ": expected a number");
  return v.get<double>();
}

inline std::uint64_t as_uint(const json& v, const std::string& f) {
  if (v.is_number_unsigned()) return v.get<std::uint64_t>();
  if (v.is_number_integer()) throw ConfigError(f + ": expected a non-negative integer");
  if (v.is_number_float()) {
    const double d = v.get<double>();
    if (d >= 0 && d == static_cast<double>(static_cast<std::uint64_t>(d))) return static_cast<std::uint64_t>(d);
  }
  throw ConfigError(f + ": expected a non-negative integer");
}

inline std::string as_string(const json& v, const std::string& f) {
  if (!v.is_string()) throw ConfigError(f + ": expected a string");
  return v.get<std::string>();
}

inline bool as_bool(const json& v, const std::string& f) {
  if (!v.is_boolean()) throw ConfigError(f + ": expected true or false");
  return v.get<bool>();
}

inline const json& as_array(const json& v, const std::string& f) {
  if (!v.is_array()) throw ConfigError(f + ": expected an array");
  return v;
}

inline void read(ObjectReader& r, const std::string& key, double& out) {
  if (auto* v = r.find(key)) out = as_double(*v, r.field(key));
}
static_assert(std::is_same_v<std::uint64_t, std::size_t>, "seeds are read through the size_t overload");

inline void read(ObjectReader& r, const std::string& key, std::size_t& out) {
  if (auto* v = r.find(key)) out = static_cast<std::size_t>(as_uint(*v, r.field(key)));
}
inline void read(ObjectReader& r, const std::string& key, int& out) {
  if (auto* v = r.find(key)) {
    if (!v->is_number_integer()) throw ConfigError(r.field(key) + ": expected an integer");
    out = v->get<int>();
  }
}
inline void read(ObjectReader& r, const std::string& key, bool& out) {
  if (auto* v = r.find(key)) out = as_bool(*v, r.field(key));
}
inline void read(ObjectReader& r, const std::string& key, std::string& out) {
  if (auto* v = r.find(key)) out = as_string(*v, r.field(key));
}
inline void read(ObjectReader& r, const std::string& key, std::optional<double>& out) {
  if (auto* v = r.find(key)) out = v->is_null() ? std::nullopt : std::optional<double>(as_double(*v, r.field(key)));
}
inline void read(ObjectReader& r, const std::string& key, std::vector<double>& out) {
  if (auto* v = r.find(key)) {
    out.clear();
    for (std::size_t i = 0; i < as_array(*v, r.field(key)).size(); ++i)
      out.push_back(as_double((*v)[i], r.field(key) + "[" + std::to_string(i) + "]"));
  }
}
inline void read(ObjectReader& r, const std::string& key, std::vector<std::uint64_t>& out) {
  if (auto* v = r.find(key)) {
    out.clear();
    for (std::size_t i = 0; i < as_array(*v, r.field(key)).size(); ++i)
      out.push_back(as_uint((*v)[i], r.field(key) + "[" + std::to_string(i) + "]"));
  }
}
inline void read(ObjectReader& r, const std::string& key, std::vector<int>& out) {
  if (auto* v = r.find(key)) {
    out.clear();
    for (std::size_t i = 0; i < as_array(*v, r.field(key)).size(); ++i) {
      const json& e = (*v)[i];
      if (!e.is_number_integer()) throw ConfigError(r.field(key) + "[" + std::to_string(i) + "]: expected an integer");
      out.push_back(e.get<int>());
    }
  }
}
inline void read(ObjectReader& r, const std::string& key, std::array<double, 3>& out) {
  if (auto* v = r.find(key)) {
    if (!v->is_array() || v->size() != 3) throw ConfigError(r.field(key) + ": expected three numbers");
    for (std::size_t i = 0; i < 3; ++i) out[i] = as_double((*v)[i], r.field(key) + "[" + std::to_string(i) + "]");
  }
}

template <class Fn>
void read_object(ObjectReader& r, const std::string& key, Fn&& fn) {
  if (auto* v = r.find(key)) {
    ObjectReader sub(*v, r.field(key));
    fn(sub);
    sub.finish();
  }
}

inline Texture parse_texture(const std::string& s, const std::string& f) {
  if (s == "solid") return Texture::solid;
  if (s == "stripes") return Texture::stripes;
  if (s == "checker") return Texture::checker;
  throw ConfigError(f + ": unknown texture '" + s + "' (solid, stripes, checker)");
}

inline const char* texture_name(Texture t) {
  switch (t) {
    case Texture::solid: return "solid";
    case Texture::stripes: return "stripes";
    case Texture::checker: return "checker";
  }
  return "?";
}

inline void read_optimizer(ObjectReader& r, OptimizerConfig& o) {
  read(r, "lr", o.lr);
  read(r, "weight_decay", o.weight_decay);
  read(r, "beta1", o.beta1);
  read(r, "beta2", o.beta2);
  read(r, "eps", o.eps);
  read(r, "warmup_steps", o.warmup_steps);
  read(r, "total_steps", o.total_steps);
  read(r, "batch_size", o.batch_size);
}

inline void read_domain(ObjectReader& r, DomainSpec& d) {
  read(r, "id", d.domain_id);
  read(r, "name", d.name);
  read(r, "background", d.background);
  read(r, "foreground", d.foreground);
  if (auto* v = r.find("texture")) d.texture = parse_texture(as_string(*v, r.field("texture")), r.field("texture"));
  read(r, "noise", d.noise);
  read(r, "jitter", d.jitter);
  read(r, "classes", d.classes);
}

inline json optimizer_json(const OptimizerConfig& o) {
  return json{{"lr", o.lr},
              {"weight_decay", o.weight_decay},
              {"beta1", o.beta1},
              {"beta2", o.beta2},
              {"eps", o.eps},
              {"warmup_steps", o.warmup_steps},
              {"total_steps", o.total_steps},
              {"batch_size", o.batch_size}};
}

inline json domain_json(const DomainSpec& d) {
  return json{{"id", d.domain_id},          {"name", d.name},   {"background", d.background},
              {"foreground", d.foreground}, {"texture", texture_name(d.texture)},
              {"noise", d.noise},           {"jitter", d.jitter}, {"classes", d.classes}};
}

}  // namespace config_detail

inline RunConfig default_run_config() {
  RunConfig c;
  c.optimizer.lr = 2e-3;
  c.optimizer.weight_decay = 0.05;
  c.optimizer.warmup_steps = 10;
  c.optimizer.total_steps = 300;
  c.optimizer.batch_size = 16;
  c.model.num_classes = 8;

  DomainSpec& s = c.data.source;
  s.domain_id = 0;
  s.name = "source";
  s.classes = {0, 1, 2, 3, 4, 5, 6, 7};

  DomainSpec& t = c.data.target;
  t.domain_id = 1;
  t.name = "target";
  t.background = {0.2, 0.1, 0.3};
  t.foreground = {0.9, 0.8, 0.3};
  t.texture = Texture::stripes;
  t.noise = 0.15;
  t.classes = {8, 9, 10, 11};

  const std::vector<int> dg_classes{8, 9, 10, 11};
  DomainSpec a, b, d;
  a.domain_id = 0, a.name = "plain", a.classes = dg_classes;
  a.background = {0.1, 0.1, 0.1}, a.foreground = {0.9, 0.9, 0.9}, a.texture = Texture::solid, a.noise = 0.05;
  b.domain_id = 1, b.name = "stripes", b.classes = dg_classes;
  b.background = {0.2, 0.1, 0.3}, b.foreground = {0.9, 0.8, 0.3}, b.texture = Texture::stripes, b.noise = 0.12;
  d.domain_id = 2, d.name = "checker", d.classes = dg_classes;
  d.background = {0.05, 0.25, 0.25}, d.foreground = {1.0, 0.7, 0.5}, d.texture = Texture::checker, d.noise = 0.1;
  c.data.domains = {a, b, d};
  return c;
}

/// Serializes every field; parse_run_config(run_config_json(c)) == c.
inline json run_config_json(const RunConfig& c) {
  using namespace config_detail;
  json methods = json::array();
  for (auto m : c.methods) methods.push_back(method_name(m));
  json domains = json::array();
  for (const auto& d : c.data.domains) domains.push_back(domain_json(d));
  json model = to_json(c.model);
  model.erase("num_classes");
  return json{
      {"protocol", protocol_name(c.protocol)},
      {"methods", methods},
      {"p", c.p ? json(*c.p) : json(nullptr)},
      {"p_grid", c.p_grid},
      {"lambda", c.lambda ? json(*c.lambda) : json(nullptr)},
      {"lambda_grid", c.lambda_grid},
      {"sampling_rates", c.sampling_rates},
      {"seeds", c.seeds},
      {"optimizer", optimizer_json(c.optimizer)},
      {"gate_mode", c.gate_mode == GateMode::batch ? "batch" : "sample"},
      {"ftca_loss", c.ftca_loss == FtcaLoss::average_logits ? "average_logits" : "average_losses"},
      {"val_fraction", c.val_fraction},
      {"dg_val_fraction", c.dg_val_fraction},
      {"validation_every", c.validation_every},
      {"similarity", c.similarity},
      {"analysis_rate", c.analysis_rate},
      {"model", model},
      {"pretrain", {{"steps", c.pretrain.steps}, {"seed", c.pretrain.seed}, {"optimizer", optimizer_json(c.pretrain.optimizer)}}},
      {"data",
       {{"seed", c.data.seed},
        {"source", domain_json(c.data.source)},
        {"source_per_class", c.data.source_per_class},
        {"target", domain_json(c.data.target)},
        {"target_per_class", c.data.target_per_class},
        {"test_fraction", c.data.test_fraction},
        {"domains", domains},
        {"domain_per_class", c.data.domain_per_class}}},
      {"frozen_checkpoint", c.frozen_checkpoint},
  };
}

/// Checks value ranges; throws ConfigError naming the offending field.
inline void validate(const RunConfig& c) {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (c.methods.empty()) fail("methods: at least one method is required");
  if (c.seeds.empty()) fail("seeds: at least one seed is required");
  if (c.sampling_rates.empty()) fail("sampling_rates: at least one rate is required");
  for (double r : c.sampling_rates)
    if (!(r > 0.0 && r <= 1.0)) fail("sampling_rates: " + std::to_string(r) + " is outside (0, 1]");
  auto check_p = [&](double p, const std::string& f) {
    if (!(p >= 0.0 && p <= 1.0)) fail(f + ": " + std::to_string(p) + " is outside [0, 1]");
  };
  if (c.p) check_p(*c.p, "p");
  if (c.p_grid.empty() && !c.p) fail("p_grid: empty grid and no fixed p");
  for (double p : c.p_grid) check_p(p, "p_grid");
  if (c.lambda_grid.empty() && !c.lambda) fail("lambda_grid: empty grid and no fixed lambda");
  for (double l : c.lambda_grid)
    if (!(l >= 0.0)) fail("lambda_grid: weights must be non-negative");
  if (c.lambda && !(*c.lambda >= 0.0)) fail("lambda: must be non-negative");
  auto check_opt = [&](const OptimizerConfig& o, const std::string& f) {
    if (!(o.lr > 0.0)) fail(f + ".lr: must be positive");
    if (o.batch_size == 0) fail(f + ".batch_size: must be positive");
    if (o.total_steps == 0) fail(f + ".total_steps: must be positive");
    if (!(o.weight_decay >= 0.0)) fail(f + ".weight_decay: must be non-negative");
  };
  check_opt(c.optimizer, "optimizer");
  check_opt(c.pretrain.optimizer, "pretrain.optimizer");
  if (!(c.val_fraction > 0.0 && c.val_fraction < 1.0)) fail("val_fraction: must be in (0, 1)");
  if (!(c.dg_val_fraction > 0.0 && c.dg_val_fraction < 1.0)) fail("dg_val_fraction: must be in (0, 1)");
  if (!(c.data.test_fraction > 0.0 && c.data.test_fraction < 1.0)) fail("data.test_fraction: must be in (0, 1)");
  if (!(c.analysis_rate > 0.0 && c.analysis_rate <= 1.0)) fail("analysis_rate: must be in (0, 1]");
  try {
    ViTConfig m = c.model;
    m.num_classes = 1;
    m.validate();
  } catch (const ConfigError& e) {
    fail(std::string("model: ") + e.what());
  }
  auto check_domain = [&](const DomainSpec& d, const std::string& f) {
    if (d.classes.empty()) fail(f + ".classes: empty class set");
    for (int s : d.classes)
      if (s < 0 || s >= kNumShapes) fail(f + ".classes: unknown shape id " + std::to_string(s));
    if (d.jitter < 0) fail(f + ".jitter: must be non-negative");
    if (!(d.noise >= 0.0)) fail(f + ".noise: must be non-negative");
  };
  check_domain(c.data.source, "data.source");
  check_domain(c.data.target, "data.target");
  for (std::size_t i = 0; i < c.data.domains.size(); ++i) {
    check_domain(c.data.domains[i], "data.domains[" + std::to_string(i) + "]");
    if (c.data.domains[i].classes != c.data.domains.front().classes)
      fail("data.domains[" + std::to_string(i) + "].classes: domains must share one class set");
  }
}

/// Parses a config document over the defaults. Unknown keys are rejected by name.
inline RunConfig parse_run_config(const json& j, RunConfig c = default_run_config()) {
  using namespace config_detail;
  ObjectReader r(j, "");
  if (auto* v = r.find("protocol")) {
    const std::string s = as_string(*v, "protocol");
    if (s == "TL" || s == "tl") c.protocol = Protocol::TL;
    else if (s == "DG" || s == "dg") c.protocol = Protocol::DG;
    else if (s == "ablation") c.protocol = Protocol::ablation;
    else throw ConfigError("protocol: unknown protocol '" + s + "' (TL, DG, ablation)");
  }
  if (auto* v = r.find("methods")) {
    c.methods.clear();
    for (std::size_t i = 0; i < as_array(*v, "methods").size(); ++i) {
      const std::string f = "methods[" + std::to_string(i) + "]";
      try {
        c.methods.push_back(parse_method(as_string((*v)[i], f)));
      } catch (const ConfigError& e) {
        throw ConfigError(f + ": " + e.what());
      }
    }
  }
  read(r, "p", c.p);
  read(r, "p_grid", c.p_grid);
  read(r, "lambda", c.lambda);
  read(r, "lambda_grid", c.lambda_grid);
  read(r, "sampling_rates", c.sampling_rates);
  read(r, "seeds", c.seeds);
  read_object(r, "optimizer", [&](ObjectReader& o) { read_optimizer(o, c.optimizer); });
  if (auto* v = r.find("gate_mode")) {
    const std::string s = as_string(*v, "gate_mode");
    if (s == "batch") c.gate_mode = GateMode::batch;
    else if (s == "sample") c.gate_mode = GateMode::sample;
    else throw ConfigError("gate_mode: expected 'batch' or 'sample', got '" + s + "'");
  }
  if (auto* v = r.find("ftca_loss")) {
    const std::string s = as_string(*v, "ftca_loss");
    if (s == "average_logits") c.ftca_loss = FtcaLoss::average_logits;
    else if (s == "average_losses") c.ftca_loss = FtcaLoss::average_losses;
    else throw ConfigError("ftca_loss: expected 'average_logits' or 'average_losses', got '" + s + "'");
  }
  read(r, "val_fraction", c.val_fraction);
  read(r, "dg_val_fraction", c.dg_val_fraction);
  read(r, "validation_every", c.validation_every);
  read(r, "similarity", c.similarity);
  read(r, "analysis_rate", c.analysis_rate);
  read_object(r, "model", [&](ObjectReader& m) {
    read(m, "image_size", c.model.image_size);
    read(m, "patch_size", c.model.patch_size);
    read(m, "channels", c.model.channels);
    read(m, "depth", c.model.depth);
    read(m, "dim", c.model.dim);
    read(m, "heads", c.model.heads);
    read(m, "mlp_ratio", c.model.mlp_ratio);
    read(m, "init_scale", c.model.init_scale);
    read(m, "ln_eps", c.model.ln_eps);
  });
  read_object(r, "pretrain", [&](ObjectReader& p) {
    read(p, "steps", c.pretrain.steps);
    read(p, "seed", c.pretrain.seed);
    read_object(p, "optimizer", [&](ObjectReader& o) { read_optimizer(o, c.pretrain.optimizer); });
  });
  read_object(r, "data", [&](ObjectReader& d) {
    read(d, "seed", c.data.seed);
    read_object(d, "source", [&](ObjectReader& s) { read_domain(s, c.data.source); });
    read(d, "source_per_class", c.data.source_per_class);
    read_object(d, "target", [&](ObjectReader& s) { read_domain(s, c.data.target); });
    read(d, "target_per_class", c.data.target_per_class);
    read(d, "test_fraction", c.data.test_fraction);
    if (auto* v = d.find("domains")) {
      c.data.domains.clear();
      for (std::size_t i = 0; i < as_array(*v, d.field("domains")).size(); ++i) {
        ObjectReader dr((*v)[i], d.field("domains") + "[" + std::to_string(i) + "]");
        DomainSpec spec;
        spec.domain_id = static_cast<int>(i);
        read_domain(dr, spec);
        dr.finish();
        c.data.domains.push_back(std::move(spec));
      }
    }
    read(d, "domain_per_class", c.data.domain_per_class);
  });
  read(r, "frozen_checkpoint", c.frozen_checkpoint);
  r.finish();
  c.model.num_classes = c.data.source.classes.size();
  c.data.source.image_size = c.data.target.image_size = c.model.image_size;
  for (auto& d : c.data.domains) d.image_size = c.model.image_size;
  validate(c);
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": invalid JSON: " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace stochca
