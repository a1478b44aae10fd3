#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "stochca/checkpoint.hpp"
#include "stochca/rng.hpp"
#include "stochca/tensor.hpp"

namespace stochca {

/// Shape vocabulary; a class is one of these shapes, whatever the domain style.
enum class ShapeKind : int {
  hbar = 0,
  vbar,
  plus,
  cross,
  square_ring,
  disk,
  corner,
  tee,
  two_dots,
  triangle,
  circle_ring,
  diagonal,
  count_
};

inline constexpr int kNumShapes = static_cast<int>(ShapeKind::count_);

enum class Texture { solid, stripes, checker };

struct DomainSpec {
  int domain_id = 0;
  std::string name = "domain";
  std::array<double, 3> background{0.1, 0.1, 0.1};
  std::array<double, 3> foreground{0.9, 0.9, 0.9};
  Texture texture = Texture::solid;
  double noise = 0.05;
  int jitter = 2;            // max translation in pixels
  std::vector<int> classes;  // shape ids; label i renders shape classes[i]
  std::size_t image_size = 16;
};

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

/// Placement of a shape inside the canvas; independent of style.
struct Geometry {
  int dx = 0, dy = 0;
  double size = 1.0;

  friend bool operator==(const Geometry&, const Geometry&) = default;
};

struct Sample {
  Tensor image;  // channels x H x W
  int label = 0;
  Split split = Split::train;
  int domain = 0;
  std::size_t index = 0;  // position within its class at generation time
  Geometry geometry;
};

struct LabeledDataset {
  std::string name;
  std::size_t num_classes = 0;
  std::uint64_t seed = 0;
  std::vector<Sample> samples;

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].split == s) out.push_back(i);
    return out;
  }

  std::size_t count(Split s, int label) const {
    return static_cast<std::size_t>(std::count_if(samples.begin(), samples.end(),
                                                  [&](const Sample& x) { return x.split == s && x.label == label; }));
  }
};

/// Binary mask of a shape on an n x n canvas.
inline std::vector<std::uint8_t> shape_mask(ShapeKind kind, const Geometry& g, std::size_t n) {
  std::vector<std::uint8_t> mask(n * n, 0);
  const double c = (static_cast<double>(n) - 1.0) / 2.0;
  const double cx = c + g.dx, cy = c + g.dy;
  const double r = 0.3 * static_cast<double>(n) * g.size;  // half extent
  const double w = std::max(1.0, 0.09 * static_cast<double>(n) * g.size);  // half stroke width
  for (std::size_t yi = 0; yi < n; ++yi)
    for (std::size_t xi = 0; xi < n; ++xi) {
      const double x = static_cast<double>(xi) - cx, y = static_cast<double>(yi) - cy;
      const double ax = std::abs(x), ay = std::abs(y);
      const double rad = std::hypot(x, y);
      bool on = false;
      switch (kind) {
        case ShapeKind::hbar: on = ay <= w && ax <= r; break;
        case ShapeKind::vbar: on = ax <= w && ay <= r; break;
        case ShapeKind::plus: on = (ay <= w && ax <= r) || (ax <= w && ay <= r); break;
        case ShapeKind::cross: on = ax <= r && ay <= r && (std::abs(x - y) <= 1.2 * w || std::abs(x + y) <= 1.2 * w); break;
        case ShapeKind::square_ring: on = std::max(ax, ay) <= r && std::max(ax, ay) >= r - 2 * w; break;
        case ShapeKind::disk: on = rad <= 0.8 * r; break;
        case ShapeKind::corner: on = (x >= -r && x <= r && std::abs(y - r + w) <= w) || (y >= -r && y <= r && std::abs(x + r - w) <= w); break;
        case ShapeKind::tee: on = (std::abs(y + r - w) <= w && ax <= r) || (ax <= w && y >= -r && y <= r); break;
        case ShapeKind::two_dots: on = std::hypot(x + 0.6 * r, y + 0.6 * r) <= 1.6 * w || std::hypot(x - 0.6 * r, y - 0.6 * r) <= 1.6 * w; break;
        case ShapeKind::triangle: on = y <= r && y >= -r && ax <= (y + r) / 2.0; break;
        case ShapeKind::circle_ring: on = rad <= r && rad >= r - 2 * w; break;
        case ShapeKind::diagonal: on = ax <= r && ay <= r && std::abs(x + y) <= 1.2 * w; break;
        case ShapeKind::count_: break;
      }
      mask[yi * n + xi] = on ? 1 : 0;
    }
  return mask;
}

inline Geometry sample_geometry(std::uint64_t seed, int shape, std::size_t index, int jitter) {
  Rng rng = make_rng(seed, {0x6765'6fULL, static_cast<std::uint64_t>(shape), index});
  std::uniform_int_distribution<int> shift(-jitter, jitter);
  std::uniform_real_distribution<double> size(0.8, 1.15);
  Geometry g;
  g.dx = shift(rng);
  g.dy = shift(rng);
  g.size = size(rng);
  return g;
}

/// Renders one sample under the domain style; pure function of its arguments.
inline Tensor render(const DomainSpec& spec, int shape, const Geometry& g, std::uint64_t seed, std::size_t index) {
  const std::size_t n = spec.image_size;
  const auto mask = shape_mask(static_cast<ShapeKind>(shape), g, n);
  Rng rng = make_rng(seed, {0x7374'796cULL, static_cast<std::uint64_t>(spec.domain_id), static_cast<std::uint64_t>(shape), index});
  std::uniform_int_distribution<int> phase_dist(0, 3);
  const int phase = phase_dist(rng);
  std::normal_distribution<double> noise(0.0, 1.0);
  Tensor img({3, n, n});
  for (std::size_t y = 0; y < n; ++y)
    for (std::size_t x = 0; x < n; ++x) {
      double tex = 1.0;
      if (spec.texture == Texture::stripes) tex = ((x + y + phase) / 2) % 2 == 0 ? 1.0 : 0.55;
      if (spec.texture == Texture::checker) tex = ((x / 2 + y / 2 + phase) % 2 == 0) ? 1.0 : 0.6;
      for (std::size_t c = 0; c < 3; ++c) {
        const double fg = spec.foreground[c] * tex;
        const double base = mask[y * n + x] ? fg : spec.background[c];
        img[(c * n + y) * n + x] = base + spec.noise * noise(rng);
      }
    }
  return img;
}

/// Balanced dataset of `n_per_class` images per class, all tagged train.
inline LabeledDataset generate_domain(const DomainSpec& spec, std::size_t n_per_class, std::uint64_t seed) {
  if (n_per_class < 1) throw ContractError("generate_domain: n_per_class must be at least 1");
  if (spec.classes.empty()) throw ContractError("generate_domain: empty class set");
  for (int s : spec.classes)
    if (s < 0 || s >= kNumShapes) throw ConfigError("generate_domain: unknown shape id " + std::to_string(s));
  LabeledDataset ds;
  ds.name = spec.name;
  ds.num_classes = spec.classes.size();
  ds.seed = seed;
  for (std::size_t label = 0; label < spec.classes.size(); ++label)
    for (std::size_t i = 0; i < n_per_class; ++i) {
      const int shape = spec.classes[label];
      Sample s;
      s.geometry = sample_geometry(seed, shape, i, spec.jitter);
      s.image = render(spec, shape, s.geometry, seed, i);
      s.label = static_cast<int>(label);
      s.domain = spec.domain_id;
      s.index = i;
      ds.samples.push_back(std::move(s));
    }
  return ds;
}

namespace detail {
inline std::size_t rounded_count(double fraction, std::size_t n) {
  return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
}
}  // namespace detail

/// Moves a per-class `fraction` of the samples tagged `from` to `to`.
inline void stratified_split(LabeledDataset& ds, Split from, Split to, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ContractError("stratified_split: fraction must be in (0, 1)");
  Rng rng = make_rng(seed, {0x7370'6c74ULL, static_cast<std::uint64_t>(from), static_cast<std::uint64_t>(to)});
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.samples.size(); ++i)
      if (ds.samples[i].split == from && ds.samples[i].label == static_cast<int>(c)) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    const std::size_t k = detail::rounded_count(fraction, idx.size());
    for (std::size_t i = 0; i < k; ++i) ds.samples[idx[i]].split = to;
  }
}

/// Per-class stratified subsample of the train split; val and test are kept as they are.
inline LabeledDataset subsample(const LabeledDataset& ds, double rate, std::uint64_t seed) {
  if (!(rate > 0.0 && rate <= 1.0)) throw ContractError("subsample: rate must be in (0, 1]");
  if (rate == 1.0) return ds;
  Rng rng = make_rng(seed, {0x7375'6273ULL});
  std::vector<std::uint8_t> keep(ds.samples.size(), 1);
  for (std::size_t c = 0; c < ds.num_classes; ++c) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < ds.samples.size(); ++i)
      if (ds.samples[i].split == Split::train && ds.samples[i].label == static_cast<int>(c)) idx.push_back(i);
    const std::size_t k = detail::rounded_count(rate, idx.size());
    if (k == 0)
      throw ContractError("subsample: class " + std::to_string(c) + " would be empty at rate " + std::to_string(rate));
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i = k; i < idx.size(); ++i) keep[idx[i]] = 0;
  }
  LabeledDataset out;
  out.name = ds.name;
  out.num_classes = ds.num_classes;
  out.seed = ds.seed;
  for (std::size_t i = 0; i < ds.samples.size(); ++i)
    if (keep[i]) out.samples.push_back(ds.samples[i]);
  return out;
}

/// Content hash of a dataset (images, labels, split tags, domains).
inline std::string dataset_hash(const LabeledDataset& ds) {
  std::string buf;
  for (const Sample& s : ds.samples) {
    buf.push_back(static_cast<char>(s.label));
    buf.push_back(static_cast<char>(s.split));
    buf.push_back(static_cast<char>(s.domain));
    for (double v : s.image.values()) detail::append_le(buf, v);
  }
  return sha256_hex(buf);
}

inline constexpr const char* kDatasetFormat = "stochca-dataset";

/// Writes images as one N x C x H x W tensor; labels/splits/domains go in the manifest.
inline void export_dataset(const LabeledDataset& ds, const std::filesystem::path& manifest_path) {
  if (ds.samples.empty()) throw ContractError("export_dataset: empty dataset");
  const Shape& is = ds.samples.front().image.shape();
  Shape shape{ds.samples.size()};
  shape.insert(shape.end(), is.begin(), is.end());
  std::vector<double> values;
  json labels = json::array(), splits = json::array(), domains = json::array();
  for (const Sample& s : ds.samples) {
    values.insert(values.end(), s.image.values().begin(), s.image.values().end());
    labels.push_back(s.label);
    splits.push_back(split_name(s.split));
    domains.push_back(s.domain);
  }
  write_container(manifest_path, kDatasetFormat, {{"images", Tensor(shape, std::move(values))}},
                  {{"name", ds.name},
                   {"num_classes", ds.num_classes},
                   {"seed", ds.seed},
                   {"labels", labels},
                   {"splits", splits},
                   {"domains", domains}});
}

inline LabeledDataset import_dataset(const std::filesystem::path& manifest_path) {
  Container c = read_container(manifest_path, kDatasetFormat);
  LabeledDataset ds;
  try {
    ds.name = c.manifest.at("name");
    ds.num_classes = c.manifest.at("num_classes");
    ds.seed = c.manifest.at("seed");
    const auto& labels = c.manifest.at("labels");
    const auto& splits = c.manifest.at("splits");
    const auto& domains = c.manifest.at("domains");
    if (c.tensors.size() != 1 || c.tensors[0].name != "images") throw CorruptionError("expected one 'images' tensor");
    const Tensor& all = c.tensors[0].value;
    const Shape& s = all.shape();
    if (s.size() != 4 || s[0] != labels.size() || labels.size() != splits.size() || labels.size() != domains.size())
      throw CorruptionError("image/label counts disagree");
    const std::size_t per = s[1] * s[2] * s[3];
    for (std::size_t i = 0; i < s[0]; ++i) {
      Sample smp;
      smp.image = Tensor({s[1], s[2], s[3]}, std::vector<double>(all.data() + i * per, all.data() + (i + 1) * per));
      smp.label = labels[i];
      const std::string sp = splits[i];
      smp.split = sp == "train" ? Split::train : sp == "val" ? Split::val : Split::test;
      smp.domain = domains[i];
      ds.samples.push_back(std::move(smp));
    }
  } catch (const json::exception& e) {
    throw CorruptionError(manifest_path.string() + ": " + e.what());
  }
  return ds;
}

}  // namespace stochca
