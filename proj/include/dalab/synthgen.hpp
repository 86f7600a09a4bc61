#pragma once

// Two-domain synthetic detection benchmark.
//
// Every image is a G x G grid of observation vectors. A cell holding an object
// of class k carries prototype(k) plus a linear encoding of the object's box
// offsets plus noise; other cells carry the background prototype plus noise.
// Target-domain object cells of class k are additionally rotated (angle
// proportional to gap_k) in a class-specific plane and translated by
// gap_k * u_k, and every target cell receives a global style shift. By
// default u_k lies in the span of the box encoding.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include "dalab/box.hpp"
#include "dalab/digest.hpp"
#include "dalab/io.hpp"
#include "dalab/rng.hpp"
#include "dalab/tensor.hpp"

namespace dalab {

enum class Domain : std::uint8_t { kSource = 0, kTarget = 1 };
enum class Split : std::uint8_t { kTrain = 0, kTest = 1 };

inline const char* to_string(Domain d) { return d == Domain::kSource ? "source" : "target"; }
inline const char* to_string(Split s) { return s == Split::kTrain ? "train" : "test"; }

struct GenConfig {
  std::size_t grid_size = 8;
  std::size_t obs_dim = 16;
  std::size_t num_classes = 3;
  std::size_t min_objects = 1;
  std::size_t max_objects = 4;
  double noise_sigma = 0.1;
  std::vector<double> class_gap = {0.0, 0.5, 1.5};
  double global_style_shift = 0.3;
  std::uint64_t seed = 0;

  // Generator geometry (not part of the domain gap itself).
  double prototype_norm = 3.0;
  double background_norm = 1.0;
  double box_code_gain = 3.0;
  double rotation_per_gap = 0.5;  // radians per unit of gap
  // Blend of the class translation direction between a random direction (0)
  // and a random direction inside the box-code span (1).
  double shift_box_alignment = 1.0;

  void validate() const {
    if (grid_size == 0) throw Error("grid_size must be positive");
    if (obs_dim < 2) throw Error("obs_dim must be at least 2");
    if (num_classes == 0) throw Error("num_classes must be at least 1");
    if (class_gap.size() != num_classes) {
      throw Error("class_gap has " + std::to_string(class_gap.size()) +
                  " entries, expected " + std::to_string(num_classes));
    }
    for (double g : class_gap) {
      if (!(g >= 0.0)) throw Error("class_gap entries must be nonnegative");
    }
    if (min_objects == 0 || min_objects > max_objects) {
      throw Error("objects_per_image range is invalid");
    }
    if (max_objects > grid_size * grid_size) {
      throw Error("objects_per_image max exceeds the number of grid cells");
    }
    if (!(noise_sigma >= 0.0)) throw Error("noise_sigma must be nonnegative");
    if (!(global_style_shift >= 0.0)) throw Error("global_style_shift must be nonnegative");
    if (!(prototype_norm > 0.0) || !(background_norm > 0.0) || !(box_code_gain >= 0.0) ||
        !(rotation_per_gap >= 0.0)) {
      throw Error("generator geometry values must be positive");
    }
    if (!(shift_box_alignment >= 0.0 && shift_box_alignment <= 1.0)) {
      throw Error("shift_box_alignment must lie in [0, 1]");
    }
  }

  void write(ByteWriter& w) const {
    w.u64(grid_size);
    w.u64(obs_dim);
    w.u64(num_classes);
    w.u64(min_objects);
    w.u64(max_objects);
    w.f64(noise_sigma);
    w.u64(class_gap.size());
    for (double g : class_gap) w.f64(g);
    w.f64(global_style_shift);
    w.u64(seed);
    w.f64(prototype_norm);
    w.f64(background_norm);
    w.f64(box_code_gain);
    w.f64(rotation_per_gap);
    w.f64(shift_box_alignment);
  }

  static GenConfig read(ByteReader& r) {
    GenConfig c;
    c.grid_size = r.u64();
    c.obs_dim = r.u64();
    c.num_classes = r.u64();
    c.min_objects = r.u64();
    c.max_objects = r.u64();
    c.noise_sigma = r.f64();
    c.class_gap.resize(r.u64());
    for (double& g : c.class_gap) g = r.f64();
    c.global_style_shift = r.f64();
    c.seed = r.u64();
    c.prototype_norm = r.f64();
    c.background_norm = r.f64();
    c.box_code_gain = r.f64();
    c.rotation_per_gap = r.f64();
    c.shift_box_alignment = r.f64();
    return c;
  }
};

/// Class id in 1..K plus its box.
struct Annotation {
  int label = 0;
  Box box;
};

/// Fixed quantities shared by all images generated from one GenConfig.
class World {
 public:
  explicit World(const GenConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    const std::size_t d = cfg_.obs_dim;
    Rng rng(derive_seed(cfg_.seed, "world"));
    auto random_unit = [&] {
      std::vector<double> v(d);
      for (double& x : v) x = rng.normal();
      normalize(v);
      return v;
    };
    prototypes_.push_back(scaled(random_unit(), cfg_.background_norm));
    for (std::size_t k = 0; k < cfg_.num_classes; ++k) {
      prototypes_.push_back(scaled(random_unit(), cfg_.prototype_norm));
    }
    for (std::size_t j = 0; j < 4; ++j) box_code_.push_back(random_unit());
    style_ = random_unit();
    for (std::size_t k = 0; k < cfg_.num_classes; ++k) {
      std::vector<double> a = prototypes_[k + 1];
      normalize(a);
      std::vector<double> b = random_unit();
      const double proj = dot(a, b);
      for (std::size_t i = 0; i < d; ++i) b[i] -= proj * a[i];
      normalize(b);
      plane_a_.push_back(std::move(a));
      plane_b_.push_back(std::move(b));
      std::vector<double> u = random_unit();
      std::vector<double> in_box(d, 0.0);
      for (std::size_t j = 0; j < 4; ++j) {
        const double c = rng.normal();
        for (std::size_t i = 0; i < d; ++i) in_box[i] += c * box_code_[j][i];
      }
      normalize(in_box);
      const double a_mix = cfg_.shift_box_alignment;
      for (std::size_t i = 0; i < d; ++i) u[i] = a_mix * in_box[i] + (1.0 - a_mix) * u[i];
      normalize(u);
      shift_dir_.push_back(std::move(u));
    }
  }

  const GenConfig& config() const { return cfg_; }

  /// Clean observation of an object (label >= 1) or background (label 0).
  std::vector<double> clean_observation(int label, const BoxOffsets* offsets) const {
    std::vector<double> obs = prototypes_.at(static_cast<std::size_t>(label));
    if (label > 0 && offsets) {
      for (std::size_t j = 0; j < 4; ++j) {
        for (std::size_t i = 0; i < obs.size(); ++i) {
          obs[i] += cfg_.box_code_gain * (*offsets)[j] * box_code_[j][i];
        }
      }
    }
    return obs;
  }

  /// Applies the target-domain transform in place; identity for the source.
  void apply_domain_shift(std::vector<double>& obs, int label, Domain domain) const {
    if (domain == Domain::kSource) return;
    if (label > 0) {
      const std::size_t k = static_cast<std::size_t>(label - 1);
      const double gap = cfg_.class_gap[k];
      if (gap > 0.0) {
        const double theta = cfg_.rotation_per_gap * gap;
        const auto& a = plane_a_[k];
        const auto& b = plane_b_[k];
        const double pa = dot(obs, a);
        const double pb = dot(obs, b);
        const double ra = std::cos(theta) * pa - std::sin(theta) * pb;
        const double rb = std::sin(theta) * pa + std::cos(theta) * pb;
        for (std::size_t i = 0; i < obs.size(); ++i) {
          obs[i] += (ra - pa) * a[i] + (rb - pb) * b[i] + gap * shift_dir_[k][i];
        }
      }
    }
    for (std::size_t i = 0; i < obs.size(); ++i) {
      obs[i] += cfg_.global_style_shift * style_[i];
    }
  }

 private:
  static double dot(const std::vector<double>& a, const std::vector<double>& b) {
    return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
  }
  static void normalize(std::vector<double>& v) {
    const double n = std::sqrt(dot(v, v));
    for (double& x : v) x /= n;
  }
  static std::vector<double> scaled(std::vector<double> v, double s) {
    for (double& x : v) x *= s;
    return v;
  }

  GenConfig cfg_;
  std::vector<std::vector<double>> prototypes_;
  std::vector<std::vector<double>> box_code_;
  std::vector<double> style_;
  std::vector<std::vector<double>> plane_a_, plane_b_, shift_dir_;
};

struct Sample {
  Tensor cells;  // G x G x obs_dim, cell (u, v) at row u * G + v
  std::vector<Annotation> annotations;
  Domain domain = Domain::kSource;
};

/// Generated image set. Labels of a withheld dataset stay stored (so test
/// code can still score it) but every read through labels() is counted.
class Dataset {
 public:
  Dataset() = default;
  Dataset(GenConfig config, Split split, Domain domain, std::vector<Sample> samples)
      : config_(std::move(config)), split_(split), domain_(domain),
        samples_(std::move(samples)) {}

  const GenConfig& config() const { return config_; }
  Split split() const { return split_; }
  Domain domain() const { return domain_; }
  std::size_t size() const { return samples_.size(); }
  bool empty() const { return samples_.empty(); }

  const Tensor& cells(std::size_t i) const { return samples_.at(i).cells; }

  const std::vector<Annotation>& labels(std::size_t i) const {
    if (withheld_) reads_->fetch_add(1, std::memory_order_relaxed);
    return samples_.at(i).annotations;
  }

  bool labels_withheld() const { return withheld_; }
  /// Number of labels() calls made while withheld (shared across copies).
  std::uint64_t label_reads() const { return reads_->load(); }

  /// Copy whose labels are flagged unavailable, with a fresh read counter.
  Dataset withheld() const {
    Dataset d = *this;
    d.withheld_ = true;
    d.reads_ = std::make_shared<std::atomic<std::uint64_t>>(0);
    return d;
  }

  /// Subset in the given order; keeps the withheld flag and counter.
  Dataset subset(const std::vector<std::size_t>& indices) const {
    Dataset d = *this;
    d.samples_.clear();
    for (std::size_t i : indices) d.samples_.push_back(samples_.at(i));
    return d;
  }

  /// Label access for code that owns evaluation (never counted).
  const std::vector<Annotation>& ground_truth(std::size_t i) const {
    return samples_.at(i).annotations;
  }

  std::string serialize() const {
    ByteWriter w;
    w.raw("DALABDS1");
    config_.write(w);
    w.u8(static_cast<std::uint8_t>(split_));
    w.u8(static_cast<std::uint8_t>(domain_));
    w.u8(withheld_ ? 1 : 0);
    w.u64(samples_.size());
    for (const Sample& s : samples_) {
      w.u8(static_cast<std::uint8_t>(s.domain));
      w.tensor(s.cells);
      w.u64(s.annotations.size());
      for (const Annotation& a : s.annotations) {
        w.i64(a.label);
        w.f64(a.box.cx);
        w.f64(a.box.cy);
        w.f64(a.box.w);
        w.f64(a.box.h);
      }
    }
    return w.take();
  }

  static Dataset deserialize(std::string_view bytes) {
    ByteReader r(bytes);
    if (r.raw(8) != "DALABDS1") throw Error("not a dataset file");
    Dataset d;
    d.config_ = GenConfig::read(r);
    d.split_ = static_cast<Split>(r.u8());
    d.domain_ = static_cast<Domain>(r.u8());
    d.withheld_ = r.u8() != 0;
    const std::uint64_t n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
      Sample s;
      s.domain = static_cast<Domain>(r.u8());
      s.cells = r.tensor();
      s.annotations.resize(r.u64());
      for (Annotation& a : s.annotations) {
        a.label = static_cast<int>(r.i64());
        a.box = {r.f64(), r.f64(), r.f64(), r.f64()};
      }
      d.samples_.push_back(std::move(s));
    }
    if (!r.done()) throw Error("trailing bytes in dataset file");
    return d;
  }

  void save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }
  static Dataset load(const std::filesystem::path& path) {
    return deserialize(read_file(path));
  }

 private:
  GenConfig config_;
  Split split_ = Split::kTrain;
  Domain domain_ = Domain::kSource;
  std::vector<Sample> samples_;
  bool withheld_ = false;
  std::shared_ptr<std::atomic<std::uint64_t>> reads_ =
      std::make_shared<std::atomic<std::uint64_t>>(0);
};

/// One image. The noise stream depends only on (split_seed, index), so the
/// source and target versions of an index share layout and noise.
inline Sample generate_sample(const World& world, Domain domain, std::uint64_t split_seed,
                              std::uint64_t index) {
  const GenConfig& cfg = world.config();
  const std::size_t g = cfg.grid_size;
  const std::size_t d = cfg.obs_dim;
  Rng rng(derive_seed(split_seed, "sample", index));

  Sample s;
  s.domain = domain;
  s.cells = Tensor({g, g, d});

  const std::size_t count =
      cfg.min_objects + rng.below(cfg.max_objects - cfg.min_objects + 1);
  std::vector<std::size_t> cells(g * g);
  std::iota(cells.begin(), cells.end(), std::size_t{0});
  rng.shuffle(cells.begin(), cells.end());
  cells.resize(count);
  std::sort(cells.begin(), cells.end());

  const double step = 1.0 / static_cast<double>(g);
  constexpr double kMinSize = 0.08;
  constexpr double kMaxSize = 0.3;
  std::vector<int> labels(g * g, 0);
  std::vector<BoxOffsets> offsets(g * g);
  for (std::size_t idx : cells) {
    const Cell cell = Cell::from_index(idx, g);
    Annotation a;
    a.label = 1 + static_cast<int>(rng.below(cfg.num_classes));
    // Centre inside the cell and far enough from the border for a minimal box.
    auto centre = [&](std::size_t c) {
      const double lo = std::max(static_cast<double>(c) * step, kMinSize / 2);
      const double hi = std::min(static_cast<double>(c + 1) * step, 1.0 - kMinSize / 2);
      double x = rng.uniform(lo, hi);
      // Keep the centre strictly inside the cell so it decodes back to it.
      return std::min(x, std::nextafter(static_cast<double>(c + 1) * step, 0.0));
    };
    a.box.cx = centre(cell.u);
    a.box.cy = centre(cell.v);
    auto size = [&](double c) {
      const double room = 2.0 * std::min(c, 1.0 - c);
      return rng.uniform(kMinSize, std::min(kMaxSize, room));
    };
    a.box.w = size(a.box.cx);
    a.box.h = size(a.box.cy);
    s.annotations.push_back(a);
    labels[idx] = a.label;
    offsets[idx] = encode_box(a.box, cell, g);
  }

  for (std::size_t c = 0; c < g * g; ++c) {
    std::vector<double> obs =
        world.clean_observation(labels[c], labels[c] > 0 ? &offsets[c] : nullptr);
    for (double& x : obs) x += cfg.noise_sigma * rng.normal();
    world.apply_domain_shift(obs, labels[c], domain);
    std::copy(obs.begin(), obs.end(), s.cells.data().begin() + static_cast<std::ptrdiff_t>(c * d));
  }
  return s;
}

inline Dataset generate_dataset(const GenConfig& config, Domain domain, std::int64_t count,
                                std::uint64_t split_seed, Split split = Split::kTrain) {
  if (count <= 0) throw Error("dataset count must be positive, got " + std::to_string(count));
  const World world(config);
  std::vector<Sample> samples;
  samples.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    samples.push_back(generate_sample(world, domain, split_seed, static_cast<std::uint64_t>(i)));
  }
  return Dataset(config, split, domain, std::move(samples));
}

inline std::string dataset_digest(const Dataset& dataset) {
  return sha256_hex(dataset.serialize());
}

/// Union of `n` images drawn per class among the images containing it. The
/// result has its labels withheld.
inline Dataset sample_ufda_subset(const Dataset& dataset, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw Error("ufda shots must be positive");
  const std::size_t k_max = dataset.config().num_classes;
  std::set<std::size_t> chosen;
  Rng rng(derive_seed(seed, "ufda"));
  for (std::size_t k = 1; k <= k_max; ++k) {
    std::vector<std::size_t> containing;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      for (const Annotation& a : dataset.ground_truth(i)) {
        if (a.label == static_cast<int>(k)) {
          containing.push_back(i);
          break;
        }
      }
    }
    if (containing.size() < n) {
      throw Error("class " + std::to_string(k) + " appears in only " +
                  std::to_string(containing.size()) + " images, need " + std::to_string(n));
    }
    rng.shuffle(containing.begin(), containing.end());
    chosen.insert(containing.begin(), containing.begin() + static_cast<std::ptrdiff_t>(n));
  }
  return dataset.subset({chosen.begin(), chosen.end()}).withheld();
}

}  // namespace dalab
