#pragma once

// Experiment orchestration: a JSON experiment config, deterministic seed
// fan-out, cached datasets and pretraining, per-run metric records with an
// aggregate recomputed from them, the six-row ablation table, feature dumps
// and H-divergence reports.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dalab/adapt.hpp"
#include "dalab/detector.hpp"
#include "dalab/digest.hpp"
#include "dalab/io.hpp"
#include "dalab/synthgen.hpp"
#include "dalab/trainer.hpp"

namespace dalab {

using json = nlohmann::json;

enum class Setting { kUda, kUfda };

inline const char* to_string(Setting s) { return s == Setting::kUda ? "uda" : "ufda"; }

inline Setting parse_setting(std::string_view s) {
  if (s == "uda") return Setting::kUda;
  if (s == "ufda") return Setting::kUfda;
  throw Error("unknown setting '" + std::string(s) + "' (expected uda or ufda)");
}

struct DataSizes {
  std::int64_t source_train = 2000;
  std::int64_t target_train = 1000;
  std::int64_t source_test = 500;
  std::int64_t target_test = 500;
};

struct HdistOptions {
  bool enabled = true;
  std::size_t images = 100;
  ProbeConfig probe;
};

struct ExperimentConfig {
  GenConfig generator;
  DataSizes data;
  TrainSchedule schedule;
  bool align_hidden_layer = false;
  bool dense_marginal = true;
  std::vector<std::string> variants = {"baseline", "M", "M+WC"};
  Setting setting = Setting::kUda;
  std::size_t shots = 1;
  std::optional<std::size_t> repeats;  // defaults: 1 for uda, 10 for ufda
  EvalOptions eval;
  HdistOptions hdist;
  std::string output_dir = "out";
  std::uint64_t master_seed = 0;

  std::size_t effective_repeats() const {
    return repeats.value_or(setting == Setting::kUfda ? 10 : 1);
  }
};

inline constexpr const char* kAblationVariants[] = {"baseline", "M", "C", "WC", "M+C", "M+WC"};

// Seeds ---------------------------------------------------------------------

/// Every random stream of an experiment comes from (master, purpose, repeat).
inline std::uint64_t fan_out(std::uint64_t master, std::string_view purpose,
                             std::uint64_t repeat = 0) {
  return derive_seed(master, purpose, repeat);
}

/// Generator config with its world seed derived from the master seed.
inline GenConfig world_config(const ExperimentConfig& cfg) {
  GenConfig g = cfg.generator;
  g.seed = fan_out(cfg.master_seed, "world");
  return g;
}

// JSON ----------------------------------------------------------------------

inline json to_json(const ExperimentConfig& c) {
  const GenConfig& g = c.generator;
  const TrainSchedule& s = c.schedule;
  json j;
  j["master_seed"] = c.master_seed;
  j["output_dir"] = c.output_dir;
  j["generator"] = {{"grid_size", g.grid_size},
                    {"obs_dim", g.obs_dim},
                    {"num_classes", g.num_classes},
                    {"objects_min", g.min_objects},
                    {"objects_max", g.max_objects},
                    {"noise_sigma", g.noise_sigma},
                    {"class_gap", g.class_gap},
                    {"global_style_shift", g.global_style_shift},
                    {"prototype_norm", g.prototype_norm},
                    {"background_norm", g.background_norm},
                    {"box_code_gain", g.box_code_gain},
                    {"rotation_per_gap", g.rotation_per_gap},
                    {"shift_box_alignment", g.shift_box_alignment}};
  j["data"] = {{"source_train", c.data.source_train},
               {"target_train", c.data.target_train},
               {"source_test", c.data.source_test},
               {"target_test", c.data.target_test}};
  j["schedule"] = {{"pretrain_iterations", s.pretrain_iterations},
                   {"pretrain_lr", s.pretrain_lr},
                   {"pretrain_decay", s.pretrain_decay},
                   {"pretrain_batch", s.pretrain_batch},
                   {"adapt_iterations", s.adapt_iterations},
                   {"adapt_lr", s.adapt_lr},
                   {"adapt_decay", s.adapt_decay},
                   {"source_batch", s.source_batch},
                   {"target_batch", s.target_batch},
                   {"lambda", s.lambda},
                   {"classifier_lr_mult", s.classifier_lr_mult},
                   {"norm_images", s.norm_images},
                   {"norm_floor", s.norm_floor},
                   {"momentum", s.momentum},
                   {"weight_decay", s.weight_decay},
                   {"bg_weight", s.bg_weight},
                   {"participation_floor", s.participation_floor},
                   {"align_layer", c.align_hidden_layer ? "hidden" : "final"},
                   {"dense_marginal", c.dense_marginal},
                   {"plateau",
                    {{"enabled", s.plateau_enabled},
                     {"window", s.plateau_window},
                     {"rel_tol", s.plateau_rel_tol}}},
                   {"transferability",
                    {{"decay", s.transferability.decay},
                     {"warmup", s.transferability.warmup},
                     {"clip_min", s.transferability.clip_lo},
                     {"clip_max", s.transferability.clip_hi}}}};
  j["variants"] = c.variants;
  j["setting"] = to_string(c.setting);
  j["shots"] = c.shots;
  j["repeats"] = c.repeats ? json(*c.repeats) : json(nullptr);
  j["eval"] = {{"conf_thresh", c.eval.conf_thresh}, {"nms_iou", c.eval.iou_thresh}};
  j["hdist"] = {{"enabled", c.hdist.enabled},
                {"images", c.hdist.images},
                {"steps", c.hdist.probe.steps},
                {"lr", c.hdist.probe.lr},
                {"max_per_domain", c.hdist.probe.max_per_domain}};
  return j;
}

namespace detail {

/// Walks a JSON document against a defaults-filled config, collecting every
/// problem instead of stopping at the first.
class ConfigReader {
 public:
  std::vector<std::string> errors;

  void object(const json& j, const std::string& path, const std::set<std::string>& known) {
    if (!j.is_object()) {
      errors.push_back(path + ": expected a table");
      return;
    }
    for (const auto& [k, v] : j.items()) {
      if (!known.contains(k)) errors.push_back(join(path, k) + ": unknown field");
    }
  }

  template <typename T>
  void get(const json& j, const std::string& path, const char* key, T& out) {
    if (!j.is_object() || !j.contains(key)) return;
    try {
      const json& v = j.at(key);
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw std::runtime_error("expected true or false");
      } else if constexpr (std::is_unsigned_v<T>) {
        if (!v.is_number_unsigned()) throw std::runtime_error("expected a nonnegative integer");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw std::runtime_error("expected an integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw std::runtime_error("expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw std::runtime_error("expected a string");
      }
      out = v.get<T>();
    } catch (const std::exception& e) {
      errors.push_back(join(path, key) + ": " + e.what());
    }
  }

  static std::string join(const std::string& path, const std::string& key) {
    return path.empty() ? key : path + "." + key;
  }
};

}  // namespace detail

/// Validates semantic constraints; returns "field: problem" strings.
inline std::vector<std::string> validation_errors(const ExperimentConfig& c) {
  std::vector<std::string> e;
  auto check = [&](bool ok, const std::string& msg) {
    if (!ok) e.push_back(msg);
  };
  const GenConfig& g = c.generator;
  check(g.grid_size > 0, "generator.grid_size: must be positive");
  check(g.obs_dim >= 2, "generator.obs_dim: must be at least 2");
  check(g.num_classes > 0, "generator.num_classes: must be at least 1");
  check(g.class_gap.size() == g.num_classes,
        "generator.class_gap: has " + std::to_string(g.class_gap.size()) + " entries, expected " +
            std::to_string(g.num_classes));
  check(std::all_of(g.class_gap.begin(), g.class_gap.end(), [](double x) { return x >= 0.0; }),
        "generator.class_gap: entries must be nonnegative");
  check(g.min_objects >= 1 && g.min_objects <= g.max_objects,
        "generator.objects_min: must be in 1..objects_max");
  check(g.max_objects <= g.grid_size * g.grid_size,
        "generator.objects_max: exceeds the number of grid cells");
  check(g.noise_sigma >= 0.0, "generator.noise_sigma: must be nonnegative");
  check(g.global_style_shift >= 0.0, "generator.global_style_shift: must be nonnegative");
  check(c.data.source_train > 0, "data.source_train: must be positive");
  check(c.data.target_train > 0, "data.target_train: must be positive");
  check(c.data.source_test > 0, "data.source_test: must be positive");
  check(c.data.target_test > 0, "data.target_test: must be positive");
  try {
    c.schedule.validate();
  } catch (const Error& ex) {
    e.push_back(std::string("schedule: ") + ex.what());
  }
  for (const std::string& v : c.variants) {
    try {
      Variant::parse(v);
    } catch (const Error& ex) {
      e.push_back(std::string("variants: ") + ex.what());
    }
  }
  if (c.setting == Setting::kUfda) {
    check(c.shots >= 1 && c.shots <= 3, "shots: must be 1, 2 or 3");
  }
  if (c.repeats) check(*c.repeats >= 1, "repeats: must be at least 1");
  check(c.eval.conf_thresh > 0.0 && c.eval.conf_thresh < 1.0,
        "eval.conf_thresh: must lie in (0, 1)");
  check(c.eval.iou_thresh > 0.0 && c.eval.iou_thresh <= 1.0, "eval.nms_iou: must lie in (0, 1]");
  check(c.hdist.images > 0, "hdist.images: must be positive");
  check(!c.output_dir.empty(), "output_dir: must not be empty");
  return e;
}

inline ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  detail::ConfigReader r;
  r.object(j, "", {"master_seed", "output_dir", "generator", "data", "schedule", "variants",
                   "setting", "shots", "repeats", "eval", "hdist"});
  if (!j.is_object()) throw Error("invalid config: top level must be a table");
  r.get(j, "", "master_seed", c.master_seed);
  r.get(j, "", "output_dir", c.output_dir);

  if (j.contains("generator")) {
    const json& g = j["generator"];
    r.object(g, "generator",
             {"grid_size", "obs_dim", "num_classes", "objects_min", "objects_max", "noise_sigma",
              "class_gap", "global_style_shift", "prototype_norm", "background_norm",
              "box_code_gain", "rotation_per_gap", "shift_box_alignment"});
    GenConfig& o = c.generator;
    r.get(g, "generator", "grid_size", o.grid_size);
    r.get(g, "generator", "obs_dim", o.obs_dim);
    r.get(g, "generator", "num_classes", o.num_classes);
    r.get(g, "generator", "objects_min", o.min_objects);
    r.get(g, "generator", "objects_max", o.max_objects);
    r.get(g, "generator", "noise_sigma", o.noise_sigma);
    r.get(g, "generator", "class_gap", o.class_gap);
    r.get(g, "generator", "global_style_shift", o.global_style_shift);
    r.get(g, "generator", "prototype_norm", o.prototype_norm);
    r.get(g, "generator", "background_norm", o.background_norm);
    r.get(g, "generator", "box_code_gain", o.box_code_gain);
    r.get(g, "generator", "rotation_per_gap", o.rotation_per_gap);
    r.get(g, "generator", "shift_box_alignment", o.shift_box_alignment);
  }
  if (j.contains("data")) {
    const json& d = j["data"];
    r.object(d, "data", {"source_train", "target_train", "source_test", "target_test"});
    r.get(d, "data", "source_train", c.data.source_train);
    r.get(d, "data", "target_train", c.data.target_train);
    r.get(d, "data", "source_test", c.data.source_test);
    r.get(d, "data", "target_test", c.data.target_test);
  }
  if (j.contains("schedule")) {
    const json& s = j["schedule"];
    r.object(s, "schedule",
             {"pretrain_iterations", "pretrain_lr", "pretrain_decay", "pretrain_batch",
              "adapt_iterations", "adapt_lr", "adapt_decay", "source_batch", "target_batch",
              "lambda", "classifier_lr_mult", "norm_images", "norm_floor", "momentum",
              "weight_decay", "bg_weight", "participation_floor", "align_layer",
              "dense_marginal", "plateau", "transferability"});
    TrainSchedule& o = c.schedule;
    r.get(s, "schedule", "pretrain_iterations", o.pretrain_iterations);
    r.get(s, "schedule", "pretrain_lr", o.pretrain_lr);
    r.get(s, "schedule", "pretrain_decay", o.pretrain_decay);
    r.get(s, "schedule", "pretrain_batch", o.pretrain_batch);
    r.get(s, "schedule", "adapt_iterations", o.adapt_iterations);
    r.get(s, "schedule", "adapt_lr", o.adapt_lr);
    r.get(s, "schedule", "adapt_decay", o.adapt_decay);
    r.get(s, "schedule", "source_batch", o.source_batch);
    r.get(s, "schedule", "target_batch", o.target_batch);
    r.get(s, "schedule", "lambda", o.lambda);
    r.get(s, "schedule", "classifier_lr_mult", o.classifier_lr_mult);
    r.get(s, "schedule", "norm_images", o.norm_images);
    r.get(s, "schedule", "norm_floor", o.norm_floor);
    r.get(s, "schedule", "momentum", o.momentum);
    r.get(s, "schedule", "weight_decay", o.weight_decay);
    r.get(s, "schedule", "bg_weight", o.bg_weight);
    r.get(s, "schedule", "participation_floor", o.participation_floor);
    std::string layer = c.align_hidden_layer ? "hidden" : "final";
    r.get(s, "schedule", "align_layer", layer);
    if (layer == "hidden" || layer == "final") {
      c.align_hidden_layer = layer == "hidden";
    } else {
      r.errors.push_back("schedule.align_layer: expected final or hidden");
    }
    r.get(s, "schedule", "dense_marginal", c.dense_marginal);
    if (s.is_object() && s.contains("plateau")) {
      const json& p = s["plateau"];
      r.object(p, "schedule.plateau", {"enabled", "window", "rel_tol"});
      r.get(p, "schedule.plateau", "enabled", o.plateau_enabled);
      r.get(p, "schedule.plateau", "window", o.plateau_window);
      r.get(p, "schedule.plateau", "rel_tol", o.plateau_rel_tol);
    }
    if (s.is_object() && s.contains("transferability")) {
      const json& t = s["transferability"];
      r.object(t, "schedule.transferability", {"decay", "warmup", "clip_min", "clip_max"});
      r.get(t, "schedule.transferability", "decay", o.transferability.decay);
      r.get(t, "schedule.transferability", "warmup", o.transferability.warmup);
      r.get(t, "schedule.transferability", "clip_min", o.transferability.clip_lo);
      r.get(t, "schedule.transferability", "clip_max", o.transferability.clip_hi);
    }
  }
  r.get(j, "", "variants", c.variants);
  std::string setting = to_string(c.setting);
  r.get(j, "", "setting", setting);
  if (setting == "uda" || setting == "ufda") {
    c.setting = parse_setting(setting);
  } else {
    r.errors.push_back("setting: expected uda or ufda");
  }
  r.get(j, "", "shots", c.shots);
  if (j.contains("repeats") && !j["repeats"].is_null()) {
    std::size_t n = 0;
    r.get(j, "", "repeats", n);
    c.repeats = n;
  }
  if (j.contains("eval")) {
    const json& e = j["eval"];
    r.object(e, "eval", {"conf_thresh", "nms_iou"});
    r.get(e, "eval", "conf_thresh", c.eval.conf_thresh);
    r.get(e, "eval", "nms_iou", c.eval.iou_thresh);
  }
  if (j.contains("hdist")) {
    const json& h = j["hdist"];
    r.object(h, "hdist", {"enabled", "images", "steps", "lr", "max_per_domain"});
    r.get(h, "hdist", "enabled", c.hdist.enabled);
    r.get(h, "hdist", "images", c.hdist.images);
    r.get(h, "hdist", "steps", c.hdist.probe.steps);
    r.get(h, "hdist", "lr", c.hdist.probe.lr);
    r.get(h, "hdist", "max_per_domain", c.hdist.probe.max_per_domain);
  }

  std::vector<std::string> all = r.errors;
  if (all.empty()) {
    const auto semantic = validation_errors(c);
    all.insert(all.end(), semantic.begin(), semantic.end());
  }
  if (!all.empty()) {
    std::string msg = "invalid config: ";
    for (std::size_t i = 0; i < all.size(); ++i) msg += (i ? "; " : "") + all[i];
    throw Error(msg);
  }
  return c;
}

inline ExperimentConfig parse_config(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  return parse_config(read_file(path));
}

/// Canonical form: sorted keys, compact, output location left out.
inline std::string canonical_config(const ExperimentConfig& c) {
  json j = to_json(c);
  j.erase("output_dir");
  return j.dump();
}

inline std::string config_digest(const ExperimentConfig& c) {
  return sha256_hex(canonical_config(c));
}

/// Digest of the inputs that determine pretraining; the cached checkpoint is
/// keyed on it so that variant, setting and evaluation changes reuse it.
inline std::string pretrain_config_digest(const ExperimentConfig& c) {
  const json j = to_json(c);
  return sha256_hex(json{{"master_seed", j["master_seed"]},
                         {"generator", j["generator"]},
                         {"data", j["data"]},
                         {"schedule", j["schedule"]}}
                        .dump());
}

// Output directory ----------------------------------------------------------

/// Every artifact is written below one root. Existing files are refused
/// unless `force` is set.
class OutputDir {
 public:
  OutputDir(std::filesystem::path root, bool force) : root_(std::move(root)), force_(force) {
    std::filesystem::create_directories(root_);
  }

  const std::filesystem::path& root() const { return root_; }
  bool force() const { return force_; }

  std::filesystem::path path(const std::filesystem::path& rel) const {
    if (rel.is_absolute() || rel.empty()) {
      throw Error("output path '" + rel.string() + "' must be relative to the output directory");
    }
    for (const auto& part : rel) {
      if (part == "..") throw Error("output path '" + rel.string() + "' leaves the output directory");
    }
    return root_ / rel;
  }

  bool exists(const std::filesystem::path& rel) const {
    return std::filesystem::exists(path(rel));
  }

  std::filesystem::path write(const std::filesystem::path& rel, std::string_view content) const {
    const auto full = path(rel);
    if (!force_ && std::filesystem::exists(full)) {
      throw Error("refusing to overwrite " + full.string() + " (pass --force)");
    }
    std::filesystem::create_directories(full.parent_path());
    write_file_atomic(full, content);
    return full;
  }

 private:
  std::filesystem::path root_;
  bool force_;
};

/// Records the resolved config under its digest; an identical snapshot is
/// left alone.
inline std::filesystem::path write_config_snapshot(const ExperimentConfig& cfg,
                                                   const OutputDir& out) {
  const std::filesystem::path rel =
      std::filesystem::path("configs") / (config_digest(cfg).substr(0, 16) + ".json");
  const std::string text = to_json(cfg).dump(2) + "\n";
  if (out.exists(rel) && read_file(out.path(rel)) == text) return out.path(rel);
  return out.write(rel, text);
}

// Datasets and pretraining --------------------------------------------------

struct ExperimentData {
  Dataset source_train;
  Dataset target_train;  // withheld
  Dataset source_test;
  Dataset target_test;
};

namespace detail {

inline Dataset cached_dataset(const OutputDir& out, const std::string& name, const GenConfig& g,
                              Domain domain, std::int64_t count, std::uint64_t seed, Split split) {
  const std::filesystem::path rel = std::filesystem::path("data") / (name + ".bin");
  if (out.exists(rel) && !out.force()) {
    Dataset d = Dataset::load(out.path(rel));
    std::string expect;
    {
      ByteWriter a, b;
      d.config().write(a);
      g.write(b);
      if (a.take() != b.take() || d.domain() != domain || d.split() != split ||
          d.size() != static_cast<std::size_t>(count)) {
        throw Error("cached dataset " + out.path(rel).string() +
                    " was generated from a different config (pass --force to regenerate)");
      }
    }
    return d;
  }
  Dataset d = generate_dataset(g, domain, count, seed, split);
  out.write(rel, d.serialize());
  return d;
}

}  // namespace detail

/// Generates the four splits, or loads them when already cached under out/data.
inline ExperimentData prepare_data(const ExperimentConfig& cfg, const OutputDir& out) {
  const GenConfig g = world_config(cfg);
  const std::uint64_t m = cfg.master_seed;
  ExperimentData d;
  d.source_train = detail::cached_dataset(out, "source_train", g, Domain::kSource,
                                          cfg.data.source_train, fan_out(m, "source-train"),
                                          Split::kTrain);
  d.target_train = detail::cached_dataset(out, "target_train", g, Domain::kTarget,
                                          cfg.data.target_train, fan_out(m, "target-train"),
                                          Split::kTrain)
                       .withheld();
  d.source_test = detail::cached_dataset(out, "source_test", g, Domain::kSource,
                                         cfg.data.source_test, fan_out(m, "source-test"),
                                         Split::kTest);
  d.target_test = detail::cached_dataset(out, "target_test", g, Domain::kTarget,
                                         cfg.data.target_test, fan_out(m, "target-test"),
                                         Split::kTest);
  return d;
}

inline const std::filesystem::path kPretrainedCheckpoint = "checkpoints/pretrained.ckpt";

/// Pretrains on the source split, or reuses a cached checkpoint whose config
/// digest matches.
inline Checkpoint prepare_pretrained(const ExperimentConfig& cfg, const OutputDir& out,
                                     const ExperimentData& data) {
  const std::string digest = pretrain_config_digest(cfg);
  if (out.exists(kPretrainedCheckpoint) && !out.force()) {
    Checkpoint ck = Checkpoint::load(out.path(kPretrainedCheckpoint));
    if (ck.config_digest != digest || ck.phase != Phase::kPretrained) {
      throw Error("cached checkpoint " + out.path(kPretrainedCheckpoint).string() +
                  " does not match this config (pass --force to retrain)");
    }
    return ck;
  }
  TrainResult r = pretrain(cfg.schedule, data.source_train, fan_out(cfg.master_seed, "pretrain"),
                           digest);
  out.write(kPretrainedCheckpoint, r.checkpoint.serialize());
  out.write("logs/pretrain_loss.csv", loss_curve_csv(r.log, data.source_train.config().num_classes));
  return r.checkpoint;
}

inline Checkpoint load_pretrained(const ExperimentConfig& cfg, const OutputDir& out) {
  if (!out.exists(kPretrainedCheckpoint)) {
    throw Error("no pretrained checkpoint at " + out.path(kPretrainedCheckpoint).string() +
                " (run the pretrain subcommand first)");
  }
  Checkpoint ck = Checkpoint::load(out.path(kPretrainedCheckpoint));
  if (ck.config_digest != pretrain_config_digest(cfg)) {
    throw Error("checkpoint " + out.path(kPretrainedCheckpoint).string() +
                " was trained under a different config");
  }
  return ck;
}

// Features and H-divergence -------------------------------------------------

struct CellFeatures {
  Tensor features;                 // rows x 32
  std::vector<int> truth;          // -1 when withheld
  std::vector<int> predicted;
  std::vector<std::size_t> image;  // index into the dataset
};

/// Alignment-layer features of the first `images` images of a dataset.
inline CellFeatures collect_features(const ParamSet& params, const Dataset& ds,
                                     std::size_t images, std::size_t batch = 64) {
  const DetectorShape shape = DetectorShape::from(ds.config());
  const ParamSet detector = params.filtered({"backbone.", "head."});
  const std::size_t n = std::min(images, ds.size());
  const std::size_t cells = shape.cells();
  CellFeatures out;
  out.features = Tensor::matrix(std::max<std::size_t>(n * cells, 1), kFeatureWidth);
  for (std::size_t start = 0; start < n; start += batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(n, start + batch); ++i) idx.push_back(i);
    std::vector<FeatureMap> fm;
    std::vector<Predictions> preds;
    run_detector(detector, shape, stack_cells(ds, idx), &fm, &preds);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      const std::size_t i = idx[j];
      std::vector<int> labels(cells, -1);
      if (!ds.labels_withheld()) labels = match_targets(ds.labels(i), shape.grid).labels;
      for (std::size_t c = 0; c < cells; ++c) {
        const std::size_t row = i * cells + c;
        std::copy_n(&fm[j].features.data()[c * kFeatureWidth], kFeatureWidth,
                    &out.features.data()[row * kFeatureWidth]);
        std::size_t best = 0;
        for (std::size_t k = 1; k < preds[j].class_probs.cols(); ++k) {
          if (preds[j].class_probs.at(c, k) > preds[j].class_probs.at(c, best)) best = k;
        }
        out.truth.push_back(labels[c]);
        out.predicted.push_back(static_cast<int>(best));
        out.image.push_back(i);
      }
    }
  }
  return out;
}

/// One CSV row per cell: image_id, u, v, domain, gt_class, pred_class, f00..f31.
inline std::string feature_csv(const ParamSet& params, const Dataset& ds) {
  const DetectorShape shape = DetectorShape::from(ds.config());
  const CellFeatures f = collect_features(params, ds, ds.size());
  std::ostringstream os;
  os << "image_id,u,v,domain,gt_class,pred_class";
  char buf[32];
  for (std::size_t j = 0; j < kFeatureWidth; ++j) {
    std::snprintf(buf, sizeof buf, ",f%02zu", j);
    os << buf;
  }
  os << '\n';
  for (std::size_t r = 0; r < f.truth.size(); ++r) {
    const Cell cell = Cell::from_index(r % shape.cells(), shape.grid);
    os << f.image[r] << ',' << cell.u << ',' << cell.v << ',' << to_string(ds.domain()) << ','
       << f.truth[r] << ',' << f.predicted[r];
    for (std::size_t j = 0; j < kFeatureWidth; ++j) {
      std::snprintf(buf, sizeof buf, ",%.17g", f.features.at(r, j));
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

inline Tensor select_rows(const Tensor& t, const std::vector<std::size_t>& rows) {
  Tensor out = Tensor::matrix(std::max<std::size_t>(rows.size(), 1), t.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(&t.data()[rows[i] * t.cols()], t.cols(), &out.data()[i * t.cols()]);
  }
  if (rows.empty()) return Tensor::matrix(1, t.cols());
  return out;
}

struct HdistEntry {
  std::string scope;  // "marginal" or "class k"
  std::optional<std::size_t> label;
  std::optional<HDivergenceEstimate> estimate;
  std::string reason;  // why the estimate is missing
};

struct HdistReport {
  HdistEntry marginal;
  std::vector<HdistEntry> conditional;
  std::uint64_t seed = 0;
  std::size_t images = 0;
};

/// Marginal and per-class H-divergence between source (ground-truth classes)
/// and target (predicted classes) cell features. The target set is never
/// asked for labels.
inline HdistReport measure_hdist(const ParamSet& params, const Dataset& source,
                                 const Dataset& target, const HdistOptions& opt,
                                 std::uint64_t seed) {
  if (source.empty() || target.empty()) throw Error("measure_hdist needs nonempty sets");
  if (source.labels_withheld()) throw Error("measure_hdist needs a labelled source set");
  const std::size_t K = source.config().num_classes;
  const Dataset target_view = target.withheld();
  const CellFeatures fs = collect_features(params, source, opt.images);
  const CellFeatures ft = collect_features(params, target_view, opt.images);
  HdistReport rep;
  rep.seed = seed;
  rep.images = opt.images;

  auto estimate = [&](HdistEntry e, const std::vector<std::size_t>& rs,
                      const std::vector<std::size_t>& rt, std::uint64_t s) {
    if (rs.size() < opt.probe.min_per_domain || rt.size() < opt.probe.min_per_domain) {
      e.reason = "insufficient features: " + std::to_string(rs.size()) + " source and " +
                 std::to_string(rt.size()) + " target vectors, need " +
                 std::to_string(opt.probe.min_per_domain) + " each";
      return e;
    }
    e.estimate =
        estimate_h_divergence(select_rows(fs.features, rs), select_rows(ft.features, rt),
                              opt.probe, s, e.scope);
    return e;
  };

  std::vector<std::size_t> all_s(fs.truth.size()), all_t(ft.truth.size());
  std::iota(all_s.begin(), all_s.end(), std::size_t{0});
  std::iota(all_t.begin(), all_t.end(), std::size_t{0});
  rep.marginal = estimate({"marginal", std::nullopt, std::nullopt, {}}, all_s, all_t,
                          derive_seed(seed, "marginal"));
  for (std::size_t k = 1; k <= K; ++k) {
    std::vector<std::size_t> rs, rt;
    for (std::size_t r = 0; r < fs.truth.size(); ++r) {
      if (fs.truth[r] == static_cast<int>(k)) rs.push_back(r);
    }
    for (std::size_t r = 0; r < ft.predicted.size(); ++r) {
      if (ft.predicted[r] == static_cast<int>(k)) rt.push_back(r);
    }
    rep.conditional.push_back(estimate({"class " + std::to_string(k), k, std::nullopt, {}}, rs,
                                       rt, derive_seed(seed, "conditional", k)));
  }
  return rep;
}

inline json to_json(const HDivergenceEstimate& e) {
  return {{"d", e.d},
          {"eps_source", e.eps_source},
          {"eps_target", e.eps_target},
          {"scope", e.scope},
          {"train_source", e.train_source},
          {"train_target", e.train_target},
          {"test_source", e.test_source},
          {"test_target", e.test_target},
          {"seed", e.seed}};
}

inline json to_json(const HdistEntry& e) {
  json j = e.estimate ? to_json(*e.estimate) : json{{"d", nullptr}, {"scope", e.scope}};
  if (e.label) j["class"] = *e.label;
  if (!e.estimate) j["reason"] = e.reason;
  return j;
}

inline json to_json(const HdistReport& r) {
  json cond = json::array();
  for (const auto& e : r.conditional) cond.push_back(to_json(e));
  return {{"marginal", to_json(r.marginal)},
          {"conditional", cond},
          {"seed", r.seed},
          {"images", r.images}};
}

inline std::optional<double> d_value(const HdistEntry& e) {
  return e.estimate ? std::optional<double>(e.estimate->d) : std::nullopt;
}

// Detection reports ---------------------------------------------------------

inline std::string detections_csv(const std::vector<std::vector<Detection>>& dets) {
  std::ostringstream os;
  os << "image_id,class,score,cx,cy,w,h\n";
  char buf[160];
  for (std::size_t i = 0; i < dets.size(); ++i) {
    for (const Detection& d : dets[i]) {
      std::snprintf(buf, sizeof buf, "%zu,%d,%.17g,%.17g,%.17g,%.17g,%.17g\n", i, d.label,
                    d.score, d.box.cx, d.box.cy, d.box.w, d.box.h);
      os << buf;
    }
  }
  return os.str();
}

inline json ap_json(const std::vector<std::optional<double>>& ap) {
  json a = json::array();
  for (const auto& x : ap) a.push_back(x ? json(*x) : json(nullptr));
  return a;
}

inline json eval_report_json(const MapReport& r, const EvalOptions& opt) {
  return {{"map", r.map},
          {"ap", ap_json(r.ap)},
          {"num_gt", r.num_gt},
          {"conf_thresh", opt.conf_thresh},
          {"nms_iou", opt.iou_thresh},
          {"match_iou", 0.5}};
}

// Metrics -------------------------------------------------------------------

struct MetricsRecord {
  std::string variant;
  Setting setting = Setting::kUda;
  std::size_t shots = 0;  // 0 for uda
  std::size_t repeat = 0;
  std::uint64_t seed = 0;
  std::string config_digest;
  std::string pretrain_digest;
  double map_target = 0.0;
  std::vector<std::optional<double>> ap_target;
  double map_source = 0.0;
  std::vector<std::optional<double>> ap_source;
  std::optional<double> d_marginal_before, d_marginal_after;
  std::vector<std::optional<double>> d_conditional_before, d_conditional_after;
  std::vector<double> s_final;
  std::vector<double> s_mean;
  std::size_t iterations = 0;
  bool stopped_on_plateau = false;
  std::uint64_t target_label_reads = 0;
  std::size_t target_images = 0;
  double wall_time_s = 0.0;
};

namespace detail {

inline json opt_array(const std::vector<std::optional<double>>& v) { return ap_json(v); }

inline std::vector<std::optional<double>> opt_vector(const json& j) {
  std::vector<std::optional<double>> v;
  for (const auto& x : j) v.push_back(x.is_null() ? std::nullopt : std::optional(x.get<double>()));
  return v;
}

inline std::optional<double> opt_value(const json& j) {
  return j.is_null() ? std::nullopt : std::optional(j.get<double>());
}

inline json opt_json(const std::optional<double>& x) { return x ? json(*x) : json(nullptr); }

}  // namespace detail

inline json to_json(const MetricsRecord& m) {
  using namespace detail;
  return {{"variant", m.variant},
          {"setting", to_string(m.setting)},
          {"shots", m.shots},
          {"repeat", m.repeat},
          {"seed", m.seed},
          {"config_digest", m.config_digest},
          {"pretrain_digest", m.pretrain_digest},
          {"map_target", m.map_target},
          {"ap_target", opt_array(m.ap_target)},
          {"map_source", m.map_source},
          {"ap_source", opt_array(m.ap_source)},
          {"d_marginal_before", opt_json(m.d_marginal_before)},
          {"d_marginal_after", opt_json(m.d_marginal_after)},
          {"d_conditional_before", opt_array(m.d_conditional_before)},
          {"d_conditional_after", opt_array(m.d_conditional_after)},
          {"s_final", m.s_final},
          {"s_mean", m.s_mean},
          {"iterations", m.iterations},
          {"stopped_on_plateau", m.stopped_on_plateau},
          {"target_label_reads", m.target_label_reads},
          {"target_images", m.target_images},
          {"wall_time_s", m.wall_time_s}};
}

inline MetricsRecord metrics_from_json(const json& j) {
  using namespace detail;
  MetricsRecord m;
  try {
    m.variant = j.at("variant").get<std::string>();
    m.setting = parse_setting(j.at("setting").get<std::string>());
    m.shots = j.at("shots").get<std::size_t>();
    m.repeat = j.at("repeat").get<std::size_t>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.config_digest = j.at("config_digest").get<std::string>();
    m.pretrain_digest = j.at("pretrain_digest").get<std::string>();
    m.map_target = j.at("map_target").get<double>();
    m.ap_target = opt_vector(j.at("ap_target"));
    m.map_source = j.at("map_source").get<double>();
    m.ap_source = opt_vector(j.at("ap_source"));
    m.d_marginal_before = opt_value(j.at("d_marginal_before"));
    m.d_marginal_after = opt_value(j.at("d_marginal_after"));
    m.d_conditional_before = opt_vector(j.at("d_conditional_before"));
    m.d_conditional_after = opt_vector(j.at("d_conditional_after"));
    m.s_final = j.at("s_final").get<std::vector<double>>();
    m.s_mean = j.at("s_mean").get<std::vector<double>>();
    m.iterations = j.at("iterations").get<std::size_t>();
    m.stopped_on_plateau = j.at("stopped_on_plateau").get<bool>();
    m.target_label_reads = j.at("target_label_reads").get<std::uint64_t>();
    m.target_images = j.at("target_images").get<std::size_t>();
    m.wall_time_s = j.at("wall_time_s").get<double>();
  } catch (const json::exception& e) {
    throw Error(std::string("malformed metrics record: ") + e.what());
  }
  return m;
}

namespace detail {

struct Stat {
  std::size_t n = 0;
  double mean = 0.0;
  double std = 0.0;
};

inline Stat stat(const std::vector<double>& xs) {
  Stat s;
  s.n = xs.size();
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return s;
}

inline std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", x);
  return buf;
}

inline std::string fmt_stat(const std::vector<double>& xs) {
  if (xs.empty()) return ",";
  const Stat s = stat(xs);
  return fmt(s.mean) + "," + fmt(s.std);
}

}  // namespace detail

/// Mean and sample standard deviation per (setting, shots, variant) group,
/// in first-seen order. Wall time is not aggregated.
inline std::string aggregate_csv(const std::vector<MetricsRecord>& records) {
  using namespace detail;
  std::size_t K = 0;
  for (const auto& r : records) K = std::max(K, r.ap_target.size());
  std::ostringstream os;
  os << "setting,shots,variant,runs,map_target_mean,map_target_std,map_source_mean,"
        "map_source_std,d_marginal_before_mean,d_marginal_before_std,d_marginal_after_mean,"
        "d_marginal_after_std";
  for (std::size_t k = 1; k <= K; ++k) os << ",ap_target_" << k << "_mean,ap_target_" << k << "_std";
  for (std::size_t k = 1; k <= K; ++k) os << ",s_" << k << "_final_mean,s_" << k << "_final_std";
  os << ",label_reads,config_digest\n";

  std::vector<std::tuple<std::string, std::size_t, std::string>> keys;
  for (const auto& r : records) {
    auto key = std::make_tuple(std::string(to_string(r.setting)), r.shots, r.variant);
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(key);
  }
  for (const auto& key : keys) {
    std::vector<const MetricsRecord*> group;
    for (const auto& r : records) {
      if (std::make_tuple(std::string(to_string(r.setting)), r.shots, r.variant) == key) {
        group.push_back(&r);
      }
    }
    auto column = [&](auto pick) {
      std::vector<double> xs;
      for (const MetricsRecord* r : group) {
        const std::optional<double> v = pick(*r);
        if (v) xs.push_back(*v);
      }
      return xs;
    };
    std::uint64_t reads = 0;
    for (const MetricsRecord* r : group) reads += r->target_label_reads;
    os << std::get<0>(key) << ',' << std::get<1>(key) << ',' << std::get<2>(key) << ','
       << group.size() << ','
       << fmt_stat(column([](const MetricsRecord& r) { return std::optional(r.map_target); }))
       << ','
       << fmt_stat(column([](const MetricsRecord& r) { return std::optional(r.map_source); }))
       << ',' << fmt_stat(column([](const MetricsRecord& r) { return r.d_marginal_before; }))
       << ',' << fmt_stat(column([](const MetricsRecord& r) { return r.d_marginal_after; }));
    for (std::size_t k = 0; k < K; ++k) {
      os << ',' << fmt_stat(column([k](const MetricsRecord& r) {
        return k < r.ap_target.size() ? r.ap_target[k] : std::nullopt;
      }));
    }
    for (std::size_t k = 0; k < K; ++k) {
      os << ',' << fmt_stat(column([k](const MetricsRecord& r) {
        return k < r.s_final.size() ? std::optional(r.s_final[k]) : std::nullopt;
      }));
    }
    os << ',' << reads << ',' << group.front()->config_digest << '\n';
  }
  return os.str();
}

/// Reads per-run JSON files back and aggregates them.
inline std::string aggregate_from_files(const std::vector<std::filesystem::path>& files) {
  std::vector<MetricsRecord> records;
  for (const auto& f : files) {
    try {
      records.push_back(metrics_from_json(json::parse(read_file(f))));
    } catch (const json::parse_error& e) {
      throw Error("cannot parse " + f.string() + ": " + e.what());
    }
  }
  return aggregate_csv(records);
}

// Runs ----------------------------------------------------------------------

struct PretrainedSummary {
  Checkpoint checkpoint;
  std::string digest;
  DetectionEval target;
  DetectionEval source;
  std::optional<HdistReport> hdist;
};

inline PretrainedSummary summarize_pretrained(const ExperimentConfig& cfg, const Checkpoint& ck,
                                              const ExperimentData& data) {
  PretrainedSummary p;
  p.checkpoint = ck;
  p.digest = ck.digest();
  p.target = evaluate_detector(ck.params, data.target_test, cfg.eval);
  p.source = evaluate_detector(ck.params, data.source_test, cfg.eval);
  if (cfg.hdist.enabled) {
    p.hdist = measure_hdist(ck.params, data.source_test, data.target_test, cfg.hdist,
                            fan_out(cfg.master_seed, "hdist-before"));
  }
  return p;
}

inline std::string setting_tag(Setting s, std::size_t shots) {
  return s == Setting::kUda ? "uda" : "ufda" + std::to_string(shots);
}

inline std::string file_tag(std::string variant) {
  std::replace(variant.begin(), variant.end(), '+', '_');
  return variant;
}

struct RunOutcome {
  MetricsRecord record;
  std::optional<Checkpoint> adapted;
  std::vector<LossRecord> log;
};

/// One adaptation run (or the unadapted baseline) with its evaluation.
inline RunOutcome run_one(const ExperimentConfig& cfg, const PretrainedSummary& pre,
                          const ExperimentData& data, const std::string& variant_name,
                          Setting setting, std::size_t shots, std::size_t repeat) {
  const auto t0 = std::chrono::steady_clock::now();
  const Variant variant = Variant::parse(variant_name);
  const std::size_t K = data.source_train.config().num_classes;
  RunOutcome out;
  MetricsRecord& m = out.record;
  m.variant = variant.name();
  m.setting = setting;
  m.shots = setting == Setting::kUfda ? shots : 0;
  m.repeat = repeat;
  m.seed = fan_out(cfg.master_seed, "adapt", repeat);
  m.config_digest = config_digest(cfg);
  m.pretrain_digest = pre.digest;
  if (pre.hdist) {
    m.d_marginal_before = d_value(pre.hdist->marginal);
    for (const auto& e : pre.hdist->conditional) m.d_conditional_before.push_back(d_value(e));
  }

  const Dataset target = setting == Setting::kUfda
                             ? sample_ufda_subset(data.target_train, shots,
                                                  fan_out(cfg.master_seed, "ufda-subset", repeat))
                             : data.target_train;
  m.target_images = target.size();

  const ParamSet* params = &pre.checkpoint.params;
  if (variant.any()) {
    AdaptOptions opts;
    opts.align_hidden_layer = cfg.align_hidden_layer;
    opts.dense_marginal = cfg.dense_marginal;
    TrainResult r = joint_adapt(pre.checkpoint, data.source_train, target, variant, cfg.schedule,
                                m.seed, opts);
    out.adapted = std::move(r.checkpoint);
    out.log = std::move(r.log);
    m.iterations = out.log.size();
    m.stopped_on_plateau = r.stopped_on_plateau;
    m.target_label_reads = r.target_label_reads;
    params = &out.adapted->params;
    if (!out.log.empty()) m.s_final = out.log.back().s;
    m.s_mean.assign(K, 0.0);
    for (const LossRecord& l : out.log) {
      for (std::size_t k = 0; k < K && k < l.s.size(); ++k) {
        m.s_mean[k] += l.s[k] / static_cast<double>(out.log.size());
      }
    }
  } else {
    m.s_final.assign(K, 1.0);
    m.s_mean.assign(K, 1.0);
  }

  if (variant.any()) {
    const DetectionEval t = evaluate_detector(*params, data.target_test, cfg.eval);
    const DetectionEval s = evaluate_detector(*params, data.source_test, cfg.eval);
    m.map_target = t.report.map;
    m.ap_target = t.report.ap;
    m.map_source = s.report.map;
    m.ap_source = s.report.ap;
    if (cfg.hdist.enabled) {
      const HdistReport h = measure_hdist(*params, data.source_test, data.target_test, cfg.hdist,
                                          fan_out(cfg.master_seed, "hdist-after", repeat));
      m.d_marginal_after = d_value(h.marginal);
      for (const auto& e : h.conditional) m.d_conditional_after.push_back(d_value(e));
    }
  } else {
    m.map_target = pre.target.report.map;
    m.ap_target = pre.target.report.ap;
    m.map_source = pre.source.report.map;
    m.ap_source = pre.source.report.ap;
    m.d_marginal_after = m.d_marginal_before;
    m.d_conditional_after = m.d_conditional_before;
  }
  m.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

struct ExperimentOutput {
  std::vector<MetricsRecord> records;
  std::vector<std::filesystem::path> record_files;
  std::string aggregate;
  std::filesystem::path aggregate_file;
};

/// Every configured variant and repeat from one pretrained checkpoint: per-run
/// JSON records and the aggregate CSV derived from them.
inline ExperimentOutput run_variants(const ExperimentConfig& cfg, const OutputDir& out,
                                     const ExperimentData& data, const Checkpoint& ck,
                                     std::ostream* progress = nullptr) {
  const PretrainedSummary pre = summarize_pretrained(cfg, ck, data);
  const std::string tag = setting_tag(cfg.setting, cfg.shots);
  ExperimentOutput res;
  const std::vector<std::string> variants =
      cfg.variants.empty() ? std::vector<std::string>{"baseline"} : cfg.variants;
  for (const std::string& v : variants) {
    for (std::size_t rep = 0; rep < cfg.effective_repeats(); ++rep) {
      RunOutcome r = run_one(cfg, pre, data, v, cfg.setting, cfg.shots, rep);
      const std::filesystem::path dir = std::filesystem::path("runs") / tag / file_tag(r.record.variant);
      const std::string stem = "rep" + std::to_string(rep);
      res.record_files.push_back(out.write(dir / (stem + ".json"), to_json(r.record).dump(2) + "\n"));
      if (r.adapted) {
        out.write(dir / (stem + ".ckpt"), r.adapted->serialize());
        out.write(dir / (stem + "_loss.csv"),
                  loss_curve_csv(r.log, data.source_train.config().num_classes));
      }
      if (progress) {
        *progress << tag << ' ' << r.record.variant << " rep " << rep << ": target mAP "
                  << detail::fmt(r.record.map_target) << ", source mAP "
                  << detail::fmt(r.record.map_source) << '\n';
      }
      res.records.push_back(std::move(r.record));
    }
  }
  res.aggregate = aggregate_from_files(res.record_files);
  res.aggregate_file = out.write(std::filesystem::path("runs") / tag / "aggregate.csv", res.aggregate);
  return res;
}

/// Full pipeline for the configured setting: data, pretraining, then every
/// variant and repeat.
inline ExperimentOutput run_experiment(const ExperimentConfig& cfg, const OutputDir& out,
                                       std::ostream* progress = nullptr) {
  const ExperimentData data = prepare_data(cfg, out);
  const Checkpoint ck = prepare_pretrained(cfg, out, data);
  return run_variants(cfg, out, data, ck, progress);
}

struct AblationRow {
  std::string variant;
  double map_target = 0.0;
  double map_source = 0.0;
  std::vector<std::optional<double>> ap_target;
  std::string pretrain_digest;
};

inline std::string ablation_csv(const std::vector<AblationRow>& rows) {
  std::size_t K = rows.empty() ? 0 : rows.front().ap_target.size();
  std::ostringstream os;
  os << "variant,map_target,map_source";
  for (std::size_t k = 1; k <= K; ++k) os << ",ap_target_" << k;
  os << ",pretrain_digest\n";
  for (const auto& r : rows) {
    os << r.variant << ',' << detail::fmt(r.map_target) << ',' << detail::fmt(r.map_source);
    for (const auto& a : r.ap_target) os << ',' << (a ? detail::fmt(*a) : "");
    os << ',' << r.pretrain_digest << '\n';
  }
  return os.str();
}

inline std::string ablation_text(const std::vector<AblationRow>& rows) {
  std::size_t K = rows.empty() ? 0 : rows.front().ap_target.size();
  std::ostringstream os;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%-10s %10s %10s", "variant", "target", "source");
  os << buf;
  for (std::size_t k = 1; k <= K; ++k) {
    std::snprintf(buf, sizeof buf, " %8s", ("AP" + std::to_string(k)).c_str());
    os << buf;
  }
  os << '\n';
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%-10s %10.4f %10.4f", r.variant.c_str(), r.map_target,
                  r.map_source);
    os << buf;
    for (const auto& a : r.ap_target) {
      if (a) {
        std::snprintf(buf, sizeof buf, " %8.4f", *a);
      } else {
        std::snprintf(buf, sizeof buf, " %8s", "-");
      }
      os << buf;
    }
    os << '\n';
  }
  return os.str();
}

/// The six-variant table from one shared pretrained checkpoint (UDA setting,
/// repeat 0).
inline std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg, const OutputDir& out,
                                             const ExperimentData& data, const Checkpoint& ck,
                                             std::ostream* progress = nullptr) {
  ExperimentConfig c = cfg;
  c.hdist.enabled = false;
  const PretrainedSummary pre = summarize_pretrained(c, ck, data);
  std::vector<AblationRow> rows;
  for (const char* v : kAblationVariants) {
    const RunOutcome r = run_one(c, pre, data, v, Setting::kUda, 0, 0);
    rows.push_back({r.record.variant, r.record.map_target, r.record.map_source,
                    r.record.ap_target, r.record.pretrain_digest});
    if (progress) {
      *progress << "ablation " << v << ": target mAP " << detail::fmt(r.record.map_target)
                << '\n';
    }
  }
  out.write("ablation.csv", ablation_csv(rows));
  out.write("ablation.txt", ablation_text(rows));
  return rows;
}

inline std::vector<AblationRow> run_ablation(const ExperimentConfig& cfg, const OutputDir& out,
                                             std::ostream* progress = nullptr) {
  const ExperimentData data = prepare_data(cfg, out);
  return run_ablation(cfg, out, data, prepare_pretrained(cfg, out, data), progress);
}

}  // namespace dalab
