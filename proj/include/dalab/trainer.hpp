#pragma once

// Two-stage optimisation: source-only pre-training of the detector, then
// joint adversarial adaptation on mixed source/target batches with gradient
// reversal into the backbone.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "dalab/adapt.hpp"
#include "dalab/detector.hpp"
#include "dalab/digest.hpp"
#include "dalab/io.hpp"
#include "dalab/params.hpp"
#include "dalab/synthgen.hpp"

namespace dalab {

// Optimiser -----------------------------------------------------------------

/// Step decay: base * factor^(number of decay points <= iteration).
struct LrSchedule {
  double base = 0.01;
  std::vector<std::size_t> decay_at;
  double factor = 0.1;

  double at(std::size_t iteration) const {
    double lr = base;
    for (std::size_t d : decay_at) {
      if (iteration >= d) lr *= factor;
    }
    return lr;
  }
};

struct OptState {
  std::map<std::string, Tensor> velocity;
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  std::size_t iteration = 0;
  LrSchedule schedule;

  void write(ByteWriter& w) const {
    w.f64(lr);
    w.f64(momentum);
    w.f64(weight_decay);
    w.u64(iteration);
    w.f64(schedule.base);
    w.f64(schedule.factor);
    w.u64(schedule.decay_at.size());
    for (std::size_t d : schedule.decay_at) w.u64(d);
    w.u64(velocity.size());
    for (const auto& [name, t] : velocity) {
      w.str(name);
      w.tensor(t);
    }
  }

  static OptState read(ByteReader& r) {
    OptState s;
    s.lr = r.f64();
    s.momentum = r.f64();
    s.weight_decay = r.f64();
    s.iteration = r.u64();
    s.schedule.base = r.f64();
    s.schedule.factor = r.f64();
    s.schedule.decay_at.resize(r.u64());
    for (auto& d : s.schedule.decay_at) d = r.u64();
    const std::uint64_t n = r.u64();
    for (std::uint64_t i = 0; i < n; ++i) {
      std::string name = r.str();
      s.velocity.emplace(std::move(name), r.tensor());
    }
    return s;
  }

  friend bool operator==(const OptState& a, const OptState& b) {
    return a.velocity == b.velocity && a.lr == b.lr && a.momentum == b.momentum &&
           a.weight_decay == b.weight_decay && a.iteration == b.iteration &&
           a.schedule.base == b.schedule.base && a.schedule.decay_at == b.schedule.decay_at &&
           a.schedule.factor == b.schedule.factor;
  }
};

inline OptState make_opt_state(const LrSchedule& schedule, double momentum = 0.9,
                               double weight_decay = 0.0005) {
  OptState s;
  s.schedule = schedule;
  s.lr = schedule.at(0);
  s.momentum = momentum;
  s.weight_decay = weight_decay;
  return s;
}

/// v <- momentum * v + (g + wd * w); w <- w - lr * v. Parameters without a
/// gradient are left untouched. Advances the iteration and sets the next lr.
/// `lr_scale`, when given, multiplies the rate per parameter name.
inline void sgd_step(ParamSet& params, const Gradients& grads, OptState& state,
                     const std::function<double(const std::string&)>& lr_scale = {}) {
  for (const auto& [name, g] : grads) {
    if (!params.contains(name)) continue;
    if (!g.all_finite()) throw Error("non-finite gradient for parameter '" + name + "'");
  }
  for (auto& [name, w] : params) {
    auto git = grads.find(name);
    if (git == grads.end()) continue;
    const Tensor& g = git->second;
    if (g.size() != w.size()) throw Error("gradient shape mismatch for '" + name + "'");
    auto [vit, fresh] = state.velocity.try_emplace(name, Tensor(w.shape()));
    Tensor& v = vit->second;
    const double lr = lr_scale ? state.lr * lr_scale(name) : state.lr;
    for (std::size_t i = 0; i < w.size(); ++i) {
      v[i] = state.momentum * v[i] + (g[i] + state.weight_decay * w[i]);
      w[i] -= lr * v[i];
    }
  }
  ++state.iteration;
  state.lr = state.schedule.at(state.iteration);
}

// Schedules and batching ----------------------------------------------------

struct TrainSchedule {
  std::size_t pretrain_iterations = 3000;
  double pretrain_lr = 0.01;
  std::vector<std::size_t> pretrain_decay = {2000, 2500};
  std::size_t pretrain_batch = 32;

  std::size_t adapt_iterations = 600;
  double adapt_lr = 0.001;
  std::vector<std::size_t> adapt_decay = {300};
  std::size_t source_batch = 16;
  std::size_t target_batch = 16;

  double lambda = 1.0;
  double classifier_lr_mult = 10.0;
  std::size_t norm_images = 64;
  double norm_floor = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double bg_weight = 0.25;
  double participation_floor = 0.05;
  TransferabilityConfig transferability;

  bool plateau_enabled = true;
  std::size_t plateau_window = 50;
  double plateau_rel_tol = 0.01;

  void validate() const {
    for (std::size_t d : pretrain_decay) {
      if (pretrain_iterations > 0 && d >= pretrain_iterations)
        throw Error("pretrain decay point " + std::to_string(d) + " is not before the end");
    }
    for (std::size_t d : adapt_decay) {
      if (adapt_iterations > 0 && d >= adapt_iterations)
        throw Error("adapt decay point " + std::to_string(d) + " is not before the end");
    }
    if (pretrain_batch == 0 || source_batch == 0 || target_batch == 0)
      throw Error("batch sizes must be positive");
    if (!(lambda >= 0.0)) throw Error("lambda must be nonnegative");
    if (!(classifier_lr_mult > 0.0)) throw Error("classifier_lr_mult must be positive");
  }
};

/// Without-replacement sampling over epochs; each epoch's permutation comes
/// from (seed, epoch). Sets smaller than a request are cycled.
class EpochSampler {
 public:
  EpochSampler(std::size_t n, std::uint64_t seed) : n_(n), seed_(seed) {
    if (n == 0) throw Error("cannot sample from an empty set");
    reshuffle();
  }

  std::vector<std::size_t> next(std::size_t count) {
    std::vector<std::size_t> out;
    out.reserve(count);
    while (out.size() < count) {
      if (pos_ == order_.size()) {
        ++epoch_;
        reshuffle();
      }
      out.push_back(order_[pos_++]);
    }
    return out;
  }

 private:
  void reshuffle() {
    order_.resize(n_);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    Rng rng(derive_seed(seed_, "epoch", epoch_));
    rng.shuffle(order_.begin(), order_.end());
    pos_ = 0;
  }

  std::size_t n_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::size_t pos_ = 0;
  std::vector<std::size_t> order_;
};

struct MixedBatch {
  std::vector<std::size_t> source;
  std::vector<std::size_t> target;
};

struct BatchSpec {
  std::size_t source = 16;
  std::size_t target = 16;
};

/// Endless stream of mixed batches.
class MixedBatches {
 public:
  MixedBatches(const Dataset& source, const Dataset& target, BatchSpec spec, std::uint64_t seed)
      : spec_(spec),
        source_(checked_size(source, "source"), derive_seed(seed, "source-batches")),
        target_(checked_size(target, "target"), derive_seed(seed, "target-batches")) {}

  MixedBatch next() { return {source_.next(spec_.source), target_.next(spec_.target)}; }

 private:
  static std::size_t checked_size(const Dataset& d, const char* what) {
    if (d.empty()) throw Error(std::string(what) + " set is empty");
    return d.size();
  }

  BatchSpec spec_;
  EpochSampler source_;
  EpochSampler target_;
};

inline MixedBatches make_batches(const Dataset& source, const Dataset& target, BatchSpec spec,
                                 std::uint64_t seed) {
  return MixedBatches(source, target, spec, seed);
}

/// True once the mean of the last `window` values differs from the mean of
/// the window before it by less than `rel_tol` (relative).
inline bool plateau_stop(const std::vector<double>& history, std::size_t window = 50,
                         double rel_tol = 0.01) {
  if (window == 0 || history.size() < 2 * window) return false;
  const auto end = history.end();
  const double last =
      std::accumulate(end - static_cast<std::ptrdiff_t>(window), end, 0.0) / window;
  const double prev = std::accumulate(end - static_cast<std::ptrdiff_t>(2 * window),
                                      end - static_cast<std::ptrdiff_t>(window), 0.0) /
                      window;
  return std::abs(last - prev) / std::max(std::abs(prev), 1e-8) < rel_tol;
}

// Checkpoints ---------------------------------------------------------------

enum class Phase : std::uint8_t { kPretrained = 0, kAdapted = 1 };

inline const char* to_string(Phase p) { return p == Phase::kPretrained ? "pretrained" : "adapted"; }

struct Checkpoint {
  ParamSet params;  // detector, plus domain classifiers once adapted
  OptState opt;
  std::optional<TransferabilityState> transferability;
  std::optional<ClassifierInputNorm> input_norm;
  Phase phase = Phase::kPretrained;
  std::string config_digest;
  std::uint64_t seed = 0;
  DetectorShape shape;

  ParamSet detector_params() const { return params.filtered({"backbone.", "head."}); }

  /// Copy without any domain-classifier state.
  Checkpoint stripped() const {
    Checkpoint c = *this;
    c.params = detector_params();
    std::erase_if(c.opt.velocity, [](const auto& kv) { return is_adaptation_param(kv.first); });
    c.transferability.reset();
    c.input_norm.reset();
    return c;
  }

  std::string serialize() const {
    ByteWriter w;
    w.raw("DALABCK1");
    w.u8(static_cast<std::uint8_t>(phase));
    w.u64(seed);
    w.str(config_digest);
    w.u64(shape.grid);
    w.u64(shape.obs_dim);
    w.u64(shape.num_classes);
    params.write(w);
    opt.write(w);
    w.u8(transferability ? 1 : 0);
    if (transferability) transferability->write(w);
    w.u8(input_norm ? 1 : 0);
    if (input_norm) input_norm->write(w);
    return w.take();
  }

  static Checkpoint deserialize(std::string_view bytes) {
    ByteReader r(bytes);
    if (r.raw(8) != "DALABCK1") throw Error("not a checkpoint file");
    Checkpoint c;
    c.phase = static_cast<Phase>(r.u8());
    c.seed = r.u64();
    c.config_digest = r.str();
    c.shape.grid = r.u64();
    c.shape.obs_dim = r.u64();
    c.shape.num_classes = r.u64();
    c.params = ParamSet::read(r);
    c.opt = OptState::read(r);
    if (r.u8()) c.transferability = TransferabilityState::read(r);
    if (r.u8()) c.input_norm = ClassifierInputNorm::read(r);
    if (!r.done()) throw Error("trailing bytes in checkpoint");
    return c;
  }

  std::string digest() const { return sha256_hex(serialize()); }
  void save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }
  static Checkpoint load(const std::filesystem::path& path) {
    return deserialize(read_file(path));
  }
};

// Training ------------------------------------------------------------------

struct LossRecord {
  std::size_t iteration = 0;
  double det = 0.0;
  double marginal = 0.0;
  double conditional = 0.0;
  std::vector<double> s;
  double lr = 0.0;
};

/// Writes the loss curve as CSV: iteration, L_det, L_m, C, s_1..s_K, lr.
inline std::string loss_curve_csv(const std::vector<LossRecord>& log, std::size_t num_classes) {
  std::ostringstream os;
  os.precision(17);
  os << "iteration,l_det,l_m,c";
  for (std::size_t k = 1; k <= num_classes; ++k) os << ",s_" << k;
  os << ",lr\n";
  for (const LossRecord& r : log) {
    os << r.iteration << ',' << r.det << ',' << r.marginal << ',' << r.conditional;
    for (std::size_t k = 0; k < num_classes; ++k) os << ',' << (k < r.s.size() ? r.s[k] : 1.0);
    os << ',' << r.lr << '\n';
  }
  return os.str();
}

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LossRecord> log;
  bool stopped_on_plateau = false;
  std::uint64_t target_label_reads = 0;
};

inline std::vector<CellTargets> batch_targets(const Dataset& ds,
                                              const std::vector<std::size_t>& idx) {
  std::vector<CellTargets> t;
  t.reserve(idx.size());
  for (std::size_t i : idx) t.push_back(match_targets(ds.labels(i), ds.config().grid_size));
  return t;
}

inline constexpr double kDivergenceLimit = 1e6;

/// Source-only training of the detector.
inline TrainResult pretrain(const TrainSchedule& sched, const Dataset& source,
                            std::uint64_t seed, std::string config_digest = {}) {
  sched.validate();
  const DetectorShape shape = DetectorShape::from(source.config());
  TrainResult res;
  Checkpoint& ck = res.checkpoint;
  ck.params = init_detector_params(shape, seed);
  ck.opt = make_opt_state({sched.pretrain_lr, sched.pretrain_decay, 0.1}, sched.momentum,
                          sched.weight_decay);
  ck.phase = Phase::kPretrained;
  ck.config_digest = std::move(config_digest);
  ck.seed = seed;
  ck.shape = shape;
  if (sched.pretrain_iterations == 0) return res;

  EpochSampler sampler(source.size(), derive_seed(seed, "pretrain-batches"));
  for (std::size_t it = 0; it < sched.pretrain_iterations; ++it) {
    const std::vector<std::size_t> idx = sampler.next(sched.pretrain_batch);
    const Tensor x = stack_cells(source, idx);
    Graph g;
    const DetectorNodes d = backbone_and_heads(g, g.input("x"), shape.grid);
    const NodeId loss = detection_loss(g, d.probs, d.offsets, batch_targets(source, idx),
                                       shape.num_classes, sched.bg_weight);
    Feeds feeds;
    ck.params.bind(feeds);
    feeds.bind("x", x);
    const double value = g.evaluate(feeds, loss)[0];
    if (!std::isfinite(value) || value > kDivergenceLimit) {
      throw Error("pretraining diverged at iteration " + std::to_string(it) +
                  ": detection loss " + std::to_string(value));
    }
    const double lr = ck.opt.lr;
    sgd_step(ck.params, g.backward(Tensor::scalar(1.0)), ck.opt);
    res.log.push_back({it, value, 0.0, 0.0, {}, lr});
  }
  return res;
}

/// Which adversarial terms an adaptation run enables.
struct Variant {
  bool marginal = false;
  bool conditional = false;
  bool weighted = false;

  static Variant parse(std::string_view name) {
    if (name == "baseline") return {};
    if (name == "M") return {true, false, false};
    if (name == "C") return {false, true, false};
    if (name == "WC") return {false, true, true};
    if (name == "M+C") return {true, true, false};
    if (name == "M+WC") return {true, true, true};
    throw Error("unknown variant '" + std::string(name) +
                "' (expected baseline, M, C, WC, M+C or M+WC)");
  }

  std::string name() const {
    if (!marginal && !conditional) return "baseline";
    std::string c = conditional ? (weighted ? "WC" : "C") : "";
    if (marginal) return c.empty() ? "M" : "M+" + c;
    return c;
  }

  bool any() const { return marginal || conditional; }
};

struct AdaptOptions {
  /// Which layer the marginal classifier sees: the final backbone layer or
  /// the per-cell hidden layer before neighbourhood mixing.
  bool align_hidden_layer = false;
  /// Apply the marginal classifier per cell (true) or to each image's mean
  /// feature (false).
  bool dense_marginal = true;
  /// Called after every iteration with the current record.
  std::function<void(const LossRecord&)> on_iteration;
};

/// Fits the marginal classifier input standardisation on the first `images`
/// images of each domain under the current detector.
inline ClassifierInputNorm fit_input_norm(const ParamSet& params, const DetectorShape& shape,
                                          const Dataset& source, const Dataset& target,
                                          std::size_t images, double floor, bool hidden_layer) {
  auto first = [&](const Dataset& ds) {
    std::vector<std::size_t> idx(std::min(images, ds.size()));
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return stack_cells(ds, idx);
  };
  const Tensor xs = first(source);
  const Tensor xt = first(target);
  Graph g;
  const DetectorNodes d = backbone_and_heads(g, g.input("x"), shape.grid);
  auto run = [&](const Tensor& x) {
    Feeds feeds;
    params.bind(feeds);
    feeds.bind("x", x);
    return g.evaluate(feeds, hidden_layer ? d.hidden : d.features);
  };
  const Tensor s = run(xs);
  const Tensor t = run(xt);
  return {Standardizer::fit({&s, &t}, floor)};
}

/// Joint adaptation starting from a pretrained checkpoint. Target images are
/// only ever read through Dataset::cells(); labels are never touched.
inline TrainResult joint_adapt(const Checkpoint& pretrained, const Dataset& source,
                               const Dataset& target, const Variant& variant,
                               const TrainSchedule& sched, std::uint64_t seed,
                               const AdaptOptions& opts = {}) {
  sched.validate();
  if (pretrained.phase != Phase::kPretrained) {
    throw Error("joint_adapt expects a pretrained checkpoint");
  }
  const DetectorShape shape = pretrained.shape;
  const std::size_t K = shape.num_classes;
  const std::uint64_t reads_before = target.label_reads();

  TrainResult res;
  Checkpoint& ck = res.checkpoint;
  ck.params = pretrained.detector_params();
  ck.params.merge(init_adaptation_params(K, seed));
  ck.opt = make_opt_state({sched.adapt_lr, sched.adapt_decay, 0.1}, sched.momentum,
                          sched.weight_decay);
  ck.phase = Phase::kAdapted;
  ck.config_digest = pretrained.config_digest;
  ck.seed = seed;
  ck.shape = shape;
  TransferabilityState ts = TransferabilityState::initial(K, sched.transferability);
  ck.input_norm = fit_input_norm(ck.params, shape, source, target, sched.norm_images, sched.norm_floor,
                                 opts.align_hidden_layer);
  const ClassifierInputNorm& norm = *ck.input_norm;

  MixedBatches batches = make_batches(source, target, {sched.source_batch, sched.target_batch},
                                      derive_seed(seed, "adapt-batches"));
  std::vector<double> history;
  const std::size_t last_decay =
      sched.adapt_decay.empty() ? 0 : *std::max_element(sched.adapt_decay.begin(),
                                                        sched.adapt_decay.end());
  for (std::size_t it = 0; it < sched.adapt_iterations; ++it) {
    const MixedBatch batch = batches.next();
    const Tensor xs = stack_cells(source, batch.source);
    const Tensor xt = stack_cells(target, batch.target);
    Feeds feeds;
    ck.params.bind(feeds);
    feeds.bind("xs", xs).bind("xt", xt);

    Graph g;
    const DetectorNodes ds = backbone_and_heads(g, g.input("xs"), shape.grid);
    const DetectorNodes dt = backbone_and_heads(g, g.input("xt"), shape.grid);
    const NodeId det = detection_loss(g, ds.probs, ds.offsets, batch_targets(source, batch.source),
                                      K, sched.bg_weight);
    NodeId total = det;
    std::optional<NodeId> marginal;
    std::optional<NodeId> conditional;
    std::vector<std::optional<NodeId>> class_losses(K);

    if (variant.marginal) {
      NodeId fs = opts.align_hidden_layer ? ds.hidden : ds.features;
      NodeId ft = opts.align_hidden_layer ? dt.hidden : dt.features;
      fs = norm.marginal.apply(g, g.grl(fs, sched.lambda));
      ft = norm.marginal.apply(g, g.grl(ft, sched.lambda));
      if (!opts.dense_marginal) {
        fs = image_means(g, fs, batch.source.size(), shape.cells());
        ft = image_means(g, ft, batch.target.size(), shape.cells());
      }
      marginal = g.label(marginal_domain_loss(g, fs, ft), "marginal loss");
      total = g.add(total, *marginal);
    }
    if (variant.conditional) {
      const Tensor probs_s = g.evaluate(feeds, ds.probs);
      const Tensor probs_t = g.evaluate(feeds, dt.probs);
      const NodeId fs = g.grl(ds.features, sched.lambda);
      const NodeId ft = g.grl(dt.features, sched.lambda);
      for (std::size_t k = 1; k <= K; ++k) {
        class_losses[k - 1] = conditional_domain_loss_k(
            g, fs, ds.probs, ds.offsets,
            participating_rows(probs_s, k, sched.participation_floor), ft, dt.probs, dt.offsets,
            participating_rows(probs_t, k, sched.participation_floor), k, K);
      }
      const std::vector<double> s =
          variant.weighted ? ts.weights : std::vector<double>(K, 1.0);
      conditional = weighted_conditional_loss(g, class_losses, s);
      if (conditional) total = g.add(total, *conditional);
    }

    const double total_value = g.evaluate(feeds, total)[0];
    if (!std::isfinite(total_value) || total_value > kDivergenceLimit) {
      throw Error("adaptation diverged at iteration " + std::to_string(it));
    }
    LossRecord rec;
    rec.iteration = it;
    rec.det = g.value(det)[0];
    rec.marginal = marginal ? g.value(*marginal)[0] : 0.0;
    rec.conditional = conditional ? g.value(*conditional)[0] : 0.0;
    rec.lr = ck.opt.lr;

    if (variant.conditional) {
      std::vector<std::optional<double>> bce(K);
      for (std::size_t k = 0; k < K; ++k) {
        if (class_losses[k]) bce[k] = g.value(*class_losses[k])[0];
      }
      ts = update_transferability(std::move(ts), bce, sched.transferability);
    }
    rec.s = variant.weighted ? ts.weights : std::vector<double>(K, 1.0);

    sgd_step(ck.params, g.backward(Tensor::scalar(1.0)), ck.opt, [&](const std::string& n) {
      return is_adaptation_param(n) ? sched.classifier_lr_mult : 1.0;
    });
    if (opts.on_iteration) opts.on_iteration(rec);
    res.log.push_back(std::move(rec));

    history.push_back(total_value);
    if (sched.plateau_enabled && it + 1 > last_decay &&
        plateau_stop(std::vector<double>(history.begin() + static_cast<std::ptrdiff_t>(last_decay),
                                         history.end()),
                     sched.plateau_window, sched.plateau_rel_tol)) {
      res.stopped_on_plateau = true;
      break;
    }
  }
  if (variant.conditional) ck.transferability = ts;
  res.target_label_reads = target.label_reads() - reads_before;
  return res;
}

}  // namespace dalab
