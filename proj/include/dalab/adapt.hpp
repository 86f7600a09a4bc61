#pragma once

// Adversarial alignment: the spatially dense marginal domain classifier, the
// per-class conditional classifiers fed with class-scaled (feature, box)
// vectors, class-wise transferability weights, and a probe-based estimate of
// the H-divergence between two feature sets.

#include <algorithm>
#include <cmath>
#include <initializer_list>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dalab/autodiff.hpp"
#include "dalab/detector.hpp"
#include "dalab/digest.hpp"
#include "dalab/params.hpp"
#include "dalab/rng.hpp"

namespace dalab {

inline constexpr std::size_t kClassifierWidth = 64;

inline std::string marginal_prefix() { return "dm"; }
inline std::string conditional_prefix(std::size_t k) { return "dk" + std::to_string(k); }

inline bool is_adaptation_param(std::string_view name) {
  return name.starts_with("dm.") || name.starts_with("dk");
}

/// in -> 64 -> 64 -> 1 with relu, relu, sigmoid.
inline void add_domain_classifier(ParamSet& p, const std::string& prefix, std::size_t in_dim,
                                  Rng& rng) {
  p.add_linear(prefix + ".l1", in_dim, kClassifierWidth, rng);
  p.add_linear(prefix + ".l2", kClassifierWidth, kClassifierWidth, rng);
  p.add_linear(prefix + ".l3", kClassifierWidth, 1, rng);
}

inline NodeId domain_classifier(Graph& g, NodeId x, const std::string& prefix) {
  const NodeId h1 = g.relu(linear(g, x, prefix + ".l1"));
  const NodeId h2 = g.relu(linear(g, h1, prefix + ".l2"));
  return g.sigmoid(linear(g, h2, prefix + ".l3"));
}

/// D_m on the 32-d features and D_1..D_K on the 36-d conditional inputs.
inline ParamSet init_adaptation_params(std::size_t num_classes, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "adaptation-init"));
  ParamSet p;
  add_domain_classifier(p, marginal_prefix(), kFeatureWidth, rng);
  for (std::size_t k = 1; k <= num_classes; ++k) {
    add_domain_classifier(p, conditional_prefix(k), kFeatureWidth + 4, rng);
  }
  return p;
}

/// Per-column affine map x -> (x - mean) / (sd + floor), fitted on pooled rows.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> inv_scale;

  static Standardizer fit(std::initializer_list<const Tensor*> sets, double floor) {
    if (sets.size() == 0) throw Error("Standardizer::fit needs at least one row set");
    const std::size_t dim = (*sets.begin())->cols();
    Standardizer z;
    z.mean.assign(dim, 0.0);
    std::vector<double> var(dim, 0.0);
    double n = 0.0;
    for (const Tensor* t : sets) {
      if (t->cols() != dim) throw Error("Standardizer::fit: column counts differ");
      n += static_cast<double>(t->rows());
    }
    if (n == 0.0) throw Error("Standardizer::fit: no rows");
    for (const Tensor* t : sets)
      for (std::size_t r = 0; r < t->rows(); ++r)
        for (std::size_t c = 0; c < dim; ++c) z.mean[c] += t->at(r, c) / n;
    for (const Tensor* t : sets)
      for (std::size_t r = 0; r < t->rows(); ++r)
        for (std::size_t c = 0; c < dim; ++c) var[c] += std::pow(t->at(r, c) - z.mean[c], 2) / n;
    z.inv_scale.resize(dim);
    for (std::size_t c = 0; c < dim; ++c) z.inv_scale[c] = 1.0 / (std::sqrt(var[c]) + floor);
    return z;
  }

  void apply(Tensor& t) const {
    for (std::size_t r = 0; r < t.rows(); ++r)
      for (std::size_t c = 0; c < t.cols(); ++c)
        t.at(r, c) = (t.at(r, c) - mean[c]) * inv_scale[c];
  }

  NodeId apply(Graph& g, NodeId x) const {
    const std::size_t dim = mean.size();
    Tensor shift = Tensor::matrix(1, dim);
    Tensor diag = Tensor::matrix(dim, dim);
    for (std::size_t c = 0; c < dim; ++c) {
      shift.at(0, c) = -mean[c];
      diag.at(c, c) = inv_scale[c];
    }
    return g.matmul(g.add(x, g.constant(std::move(shift))), g.constant(std::move(diag)));
  }

  void write(ByteWriter& w) const {
    w.u64(mean.size());
    for (double x : mean) w.f64(x);
    for (double x : inv_scale) w.f64(x);
  }
  static Standardizer read(ByteReader& r) {
    Standardizer z;
    const std::size_t n = r.u64();
    z.mean.resize(n);
    z.inv_scale.resize(n);
    for (double& x : z.mean) x = r.f64();
    for (double& x : z.inv_scale) x = r.f64();
    return z;
  }
  friend bool operator==(const Standardizer&, const Standardizer&) = default;
};

/// Frozen standardisation of the marginal classifier input. The class
/// conditional classifiers see raw features and offsets.
struct ClassifierInputNorm {
  Standardizer marginal;

  void write(ByteWriter& w) const { marginal.write(w); }
  static ClassifierInputNorm read(ByteReader& r) { return {Standardizer::read(r)}; }
  friend bool operator==(const ClassifierInputNorm&, const ClassifierInputNorm&) = default;
};

/// -(mean log D(source) + mean log(1 - D(target))): binary cross-entropy of a
/// classifier that labels source 1 and target 0.
inline NodeId domain_bce(Graph& g, NodeId d_source, NodeId d_target) {
  const NodeId src = g.reduce_mean(g.log(d_source));
  const NodeId tgt = g.reduce_mean(g.log(g.shift(g.scale(d_target, -1.0), 1.0)));
  return g.scale(g.add(src, tgt), -1.0);
}

/// Per-image mean of a stacked batch of cell features (images x width).
inline NodeId image_means(Graph& g, NodeId cells, std::size_t images, std::size_t cells_per) {
  Tensor avg = Tensor::matrix(images, images * cells_per);
  for (std::size_t i = 0; i < images; ++i) {
    for (std::size_t c = 0; c < cells_per; ++c) avg.at(i, i * cells_per + c) = 1.0 / cells_per;
  }
  return g.matmul(g.constant(std::move(avg)), cells);
}

/// Marginal adversarial loss over every cell of both feature batches. Place
/// a grl on the feature nodes to route the reversed gradient into F.
inline NodeId marginal_domain_loss(Graph& g, NodeId features_s, NodeId features_t,
                                   const std::string& prefix = marginal_prefix()) {
  return domain_bce(g, domain_classifier(g, features_s, prefix),
                    domain_classifier(g, features_t, prefix));
}

/// p_k * (f concatenated with b): the conditional classifier input for one cell.
inline std::vector<double> conditional_input(std::span<const double> feature,
                                             std::span<const double> offsets, double prob) {
  std::vector<double> v;
  v.reserve(feature.size() + offsets.size());
  for (double x : feature) v.push_back(prob * x);
  for (double x : offsets) v.push_back(prob * x);
  return v;
}

/// Graph form of conditional_input for a set of rows. The class probability
/// column and the offsets enter as conditioning values without gradient; the
/// feature node is used as given (wrap it in a grl for adversarial training).
inline NodeId conditional_inputs(Graph& g, NodeId features, NodeId probs, NodeId offsets,
                                 std::size_t k, std::size_t num_classes,
                                 const std::vector<std::size_t>& rows) {
  Tensor select = Tensor::matrix(num_classes + 1, 1);
  select.at(k, 0) = 1.0;
  const NodeId pk = g.matmul(g.gather_rows(g.stop_gradient(probs), rows), g.constant(select));
  const NodeId fb = g.concat({g.gather_rows(features, rows),
                              g.gather_rows(g.stop_gradient(offsets), rows)});
  return g.multiply(fb, pk);
}

/// Rows whose class-k probability exceeds the participation floor.
inline std::vector<std::size_t> participating_rows(const Tensor& probs, std::size_t k,
                                                   double floor) {
  std::vector<std::size_t> rows;
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    if (probs.at(r, k) > floor) rows.push_back(r);
  }
  return rows;
}

/// Per-class conditional adversarial loss; nullopt when either domain has no
/// participating cell (the class is skipped for this step).
inline std::optional<NodeId> conditional_domain_loss_k(
    Graph& g, NodeId features_s, NodeId probs_s, NodeId offsets_s,
    const std::vector<std::size_t>& rows_s, NodeId features_t, NodeId probs_t,
    NodeId offsets_t, const std::vector<std::size_t>& rows_t, std::size_t k,
    std::size_t num_classes) {
  if (rows_s.empty() || rows_t.empty()) return std::nullopt;
  const NodeId in_s = conditional_inputs(g, features_s, probs_s, offsets_s, k, num_classes, rows_s);
  const NodeId in_t = conditional_inputs(g, features_t, probs_t, offsets_t, k, num_classes, rows_t);
  const std::string prefix = conditional_prefix(k);
  return domain_bce(g, domain_classifier(g, in_s, prefix), domain_classifier(g, in_t, prefix));
}

/// sum_k s_k * L_k with s_k entering as constants. Skipped classes contribute
/// nothing. Returns nullopt when every class was skipped.
inline std::optional<NodeId> weighted_conditional_loss(
    Graph& g, const std::vector<std::optional<NodeId>>& losses, const std::vector<double>& s) {
  if (losses.size() != s.size()) {
    throw Error("weighted_conditional_loss: " + std::to_string(losses.size()) + " losses vs " +
                std::to_string(s.size()) + " weights");
  }
  std::optional<NodeId> total;
  for (std::size_t k = 0; k < losses.size(); ++k) {
    if (!losses[k]) continue;
    const NodeId term = g.scale(*losses[k], s[k]);
    total = total ? g.add(*total, term) : term;
  }
  return total;
}

// Transferability -----------------------------------------------------------

struct TransferabilityConfig {
  double decay = 0.99;
  std::size_t warmup = 50;
  double clip_lo = 0.1;
  double clip_hi = 3.0;
};

/// Per-class EMA of the conditional classifiers' BCE and the weights derived
/// from it. High BCE means the class is hard to tell apart across domains.
struct TransferabilityState {
  std::vector<double> ema;
  std::vector<char> seen;
  std::vector<double> weights;
  std::size_t warmup_remaining = 0;
  std::size_t updates = 0;

  static TransferabilityState initial(std::size_t num_classes,
                                      const TransferabilityConfig& cfg = {}) {
    TransferabilityState s;
    s.ema.assign(num_classes, 0.0);
    s.seen.assign(num_classes, 0);
    s.weights.assign(num_classes, 1.0);
    s.warmup_remaining = cfg.warmup;
    return s;
  }

  void write(ByteWriter& w) const {
    w.u64(ema.size());
    for (std::size_t k = 0; k < ema.size(); ++k) {
      w.f64(ema[k]);
      w.u8(static_cast<std::uint8_t>(seen[k]));
      w.f64(weights[k]);
    }
    w.u64(warmup_remaining);
    w.u64(updates);
  }

  static TransferabilityState read(ByteReader& r) {
    TransferabilityState s;
    const std::uint64_t k = r.u64();
    s.ema.resize(k);
    s.seen.resize(k);
    s.weights.resize(k);
    for (std::size_t i = 0; i < k; ++i) {
      s.ema[i] = r.f64();
      s.seen[i] = static_cast<char>(r.u8());
      s.weights[i] = r.f64();
    }
    s.warmup_remaining = r.u64();
    s.updates = r.u64();
    return s;
  }

  friend bool operator==(const TransferabilityState&, const TransferabilityState&) = default;
};

/// s_k = K * ema_k / sum(ema), clipped. All-zero EMAs give s = 1.
inline std::vector<double> transferability_weights(const std::vector<double>& ema,
                                                   const TransferabilityConfig& cfg = {}) {
  const double total = std::accumulate(ema.begin(), ema.end(), 0.0);
  std::vector<double> s(ema.size(), 1.0);
  if (total <= 0.0) return s;
  const double k = static_cast<double>(ema.size());
  for (std::size_t i = 0; i < ema.size(); ++i) {
    s[i] = std::clamp(k * ema[i] / total, cfg.clip_lo, cfg.clip_hi);
  }
  return s;
}

/// One EMA step. Classes without a value this step keep their EMA; a class's
/// first value initialises its EMA directly.
inline TransferabilityState update_transferability(TransferabilityState state,
                                                   const std::vector<std::optional<double>>& bce,
                                                   const TransferabilityConfig& cfg = {}) {
  if (bce.size() != state.ema.size()) {
    throw Error("update_transferability: expected " + std::to_string(state.ema.size()) +
                " class losses, got " + std::to_string(bce.size()));
  }
  for (std::size_t k = 0; k < bce.size(); ++k) {
    if (!bce[k]) continue;
    if (!state.seen[k]) {
      state.ema[k] = *bce[k];
      state.seen[k] = 1;
    } else {
      state.ema[k] = cfg.decay * state.ema[k] + (1.0 - cfg.decay) * *bce[k];
    }
  }
  ++state.updates;
  if (state.warmup_remaining > 0) {
    --state.warmup_remaining;
    state.weights.assign(state.ema.size(), 1.0);
  } else {
    state.weights = transferability_weights(state.ema, cfg);
  }
  return state;
}

// H-divergence --------------------------------------------------------------

struct HDivergenceEstimate {
  double d = 0.0;
  double eps_source = 0.0;
  double eps_target = 0.0;
  std::string scope = "marginal";
  std::size_t train_source = 0, train_target = 0, test_source = 0, test_target = 0;
  std::uint64_t seed = 0;
};

/// 2 * (1 - (eps_s + eps_t)), clamped to [0, 2].
inline double h_divergence_from_errors(double eps_source, double eps_target) {
  return std::clamp(2.0 * (1.0 - (eps_source + eps_target)), 0.0, 2.0);
}

struct ProbeConfig {
  std::size_t steps = 500;
  double lr = 0.01;
  double momentum = 0.9;
  double train_fraction = 0.8;
  std::size_t min_per_domain = 40;
  std::size_t max_per_domain = 1000;
};

/// Trains a fresh domain-classifier probe on 80% of each domain and reports
/// its held-out error rates. Rows of the two matrices are feature vectors.
inline HDivergenceEstimate estimate_h_divergence(const Tensor& features_s, const Tensor& features_t,
                                                 const ProbeConfig& cfg, std::uint64_t seed,
                                                 std::string scope = "marginal") {
  if (features_s.rows() < cfg.min_per_domain || features_t.rows() < cfg.min_per_domain) {
    throw Error("estimate_h_divergence needs at least " + std::to_string(cfg.min_per_domain) +
                " vectors per domain, got " + std::to_string(features_s.rows()) + " source and " +
                std::to_string(features_t.rows()) + " target");
  }
  if (features_s.cols() != features_t.cols()) throw Error("feature widths differ between domains");
  const std::size_t dim = features_s.cols();
  Rng rng(derive_seed(seed, "hdiv"));

  auto split = [&](const Tensor& f, Tensor& train, Tensor& test) {
    std::vector<std::size_t> idx(f.rows());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    rng.shuffle(idx.begin(), idx.end());
    idx.resize(std::min(idx.size(), cfg.max_per_domain));
    const auto n_train = static_cast<std::size_t>(
        std::round(cfg.train_fraction * static_cast<double>(idx.size())));
    auto take = [&](std::size_t lo, std::size_t hi) {
      Tensor t = Tensor::matrix(hi - lo, dim);
      for (std::size_t i = lo; i < hi; ++i) {
        std::copy_n(&f.data()[idx[i] * dim], dim, &t.data()[(i - lo) * dim]);
      }
      return t;
    };
    train = take(0, n_train);
    test = take(n_train, idx.size());
  };
  Tensor train_s, test_s, train_t, test_t;
  split(features_s, train_s, test_s);
  split(features_t, train_t, test_t);

  const Standardizer norm = Standardizer::fit({&train_s, &train_t}, 1e-8);
  for (Tensor* t : {&train_s, &train_t, &test_s, &test_t}) norm.apply(*t);

  ParamSet probe;
  Rng init(derive_seed(seed, "hdiv-probe-init"));
  add_domain_classifier(probe, "probe", dim, init);
  std::map<std::string, Tensor> velocity;
  for (const auto& [name, t] : probe) velocity.emplace(name, Tensor(t.shape()));

  Graph g;
  const NodeId xs = g.input("xs");
  const NodeId xt = g.input("xt");
  const NodeId loss = marginal_domain_loss(g, xs, xt, "probe");
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Feeds feeds;
    probe.bind(feeds);
    feeds.bind("xs", train_s).bind("xt", train_t);
    g.evaluate(feeds, loss);
    const Gradients grads = g.backward(Tensor::scalar(1.0));
    for (auto& [name, w] : probe) {
      Tensor& v = velocity.at(name);
      const Tensor& gr = grads.at(name);
      for (std::size_t i = 0; i < w.size(); ++i) {
        v[i] = cfg.momentum * v[i] + gr[i];
        w[i] -= cfg.lr * v[i];
      }
    }
  }

  auto error_rate = [&](const Tensor& x, bool is_source) {
    Graph eg;
    const NodeId out = domain_classifier(eg, eg.input("x"), "probe");
    Feeds feeds;
    probe.bind(feeds);
    feeds.bind("x", x);
    const Tensor& d = eg.evaluate(feeds, out);
    std::size_t wrong = 0;
    for (double p : d.values()) wrong += is_source ? (p < 0.5) : (p >= 0.5);
    return static_cast<double>(wrong) / static_cast<double>(d.size());
  };

  HDivergenceEstimate est;
  est.eps_source = error_rate(test_s, true);
  est.eps_target = error_rate(test_t, false);
  est.d = h_divergence_from_errors(est.eps_source, est.eps_target);
  est.scope = std::move(scope);
  est.train_source = train_s.rows();
  est.train_target = train_t.rows();
  est.test_source = test_s.rows();
  est.test_target = test_t.rows();
  est.seed = seed;
  return est;
}

}  // namespace dalab
