#pragma once

// Single-shot grid detector: one box hypothesis per cell.
//
//   backbone   cell -> 32 -> 32 (relu), one neighbourhood-mixing step, then a
//              final 32 -> 32 relu layer whose output is the alignment layer
//   heads      per-cell class softmax over K+1 (0 = background) and four box
//              offsets relative to the cell centre
//
// Plus target matching, the detection loss, decoding, NMS and VOC-style
// mAP@0.5 with all-points interpolation.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dalab/autodiff.hpp"
#include "dalab/box.hpp"
#include "dalab/params.hpp"
#include "dalab/synthgen.hpp"

namespace dalab {

inline constexpr std::size_t kFeatureWidth = 32;

struct DetectorShape {
  std::size_t grid = 8;
  std::size_t obs_dim = 16;
  std::size_t num_classes = 3;

  static DetectorShape from(const GenConfig& c) {
    return {c.grid_size, c.obs_dim, c.num_classes};
  }
  std::size_t cells() const { return grid * grid; }
};

inline ParamSet init_detector_params(const DetectorShape& shape, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "detector-init"));
  ParamSet p;
  const double gain = std::sqrt(6.0);  // He-uniform
  p.add_linear("backbone.l1", shape.obs_dim, kFeatureWidth, rng, gain);
  p.add_linear("backbone.l2", kFeatureWidth, kFeatureWidth, rng, gain);
  p.add_linear("backbone.mix", kFeatureWidth, kFeatureWidth, rng, gain);
  p.add_linear("backbone.l3", kFeatureWidth, kFeatureWidth, rng, gain);
  p.add_linear("head.cls", kFeatureWidth, shape.num_classes + 1, rng, gain);
  p.add_linear("head.box", kFeatureWidth, 4, rng, gain);
  return p;
}

inline bool is_detector_param(std::string_view name) {
  return name.starts_with("backbone.") || name.starts_with("head.");
}

/// Node handles for one detector application to a stacked batch of images
/// (one row per cell, images consecutive).
struct DetectorNodes {
  NodeId hidden;    // second per-cell layer, before mixing
  NodeId features;  // alignment layer F(x)
  NodeId logits;
  NodeId probs;
  NodeId offsets;
};

inline DetectorNodes backbone_and_heads(Graph& g, NodeId cells, std::size_t grid) {
  DetectorNodes d;
  const NodeId h1 = g.relu(linear(g, cells, "backbone.l1"));
  d.hidden = g.relu(linear(g, h1, "backbone.l2"));
  const NodeId mixed = g.add(d.hidden, linear(g, g.neighbor_mean(d.hidden, grid), "backbone.mix"));
  d.features = g.label(g.relu(linear(g, mixed, "backbone.l3")), "features");
  d.logits = linear(g, d.features, "head.cls");
  d.probs = g.softmax(d.logits);
  d.offsets = linear(g, d.features, "head.box");
  return d;
}

/// Stacks the cells of the selected images into a (n * G * G) x obs matrix.
inline Tensor stack_cells(const Dataset& ds, std::span<const std::size_t> indices) {
  if (indices.empty()) throw Error("cannot stack an empty batch");
  const Tensor& first = ds.cells(indices[0]);
  const std::size_t d = first.cols();
  const std::size_t per = first.rows();
  Tensor out = Tensor::matrix(indices.size() * per, d);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const Tensor& c = ds.cells(indices[i]);
    if (c.cols() != d || c.rows() != per) throw Error("inconsistent sample shapes in batch");
    std::copy(c.values().begin(), c.values().end(),
              out.values().begin() + static_cast<std::ptrdiff_t>(i * per * d));
  }
  return out;
}

struct FeatureMap {
  Tensor features;  // G*G x 32
};

struct Predictions {
  Tensor class_probs;  // G*G x (K+1)
  Tensor box_offsets;  // G*G x 4
};

/// Inference-only forward pass over a batch of images. Fills one FeatureMap
/// and one Predictions per image.
inline void run_detector(const ParamSet& params, const DetectorShape& shape, const Tensor& cells,
                         std::vector<FeatureMap>* features, std::vector<Predictions>* preds) {
  if (cells.cols() != shape.obs_dim || cells.rows() % shape.cells() != 0) {
    throw Error("detector input " + shape_string(cells.shape()) + " does not match obs_dim " +
                std::to_string(shape.obs_dim) + " and grid " + std::to_string(shape.grid));
  }
  Graph g;
  const NodeId x = g.input("x");
  const DetectorNodes d = backbone_and_heads(g, x, shape.grid);
  Feeds feeds;
  params.bind(feeds);
  feeds.bind("x", cells);
  const std::size_t n = cells.rows() / shape.cells();
  auto split = [&](const Tensor& t, std::size_t i) {
    const std::size_t per = shape.cells() * t.cols();
    std::vector<double> v(t.values().begin() + static_cast<std::ptrdiff_t>(i * per),
                          t.values().begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    return Tensor({shape.cells(), t.cols()}, std::move(v));
  };
  if (features) {
    const Tensor& f = g.evaluate(feeds, d.features);
    for (std::size_t i = 0; i < n; ++i) features->push_back({split(f, i)});
  }
  if (preds) {
    const Tensor probs = g.evaluate(feeds, d.probs);
    const Tensor& off = g.evaluate(feeds, d.offsets);
    for (std::size_t i = 0; i < n; ++i) preds->push_back({split(probs, i), split(off, i)});
  }
}

inline FeatureMap backbone_forward(const Sample& sample, const ParamSet& params,
                                   const DetectorShape& shape) {
  std::vector<FeatureMap> out;
  run_detector(params, shape, sample.cells.reshaped({shape.cells(), sample.cells.cols()}), &out,
               nullptr);
  return out.front();
}

/// Applies the heads to an existing feature map.
inline Predictions heads_forward(const FeatureMap& fm, const ParamSet& params) {
  Graph g;
  const NodeId f = g.input("f");
  const NodeId probs = g.softmax(linear(g, f, "head.cls"));
  const NodeId off = linear(g, f, "head.box");
  Feeds feeds;
  params.bind(feeds);
  feeds.bind("f", fm.features);
  Predictions p;
  p.class_probs = g.evaluate(feeds, probs);
  p.box_offsets = g.evaluate(feeds, off);
  return p;
}

// Matching and loss ---------------------------------------------------------

struct CellTargets {
  std::vector<int> labels;            // per cell, 0 = background
  std::vector<BoxOffsets> offsets;    // per cell, meaningful where labels > 0
  std::vector<std::string> warnings;

  std::size_t positives() const {
    return static_cast<std::size_t>(std::count_if(labels.begin(), labels.end(),
                                                  [](int l) { return l > 0; }));
  }
};

/// Assigns every annotation to its centre cell. When two annotations share a
/// cell the larger box wins and a warning is recorded.
inline CellTargets match_targets(const std::vector<Annotation>& annotations, std::size_t grid) {
  CellTargets t;
  t.labels.assign(grid * grid, 0);
  t.offsets.assign(grid * grid, BoxOffsets{});
  std::vector<double> area(grid * grid, -1.0);
  for (const Annotation& a : annotations) {
    const Cell cell = center_cell(a.box, grid);
    const std::size_t idx = cell.index(grid);
    if (t.labels[idx] > 0) {
      t.warnings.push_back("annotations collide in cell (" + std::to_string(cell.u) + ", " +
                           std::to_string(cell.v) + "); keeping the larger box");
      if (a.box.area() <= area[idx]) continue;
    }
    t.labels[idx] = a.label;
    t.offsets[idx] = encode_box(a.box, cell, grid);
    area[idx] = a.box.area();
  }
  return t;
}

/// Builds the detection loss for a stacked batch whose per-image targets are
/// given in order: weighted cross-entropy averaged over every cell plus
/// smooth-L1 over the four offsets averaged over positive cells.
inline NodeId detection_loss(Graph& g, NodeId probs, NodeId offsets,
                             const std::vector<CellTargets>& targets, std::size_t num_classes,
                             double bg_weight) {
  const std::size_t classes = num_classes + 1;
  std::size_t cells_per = targets.empty() ? 0 : targets.front().labels.size();
  const std::size_t rows = cells_per * targets.size();
  if (rows == 0) throw Error("detection_loss needs at least one image");
  Tensor weighted_onehot = Tensor::matrix(rows, classes);
  std::vector<std::size_t> pos_rows;
  std::vector<double> pos_targets;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    for (std::size_t c = 0; c < cells_per; ++c) {
      const std::size_t r = i * cells_per + c;
      const int y = targets[i].labels[c];
      weighted_onehot.at(r, static_cast<std::size_t>(y)) = y == 0 ? bg_weight : 1.0;
      if (y > 0) {
        pos_rows.push_back(r);
        for (double o : targets[i].offsets[c]) pos_targets.push_back(-o);
      }
    }
  }
  const NodeId ce = g.scale(
      g.reduce_mean(g.multiply(g.log(probs), g.constant(std::move(weighted_onehot)))),
      -static_cast<double>(classes));
  g.label(ce, "classification loss");
  if (pos_rows.empty()) return ce;
  const std::size_t npos = pos_rows.size();
  const NodeId residual = g.add(g.gather_rows(offsets, std::move(pos_rows)),
                                g.constant(Tensor({npos, 4}, std::move(pos_targets))));
  const NodeId loc = g.label(g.scale(g.reduce_mean(g.smooth_l1(residual)), 4.0),
                             "localization loss");
  return g.add(ce, loc);
}

/// Value of the detection loss for given predictions (one image).
inline double detection_loss_value(const Predictions& preds, const CellTargets& targets,
                                   double bg_weight) {
  Graph g;
  const NodeId p = g.constant(preds.class_probs);
  const NodeId o = g.constant(preds.box_offsets);
  const NodeId l =
      detection_loss(g, p, o, {targets}, preds.class_probs.cols() - 1, bg_weight);
  return g.evaluate(Feeds{}, l)[0];
}

// Decoding, NMS, evaluation -------------------------------------------------

struct Detection {
  int label = 0;
  double score = 0.0;
  Box box;
};

inline std::vector<Detection> decode_predictions(const Predictions& preds, std::size_t grid,
                                                 double conf_thresh) {
  if (!(conf_thresh > 0.0 && conf_thresh < 1.0)) {
    throw Error("conf_thresh must lie in (0, 1)");
  }
  std::vector<Detection> out;
  const std::size_t classes = preds.class_probs.cols();
  for (std::size_t c = 0; c < grid * grid; ++c) {
    for (std::size_t k = 1; k < classes; ++k) {
      const double p = preds.class_probs.at(c, k);
      if (p <= conf_thresh) continue;
      BoxOffsets o;
      for (std::size_t j = 0; j < 4; ++j) o[j] = preds.box_offsets.at(c, j);
      out.push_back({static_cast<int>(k), p, decode_box(o, Cell::from_index(c, grid), grid)});
    }
  }
  return out;
}

/// Greedy per-class suppression; equal scores keep input order.
inline std::vector<Detection> nms(const std::vector<Detection>& dets, double iou_thresh = 0.5) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<Detection> kept;
  for (std::size_t i : order) {
    const Detection& d = dets[i];
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.label == d.label && iou(k.box, d.box) > iou_thresh;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

struct MapReport {
  std::vector<std::optional<double>> ap;  // index k-1; nullopt when class has no ground truth
  std::vector<std::size_t> num_gt;
  double map = 0.0;
};

/// All-points interpolated AP from a ranked list of TP/FP flags.
inline double average_precision(const std::vector<bool>& tp_ranked, std::size_t num_gt) {
  if (num_gt == 0) return 0.0;
  std::vector<double> recall, precision;
  std::size_t tp = 0;
  for (std::size_t i = 0; i < tp_ranked.size(); ++i) {
    if (tp_ranked[i]) ++tp;
    recall.push_back(static_cast<double>(tp) / static_cast<double>(num_gt));
    precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
  }
  // Precision envelope, then area under the step function.
  for (std::size_t i = precision.size(); i-- > 1;) {
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  }
  double ap = 0.0;
  double prev_recall = 0.0;
  for (std::size_t i = 0; i < recall.size(); ++i) {
    ap += (recall[i] - prev_recall) * precision[i];
    prev_recall = recall[i];
  }
  return ap;
}

inline MapReport evaluate_map(const std::vector<std::vector<Detection>>& detections,
                              const std::vector<std::vector<Annotation>>& ground_truth,
                              std::size_t num_classes, double iou_thresh = 0.5) {
  if (detections.size() != ground_truth.size()) {
    throw Error("evaluate_map: " + std::to_string(detections.size()) + " detection lists for " +
                std::to_string(ground_truth.size()) + " images");
  }
  MapReport report;
  report.ap.assign(num_classes, std::nullopt);
  report.num_gt.assign(num_classes, 0);
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t k = 1; k <= num_classes; ++k) {
    const int label = static_cast<int>(k);
    struct Ranked {
      double score;
      std::size_t image;
      std::size_t det;
    };
    std::vector<Ranked> ranked;
    std::size_t num_gt = 0;
    std::vector<std::vector<char>> matched(ground_truth.size());
    for (std::size_t i = 0; i < ground_truth.size(); ++i) {
      matched[i].assign(ground_truth[i].size(), 0);
      for (const Annotation& a : ground_truth[i]) num_gt += a.label == label;
      for (std::size_t j = 0; j < detections[i].size(); ++j) {
        if (detections[i][j].label == label) ranked.push_back({detections[i][j].score, i, j});
      }
    }
    report.num_gt[k - 1] = num_gt;
    if (num_gt == 0) continue;
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const Ranked& a, const Ranked& b) { return a.score > b.score; });
    std::vector<bool> tp;
    tp.reserve(ranked.size());
    for (const Ranked& r : ranked) {
      const Box& box = detections[r.image][r.det].box;
      double best = -1.0;
      std::size_t best_j = 0;
      const auto& gts = ground_truth[r.image];
      for (std::size_t j = 0; j < gts.size(); ++j) {
        if (gts[j].label != label || matched[r.image][j]) continue;
        const double o = iou(box, gts[j].box);
        if (o > best) {
          best = o;
          best_j = j;
        }
      }
      const bool hit = best >= iou_thresh;
      if (hit) matched[r.image][best_j] = 1;
      tp.push_back(hit);
    }
    const double ap = average_precision(tp, num_gt);
    report.ap[k - 1] = ap;
    sum += ap;
    ++counted;
  }
  report.map = counted ? sum / static_cast<double>(counted) : 0.0;
  return report;
}

struct DetectionEval {
  MapReport report;
  std::vector<std::vector<Detection>> detections;
};

struct EvalOptions {
  double conf_thresh = 0.3;
  double iou_thresh = 0.5;  // NMS threshold; matching always uses 0.5
  std::size_t batch = 64;
};

/// Runs the detector over a labelled dataset and scores it. Only detector
/// parameters are read from `params`.
inline DetectionEval evaluate_detector(const ParamSet& params, const Dataset& ds,
                                       const EvalOptions& opt = {}) {
  const DetectorShape shape = DetectorShape::from(ds.config());
  const ParamSet detector = params.filtered({"backbone.", "head."});
  DetectionEval out;
  std::vector<std::vector<Annotation>> gts;
  for (std::size_t start = 0; start < ds.size(); start += opt.batch) {
    std::vector<std::size_t> idx;
    for (std::size_t i = start; i < std::min(ds.size(), start + opt.batch); ++i) idx.push_back(i);
    std::vector<Predictions> preds;
    run_detector(detector, shape, stack_cells(ds, idx), nullptr, &preds);
    for (std::size_t j = 0; j < idx.size(); ++j) {
      out.detections.push_back(
          nms(decode_predictions(preds[j], shape.grid, opt.conf_thresh), opt.iou_thresh));
      gts.push_back(ds.ground_truth(idx[j]));
    }
  }
  out.report = evaluate_map(out.detections, gts, shape.num_classes);
  return out;
}

}  // namespace dalab
