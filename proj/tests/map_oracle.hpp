#pragma once

// Brute-force reference for VOC all-points AP. For every cut-off n of the
// ranked list the greedy matching is replayed from scratch on the top n
// detections, giving the (recall, precision) point at n; the interpolated
// precision at n is the maximum over all later points.

#include <algorithm>
#include <numeric>
#include <optional>
#include <vector>

#include "dalab/detector.hpp"
#include "dalab/rng.hpp"

namespace oracle {

using dalab::Annotation;
using dalab::Detection;

inline std::size_t true_positives_in_top(const std::vector<std::vector<Detection>>& dets,
                                         const std::vector<std::vector<Annotation>>& gts,
                                         int label, const std::vector<std::pair<std::size_t, std::size_t>>& order,
                                         std::size_t n) {
  std::vector<std::vector<bool>> used(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) used[i].assign(gts[i].size(), false);
  std::size_t tp = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const auto [img, j] = order[r];
    double best = -1.0;
    std::size_t arg = 0;
    for (std::size_t g = 0; g < gts[img].size(); ++g) {
      if (gts[img][g].label != label || used[img][g]) continue;
      const double o = dalab::iou(dets[img][j].box, gts[img][g].box);
      if (o > best) {
        best = o;
        arg = g;
      }
    }
    if (best >= 0.5) {
      used[img][arg] = true;
      ++tp;
    }
  }
  return tp;
}

struct Result {
  std::vector<std::optional<double>> ap;
  double map = 0.0;
};

inline Result evaluate(const std::vector<std::vector<Detection>>& dets,
                       const std::vector<std::vector<Annotation>>& gts, std::size_t classes) {
  Result res;
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t k = 1; k <= classes; ++k) {
    const int label = static_cast<int>(k);
    std::size_t num_gt = 0;
    for (const auto& g : gts)
      for (const auto& a : g) num_gt += a.label == label;
    if (num_gt == 0) {
      res.ap.push_back(std::nullopt);
      continue;
    }
    std::vector<std::pair<std::size_t, std::size_t>> order;
    for (std::size_t i = 0; i < dets.size(); ++i)
      for (std::size_t j = 0; j < dets[i].size(); ++j)
        if (dets[i][j].label == label) order.push_back({i, j});
    std::stable_sort(order.begin(), order.end(), [&](const auto& a, const auto& b) {
      return dets[a.first][a.second].score > dets[b.first][b.second].score;
    });
    const std::size_t n = order.size();
    std::vector<double> recall(n), precision(n);
    for (std::size_t c = 1; c <= n; ++c) {
      const std::size_t tp = true_positives_in_top(dets, gts, label, order, c);
      recall[c - 1] = static_cast<double>(tp) / static_cast<double>(num_gt);
      precision[c - 1] = static_cast<double>(tp) / static_cast<double>(c);
    }
    double ap = 0.0;
    double prev = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      double best = 0.0;
      for (std::size_t m = c; m < n; ++m) best = std::max(best, precision[m]);
      ap += (recall[c] - prev) * best;
      prev = recall[c];
    }
    res.ap.push_back(ap);
    sum += ap;
    ++counted;
  }
  res.map = counted ? sum / static_cast<double>(counted) : 0.0;
  return res;
}

struct Instance {
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<Annotation>> gts;
  std::size_t classes = 3;
};

/// Up to 5 images, up to 4 detections each, boxes placed near ground truth
/// often enough to produce both hits and misses. Scores come from a coarse
/// grid so that ties occur.
inline Instance random_instance(std::uint64_t seed) {
  dalab::Rng rng(seed);
  Instance inst;
  const std::size_t images = 1 + rng.below(5);
  auto random_box = [&] {
    return dalab::Box{rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.1, 0.3),
                      rng.uniform(0.1, 0.3)};
  };
  for (std::size_t i = 0; i < images; ++i) {
    std::vector<Annotation> g;
    const std::size_t ng = rng.below(4);
    for (std::size_t j = 0; j < ng; ++j) {
      g.push_back({1 + static_cast<int>(rng.below(inst.classes)), random_box()});
    }
    std::vector<Detection> d;
    const std::size_t nd = rng.below(5);
    for (std::size_t j = 0; j < nd; ++j) {
      Detection det;
      det.score = static_cast<double>(1 + rng.below(10)) / 10.0;
      if (!g.empty() && rng.uniform() < 0.7) {
        const Annotation& a = g[rng.below(g.size())];
        det.label = rng.uniform() < 0.8 ? a.label : 1 + static_cast<int>(rng.below(inst.classes));
        det.box = a.box;
        det.box.cx += rng.uniform(-0.05, 0.05);
        det.box.cy += rng.uniform(-0.05, 0.05);
      } else {
        det.label = 1 + static_cast<int>(rng.below(inst.classes));
        det.box = random_box();
      }
      d.push_back(det);
    }
    inst.gts.push_back(std::move(g));
    inst.dets.push_back(std::move(d));
  }
  return inst;
}

}  // namespace oracle
