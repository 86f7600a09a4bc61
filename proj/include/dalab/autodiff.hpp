#pragma once

// Dense reverse-mode automatic differentiation over 2-D double matrices.
//
// A Graph is an append-only tape: every node is added after its inputs, so
// insertion order is a topological order. Inputs are named placeholders bound
// at evaluation time; backward() returns gradients for every bound input whose
// tensor has requires_grad set.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dalab/tensor.hpp"

namespace dalab {

struct NodeId {
  std::size_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

enum class OpKind {
  kInput,
  kConstant,
  kMatMul,
  kAdd,
  kMultiply,
  kScale,
  kShift,
  kConcat,
  kRelu,
  kSigmoid,
  kLog,
  kSoftmax,
  kReduceMean,
  kSmoothL1,
  kGrl,
  kGatherRows,
  kNeighborMean,
  kStopGradient,
};

inline std::string_view op_name(OpKind k) {
  switch (k) {
    case OpKind::kInput: return "input";
    case OpKind::kConstant: return "constant";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kAdd: return "add";
    case OpKind::kMultiply: return "multiply";
    case OpKind::kScale: return "scale";
    case OpKind::kShift: return "shift";
    case OpKind::kConcat: return "concat";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kLog: return "log";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kReduceMean: return "reduce_mean";
    case OpKind::kSmoothL1: return "smooth_l1";
    case OpKind::kGrl: return "grl";
    case OpKind::kGatherRows: return "gather_rows";
    case OpKind::kNeighborMean: return "neighbor_mean";
    case OpKind::kStopGradient: return "stop_gradient";
  }
  return "?";
}

/// Lower clamp applied before every log.
inline constexpr double kLogFloor = 1e-12;

/// Named tensors bound to graph inputs. Holds non-owning pointers; the bound
/// tensors must outlive every evaluate/backward call that uses them.
class Feeds {
 public:
  Feeds& bind(std::string name, const Tensor& t) {
    map_[std::move(name)] = &t;
    return *this;
  }
  Feeds& bind(std::string name, Tensor&&) = delete;
  const Tensor* find(const std::string& name) const {
    auto it = map_.find(name);
    return it == map_.end() ? nullptr : it->second;
  }
  bool contains(const std::string& name) const { return map_.contains(name); }

 private:
  std::map<std::string, const Tensor*> map_;
};

using Gradients = std::map<std::string, Tensor>;

class Graph {
 public:
  using RowMatrix =
      Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  using MapC = Eigen::Map<const RowMatrix>;
  using Map = Eigen::Map<RowMatrix>;

  // Construction ------------------------------------------------------------

  NodeId input(std::string name) {
    Node n = make(OpKind::kInput, {});
    n.name = std::move(name);
    return push(std::move(n));
  }

  NodeId constant(Tensor value) {
    Node n = make(OpKind::kConstant, {});
    n.value = std::move(value);
    n.has_value = true;
    return push(std::move(n));
  }

  NodeId matmul(NodeId a, NodeId b) { return push(make(OpKind::kMatMul, {a, b})); }

  /// Elementwise sum. `b` may also be a single row broadcast over a's rows.
  NodeId add(NodeId a, NodeId b) { return push(make(OpKind::kAdd, {a, b})); }

  /// Elementwise product. `b` may also be a single column broadcast over a's
  /// columns (per-row scaling).
  NodeId multiply(NodeId a, NodeId b) {
    return push(make(OpKind::kMultiply, {a, b}));
  }

  NodeId scale(NodeId a, double c) {
    Node n = make(OpKind::kScale, {a});
    n.scalar = c;
    return push(std::move(n));
  }

  NodeId shift(NodeId a, double c) {
    Node n = make(OpKind::kShift, {a});
    n.scalar = c;
    return push(std::move(n));
  }

  /// Column-wise concatenation of matrices with equal row counts.
  NodeId concat(std::vector<NodeId> parts) {
    if (parts.empty()) throw Error("concat needs at least one input");
    return push(make(OpKind::kConcat, std::move(parts)));
  }

  NodeId relu(NodeId a) { return push(make(OpKind::kRelu, {a})); }
  NodeId sigmoid(NodeId a) { return push(make(OpKind::kSigmoid, {a})); }
  NodeId log(NodeId a) { return push(make(OpKind::kLog, {a})); }
  NodeId softmax(NodeId a) { return push(make(OpKind::kSoftmax, {a})); }
  NodeId reduce_mean(NodeId a) { return push(make(OpKind::kReduceMean, {a})); }
  NodeId smooth_l1(NodeId a) { return push(make(OpKind::kSmoothL1, {a})); }

  /// Gradient reversal: identity forward, upstream gradient times -coeff.
  NodeId grl(NodeId a, double coeff) {
    if (!(coeff >= 0.0)) throw Error("grl coefficient must be nonnegative");
    Node n = make(OpKind::kGrl, {a});
    n.scalar = coeff;
    return push(std::move(n));
  }

  NodeId gather_rows(NodeId a, std::vector<std::size_t> rows) {
    if (rows.empty()) throw Error("gather_rows needs at least one row");
    Node n = make(OpKind::kGatherRows, {a});
    n.index = std::move(rows);
    return push(std::move(n));
  }

  /// Mean over each cell and its in-grid 4-neighbours. The input holds
  /// `batch` stacked G x G grids of cells, one cell per row.
  NodeId neighbor_mean(NodeId a, std::size_t grid) {
    if (grid == 0) throw Error("neighbor_mean grid must be positive");
    Node n = make(OpKind::kNeighborMean, {a});
    n.grid = grid;
    return push(std::move(n));
  }

  NodeId stop_gradient(NodeId a) {
    return push(make(OpKind::kStopGradient, {a}));
  }

  /// Attaches a human-readable label used in error messages.
  NodeId label(NodeId id, std::string text) {
    nodes_.at(id.index).label = std::move(text);
    return id;
  }

  std::size_t size() const { return nodes_.size(); }
  OpKind kind(NodeId id) const { return nodes_.at(id.index).kind; }
  const std::vector<NodeId>& inputs_of(NodeId id) const {
    return nodes_.at(id.index).inputs;
  }

  void set_debug(bool on) { debug_ = on; }
  bool debug() const { return debug_; }

  // Evaluation --------------------------------------------------------------

  /// Computes `output` and every node it depends on; values stay cached for
  /// backward().
  const Tensor& evaluate(const Feeds& feeds, NodeId output) {
    check_id(output);
    const std::vector<char> needed = ancestors(output);
    for (std::size_t i = 0; i <= output.index; ++i) {
      if (!needed[i]) continue;
      Node& n = nodes_[i];
      if (n.kind == OpKind::kConstant) continue;
      forward(n, i, feeds);
      n.needs_grad = needs_grad(n, feeds);
      if (debug_ && !n.value.all_finite()) {
        throw Error(describe(i) + ": non-finite value in forward pass");
      }
    }
    for (std::size_t i = output.index + 1; i < nodes_.size(); ++i) {
      if (nodes_[i].kind != OpKind::kConstant) nodes_[i].has_value = false;
    }
    evaluated_ = output;
    bound_ = feeds;
    return nodes_[output.index].value;
  }

  const Tensor& value(NodeId id) const {
    const Node& n = nodes_.at(id.index);
    if (!n.has_value) throw Error(describe(id.index) + ": not evaluated");
    return n.value;
  }

  /// Propagates `seed` (shaped like the last evaluated output) back through
  /// the tape. Nodes are visited once each, in reverse insertion order.
  Gradients backward(const Tensor& seed) {
    if (!evaluated_) throw Error("backward called before evaluate");
    const std::size_t out = evaluated_->index;
    if (seed.shape() != nodes_[out].value.shape() &&
        seed.size() != nodes_[out].value.size()) {
      throw Error("backward seed shape " + shape_string(seed.shape()) +
                  " does not match output " +
                  shape_string(nodes_[out].value.shape()));
    }
    for (Node& n : nodes_) {
      n.grad = Tensor();
      n.has_grad = false;
    }
    nodes_[out].grad = seed.reshaped(nodes_[out].value.shape());
    nodes_[out].has_grad = true;

    Gradients result;
    for (std::size_t i = out + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.needs_grad) continue;
      if (n.kind == OpKind::kInput) {
        const Tensor* t = bound_.find(n.name);
        if (t && t->requires_grad()) {
          auto [it, inserted] = result.try_emplace(n.name, n.grad);
          if (!inserted) accumulate(it->second, n.grad);
        }
        continue;
      }
      backward_node(n);
    }
    return result;
  }

  /// Hash of every piecewise branch taken in the last forward pass (relu
  /// sign, log floor, smooth-L1 regime). Finite differences are only valid
  /// between points sharing a signature.
  std::uint64_t branch_signature() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](bool b) {
      h ^= static_cast<std::uint64_t>(b) + 0x9e;
      h *= 1099511628211ull;
    };
    for (const Node& n : nodes_) {
      if (!n.has_value || n.inputs.empty()) continue;
      const Node& in = nodes_[n.inputs[0].index];
      switch (n.kind) {
        case OpKind::kRelu:
          for (double v : in.value.values()) mix(v > 0.0);
          break;
        case OpKind::kLog:
          for (double v : in.value.values()) mix(v > kLogFloor);
          break;
        case OpKind::kSmoothL1:
          for (double v : in.value.values()) mix(std::abs(v) < 1.0);
          break;
        default:
          break;
      }
    }
    return h;
  }

 private:
  struct Node {
    OpKind kind = OpKind::kInput;
    std::vector<NodeId> inputs;
    Tensor value;
    Tensor grad;
    bool has_value = false;
    bool has_grad = false;
    bool needs_grad = false;
    double scalar = 0.0;
    std::size_t grid = 0;
    std::vector<std::size_t> index;
    std::string name;
    std::string label;
  };

  Node make(OpKind kind, std::vector<NodeId> inputs) const {
    for (NodeId id : inputs) check_id(id);
    Node n;
    n.kind = kind;
    n.inputs = std::move(inputs);
    return n;
  }

  NodeId push(Node n) {
    nodes_.push_back(std::move(n));
    return NodeId{nodes_.size() - 1};
  }

  void check_id(NodeId id) const {
    if (id.index >= nodes_.size()) {
      throw Error("node id " + std::to_string(id.index) + " out of range");
    }
  }

  std::string describe(std::size_t i) const {
    const Node& n = nodes_[i];
    std::string s = "node #" + std::to_string(i) + " (" +
                    std::string(op_name(n.kind));
    if (!n.name.empty()) s += " '" + n.name + "'";
    if (!n.label.empty()) s += " '" + n.label + "'";
    return s + ")";
  }

  std::vector<char> ancestors(NodeId output) const {
    std::vector<char> needed(nodes_.size(), 0);
    needed[output.index] = 1;
    for (std::size_t i = output.index + 1; i-- > 0;) {
      if (!needed[i]) continue;
      for (NodeId in : nodes_[i].inputs) needed[in.index] = 1;
    }
    return needed;
  }

  const Tensor& in(const Node& n, std::size_t k) const {
    return nodes_[n.inputs[k].index].value;
  }

  [[noreturn]] void shape_error(std::size_t i, const std::string& what) const {
    throw Error(describe(i) + ": shape mismatch, " + what);
  }

  static MapC as_matrix(const Tensor& t) {
    return MapC(t.data().data(), static_cast<Eigen::Index>(t.rows()),
                static_cast<Eigen::Index>(t.cols()));
  }
  static Map as_matrix(Tensor& t) {
    return Map(t.data().data(), static_cast<Eigen::Index>(t.rows()),
               static_cast<Eigen::Index>(t.cols()));
  }

  static void accumulate(Tensor& dst, const Tensor& src) {
    auto d = dst.data();
    auto s = src.data();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
  }

  void add_grad(NodeId id, Tensor g) {
    Node& n = nodes_[id.index];
    if (!n.needs_grad) return;
    if (!n.has_grad) {
      n.grad = g.reshaped(n.value.shape());
      n.has_grad = true;
    } else {
      accumulate(n.grad, g);
    }
  }

  void forward(Node& n, std::size_t i, const Feeds& feeds) {
    switch (n.kind) {
      case OpKind::kInput: {
        const Tensor* t = feeds.find(n.name);
        if (!t) throw Error(describe(i) + ": no tensor bound to input");
        n.value = *t;
        break;
      }
      case OpKind::kConstant:
        break;
      case OpKind::kMatMul: {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        if (a.cols() != b.rows() || b.rank() > 2) {
          shape_error(i, shape_string(a.shape()) + " @ " +
                             shape_string(b.shape()));
        }
        Tensor out = Tensor::matrix(a.rows(), b.cols());
        as_matrix(out).noalias() = as_matrix(a) * as_matrix(b);
        n.value = std::move(out);
        break;
      }
      case OpKind::kAdd: {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        Tensor out = a;
        out.set_requires_grad(false);
        auto o = out.data();
        auto bv = b.data();
        if (b.size() == a.size()) {
          for (std::size_t j = 0; j < o.size(); ++j) o[j] += bv[j];
        } else if (b.size() == a.cols()) {
          const std::size_t c = a.cols();
          for (std::size_t j = 0; j < o.size(); ++j) o[j] += bv[j % c];
        } else {
          shape_error(i, shape_string(a.shape()) + " + " +
                             shape_string(b.shape()));
        }
        n.value = std::move(out);
        break;
      }
      case OpKind::kMultiply: {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        Tensor out = a;
        out.set_requires_grad(false);
        auto o = out.data();
        auto bv = b.data();
        if (b.size() == a.size()) {
          for (std::size_t j = 0; j < o.size(); ++j) o[j] *= bv[j];
        } else if (b.size() == a.rows() && b.cols() == 1) {
          const std::size_t c = a.cols();
          for (std::size_t j = 0; j < o.size(); ++j) o[j] *= bv[j / c];
        } else {
          shape_error(i, shape_string(a.shape()) + " * " +
                             shape_string(b.shape()));
        }
        n.value = std::move(out);
        break;
      }
      case OpKind::kScale:
        n.value = map_unary(in(n, 0), [c = n.scalar](double x) { return c * x; });
        break;
      case OpKind::kShift:
        n.value = map_unary(in(n, 0), [c = n.scalar](double x) { return x + c; });
        break;
      case OpKind::kConcat: {
        const std::size_t rows = in(n, 0).rows();
        std::size_t cols = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          if (in(n, k).rows() != rows) {
            shape_error(i, "concat row counts " + std::to_string(rows) +
                               " vs " + std::to_string(in(n, k).rows()));
          }
          cols += in(n, k).cols();
        }
        Tensor out = Tensor::matrix(rows, cols);
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const Tensor& part = in(n, k);
          const std::size_t pc = part.cols();
          for (std::size_t r = 0; r < rows; ++r) {
            std::copy_n(&part.data()[r * pc], pc, &out.data()[r * cols + offset]);
          }
          offset += pc;
        }
        n.value = std::move(out);
        break;
      }
      case OpKind::kRelu:
        n.value = map_unary(in(n, 0), [](double x) { return x > 0.0 ? x : 0.0; });
        break;
      case OpKind::kSigmoid:
        n.value = map_unary(in(n, 0), [](double x) {
          if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
          const double e = std::exp(x);
          return e / (1.0 + e);
        });
        break;
      case OpKind::kLog:
        n.value = map_unary(in(n, 0),
                            [](double x) { return std::log(std::max(x, kLogFloor)); });
        break;
      case OpKind::kSoftmax: {
        Tensor out = in(n, 0);
        out.set_requires_grad(false);
        const std::size_t c = out.cols();
        auto o = out.data();
        for (std::size_t r = 0; r < out.rows(); ++r) {
          double* row = &o[r * c];
          const double mx = *std::max_element(row, row + c);
          double sum = 0.0;
          for (std::size_t j = 0; j < c; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
          }
          for (std::size_t j = 0; j < c; ++j) row[j] /= sum;
        }
        n.value = std::move(out);
        break;
      }
      case OpKind::kReduceMean: {
        const Tensor& a = in(n, 0);
        double sum = 0.0;
        for (double v : a.values()) sum += v;
        n.value = Tensor::scalar(sum / static_cast<double>(a.size()));
        break;
      }
      case OpKind::kSmoothL1:
        n.value = map_unary(in(n, 0), [](double x) {
          const double ax = std::abs(x);
          return ax < 1.0 ? 0.5 * x * x : ax - 0.5;
        });
        break;
      case OpKind::kGrl:
      case OpKind::kStopGradient:
        n.value = in(n, 0);
        n.value.set_requires_grad(false);
        break;
      case OpKind::kGatherRows: {
        const Tensor& a = in(n, 0);
        const std::size_t c = a.cols();
        Tensor out = Tensor::matrix(n.index.size(), c);
        for (std::size_t r = 0; r < n.index.size(); ++r) {
          if (n.index[r] >= a.rows()) {
            shape_error(i, "row " + std::to_string(n.index[r]) +
                               " out of range for " + shape_string(a.shape()));
          }
          std::copy_n(&a.data()[n.index[r] * c], c, &out.data()[r * c]);
        }
        n.value = std::move(out);
        break;
      }
      case OpKind::kNeighborMean: {
        const Tensor& a = in(n, 0);
        const std::size_t cells = n.grid * n.grid;
        if (a.rows() % cells != 0) {
          shape_error(i, std::to_string(a.rows()) + " rows is not a multiple of " +
                             std::to_string(cells) + " grid cells");
        }
        Tensor out = Tensor::matrix(a.rows(), a.cols());
        for_each_neighbourhood(a.rows(), n.grid,
                               [&](std::size_t dst, std::size_t src, double w) {
                                 const std::size_t c = a.cols();
                                 const double* s = &a.data()[src * c];
                                 double* d = &out.data()[dst * c];
                                 for (std::size_t j = 0; j < c; ++j) d[j] += w * s[j];
                               });
        n.value = std::move(out);
        break;
      }
    }
    n.has_value = true;
  }

  template <typename Fn>
  static Tensor map_unary(const Tensor& a, Fn fn) {
    Tensor out = a;
    out.set_requires_grad(false);
    for (double& v : out.values()) v = fn(v);
    return out;
  }

  // Calls visit(dst_row, src_row, weight) for every (cell, contributor) pair.
  template <typename Visit>
  static void for_each_neighbourhood(std::size_t rows, std::size_t grid,
                                     Visit&& visit) {
    const std::size_t cells = grid * grid;
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t base = r - r % cells;
      const std::size_t cell = r % cells;
      const std::size_t u = cell / grid;
      const std::size_t v = cell % grid;
      std::size_t nbr[5];
      std::size_t count = 0;
      nbr[count++] = r;
      if (u > 0) nbr[count++] = base + (u - 1) * grid + v;
      if (u + 1 < grid) nbr[count++] = base + (u + 1) * grid + v;
      if (v > 0) nbr[count++] = base + u * grid + (v - 1);
      if (v + 1 < grid) nbr[count++] = base + u * grid + (v + 1);
      const double w = 1.0 / static_cast<double>(count);
      for (std::size_t k = 0; k < count; ++k) visit(r, nbr[k], w);
    }
  }

  void backward_node(Node& n) {
    const Tensor& g = n.grad;
    switch (n.kind) {
      case OpKind::kInput:
      case OpKind::kConstant:
      case OpKind::kStopGradient:
        break;
      case OpKind::kMatMul: {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        if (wants_grad(n.inputs[0])) {
          Tensor da = Tensor::matrix(a.rows(), a.cols());
          as_matrix(da).noalias() = as_matrix(g) * as_matrix(b).transpose();
          add_grad(n.inputs[0], std::move(da));
        }
        if (wants_grad(n.inputs[1])) {
          Tensor db = Tensor::matrix(b.rows(), b.cols());
          as_matrix(db).noalias() = as_matrix(a).transpose() * as_matrix(g);
          add_grad(n.inputs[1], std::move(db));
        }
        break;
      }
      case OpKind::kAdd: {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        add_grad(n.inputs[0], g);
        if (!wants_grad(n.inputs[1])) break;
        if (b.size() == a.size()) {
          add_grad(n.inputs[1], g);
        } else {
          Tensor db(b.shape());
          const std::size_t c = a.cols();
          auto gv = g.data();
          for (std::size_t j = 0; j < gv.size(); ++j) db[j % c] += gv[j];
          add_grad(n.inputs[1], std::move(db));
        }
        break;
      }
      case OpKind::kMultiply: {
        const Tensor& a = in(n, 0);
        const Tensor& b = in(n, 1);
        const bool full = b.size() == a.size();
        const std::size_t c = a.cols();
        if (wants_grad(n.inputs[0])) {
          Tensor da(a.shape());
          for (std::size_t j = 0; j < da.size(); ++j) {
            da[j] = g[j] * (full ? b[j] : b[j / c]);
          }
          add_grad(n.inputs[0], std::move(da));
        }
        if (wants_grad(n.inputs[1])) {
          Tensor db(b.shape());
          for (std::size_t j = 0; j < a.size(); ++j) {
            db[full ? j : j / c] += g[j] * a[j];
          }
          add_grad(n.inputs[1], std::move(db));
        }
        break;
      }
      case OpKind::kScale:
        add_grad(n.inputs[0], map_unary(g, [c = n.scalar](double x) { return c * x; }));
        break;
      case OpKind::kShift:
        add_grad(n.inputs[0], g);
        break;
      case OpKind::kConcat: {
        const std::size_t rows = n.value.rows();
        const std::size_t cols = n.value.cols();
        std::size_t offset = 0;
        for (std::size_t k = 0; k < n.inputs.size(); ++k) {
          const std::size_t pc = in(n, k).cols();
          if (wants_grad(n.inputs[k])) {
            Tensor dp = Tensor::matrix(rows, pc);
            for (std::size_t r = 0; r < rows; ++r) {
              std::copy_n(&g.data()[r * cols + offset], pc, &dp.data()[r * pc]);
            }
            add_grad(n.inputs[k], std::move(dp));
          }
          offset += pc;
        }
        break;
      }
      case OpKind::kRelu: {
        const Tensor& a = in(n, 0);
        Tensor da(a.shape());
        for (std::size_t j = 0; j < a.size(); ++j) da[j] = a[j] > 0.0 ? g[j] : 0.0;
        add_grad(n.inputs[0], std::move(da));
        break;
      }
      case OpKind::kSigmoid: {
        const Tensor& y = n.value;
        Tensor da(y.shape());
        for (std::size_t j = 0; j < y.size(); ++j) da[j] = g[j] * y[j] * (1.0 - y[j]);
        add_grad(n.inputs[0], std::move(da));
        break;
      }
      case OpKind::kLog: {
        const Tensor& a = in(n, 0);
        Tensor da(a.shape());
        for (std::size_t j = 0; j < a.size(); ++j) {
          da[j] = a[j] > kLogFloor ? g[j] / a[j] : 0.0;
        }
        add_grad(n.inputs[0], std::move(da));
        break;
      }
      case OpKind::kSoftmax: {
        const Tensor& y = n.value;
        const std::size_t c = y.cols();
        Tensor da(y.shape());
        for (std::size_t r = 0; r < y.rows(); ++r) {
          double dot = 0.0;
          for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
          for (std::size_t j = 0; j < c; ++j) {
            da[r * c + j] = y[r * c + j] * (g[r * c + j] - dot);
          }
        }
        add_grad(n.inputs[0], std::move(da));
        break;
      }
      case OpKind::kReduceMean: {
        const Tensor& a = in(n, 0);
        add_grad(n.inputs[0], Tensor(a.shape(), g[0] / static_cast<double>(a.size())));
        break;
      }
      case OpKind::kSmoothL1: {
        const Tensor& a = in(n, 0);
        Tensor da(a.shape());
        for (std::size_t j = 0; j < a.size(); ++j) {
          const double x = a[j];
          const double d = std::abs(x) < 1.0 ? x : (x > 0.0 ? 1.0 : -1.0);
          da[j] = g[j] * d;
        }
        add_grad(n.inputs[0], std::move(da));
        break;
      }
      case OpKind::kGrl:
        add_grad(n.inputs[0], map_unary(g, [c = n.scalar](double x) { return -c * x; }));
        break;
      case OpKind::kGatherRows: {
        const Tensor& a = in(n, 0);
        const std::size_t c = a.cols();
        Tensor da(a.shape());
        for (std::size_t r = 0; r < n.index.size(); ++r) {
          for (std::size_t j = 0; j < c; ++j) da[n.index[r] * c + j] += g[r * c + j];
        }
        add_grad(n.inputs[0], std::move(da));
        break;
      }
      case OpKind::kNeighborMean: {
        const Tensor& a = in(n, 0);
        Tensor da(a.shape());
        const std::size_t c = a.cols();
        for_each_neighbourhood(a.rows(), n.grid,
                               [&](std::size_t dst, std::size_t src, double w) {
                                 const double* s = &g.data()[dst * c];
                                 double* d = &da.data()[src * c];
                                 for (std::size_t j = 0; j < c; ++j) d[j] += w * s[j];
                               });
        add_grad(n.inputs[0], std::move(da));
        break;
      }
    }
  }

  bool needs_grad(const Node& n, const Feeds& feeds) const {
    switch (n.kind) {
      case OpKind::kInput: {
        const Tensor* t = feeds.find(n.name);
        return t && t->requires_grad();
      }
      case OpKind::kConstant:
      case OpKind::kStopGradient:
        return false;
      default:
        return std::any_of(n.inputs.begin(), n.inputs.end(), [&](NodeId id) {
          return nodes_[id.index].needs_grad;
        });
    }
  }

  bool wants_grad(NodeId id) const { return nodes_[id.index].needs_grad; }

  std::vector<Node> nodes_;
  std::optional<NodeId> evaluated_;
  Feeds bound_;
  bool debug_ = false;
};

/// Per-input outcome of a finite-difference gradient check.
struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t elements_checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  bool passed = false;

  double worst() const {
    double w = 0.0;
    for (const auto& e : entries) w = std::max(w, e.max_rel_error);
    return w;
  }
};

struct GradCheckOptions {
  double step = 1e-5;
  /// Denominator floor for the relative error so that near-zero gradients
  /// are compared absolutely.
  double scale_floor = 1e-4;
  /// Step shrink attempts (x0.1 each) when a perturbation crosses a
  /// relu/clamp branch. Elements still crossing at the smallest step are
  /// skipped; smaller steps are dominated by rounding error.
  int max_shrinks = 2;
  /// Elements checked per input, evenly spaced; 0 checks all of them.
  std::size_t max_elements = 0;
};

/// Compares backward() against central finite differences for every element
/// of the named inputs. `output` must evaluate to a single value. Inputs are
/// perturbed in copies; the tensors referenced by `feeds` are not modified.
inline GradCheckReport grad_check(Graph& graph, const Feeds& feeds, NodeId output,
                                  const std::vector<std::string>& names,
                                  double tol, GradCheckOptions opt = {}) {
  std::map<std::string, Tensor> work;
  for (const auto& name : names) {
    const Tensor* t = feeds.find(name);
    if (!t) throw Error("grad_check: no tensor bound to '" + name + "'");
    work.emplace(name, *t).first->second.set_requires_grad(true);
  }
  Feeds local = feeds;
  for (auto& [name, t] : work) local.bind(name, t);

  const Tensor& out = graph.evaluate(local, output);
  if (out.size() != 1) throw Error("grad_check: output must be a single value");
  const std::uint64_t signature = graph.branch_signature();
  const Gradients analytic = graph.backward(Tensor::scalar(1.0));

  auto eval_at = [&](Tensor& t, std::size_t j, double x) {
    const double saved = t[j];
    t[j] = x;
    const double y = graph.evaluate(local, output)[0];
    const bool same = graph.branch_signature() == signature;
    t[j] = saved;
    return std::pair{y, same};
  };

  GradCheckReport report;
  report.tolerance = tol;
  for (auto& [name, t] : work) {
    GradCheckEntry entry{name, 0.0, 0};
    auto it = analytic.find(name);
    const std::size_t stride =
        opt.max_elements == 0 ? 1 : std::max<std::size_t>(1, t.size() / opt.max_elements);
    for (std::size_t j = 0; j < t.size(); j += stride) {
      const double a = it == analytic.end() ? 0.0 : it->second[j];
      const double x0 = t[j];
      double h = opt.step;
      std::optional<double> numeric;
      for (int attempt = 0; attempt <= opt.max_shrinks; ++attempt, h *= 0.1) {
        auto [fp, okp] = eval_at(t, j, x0 + h);
        auto [fm, okm] = eval_at(t, j, x0 - h);
        if (okp && okm) {
          numeric = (fp - fm) / (2.0 * h);
          break;
        }
      }
      if (!numeric) continue;  // sits on a kink at every step size
      const double denom = std::max({std::abs(a), std::abs(*numeric), opt.scale_floor});
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(a - *numeric) / denom);
      ++entry.elements_checked;
    }
    report.entries.push_back(entry);
  }
  graph.evaluate(feeds, output);
  report.passed = report.worst() < tol;
  return report;
}

}  // namespace dalab
