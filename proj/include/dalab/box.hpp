#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>

namespace dalab {

/// Axis-aligned box in normalised image coordinates (centre, width, height).
struct Box {
  double cx = 0.0;
  double cy = 0.0;
  double w = 0.0;
  double h = 0.0;

  double area() const { return w * h; }
  friend bool operator==(const Box&, const Box&) = default;
};

/// Grid cell address; `u` indexes the x axis and `v` the y axis. Cells are
/// stored row-major as u * G + v.
struct Cell {
  std::size_t u = 0;
  std::size_t v = 0;

  std::size_t index(std::size_t grid) const { return u * grid + v; }
  static Cell from_index(std::size_t index, std::size_t grid) {
    return {index / grid, index % grid};
  }
  friend bool operator==(const Cell&, const Cell&) = default;
};

/// Width/height that encodes to a zero log-size offset.
inline constexpr double kReferenceBoxSize = 0.15;

inline Cell center_cell(const Box& b, std::size_t grid) {
  const double g = static_cast<double>(grid);
  auto clamp = [grid](double x) {
    return static_cast<std::size_t>(std::clamp(x, 0.0, static_cast<double>(grid - 1)));
  };
  return {clamp(std::floor(b.cx * g)), clamp(std::floor(b.cy * g))};
}

using BoxOffsets = std::array<double, 4>;

/// (dcx, dcy, log w, log h): centre offsets in cell units from the cell
/// centre, sizes as log ratios to the reference size.
inline BoxOffsets encode_box(const Box& b, Cell cell, std::size_t grid) {
  const double g = static_cast<double>(grid);
  return {(b.cx - (static_cast<double>(cell.u) + 0.5) / g) * g,
          (b.cy - (static_cast<double>(cell.v) + 0.5) / g) * g,
          std::log(b.w / kReferenceBoxSize), std::log(b.h / kReferenceBoxSize)};
}

inline Box decode_box(const BoxOffsets& o, Cell cell, std::size_t grid) {
  const double g = static_cast<double>(grid);
  return {(static_cast<double>(cell.u) + 0.5 + o[0]) / g,
          (static_cast<double>(cell.v) + 0.5 + o[1]) / g,
          kReferenceBoxSize * std::exp(o[2]), kReferenceBoxSize * std::exp(o[3])};
}

/// Intersection over union; 0 when either box is degenerate.
inline double iou(const Box& a, const Box& b) {
  const double ix = std::min(a.cx + a.w / 2, b.cx + b.w / 2) -
                    std::max(a.cx - a.w / 2, b.cx - b.w / 2);
  const double iy = std::min(a.cy + a.h / 2, b.cy + b.h / 2) -
                    std::max(a.cy - a.h / 2, b.cy - b.h / 2);
  if (ix <= 0.0 || iy <= 0.0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

}  // namespace dalab
