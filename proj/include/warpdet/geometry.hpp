#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

namespace warpdet {

// Axis-aligned box in corner form, continuous pixel coordinates.
struct BoundingBox {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return std::max(0.0, width()) * std::max(0.0, height()); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }

  bool valid() const { return x1 < x2 && y1 < y2; }

  BoundingBox clipped(double w, double h) const {
    return {std::clamp(x1, 0.0, w), std::clamp(y1, 0.0, h), std::clamp(x2, 0.0, w), std::clamp(y2, 0.0, h)};
  }

  BoundingBox hflipped(double image_w) const { return {image_w - x2, y1, image_w - x1, y2}; }
};

inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double ix1 = std::max(a.x1, b.x1);
  const double iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2);
  const double iy2 = std::min(a.y2, b.y2);
  const double iw = ix2 - ix1, ih = iy2 - iy1;
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

// Corner form <-> center-offset regression targets, the usual detector
// parameterization: (dx, dy, dw, dh) of `box` relative to `anchor`.
inline std::array<double, 4> encode_box(const BoundingBox& box, const BoundingBox& anchor) {
  const double aw = anchor.width(), ah = anchor.height();
  if (aw <= 0.0 || ah <= 0.0) throw std::invalid_argument("encode_box: degenerate anchor");
  const double bw = std::max(box.width(), 1e-6), bh = std::max(box.height(), 1e-6);
  return {(box.cx() - anchor.cx()) / aw, (box.cy() - anchor.cy()) / ah, std::log(bw / aw), std::log(bh / ah)};
}

inline BoundingBox decode_box(const std::array<double, 4>& t, const BoundingBox& anchor) {
  const double aw = anchor.width(), ah = anchor.height();
  // clamp exp inputs so wild regression outputs cannot overflow
  const double dw = std::clamp(t[2], -8.0, 8.0), dh = std::clamp(t[3], -8.0, 8.0);
  const double cx = anchor.cx() + t[0] * aw;
  const double cy = anchor.cy() + t[1] * ah;
  const double w = std::exp(dw) * aw, h = std::exp(dh) * ah;
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

}  // namespace warpdet
