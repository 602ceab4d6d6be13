#include "emdet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "emdet/error.hpp"

namespace emdet {

Box::Box(double x1, double y1, double x2, double y2) : x1_(x1), y1_(y1), x2_(x2), y2_(y2) {
  if (!(std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2)) ||
      !(x1 < x2) || !(y1 < y2)) {
    std::ostringstream os;
    os << "degenerate box [" << x1 << ',' << y1 << ',' << x2 << ',' << y2 << ']';
    throw InputError(os.str());
  }
}

double intersection_area(const Box& a, const Box& b) {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  return iw * ih;
}

double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  if (inter == 0.0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

Box hflip(const Box& b, double canvas_width) {
  if (b.x1() < 0.0 || b.x2() > canvas_width) {
    throw InputError("hflip: box lies outside the canvas");
  }
  return Box(canvas_width - b.x2(), b.y1(), canvas_width - b.x1(), b.y2());
}

std::vector<ScoredBox> nms(std::vector<ScoredBox> dets, double overlap_threshold) {
  if (overlap_threshold < 0.0 || overlap_threshold > 1.0) {
    throw InputError("nms: overlap threshold must lie in [0, 1]");
  }
  for (const auto& d : dets) {
    if (d.category != dets.front().category) {
      throw InputError("nms: detections of mixed categories; partition by category first");
    }
  }
  std::stable_sort(dets.begin(), dets.end(), [](const ScoredBox& a, const ScoredBox& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.index < b.index;
  });

  std::vector<ScoredBox> kept;
  for (const auto& d : dets) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const ScoredBox& k) {
      return iou(k.box, d.box) > overlap_threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

}  // namespace emdet
