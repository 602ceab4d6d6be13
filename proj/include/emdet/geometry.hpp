#pragma once

#include <array>
#include <vector>

namespace emdet {

/// Axis-aligned rectangle in continuous canvas coordinates.
/// Construction enforces x1 < x2 and y1 < y2.
class Box {
 public:
  Box(double x1, double y1, double x2, double y2);

  double x1() const { return x1_; }
  double y1() const { return y1_; }
  double x2() const { return x2_; }
  double y2() const { return y2_; }
  double width() const { return x2_ - x1_; }
  double height() const { return y2_ - y1_; }
  double area() const { return width() * height(); }

  std::array<double, 4> as_array() const { return {x1_, y1_, x2_, y2_}; }

  friend bool operator==(const Box&, const Box&) = default;

 private:
  double x1_, y1_, x2_, y2_;
};

struct ScoredBox {
  Box box;
  int category;
  double score;
  /// Position in the caller's candidate list; breaks score ties in nms.
  int index = 0;
};

double intersection_area(const Box& a, const Box& b);
double iou(const Box& a, const Box& b);

/// Mirrors the box about the vertical centre line of a canvas of the given width.
Box hflip(const Box& b, double canvas_width);

/// Greedy non-maximum suppression over single-category detections. A box is
/// discarded when its IoU with an already kept box is strictly greater than
/// `overlap_threshold`. Output is sorted by descending score; ties keep the
/// lower index first.
std::vector<ScoredBox> nms(std::vector<ScoredBox> dets, double overlap_threshold);

}  // namespace emdet
