#pragma once

namespace repdet {

// Axis-aligned box in pixel coordinates, (x1, y1) top-left, (x2, y2) bottom-right.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return (x2 > x1 && y2 > y1) ? width() * height() : 0.0; }
  bool operator==(const Box&) const = default;
};

// Intersection over union; 0 when the boxes are disjoint or both are empty.
double iou(const Box& a, const Box& b);

}  // namespace repdet
