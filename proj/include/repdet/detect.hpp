#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "repdet/blocks.hpp"
#include "repdet/box.hpp"
#include "repdet/image.hpp"
#include "repdet/tensor.hpp"

namespace repdet {

constexpr int kNetworkInput = 640;
constexpr float kPadValue = 114.0f / 255.0f;
constexpr double kDefaultConfThresh = 0.25;
constexpr double kDefaultIouThresh = 0.45;

struct LetterboxMeta {
  double scale = 1.0;
  int pad_left = 0;
  int pad_top = 0;
  int orig_w = 0;
  int orig_h = 0;
  int resized_w = 0;
  int resized_h = 0;

  double to_original_x(double x) const { return (x - pad_left) / scale; }
  double to_original_y(double y) const { return (y - pad_top) / scale; }
  double to_letterbox_x(double x) const { return x * scale + pad_left; }
  double to_letterbox_y(double y) const { return y * scale + pad_top; }
};

struct Letterboxed {
  Tensor tensor;  // (1, 3, target, target), RGB in [0, 1]
  LetterboxMeta meta;
};

// Aspect-preserving nearest-neighbour resize into a target x target canvas,
// centred, padded with 114/255. Throws SpecError on an empty image.
Letterboxed letterbox(const Image& img, int target = kNetworkInput);

struct Detection {
  int class_id = 0;
  std::string class_name;
  double score = 0;
  Box box;  // original-image pixels
  bool operator==(const Detection&) const = default;
};

// Names used when a model carries no class list: the shrimp disease classes
// for nc = 3, "class<i>" otherwise.
std::vector<std::string> default_class_names(int nc);

// (n, 4 * reg_max, h, w) logits -> (n, 4, h, w) expected distances (l, t, r, b)
// in stride units. Channel s * reg_max + i holds bin i of side s.
Tensor dfl_expectation(const Tensor& box_logits, int reg_max);

// Turns the three head maps into thresholded detections in original-image
// pixels (before NMS). Boxes that collapse after clipping are dropped.
std::vector<Detection> decode_detections(const std::vector<Tensor>& maps, const HeadConfig& cfg,
                                         const LetterboxMeta& meta, double conf_thresh,
                                         const std::vector<std::string>& class_names);

// Greedy class-aware suppression. A box is dropped when its IoU with a kept
// box of the same class exceeds `iou_thresh`. Output is sorted by score
// descending, then class id, then input order.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh);

// RGB outline colour for a class.
std::array<std::uint8_t, 3> class_color(int class_id);

// Pixels covered by the 2-px outline of `box` clipped to the image, as (x, y).
std::vector<std::pair<int, int>> outline_pixels(const Box& box, int width, int height);

// Copy of `img` with a 2-px outline drawn for every detection, in list order.
Image annotate(const Image& img, const std::vector<Detection>& dets);

// JSON array of {"box", "class_id", "class_name", "score"}, keys sorted,
// numbers with 4 decimals.
std::string detections_to_json(const std::vector<Detection>& dets);

}  // namespace repdet
