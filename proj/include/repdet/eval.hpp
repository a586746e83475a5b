#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "repdet/box.hpp"
#include "repdet/detect.hpp"

namespace repdet {

struct GroundTruthBox {
  int class_id = 0;
  double cx = 0, cy = 0, w = 0, h = 0;  // normalized
  Box box;                              // pixels of the paired image
  bool operator==(const GroundTruthBox&) const = default;
};

// Denormalizes a YOLO label against image dimensions.
Box label_to_pixels(double cx, double cy, double w, double h, int image_w, int image_h);

// Parses YOLO-txt label text ("class cx cy w h" per line, blank lines ignored).
// `source` names the file in diagnostics. Throws FormatError naming the line on
// malformed input and ValidationError for out-of-range values or classes.
std::vector<GroundTruthBox> parse_labels(std::string_view text, const std::string& source, int nc,
                                         int image_w, int image_h);

struct DatasetItem {
  std::filesystem::path image;
  std::filesystem::path label;
  int width = 0;
  int height = 0;
  std::vector<GroundTruthBox> truths;
};

struct Dataset {
  std::vector<std::string> classes;
  std::vector<DatasetItem> items;
};

// Reads {"classes": [...], "items": [{"image": ..., "label": ...}]}. Paths are
// relative to the manifest. Missing files are reported together in one IoError.
Dataset load_dataset(const std::filesystem::path& manifest);

struct MatchResult {
  std::vector<bool> tp;  // aligned with the input detections
  int fn = 0;
};

// Greedy same-class matching in descending score order (input order breaks
// ties): each detection claims the unmatched truth of its class with the
// highest IoU, if that IoU is at least `iou_thresh`.
MatchResult match_detections(const std::vector<Detection>& dets,
                             const std::vector<GroundTruthBox>& truths, double iou_thresh = 0.5);

// All-point interpolated AP for TP flags already sorted by descending score.
// Throws SpecError when total_truths < 1.
double average_precision_50(const std::vector<bool>& flags, int total_truths);

struct ClassReport {
  std::string name;
  int truths = 0;
  int detections = 0;  // at the reporting cutoff
  int tp = 0, fp = 0, fn = 0;
  double precision = 0, recall = 0;
  bool precision_undefined = false;  // no detections: P reported as 0
  std::optional<double> ap50;        // empty when the class has no truths
};

struct EvalReport {
  std::vector<ClassReport> classes;
  double map50 = 0;
  int classes_in_map = 0;
  int total_detections = 0;
  int total_truths = 0;
  int tp = 0, fp = 0, fn = 0;
  double precision = 0, recall = 0;
  bool precision_undefined = false;
};

struct EvalOptions {
  double iou_thresh = 0.5;
  // When set, TP/FP/FN, P and R only count detections scoring at least this;
  // AP always uses the full list.
  std::optional<double> score_cutoff;
};

// `per_image[i]` are the detections for dataset item i.
EvalReport evaluate(const std::vector<std::vector<Detection>>& per_image, const Dataset& data,
                    const EvalOptions& opts = {});

std::string report_to_json(const EvalReport& r);
std::string report_to_csv(const EvalReport& r);

}  // namespace repdet
