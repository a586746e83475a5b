#include "repdet/detect.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "json.hpp"
#include "repdet/errors.hpp"
#include "repdet/ops.hpp"

namespace repdet {

Letterboxed letterbox(const Image& img, int target) {
  if (img.width < 1 || img.height < 1) throw SpecError("letterbox: image is empty");
  if (img.rgb.size() != static_cast<std::size_t>(img.width) * img.height * 3) {
    throw ShapeError("letterbox: pixel buffer does not match image dimensions");
  }
  if (target < 1) throw SpecError("letterbox: target size must be positive");
  LetterboxMeta m;
  m.orig_w = img.width;
  m.orig_h = img.height;
  m.scale = std::min(static_cast<double>(target) / img.width, static_cast<double>(target) / img.height);
  m.resized_w = std::clamp(static_cast<int>(std::lround(img.width * m.scale)), 1, target);
  m.resized_h = std::clamp(static_cast<int>(std::lround(img.height * m.scale)), 1, target);
  m.pad_left = (target - m.resized_w) / 2;
  m.pad_top = (target - m.resized_h) / 2;

  Tensor t({1, 3, target, target}, kPadValue);
  std::vector<int> src_x(static_cast<std::size_t>(m.resized_w));
  for (int x = 0; x < m.resized_w; ++x) {
    src_x[x] = std::min(img.width - 1, static_cast<int>(std::floor((x + 0.5) / m.scale)));
  }
  for (int y = 0; y < m.resized_h; ++y) {
    const int sy = std::min(img.height - 1, static_cast<int>(std::floor((y + 0.5) / m.scale)));
    for (int c = 0; c < 3; ++c) {
      for (int x = 0; x < m.resized_w; ++x) {
        t.at(0, c, y + m.pad_top, x + m.pad_left) = img.at(src_x[x], sy, c) / 255.0f;
      }
    }
  }
  return {std::move(t), m};
}

std::vector<std::string> default_class_names(int nc) {
  if (nc == 3) return {"WSSV", "BSS", "SBGS"};
  std::vector<std::string> names;
  for (int i = 0; i < nc; ++i) names.push_back(fmt::format("class{}", i));
  return names;
}

Tensor dfl_expectation(const Tensor& box_logits, int reg_max) {
  if (reg_max < 1) throw SpecError("dfl_expectation: reg_max must be positive");
  if (box_logits.c() != 4 * reg_max) {
    throw SpecError(fmt::format("dfl_expectation: expected {} channels (4 x reg_max), got {}",
                                4 * reg_max, box_logits.c()));
  }
  const int n = box_logits.n(), h = box_logits.h(), w = box_logits.w();
  Tensor out({n, 4, h, w});
  std::vector<double> e(static_cast<std::size_t>(reg_max));
  for (int b = 0; b < n; ++b) {
    for (int side = 0; side < 4; ++side) {
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          double mx = -INFINITY;
          for (int i = 0; i < reg_max; ++i) mx = std::max(mx, double(box_logits.at(b, side * reg_max + i, y, x)));
          double sum = 0, acc = 0;
          for (int i = 0; i < reg_max; ++i) {
            e[i] = std::exp(box_logits.at(b, side * reg_max + i, y, x) - mx);
            sum += e[i];
            acc += i * e[i];
          }
          out.at(b, side, y, x) = static_cast<float>(acc / sum);
        }
      }
    }
  }
  return out;
}

std::vector<Detection> decode_detections(const std::vector<Tensor>& maps, const HeadConfig& cfg,
                                         const LetterboxMeta& meta, double conf_thresh,
                                         const std::vector<std::string>& class_names) {
  cfg.validate();
  if (maps.size() != cfg.strides.size()) {
    throw SpecError(fmt::format("decode: {} head maps for {} strides", maps.size(), cfg.strides.size()));
  }
  if (!(meta.scale > 0)) throw SpecError("decode: letterbox scale must be positive");
  const int box_ch = 4 * cfg.reg_max;
  const std::vector<std::string> names =
      static_cast<int>(class_names.size()) >= cfg.nc ? class_names : default_class_names(cfg.nc);
  std::vector<Detection> dets;
  for (std::size_t lv = 0; lv < maps.size(); ++lv) {
    const Tensor& m = maps[lv];
    const int s = cfg.strides[lv];
    if (m.n() != 1) throw SpecError("decode: head maps must have batch size 1");
    if (m.c() != box_ch + cfg.nc) {
      throw SpecError(fmt::format("decode: level {} has {} channels, expected {}", lv, m.c(), box_ch + cfg.nc));
    }
    if (m.h() * s != maps[0].h() * cfg.strides[0] || m.w() * s != maps[0].w() * cfg.strides[0]) {
      throw SpecError(fmt::format("decode: level {} map {}x{} is inconsistent with stride {}", lv, m.h(),
                                  m.w(), s));
    }
    const Tensor dist = dfl_expectation(slice_channels(m, 0, box_ch), cfg.reg_max);
    for (int y = 0; y < m.h(); ++y) {
      for (int x = 0; x < m.w(); ++x) {
        int best = 0;
        for (int c = 1; c < cfg.nc; ++c) {
          if (m.at(0, box_ch + c, y, x) > m.at(0, box_ch + best, y, x)) best = c;
        }
        const double score = 1.0 / (1.0 + std::exp(-double(m.at(0, box_ch + best, y, x))));
        if (score < conf_thresh) continue;
        const double l = dist.at(0, 0, y, x), t = dist.at(0, 1, y, x);
        const double r = dist.at(0, 2, y, x), b = dist.at(0, 3, y, x);
        if (l + r <= 0 || t + b <= 0) continue;
        const double ax = (x + 0.5) * s, ay = (y + 0.5) * s;
        Box box{meta.to_original_x(ax - l * s), meta.to_original_y(ay - t * s),
                meta.to_original_x(ax + r * s), meta.to_original_y(ay + b * s)};
        box.x1 = std::clamp(box.x1, 0.0, double(meta.orig_w));
        box.x2 = std::clamp(box.x2, 0.0, double(meta.orig_w));
        box.y1 = std::clamp(box.y1, 0.0, double(meta.orig_h));
        box.y2 = std::clamp(box.y2, 0.0, double(meta.orig_h));
        if (!(box.x1 < box.x2 && box.y1 < box.y2)) continue;
        dets.push_back({best, names[best], score, box});
      }
    }
  }
  return dets;
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return dets[a].class_id < dets[b].class_id;
  });
  std::vector<Detection> kept;
  for (std::size_t i : order) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.class_id == dets[i].class_id && iou(k.box, dets[i].box) > iou_thresh;
    });
    if (!suppressed) kept.push_back(std::move(dets[i]));
  }
  return kept;
}

std::array<std::uint8_t, 3> class_color(int class_id) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 8> kPalette = {{
      {255, 56, 56},
      {56, 56, 255},
      {255, 210, 0},
      {0, 200, 120},
      {200, 0, 255},
      {0, 220, 255},
      {255, 128, 0},
      {128, 255, 0},
  }};
  return kPalette[static_cast<std::size_t>(std::abs(class_id)) % kPalette.size()];
}

std::vector<std::pair<int, int>> outline_pixels(const Box& box, int width, int height) {
  std::vector<std::pair<int, int>> px;
  if (width < 1 || height < 1) return px;
  // Ring of the unclipped box, then restricted to the image.
  const long bx1 = static_cast<long>(std::floor(box.x1)), by1 = static_cast<long>(std::floor(box.y1));
  const long bx2 = static_cast<long>(std::ceil(box.x2)) - 1, by2 = static_cast<long>(std::ceil(box.y2)) - 1;
  const long x1 = std::max(bx1, 0L), y1 = std::max(by1, 0L);
  const long x2 = std::min(bx2, long{width} - 1), y2 = std::min(by2, long{height} - 1);
  for (long y = y1; y <= y2; ++y) {
    for (long x = x1; x <= x2; ++x) {
      if (x < bx1 + 2 || x > bx2 - 2 || y < by1 + 2 || y > by2 - 2) px.emplace_back(int(x), int(y));
    }
  }
  return px;
}

Image annotate(const Image& img, const std::vector<Detection>& dets) {
  Image out = img;
  for (const auto& d : dets) {
    const auto color = class_color(d.class_id);
    for (auto [x, y] : outline_pixels(d.box, out.width, out.height)) {
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = color[c];
    }
  }
  return out;
}

std::string detections_to_json(const std::vector<Detection>& dets) {
  if (dets.empty()) return "[]\n";
  std::string s = "[\n";
  for (std::size_t i = 0; i < dets.size(); ++i) {
    const auto& d = dets[i];
    s += fmt::format(
        "  {{\"box\": [{:.4f}, {:.4f}, {:.4f}, {:.4f}], \"class_id\": {}, \"class_name\": {}, \"score\": {:.4f}}}",
        d.box.x1, d.box.y1, d.box.x2, d.box.y2, d.class_id, nlohmann::json(d.class_name).dump(), d.score);
    s += i + 1 < dets.size() ? ",\n" : "\n";
  }
  s += "]\n";
  return s;
}

}  // namespace repdet
