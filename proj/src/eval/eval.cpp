#include "repdet/eval.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <numeric>

#include "json.hpp"
#include "repdet/errors.hpp"
#include "repdet/weights.hpp"

namespace repdet {
namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

template <typename T>
bool parse_number(std::string_view s, T& v) {
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  return ec == std::errc() && p == s.data() + s.size();
}

std::string fixed4(double v) { return fmt::format("{:.4f}", v); }

}  // namespace

Box label_to_pixels(double cx, double cy, double w, double h, int image_w, int image_h) {
  return {(cx - w / 2) * image_w, (cy - h / 2) * image_h, (cx + w / 2) * image_w, (cy + h / 2) * image_h};
}

std::vector<GroundTruthBox> parse_labels(std::string_view text, const std::string& source, int nc,
                                         int image_w, int image_h) {
  std::vector<GroundTruthBox> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    ++line_no;
    const auto f = split_ws(line);
    if (f.empty()) continue;
    if (f.size() != 5) {
      throw FormatError::at_line(source, line_no,
                                 fmt::format("expected 5 fields \"class cx cy w h\", got {}", f.size()));
    }
    GroundTruthBox g;
    if (!parse_number(f[0], g.class_id)) {
      throw FormatError::at_line(source, line_no, fmt::format("class id '{}' is not an integer", f[0]));
    }
    double* vals[4] = {&g.cx, &g.cy, &g.w, &g.h};
    for (int k = 0; k < 4; ++k) {
      if (!parse_number(f[k + 1], *vals[k])) {
        throw FormatError::at_line(source, line_no, fmt::format("'{}' is not a number", f[k + 1]));
      }
    }
    if (g.class_id < 0 || g.class_id >= nc) {
      throw ValidationError(fmt::format("{}:{}: class id {} outside [0, {})", source, line_no, g.class_id, nc));
    }
    for (double v : {g.cx, g.cy, g.w, g.h}) {
      if (!(v >= 0.0 && v <= 1.0)) {
        throw ValidationError(fmt::format("{}:{}: normalized value {} outside [0, 1]", source, line_no, v));
      }
    }
    if (!(g.w > 0 && g.h > 0)) {
      throw ValidationError(fmt::format("{}:{}: box width and height must be positive", source, line_no));
    }
    g.box = label_to_pixels(g.cx, g.cy, g.w, g.h, image_w, image_h);
    out.push_back(g);
  }
  return out;
}

Dataset load_dataset(const std::filesystem::path& manifest) {
  const auto bytes = read_file_bytes(manifest);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(bytes.begin(), bytes.end());
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(fmt::format("{}: invalid JSON", manifest.string()), e.byte);
  }
  auto bad = [&](const std::string& what) {
    return FormatError(fmt::format("{}: {}", manifest.string(), what), 0);
  };
  if (!j.is_object() || !j.contains("classes") || !j.contains("items")) {
    throw bad("manifest needs \"classes\" and \"items\"");
  }
  if (!j["classes"].is_array() || j["classes"].empty()) throw bad("\"classes\" must be a non-empty array");
  if (!j["items"].is_array()) throw bad("\"items\" must be an array");

  Dataset d;
  for (const auto& c : j["classes"]) {
    if (!c.is_string()) throw bad("class names must be strings");
    d.classes.push_back(c.get<std::string>());
  }
  const auto base = manifest.parent_path();
  std::vector<std::string> missing;
  for (std::size_t i = 0; i < j["items"].size(); ++i) {
    const auto& it = j["items"][i];
    if (!it.is_object() || !it.contains("image") || !it.contains("label") || !it["image"].is_string() ||
        !it["label"].is_string()) {
      throw bad(fmt::format("item {} needs string \"image\" and \"label\"", i));
    }
    DatasetItem item;
    item.image = base / it["image"].get<std::string>();
    item.label = base / it["label"].get<std::string>();
    for (const auto& p : {item.image, item.label}) {
      if (!std::filesystem::is_regular_file(p)) missing.push_back(p.string());
    }
    d.items.push_back(std::move(item));
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += (list.empty() ? "" : ", ") + m;
    throw IoError(fmt::format("missing dataset files: {}", list));
  }
  const int nc = static_cast<int>(d.classes.size());
  for (auto& item : d.items) {
    const Image img = read_ppm(item.image);
    item.width = img.width;
    item.height = img.height;
    const auto text = read_file_bytes(item.label);
    item.truths = parse_labels(std::string_view(reinterpret_cast<const char*>(text.data()), text.size()),
                               item.label.string(), nc, item.width, item.height);
  }
  return d;
}

MatchResult match_detections(const std::vector<Detection>& dets,
                             const std::vector<GroundTruthBox>& truths, double iou_thresh) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  MatchResult r;
  r.tp.assign(dets.size(), false);
  std::vector<bool> used(truths.size(), false);
  for (std::size_t i : order) {
    double best = -1;
    std::size_t best_t = 0;
    for (std::size_t t = 0; t < truths.size(); ++t) {
      if (used[t] || truths[t].class_id != dets[i].class_id) continue;
      const double v = iou(dets[i].box, truths[t].box);
      if (v > best) {
        best = v;
        best_t = t;
      }
    }
    if (best >= iou_thresh) {
      used[best_t] = true;
      r.tp[i] = true;
    }
  }
  r.fn = static_cast<int>(std::count(used.begin(), used.end(), false));
  return r;
}

double average_precision_50(const std::vector<bool>& flags, int total_truths) {
  if (total_truths < 1) throw SpecError("AP is undefined without ground truth");
  const std::size_t n = flags.size();
  std::vector<double> precision(n), recall(n);
  int tp = 0;
  for (std::size_t k = 0; k < n; ++k) {
    tp += flags[k] ? 1 : 0;
    precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
    recall[k] = static_cast<double>(tp) / total_truths;
  }
  for (std::size_t k = n; k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  double ap = 0, prev_r = 0;
  for (std::size_t k = 0; k < n; ++k) {
    ap += (recall[k] - prev_r) * precision[k];
    prev_r = recall[k];
  }
  return ap;
}

EvalReport evaluate(const std::vector<std::vector<Detection>>& per_image, const Dataset& data,
                    const EvalOptions& opts) {
  if (data.items.empty()) throw ValidationError("cannot evaluate an empty dataset");
  if (per_image.size() != data.items.size()) {
    throw ValidationError(fmt::format("{} detection lists for {} images", per_image.size(), data.items.size()));
  }
  const int nc = static_cast<int>(data.classes.size());

  struct Pooled {
    double score;
    std::size_t image, det;
    bool tp;
  };
  std::vector<std::vector<Pooled>> pooled(static_cast<std::size_t>(nc));
  std::vector<int> truths(static_cast<std::size_t>(nc), 0);
  for (std::size_t i = 0; i < data.items.size(); ++i) {
    for (const auto& t : data.items[i].truths) ++truths.at(static_cast<std::size_t>(t.class_id));
    const auto& dets = per_image[i];
    for (const auto& d : dets) {
      if (d.class_id < 0 || d.class_id >= nc) {
        throw ValidationError(fmt::format("detection class id {} outside [0, {})", d.class_id, nc));
      }
    }
    const MatchResult m = match_detections(dets, data.items[i].truths, opts.iou_thresh);
    for (std::size_t k = 0; k < dets.size(); ++k) {
      pooled[static_cast<std::size_t>(dets[k].class_id)].push_back({dets[k].score, i, k, m.tp[k]});
    }
  }

  EvalReport r;
  double ap_sum = 0;
  for (int c = 0; c < nc; ++c) {
    auto& p = pooled[static_cast<std::size_t>(c)];
    std::sort(p.begin(), p.end(), [](const Pooled& a, const Pooled& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.image != b.image) return a.image < b.image;
      return a.det < b.det;
    });
    ClassReport cr;
    cr.name = data.classes[static_cast<std::size_t>(c)];
    cr.truths = truths[static_cast<std::size_t>(c)];
    for (const auto& e : p) {
      if (opts.score_cutoff && e.score < *opts.score_cutoff) continue;
      ++cr.detections;
      ++(e.tp ? cr.tp : cr.fp);
    }
    cr.fn = cr.truths - cr.tp;
    cr.precision_undefined = cr.detections == 0;
    cr.precision = cr.detections ? static_cast<double>(cr.tp) / cr.detections : 0.0;
    cr.recall = cr.truths ? static_cast<double>(cr.tp) / cr.truths : 0.0;
    if (cr.truths > 0) {
      std::vector<bool> flags;
      for (const auto& e : p) flags.push_back(e.tp);
      cr.ap50 = average_precision_50(flags, cr.truths);
      ap_sum += *cr.ap50;
      ++r.classes_in_map;
    }
    r.total_detections += cr.detections;
    r.total_truths += cr.truths;
    r.tp += cr.tp;
    r.fp += cr.fp;
    r.fn += cr.fn;
    r.classes.push_back(std::move(cr));
  }
  r.map50 = r.classes_in_map ? ap_sum / r.classes_in_map : 0.0;
  r.precision_undefined = r.total_detections == 0;
  r.precision = r.total_detections ? static_cast<double>(r.tp) / r.total_detections : 0.0;
  r.recall = r.total_truths ? static_cast<double>(r.tp) / r.total_truths : 0.0;
  return r;
}

std::string report_to_json(const EvalReport& r) {
  std::string s = "{\n  \"classes\": [\n";
  for (std::size_t i = 0; i < r.classes.size(); ++i) {
    const auto& c = r.classes[i];
    s += fmt::format(
        "    {{\"ap50\": {}, \"detections\": {}, \"fn\": {}, \"fp\": {}, \"name\": {}, \"precision\": {}, "
        "\"precision_undefined\": {}, \"recall\": {}, \"tp\": {}, \"truths\": {}}}{}\n",
        c.ap50 ? fixed4(*c.ap50) : "null", c.detections, c.fn, c.fp, nlohmann::json(c.name).dump(),
        fixed4(c.precision), c.precision_undefined, fixed4(c.recall), c.tp, c.truths,
        i + 1 < r.classes.size() ? "," : "");
  }
  s += "  ],\n";
  s += fmt::format("  \"classes_in_map\": {},\n", r.classes_in_map);
  s += fmt::format("  \"fn\": {},\n", r.fn);
  s += fmt::format("  \"fp\": {},\n", r.fp);
  s += fmt::format("  \"map50\": {},\n", fixed4(r.map50));
  s += fmt::format("  \"precision\": {},\n", fixed4(r.precision));
  s += fmt::format("  \"precision_undefined\": {},\n", r.precision_undefined);
  s += fmt::format("  \"recall\": {},\n", fixed4(r.recall));
  s += fmt::format("  \"total_detections\": {},\n", r.total_detections);
  s += fmt::format("  \"total_truths\": {},\n", r.total_truths);
  s += fmt::format("  \"tp\": {}\n}}\n", r.tp);
  return s;
}

std::string report_to_csv(const EvalReport& r) {
  auto quote = [](const std::string& v) {
    if (v.find_first_of(",\"\n") == std::string::npos) return v;
    std::string q = "\"";
    for (char ch : v) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return q + "\"";
  };
  std::string s = "class,truths,detections,tp,fp,fn,precision,recall,ap50\n";
  for (const auto& c : r.classes) {
    s += fmt::format("{},{},{},{},{},{},{},{},{}\n", quote(c.name), c.truths, c.detections, c.tp, c.fp, c.fn,
                     fixed4(c.precision), fixed4(c.recall), c.ap50 ? fixed4(*c.ap50) : "");
  }
  s += fmt::format("all,{},{},{},{},{},{},{},{}\n", r.total_truths, r.total_detections, r.tp, r.fp, r.fn,
                   fixed4(r.precision), fixed4(r.recall), fixed4(r.map50));
  return s;
}

}  // namespace repdet
