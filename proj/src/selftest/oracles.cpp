#include "repdet/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "repdet/block_params.hpp"
#include "repdet/errors.hpp"

namespace repdet::oracle {

Tensor conv2d(const Tensor& x, const Conv2dSpec& s, const Tensor& w, std::span<const float> bias) {
  const int oh = s.out_h(x.h()), ow = s.out_w(x.w());
  Tensor y({x.n(), s.out_ch, oh, ow});
  const int cin_g = s.in_ch / s.groups, cout_g = s.out_ch / s.groups;
  for (int n = 0; n < x.n(); ++n)
    for (int o = 0; o < s.out_ch; ++o)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          double acc = bias.empty() ? 0.0 : bias[o];
          const int g = o / cout_g;
          for (int ci = 0; ci < cin_g; ++ci)
            for (int u = 0; u < s.kh; ++u)
              for (int v = 0; v < s.kw; ++v) {
                const int yy = i * s.stride - s.pad_h + u * s.dilation;
                const int xx = j * s.stride - s.pad_w + v * s.dilation;
                if (yy < 0 || yy >= x.h() || xx < 0 || xx >= x.w()) continue;
                acc += double(w.at(o, ci, u, v)) * x.at(n, g * cin_g + ci, yy, xx);
              }
          y.at(n, o, i, j) = static_cast<float>(acc);
        }
  return y;
}

Tensor pool2d(const Tensor& x, const PoolSpec& s) {
  const int oh = (x.h() + 2 * s.padding - s.kernel) / s.stride + 1;
  const int ow = (x.w() + 2 * s.padding - s.kernel) / s.stride + 1;
  Tensor y({x.n(), x.c(), oh, ow});
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          double sum = 0, mx = -INFINITY;
          for (int u = 0; u < s.kernel; ++u)
            for (int v = 0; v < s.kernel; ++v) {
              const int yy = i * s.stride - s.padding + u, xx = j * s.stride - s.padding + v;
              if (yy < 0 || yy >= x.h() || xx < 0 || xx >= x.w()) continue;
              sum += x.at(n, c, yy, xx);
              mx = std::max(mx, double(x.at(n, c, yy, xx)));
            }
          y.at(n, c, i, j) = static_cast<float>(s.mode == PoolMode::Avg ? sum / (s.kernel * s.kernel) : mx);
        }
  return y;
}

Tensor softmax_channelwise(const Tensor& x, int group) {
  Tensor y(x.dims());
  for (int n = 0; n < x.n(); ++n)
    for (int i = 0; i < x.h(); ++i)
      for (int j = 0; j < x.w(); ++j)
        for (int g0 = 0; g0 < x.c(); g0 += group) {
          double z = 0;
          for (int k = 0; k < group; ++k) z += std::exp(double(x.at(n, g0 + k, i, j)));
          for (int k = 0; k < group; ++k) y.at(n, g0 + k, i, j) = static_cast<float>(std::exp(double(x.at(n, g0 + k, i, j))) / z);
        }
  return y;
}

namespace {

double box_iou(const Box& a, const Box& b) {
  const double ix1 = std::max(a.x1, b.x1), iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2), iy2 = std::min(a.y2, b.y2);
  const double inter = std::max(0.0, ix2 - ix1) * std::max(0.0, iy2 - iy1);
  const double ua = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
  return ua > 0 ? inter / ua : 0.0;
}

// TP count for class c when only detections scoring >= t survive.
int true_positives_at(const std::vector<std::vector<Detection>>& per_image, const Dataset& data, int c,
                      double t, double iou_thresh, int& kept) {
  int tp = 0;
  for (std::size_t i = 0; i < per_image.size(); ++i) {
    std::vector<const Detection*> ds;
    for (const auto& d : per_image[i]) {
      if (d.class_id == c && d.score >= t) ds.push_back(&d);
    }
    std::sort(ds.begin(), ds.end(), [](auto* a, auto* b) { return a->score > b->score; });
    kept += static_cast<int>(ds.size());
    std::set<std::size_t> taken;
    for (const auto* d : ds) {
      double best = 0;
      std::size_t best_k = SIZE_MAX;
      const auto& truths = data.items[i].truths;
      for (std::size_t k = 0; k < truths.size(); ++k) {
        if (truths[k].class_id != c || taken.count(k)) continue;
        const double v = box_iou(d->box, truths[k].box);
        if (v >= iou_thresh && v > best) {
          best = v;
          best_k = k;
        }
      }
      if (best_k != SIZE_MAX) {
        taken.insert(best_k);
        ++tp;
      }
    }
  }
  return tp;
}

}  // namespace

Metrics exhaustive_threshold_metrics(const std::vector<std::vector<Detection>>& per_image,
                                     const Dataset& data, double iou_thresh) {
  Metrics m;
  const int nc = static_cast<int>(data.classes.size());
  int with_truth = 0;
  double ap_sum = 0;
  for (int c = 0; c < nc; ++c) {
    int truths = 0;
    for (const auto& item : data.items)
      for (const auto& t : item.truths) truths += t.class_id == c;
    std::set<double, std::greater<>> thresholds;
    for (const auto& ds : per_image)
      for (const auto& d : ds)
        if (d.class_id == c) thresholds.insert(d.score);

    std::vector<std::pair<double, double>> pr;  // (recall, precision), thresholds descending
    for (double t : thresholds) {
      int kept = 0;
      const int tp = true_positives_at(per_image, data, c, t, iou_thresh, kept);
      pr.emplace_back(truths ? double(tp) / truths : 0.0, kept ? double(tp) / kept : 0.0);
    }
    ClassMetrics cm;
    if (!pr.empty()) {
      cm.recall = pr.back().first;
      cm.precision = pr.back().second;
    }
    if (truths > 0) {
      double ap = 0, prev = 0;
      for (const auto& [r, p] : pr) {
        double env = 0;
        for (const auto& [r2, p2] : pr) {
          if (r2 >= r) env = std::max(env, p2);
        }
        ap += (r - prev) * env;
        prev = r;
      }
      cm.ap = ap;
      ap_sum += ap;
      ++with_truth;
    }
    m.classes.push_back(cm);
  }
  m.map = with_truth ? ap_sum / with_truth : 0.0;
  return m;
}

SyntheticEval make_synthetic_eval(std::uint64_t seed, int images, int nc) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto pick = [&](int n) { return static_cast<int>(rng() % static_cast<std::uint64_t>(n)); };
  SyntheticEval s;
  for (int c = 0; c < nc; ++c) s.data.classes.push_back("c" + std::to_string(c));
  std::vector<Detection*> all;
  for (int i = 0; i < images; ++i) {
    DatasetItem item;
    item.width = 320 + 32 * pick(10);
    item.height = 240 + 32 * pick(10);
    const int n_truth = pick(5);
    for (int k = 0; k < n_truth; ++k) {
      GroundTruthBox g;
      g.class_id = pick(nc);
      g.w = 0.1 + 0.3 * u01(rng);
      g.h = 0.1 + 0.3 * u01(rng);
      g.cx = g.w / 2 + (1 - g.w) * u01(rng);
      g.cy = g.h / 2 + (1 - g.h) * u01(rng);
      g.box = label_to_pixels(g.cx, g.cy, g.w, g.h, item.width, item.height);
      item.truths.push_back(g);
    }
    std::vector<Detection> dets;
    auto jitter = [&](const Box& b, double amount) {
      const double w = b.width(), h = b.height();
      return Box{b.x1 + amount * w * (u01(rng) - 0.5), b.y1 + amount * h * (u01(rng) - 0.5),
                 b.x2 + amount * w * (u01(rng) - 0.5), b.y2 + amount * h * (u01(rng) - 0.5)};
    };
    for (const auto& g : item.truths) {
      const double roll = u01(rng);
      if (roll < 0.55) {
        dets.push_back({g.class_id, "", 0, jitter(g.box, 0.2)});  // close hit
      } else if (roll < 0.7) {
        dets.push_back({g.class_id, "", 0, jitter(g.box, 1.2)});  // near miss
      } else if (roll < 0.8) {
        dets.push_back({(g.class_id + 1) % nc, "", 0, jitter(g.box, 0.1)});  // wrong class
      }
      if (u01(rng) < 0.2) dets.push_back({g.class_id, "", 0, jitter(g.box, 0.3)});  // duplicate
    }
    for (int k = pick(3); k > 0; --k) {  // background false positives
      const double x = u01(rng) * item.width * 0.8, y = u01(rng) * item.height * 0.8;
      dets.push_back({pick(nc), "", 0, {x, y, x + 20 + 40 * u01(rng), y + 20 + 40 * u01(rng)}});
    }
    s.data.items.push_back(std::move(item));
    s.detections.push_back(std::move(dets));
  }
  // Distinct scores: a random permutation of evenly spaced values.
  for (auto& ds : s.detections)
    for (auto& d : ds) all.push_back(&d);
  std::vector<int> rank(all.size());
  for (std::size_t i = 0; i < rank.size(); ++i) rank[i] = static_cast<int>(i);
  std::shuffle(rank.begin(), rank.end(), rng);
  for (std::size_t i = 0; i < all.size(); ++i) {
    all[i]->score = (rank[i] + 1.0) / (all.size() + 1.0);
    all[i]->class_name = s.data.classes[static_cast<std::size_t>(all[i]->class_id)];
  }
  return s;
}

Tensor random_tensor(Dims d, std::mt19937_64& rng, float lo, float hi) {
  std::uniform_real_distribution<float> dist(lo, hi);
  Tensor t(d);
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

ConvCase random_conv_case(std::mt19937_64& rng) {
  auto pick = [&](int lo, int hi) { return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1)); };
  ConvCase c;
  Conv2dSpec& s = c.spec;
  s.groups = pick(1, 3);
  s.in_ch = s.groups * pick(1, 4);
  s.out_ch = s.groups * pick(1, 4);
  s.kh = pick(1, 5);
  s.kw = pick(1, 5);
  s.stride = pick(1, 3);
  s.dilation = pick(1, 2);
  s.pad_h = pick(0, 2);
  s.pad_w = pick(0, 2);
  s.has_bias = pick(0, 1) == 1;
  const int h = pick(s.dilation * (s.kh - 1) + 1, 14), w = pick(s.dilation * (s.kw - 1) + 1, 14);
  c.x = random_tensor({pick(1, 2), s.in_ch, h, w}, rng);
  const float k = 1.0f / std::sqrt(float(s.in_ch / s.groups * s.kh * s.kw));
  c.w = random_tensor(s.weight_dims(), rng, -k, k);
  if (s.has_bias) c.bias = random_tensor({1, s.out_ch, 1, 1}, rng).values();
  return c;
}

PoolCase random_pool_case(std::mt19937_64& rng, PoolMode mode) {
  auto pick = [&](int lo, int hi) { return lo + static_cast<int>(rng() % static_cast<std::uint64_t>(hi - lo + 1)); };
  PoolCase p;
  p.spec.mode = mode;
  p.spec.kernel = pick(1, 5);
  p.spec.stride = pick(1, 3);
  p.spec.padding = pick(0, p.spec.kernel / 2);
  p.x = random_tensor({pick(1, 2), pick(1, 5), pick(p.spec.kernel, 15), pick(p.spec.kernel, 15)}, rng);
  return p;
}

void randomize(RepConvBlock& blk, std::mt19937_64& rng) {
  std::uniform_real_distribution<float> sym(-1.0f, 1.0f);
  std::uniform_real_distribution<float> pos(0.5f, 1.5f);
  std::uniform_real_distribution<float> var(0.25f, 2.0f);
  visit_params(blk, "", [&](const std::string& name, const ParamShape& shape, std::span<float> v, ParamRole) {
    auto ends = [&](std::string_view s) { return name.size() >= s.size() && name.ends_with(s); };
    float k = 0.5f;
    if (shape.size() == 4) k = 1.0f / std::sqrt(float(shape[1] * shape[2] * shape[3]));
    for (auto& x : v) {
      if (ends(".gamma")) x = pos(rng);
      else if (ends(".var")) x = var(rng);
      else x = k * sym(rng);
    }
  });
}

RepConvBlock random_repconv(std::mt19937_64& rng, int in_ch, int out_ch, int stride) {
  RepConvBlock b = RepConvBlock::make(in_ch, out_ch, stride);
  randomize(b, rng);
  return b;
}

}  // namespace repdet::oracle
