#include "repdet/selftest.hpp"

#include <fmt/format.h>

#include <cmath>

#include "repdet/errors.hpp"
#include "repdet/fusion.hpp"
#include "repdet/ops.hpp"
#include "repdet/oracles.hpp"

namespace repdet {
namespace {

SelftestResult bounded(std::string name, double err, double tol) {
  return {std::move(name), err < tol, fmt::format("max deviation {:.3e} (limit {:.0e})", err, tol)};
}

SelftestResult conv_check(std::mt19937_64& rng) {
  double worst = 0;
  for (int i = 0; i < 20; ++i) {
    auto c = oracle::random_conv_case(rng);
    worst = std::max<double>(worst, max_abs_diff(conv2d(c.x, c.spec, c.w, c.bias),
                                                 oracle::conv2d(c.x, c.spec, c.w, c.bias)));
  }
  return bounded("conv2d vs loop oracle", worst, 1e-6);
}

SelftestResult pool_check(std::mt19937_64& rng) {
  double worst = 0;
  for (int i = 0; i < 20; ++i) {
    auto p = oracle::random_pool_case(rng, i % 2 ? PoolMode::Max : PoolMode::Avg);
    worst = std::max<double>(worst, max_abs_diff(pool2d(p.x, p.spec), oracle::pool2d(p.x, p.spec)));
  }
  return bounded("pool2d vs loop oracle", worst, 1e-6);
}

SelftestResult softmax_check(std::mt19937_64& rng) {
  const Tensor x = oracle::random_tensor({1, 64, 5, 7}, rng, -4, 4);
  return bounded("softmax vs loop oracle",
                 max_abs_diff(softmax_channelwise(x, 16), oracle::softmax_channelwise(x, 16)), 1e-6);
}

SelftestResult avg_as_conv_check(std::mt19937_64& rng) {
  const Tensor x = oracle::random_tensor({1, 6, 9, 11}, rng);
  const Tensor pooled = pool2d(x, {PoolMode::Avg, 3, 1, 1});
  const Tensor conv = conv2d(x, Conv2dSpec::square(6, 6, 3), lower_avg_pool_to_3x3(6));
  return bounded("avg pool as 3x3 conv", max_abs_diff(pooled, conv), 1e-6);
}

SelftestResult repconv_check(std::mt19937_64& rng) {
  double worst = 0;
  for (int i = 0; i < 20; ++i) {
    const int in = 1 + static_cast<int>(rng() % 8);
    const int out = rng() % 2 ? in : 1 + static_cast<int>(rng() % 8);
    const int stride = rng() % 4 == 0 ? 2 : 1;
    const RepConvBlock blk = oracle::random_repconv(rng, in, out, stride);
    const Tensor x = oracle::random_tensor({1, in, 8 + static_cast<int>(rng() % 8), 8 + static_cast<int>(rng() % 8)}, rng);
    worst = std::max<double>(worst, max_abs_diff(repconv_forward(x, blk), repconv_forward(x, to_deploy(blk))));
  }
  return bounded("RepConv train vs deploy", worst, 1e-4);
}

SelftestResult graph_fusion_check(std::uint64_t seed) {
  const ModelGraph g = build_model(ModelVariant::Improved, 3);
  WeightStore w = init_weights(g, seed);
  perturb_batch_norm(g, w, seed + 1);
  const Model fused = fuse_model_graph(g, w);
  const Tensor x = random_input({1, 3, 128, 128}, seed + 2);
  const auto a = forward(g, w, x);
  const auto b = forward(fused.graph, fused.weights, x);
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max<double>(worst, max_abs_diff(a[i], b[i]));
  SelftestResult r = bounded("improved graph fused vs unfused (128x128)", worst, 1e-3);
  if (count_repconv_branch_layers(fused.graph) != 0) {
    r.passed = false;
    r.detail += ", branch layers remain after fusion";
  }
  return r;
}

SelftestResult ap_check(std::uint64_t seed) {
  const double hand = average_precision_50({true, false, true}, 2);
  if (std::abs(hand - 0.8333) > 1e-4) {
    return {"AP vs exhaustive-threshold oracle", false, fmt::format("[TP,FP,TP]/2 gave {:.6f}", hand)};
  }
  const auto s = oracle::make_synthetic_eval(seed);
  const EvalReport r = evaluate(s.detections, s.data);
  const oracle::Metrics m = oracle::exhaustive_threshold_metrics(s.detections, s.data);
  double worst = std::abs(r.map50 - m.map);
  for (std::size_t c = 0; c < r.classes.size(); ++c) {
    worst = std::max(worst, std::abs(r.classes[c].precision - m.classes[c].precision));
    worst = std::max(worst, std::abs(r.classes[c].recall - m.classes[c].recall));
    if (r.classes[c].ap50.has_value() != m.classes[c].ap.has_value()) worst = INFINITY;
    if (r.classes[c].ap50) worst = std::max(worst, std::abs(*r.classes[c].ap50 - *m.classes[c].ap));
  }
  return bounded("AP vs exhaustive-threshold oracle", worst, 1e-9);
}

}  // namespace

std::vector<SelftestResult> run_selftest(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<SelftestResult> out;
  auto guarded = [&](const char* name, auto&& fn) {
    try {
      out.push_back(fn());
    } catch (const std::exception& e) {
      out.push_back({name, false, fmt::format("threw: {}", e.what())});
    }
  };
  guarded("conv2d vs loop oracle", [&] { return conv_check(rng); });
  guarded("pool2d vs loop oracle", [&] { return pool_check(rng); });
  guarded("softmax vs loop oracle", [&] { return softmax_check(rng); });
  guarded("avg pool as 3x3 conv", [&] { return avg_as_conv_check(rng); });
  guarded("RepConv train vs deploy", [&] { return repconv_check(rng); });
  guarded("improved graph fused vs unfused (128x128)", [&] { return graph_fusion_check(seed); });
  guarded("AP vs exhaustive-threshold oracle", [&] { return ap_check(seed); });
  return out;
}

}  // namespace repdet
