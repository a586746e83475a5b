#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "repdet/graph.hpp"
#include "repdet/weights.hpp"

namespace repdet {

// YOLOv8n (n-scale: depth 0.33, width 0.25) or the improved variant:
// C2f-EMCM at backbone C2f #3/#4 and neck C2f #1/#3/#4, SegNext attention
// after SPPF, RLDD head.
ModelGraph build_model(ModelVariant variant, int nc);
ModelGraph build_model(const ModelOptions& options, int nc);

struct Model {
  ModelGraph graph;
  WeightStore weights;
  bool operator==(const Model&) const = default;
};

// Output dims of every layer, aligned with g.layers.
std::vector<Dims> infer_shapes(const ModelGraph& g, Dims input);
inline std::vector<Dims> infer_shapes(const ModelGraph& g) { return infer_shapes(g, g.input); }

struct ParamDecl {
  std::string name;
  std::vector<std::uint32_t> dims;
  bool learnable = true;
  std::size_t count() const;
};

// Tensors a layer reads from the store (empty for weightless layers).
std::vector<ParamDecl> layer_params(const Layer& layer);

struct ParamReport {
  std::vector<std::uint64_t> per_layer;  // aligned with g.layers; shared tensors counted at first use
  std::uint64_t total = 0;               // learnable scalars
  std::uint64_t buffers = 0;             // BN running statistics
};

ParamReport param_count(const ModelGraph& g);

struct FlopReport {
  std::vector<std::uint64_t> macs;         // per layer, conv multiply-accumulates
  std::vector<std::uint64_t> elementwise;  // per layer, BN/act/pool/add/mul/scale outputs
  std::uint64_t total_macs = 0;
  std::uint64_t total_elementwise = 0;
};

FlopReport flop_count(const ModelGraph& g, Dims input);
inline FlopReport flop_count(const ModelGraph& g) { return flop_count(g, g.input); }

// One row per top-level block.
struct SummaryRow {
  std::string name;
  std::string kind;
  std::string out_shape;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

std::vector<SummaryRow> summarize(const ModelGraph& g, Dims input);

// Deterministic initialization. Conv weights are drawn from a std::mt19937_64
// stream seeded with `seed`, visited in layer order, each draw mapped to
// (2u - 1) * sqrt(1 / fan_in) with u = top 24 bits / 2^24. Biases 0, BN
// identity statistics (gamma 1, beta 0, mean 0, var 1), scales 1.
WeightStore init_weights(const ModelGraph& g, std::uint64_t seed);

// Replaces BN statistics and conv biases with seeded non-trivial values so
// fusion checks exercise every folding term.
void perturb_batch_norm(const ModelGraph& g, WeightStore& store, std::uint64_t seed);

// init_weights followed by perturb_batch_norm with the same seed: the weights
// used whenever no weight file is supplied.
WeightStore seeded_weights(const ModelGraph& g, std::uint64_t seed);

// Throws ValidationError naming the layer and tensor that is missing or
// mis-shaped. Extra tensors are rejected as well.
void validate_weights(const ModelGraph& g, const WeightStore& store);

// Runs the graph. Returns the three head maps in P3, P4, P5 order.
std::vector<Tensor> forward(const ModelGraph& g, const WeightStore& store, const Tensor& input);

// Seeded uniform [-1, 1] tensor, used for equivalence checks.
Tensor random_input(Dims dims, std::uint64_t seed);

}  // namespace repdet
