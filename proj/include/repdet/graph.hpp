#pragma once

#include <map>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "repdet/blocks.hpp"
#include "repdet/tensor.hpp"

namespace repdet {

// Primitive operations a graph layer can perform.
enum class LayerKind {
  Input,
  Conv,
  BatchNorm,
  SiLU,
  GELU,
  MaxPool,
  AvgPool,
  Upsample,
  Concat,
  Slice,
  Add,  // sum of all inputs, left to right
  Mul,
  Scale,  // multiply by a learnable scalar
};

// Composite block a layer was lowered from.
enum class BlockKind {
  Conv,
  C2f,
  C2fEMCM,
  Bottleneck,
  EMCM,
  SPPF,
  SegNextAttention,
  MSCA,
  RepConv,
  BaselineHead,
  RLDDHead,
  Upsample,
  Concat,
};

std::string_view to_string(LayerKind k);
std::string_view to_string(BlockKind k);

struct Scope {
  BlockKind kind = BlockKind::Conv;
  std::string instance;  // unique per application, e.g. "head.p4.rep0"
  std::string params;    // weight prefix; shared blocks reuse it across instances
  bool operator==(const Scope&) const = default;
};

struct BatchNormAttrs {
  int channels = 0;
  float eps = kDefaultBatchNormEps;
  bool operator==(const BatchNormAttrs&) const = default;
};

struct SliceAttrs {
  int begin = 0;
  int count = 0;
  bool operator==(const SliceAttrs&) const = default;
};

using LayerAttrs = std::variant<std::monostate, Conv2dSpec, BatchNormAttrs, PoolSpec, SliceAttrs>;

// Conv layers own "<param_key>.w" (+ ".b"); BN layers own "<param_key>.gamma",
// ".beta", ".mean", ".var"; Scale layers own "<param_key>" itself.
struct Layer {
  std::string name;
  LayerKind kind = LayerKind::Input;
  std::vector<std::string> inputs;
  std::string param_key;
  LayerAttrs attrs;
  std::string role;           // position inside the innermost scope
  std::vector<Scope> scopes;  // outermost first

  const Scope* innermost() const { return scopes.empty() ? nullptr : &scopes.back(); }
  bool operator==(const Layer&) const = default;
};

enum class ModelVariant { Baseline, Improved };

std::string_view to_string(ModelVariant v);
ModelVariant parse_variant(std::string_view s);  // throws SpecError

// Which of the three modifications are applied on top of the baseline.
struct ModelOptions {
  bool rldd_head = false;
  bool emcm = false;
  bool attention = false;

  static ModelOptions for_variant(ModelVariant v);
  bool operator==(const ModelOptions&) const = default;
};

enum class GraphForm { Train, Deploy };

// Immutable, topologically ordered layer list. Every input edge refers to an
// earlier layer; `outputs` names the P3/P4/P5 head maps.
struct ModelGraph {
  ModelOptions options;
  HeadConfig head;
  GraphForm form = GraphForm::Train;
  Dims input{1, 3, 640, 640};
  std::vector<Layer> layers;
  std::vector<std::string> outputs;

  const Layer* find(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;  // throws SpecError
  bool operator==(const ModelGraph&) const = default;
};

// Throws SpecError on duplicate names, dangling or forward edges, or an output
// count other than three.
void validate_graph(const ModelGraph& g);

// Distinct scope instances per block kind, across all nesting levels.
std::map<BlockKind, int> count_blocks(const ModelGraph& g);
// Distinct weight prefixes per block kind (shared blocks count once).
std::map<BlockKind, int> count_block_params(const ModelGraph& g);

// Appends layers while tracking the current block nesting.
class GraphBuilder {
 public:
  class ScopeGuard {
   public:
    explicit ScopeGuard(GraphBuilder& b) : b_(&b) {}
    ScopeGuard(const ScopeGuard&) = delete;
    ScopeGuard& operator=(const ScopeGuard&) = delete;
    ~ScopeGuard() { b_->stack_.pop_back(); }

   private:
    GraphBuilder* b_;
  };

  [[nodiscard]] ScopeGuard scope(BlockKind kind, std::string instance, std::string params);
  // Appends a layer tagged with the current scopes; returns its name.
  std::string add(Layer layer);
  std::vector<Layer> take_layers() { return std::move(layers_); }

 private:
  std::vector<Layer> layers_;
  std::vector<Scope> stack_;
  std::map<std::string, std::size_t, std::less<>> index_;
};

}  // namespace repdet
