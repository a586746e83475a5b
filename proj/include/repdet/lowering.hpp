#pragma once

#include <array>
#include <string>

#include "repdet/blocks.hpp"
#include "repdet/graph.hpp"

// Lowers block values into primitive graph layers. `name` prefixes the layer
// names, `key` prefixes the weight names (they differ only for blocks whose
// weights are shared between several applications). Each function returns the
// name of the layer holding the block output. Weight names match the block
// parameter visitors, so a store filled from a block feeds its lowering.
namespace repdet {

std::string lower(GraphBuilder& b, const ConvBlock& blk, const std::string& name,
                  const std::string& key, const std::string& input);
std::string lower(GraphBuilder& b, const RepConvBlock& blk, const std::string& name,
                  const std::string& key, const std::string& input);
std::string lower(GraphBuilder& b, const EMCMBlock& blk, const std::string& name,
                  const std::string& key, const std::string& input);
std::string lower(GraphBuilder& b, const Bottleneck& blk, const std::string& name,
                  const std::string& key, const std::string& input);
std::string lower(GraphBuilder& b, const C2fBlock& blk, const std::string& name,
                  const std::string& key, const std::string& input);
std::string lower(GraphBuilder& b, const SPPFBlock& blk, const std::string& name,
                  const std::string& key, const std::string& input);
std::string lower(GraphBuilder& b, const MSCABlock& blk, const std::string& name,
                  const std::string& key, const std::string& input);
std::string lower(GraphBuilder& b, const SegNextAttentionBlock& blk, const std::string& name,
                  const std::string& key, const std::string& input);

std::array<std::string, 3> lower(GraphBuilder& b, const BaselineHead& head,
                                 const std::string& name, const std::array<std::string, 3>& inputs);
std::array<std::string, 3> lower(GraphBuilder& b, const RLDDHead& head, const std::string& name,
                                 const std::array<std::string, 3>& inputs);

}  // namespace repdet
