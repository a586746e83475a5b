#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace repdet {

struct SelftestResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Quick property checks: kernels against loop oracles, RepConv and whole-graph
// fusion equivalence, AP against the exhaustive-threshold oracle.
std::vector<SelftestResult> run_selftest(std::uint64_t seed);

}  // namespace repdet
