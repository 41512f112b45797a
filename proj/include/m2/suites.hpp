#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "m2/model.hpp"

namespace m2 {

struct PropertyResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

// Small model every property suite runs on: 4 layers (1 dense), groups of
// 3, 8 routed experts, top-2, 1 shared expert, width 16.
ModelConfig toy_model_config(RoutingMode mode, std::uint64_t seed);

std::vector<int> random_token_ids(const ModelConfig &cfg, std::size_t count,
                                  std::uint64_t seed);

bool bitwise_equal(const Tensor &a, const Tensor &b);

// Copies each MoE layer's router into its predecessor's slot, in ascending
// layer order, so a pre-gated forward reproduces the shared-mode gates.
void tie_routers_to_predecessors(Model &model);

// n=1 reduction (shared == standard bitwise) and router tying
// (pregated == shared bitwise), each over `seeds` random models.
std::vector<PropertyResult> run_equivalence_suite(int seeds = 20);

// Analytic MoE block backward vs central finite differences.
std::vector<PropertyResult> run_gradient_suite(int seeds = 20);

// Packed forwards reproduce standalone per-sample logits.
std::vector<PropertyResult> run_packing_suite(int packings = 10);

// Balance metrics against a brute-force tally plus closed-form cases.
std::vector<PropertyResult> run_balance_suite(int seeds = 10);

// Dispatch by suite name: equivalence | gradients | packing | balance.
std::vector<PropertyResult> run_check_suite(const std::string &name);

} // namespace m2
