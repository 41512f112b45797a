#pragma once

#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "m2/tensor.hpp"

namespace m2 {

// One layer's gating network. Scores are softmax(h * weight [+ bias]).
struct RouterParams {
  Tensor weight;              // [d_model x M]
  std::optional<Tensor> bias; // [M]

  std::size_t expert_count() const { return weight.cols(); }
};

// Gated feed-forward expert: out = (silu(h w_gate) ⊙ (h w_up)) w_down.
struct ExpertParams {
  Tensor w_gate; // [d_model x d_expert]
  Tensor w_up;   // [d_model x d_expert]
  Tensor w_down; // [d_expert x d_model]
};

// The routed experts of one group. Every layer of a group holds the same
// ExpertPool object (via shared_ptr), never a copy; per-layer routing modes
// degenerate to one pool per layer.
struct ExpertPool {
  int group_index = 0;
  std::vector<ExpertParams> routed;
};

// Per-token expert selection of one layer: k distinct indices in [0, M) and
// the selected softmax weights renormalized to sum 1.
struct GateDecision {
  std::size_t tokens = 0;
  int k = 0;
  int source_layer = -1; // layer whose router produced the decision
  std::vector<int> indices;    // [tokens * k]
  std::vector<double> weights; // [tokens * k]

  int index(std::size_t t, int slot) const { return indices[t * k + slot]; }
  double weight(std::size_t t, int slot) const { return weights[t * k + slot]; }
};

// Full softmax routing scores, [tokens x M].
Tensor router_scores(const RouterParams &router, const Tensor &h);

// Top-k of precomputed scores. Ties broken by lower expert index; selected
// weights renormalized to sum 1 per token.
GateDecision topk_from_scores(const Tensor &scores, int k,
                              int source_layer = -1);

GateDecision route_topk(const RouterParams &router, const Tensor &h, int k,
                        int source_layer = -1);

Tensor expert_forward(const ExpertParams &e, const Tensor &h);

// Everything the analytic backward needs from a forward pass. Borrows the
// parameter structs; they must outlive the record.
struct MoeForwardRecord {
  bool valid = false;
  const ExpertPool *pool = nullptr;
  std::span<const ExpertParams> shared;
  const RouterParams *router = nullptr;
  Tensor h;      // [T x d]
  Tensor scores; // [T x M], full softmax
  GateDecision decision;
  // Per selected slot s: row t holds the intermediate for expert
  // decision.index(t, s). Same layout for the always-active shared experts.
  std::vector<Tensor> slot_pre_gate;  // h w_gate      [T x d_expert]
  std::vector<Tensor> slot_pre_up;    // h w_up        [T x d_expert]
  std::vector<Tensor> slot_out;       // expert output [T x d]
  std::vector<Tensor> shared_pre_gate;
  std::vector<Tensor> shared_pre_up;
};

struct ExpertGrads {
  Tensor w_gate;
  Tensor w_up;
  Tensor w_down;
};

struct MoeBlockGrads {
  Tensor d_h;             // [T x d]
  Tensor d_router_weight; // [d x M]
  std::optional<Tensor> d_router_bias;
  std::vector<ExpertGrads> d_routed; // size M; zero for unselected experts
  std::vector<ExpertGrads> d_shared; // size S
};

// Optional per-call outputs; any member may stay null.
struct MoeBlockOutputs {
  MoeForwardRecord *record = nullptr;  // for moe_block_backward
  GateDecision *decision = nullptr;    // for tracing / cache simulation
};

// Standard top-k block: sum of gate-weighted selected experts plus the
// unweighted sum of the always-active shared experts. The residual add is
// the caller's job.
Tensor moe_block_standard(const ExpertPool &pool,
                          std::span<const ExpertParams> shared_experts,
                          const RouterParams &router, const Tensor &h, int k,
                          MoeBlockOutputs out = {}, int source_layer = -1);

// Same aggregation with the expert pool drawn from group
// floor(moe_layer_index / group_size); the layer keeps its own router.
// `moe_layer_index` counts MoE layers only (dense offset handled upstream).
Tensor moe_block_shared(std::span<const std::shared_ptr<ExpertPool>> pools,
                        int moe_layer_index, int group_size,
                        const RouterParams &router,
                        std::span<const ExpertParams> shared_experts,
                        const Tensor &h, int k, MoeBlockOutputs out = {},
                        int source_layer = -1);

// Pre-gated variant: the decision comes from the preceding layer's router
// applied to this layer's input, so it exists before this layer's compute
// begins. `source_layer` tags the decision with the router's owning layer.
Tensor moe_block_pregated(const ExpertPool &pool,
                          const RouterParams &router_prev,
                          std::span<const ExpertParams> shared_experts,
                          const Tensor &h, int k, int source_layer,
                          MoeBlockOutputs out = {});

// Analytic gradients for the recorded block. Top-k selection is a constant
// mask; gradients reach the router through the renormalized softmax of the
// selected entries, and every score entry couples back via the softmax.
MoeBlockGrads moe_block_backward(const MoeForwardRecord &record,
                                 const Tensor &upstream_grad);

// Switch-style load-balance penalty: coeff * M * sum_j f_j P_j with f_j the
// fraction of assignments to expert j and P_j its mean routing score.
// Equals coeff exactly under perfectly uniform assignment; default use is
// coeff = 0 (off).
double switch_balance_loss(const Tensor &scores, const GateDecision &decision,
                           double coeff);

} // namespace m2
