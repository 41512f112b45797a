#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "m2/attention_mask.hpp"
#include "m2/moe.hpp"
#include "m2/tensor.hpp"

namespace m2 {

enum class RoutingMode { standard, shared, pregated };
enum class Precision { f64, f32 };

std::string to_string(RoutingMode mode);
std::string to_string(Precision precision);
RoutingMode routing_mode_from_string(const std::string &s);
Precision precision_from_string(const std::string &s);

// Every architecture hyperparameter. Defaults give a small toy model that
// builds and runs in milliseconds.
struct ModelConfig {
  int n_layers = 4;
  int group_size = 3;      // n: layers per expert-sharing group
  int n_dense_leading = 1; // leading dense (non-MoE) layers
  int d_model = 8;
  int n_heads = 2;
  int d_head = 4;
  int routed_experts_per_group = 4; // M
  int top_k = 2;                    // k
  int shared_experts_per_layer = 1; // S
  int d_expert = 16;                // routed/shared expert hidden width
  int d_dense_ffn = 32;             // dense-layer FFN hidden width
  double rope_base = 10000.0;
  int vocab_size = 64;
  int seq_len_max = 128;
  RoutingMode routing_mode = RoutingMode::shared;
  Precision precision = Precision::f64;
  std::uint64_t seed = 0;

  // Fields a preset filled with plausible values that its source does not
  // pin down; reports surface these, nothing validates against them.
  std::vector<std::string> assumed_fields;

  int n_moe_layers() const { return n_layers - n_dense_leading; }
  int n_groups() const {
    return group_size > 0 ? n_moe_layers() / group_size : 0;
  }
};

// All violated invariants, empty when the config is valid. Each message
// names the offending field(s).
std::vector<std::string> validate(const ModelConfig &cfg);

// The published architecture constants: 31 layers with a dense first layer,
// groups of 3 sharing 64 routed experts, top-6 routing, 4 shared experts per
// layer, expert hidden 1408, dense FFN hidden 10944, RoPE base 1e6, 32K
// context. Width/attention/vocab are not published; the preset assumes
// plausible values and lists them in `assumed_fields`.
ModelConfig preset_megrez2_preview();

// Expands a preset name. Only "megrez2-preview" is defined.
ModelConfig preset_by_name(const std::string &name);

// Exact integer parameter accounting. Activated counts are per expert use
// (an expert evaluated by several layers of a group counts once per layer),
// which keeps activated counts identical across routing modes.
struct ParamReport {
  std::uint64_t embedding_in = 0;
  std::uint64_t embedding_out = 0;
  std::uint64_t attention = 0;
  std::uint64_t norms = 0;
  std::uint64_t dense_ffn = 0;
  std::uint64_t routers = 0;
  std::uint64_t routed_experts = 0;
  std::uint64_t shared_experts = 0;
  std::uint64_t stored_total = 0;
  std::uint64_t activated_per_token = 0;
};

ParamReport count_params(const ModelConfig &cfg);

// One transformer layer. Dense layers carry `dense`; MoE layers reference
// their group's pool. `router` is the router this layer OWNS; in pre-gated
// mode a layer's gate decision comes from the preceding layer's router, and
// the last dense leading layer hosts the router consumed by the first MoE
// layer.
struct TransformerLayer {
  Tensor attn_norm; // [d]
  Tensor wq, wk, wv; // [d x heads*d_head]
  Tensor wo;         // [heads*d_head x d]
  Tensor ffn_norm;  // [d]
  std::optional<ExpertParams> dense;
  std::shared_ptr<ExpertPool> pool;
  std::vector<ExpertParams> shared_experts;
  std::optional<RouterParams> router;

  bool is_dense() const { return dense.has_value(); }
};

struct ForwardTraceEntry {
  int layer = 0; // absolute layer index
  int group = 0; // pool's group index
  RoutingMode mode = RoutingMode::standard;
  GateDecision decision;
};
using ForwardTrace = std::vector<ForwardTraceEntry>;

struct ForwardOptions {
  const AttentionMask *mask = nullptr;       // default: causal
  const std::vector<int> *positions = nullptr; // default: 0..T-1
  ForwardTrace *trace = nullptr;             // collect per-MoE-layer gates
};

struct NamedTensor {
  std::string name;
  Tensor *tensor;
};

// Standard rotary transform: pair (2j, 2j+1) of each head rotates by
// position * base^(-2j/d_head). q_or_k: [tokens x heads x d_head].
Tensor rope_apply(const Tensor &q_or_k, const std::vector<int> &positions,
                  double base);

class Model {
public:
  // Initializes every parameter from a per-tensor stream of the config
  // seed (see Rng::stream_of), so a tensor's values depend only on its
  // name, never on what else a mode variant allocates.
  static Model build(const ModelConfig &cfg);

  const ModelConfig &config() const { return cfg_; }

  // Embedding -> L pre-norm layers (attention, then dense FFN or MoE
  // dispatched by routing_mode) -> final norm -> output projection.
  Tensor forward(const std::vector<int> &token_ids,
                 const ForwardOptions &opts = {}) const;

  std::vector<TransformerLayer> &layers() { return layers_; }
  const std::vector<TransformerLayer> &layers() const { return layers_; }
  std::vector<std::shared_ptr<ExpertPool>> &pools() { return pools_; }
  const std::vector<std::shared_ptr<ExpertPool>> &pools() const {
    return pools_;
  }

  // Every parameter tensor exactly once, canonical order and names; group
  // sharing means pool tensors appear once no matter how many layers
  // reference them.
  std::vector<NamedTensor> named_tensors();

  Tensor &embedding_in() { return embedding_in_; }
  Tensor &embedding_out() { return embedding_out_; }
  Tensor &final_norm() { return final_norm_; }

private:
  ModelConfig cfg_;
  Tensor embedding_in_;  // [vocab x d]
  Tensor embedding_out_; // [d x vocab]
  Tensor final_norm_;    // [d]
  std::vector<TransformerLayer> layers_;
  std::vector<std::shared_ptr<ExpertPool>> pools_;

  Tensor attention(const Tensor &x, const std::vector<int> &positions,
                   const AttentionMask &mask,
                   const TransformerLayer &layer) const;
};

} // namespace m2
