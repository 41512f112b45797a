#include "m2/model.hpp"

#include <cmath>
#include <string>

#include "m2/rng.hpp"

namespace m2 {

namespace {
constexpr double kRmsEps = 1e-6;
constexpr double kInitStd = 0.02;
} // namespace

std::string to_string(RoutingMode mode) {
  switch (mode) {
  case RoutingMode::standard: return "standard";
  case RoutingMode::shared: return "shared";
  case RoutingMode::pregated: return "pregated";
  }
  return "?";
}

std::string to_string(Precision precision) {
  return precision == Precision::f64 ? "f64" : "f32";
}

RoutingMode routing_mode_from_string(const std::string &s) {
  if (s == "standard") return RoutingMode::standard;
  if (s == "shared") return RoutingMode::shared;
  if (s == "pregated") return RoutingMode::pregated;
  throw ConfigError("unknown routing_mode '" + s + "'");
}

Precision precision_from_string(const std::string &s) {
  if (s == "f64") return Precision::f64;
  if (s == "f32") return Precision::f32;
  throw ConfigError("unknown precision '" + s + "'");
}

std::vector<std::string> validate(const ModelConfig &cfg) {
  std::vector<std::string> v;
  auto positive = [&](int value, const char *field) {
    if (value < 1) {
      v.push_back(std::string(field) + " must be positive, got " +
                  std::to_string(value));
    }
  };
  positive(cfg.n_layers, "n_layers");
  positive(cfg.group_size, "group_size");
  positive(cfg.d_model, "d_model");
  positive(cfg.n_heads, "n_heads");
  positive(cfg.d_head, "d_head");
  positive(cfg.routed_experts_per_group, "routed_experts_per_group");
  positive(cfg.top_k, "top_k");
  positive(cfg.d_expert, "d_expert");
  positive(cfg.d_dense_ffn, "d_dense_ffn");
  positive(cfg.vocab_size, "vocab_size");
  positive(cfg.seq_len_max, "seq_len_max");
  if (cfg.shared_experts_per_layer < 0) {
    v.push_back("shared_experts_per_layer must be >= 0, got " +
                std::to_string(cfg.shared_experts_per_layer));
  }
  if (cfg.n_dense_leading < 0 || cfg.n_dense_leading > cfg.n_layers) {
    v.push_back("n_dense_leading must be in [0, n_layers], got " +
                std::to_string(cfg.n_dense_leading));
  } else if (cfg.group_size >= 1 &&
             cfg.n_moe_layers() % cfg.group_size != 0) {
    v.push_back("n_layers - n_dense_leading (" +
                std::to_string(cfg.n_moe_layers()) +
                ") is not divisible by group_size (" +
                std::to_string(cfg.group_size) + ")");
  }
  if (cfg.top_k >= 1 && cfg.top_k > cfg.routed_experts_per_group) {
    v.push_back("top_k (" + std::to_string(cfg.top_k) +
                ") exceeds routed_experts_per_group (" +
                std::to_string(cfg.routed_experts_per_group) + ")");
  }
  if (cfg.d_head >= 1 && cfg.d_head % 2 != 0) {
    v.push_back("d_head must be even for rotary embedding, got " +
                std::to_string(cfg.d_head));
  }
  if (!(cfg.rope_base > 0.0)) {
    v.push_back("rope_base must be > 0");
  }
  if (cfg.routing_mode == RoutingMode::pregated && cfg.n_dense_leading < 1 &&
      cfg.n_layers > 0) {
    v.push_back("pregated routing_mode requires n_dense_leading >= 1 to "
                "host the first router");
  }
  return v;
}

ModelConfig preset_megrez2_preview() {
  ModelConfig cfg;
  cfg.n_layers = 31;
  cfg.n_dense_leading = 1;
  cfg.group_size = 3;
  cfg.routed_experts_per_group = 64;
  cfg.top_k = 6;
  cfg.shared_experts_per_layer = 4;
  cfg.d_expert = 1408;
  cfg.d_dense_ffn = 10944;
  cfg.rope_base = 1000000.0;
  cfg.seq_len_max = 32768;
  cfg.routing_mode = RoutingMode::pregated;
  cfg.precision = Precision::f32;
  // Not published for this architecture; plausible completions.
  cfg.d_model = 2048;
  cfg.n_heads = 16;
  cfg.d_head = 128;
  cfg.vocab_size = 122880;
  cfg.assumed_fields = {"d_model", "n_heads", "d_head", "vocab_size"};
  return cfg;
}

ModelConfig preset_by_name(const std::string &name) {
  if (name == "megrez2-preview") {
    return preset_megrez2_preview();
  }
  throw ConfigError("unknown preset '" + name + "'");
}

ParamReport count_params(const ModelConfig &cfg) {
  const auto U = [](int x) { return static_cast<std::uint64_t>(x); };
  const std::uint64_t L = U(cfg.n_layers);
  const std::uint64_t l_moe = U(cfg.n_moe_layers());
  const std::uint64_t groups = U(cfg.n_groups());
  const std::uint64_t d = U(cfg.d_model);
  const std::uint64_t hd = U(cfg.n_heads) * U(cfg.d_head);
  const std::uint64_t m = U(cfg.routed_experts_per_group);
  const std::uint64_t k = U(cfg.top_k);
  const std::uint64_t s = U(cfg.shared_experts_per_layer);
  const std::uint64_t expert = 3 * d * U(cfg.d_expert);

  ParamReport r;
  r.embedding_in = U(cfg.vocab_size) * d;
  r.embedding_out = d * U(cfg.vocab_size);
  r.attention = L * 4 * d * hd;
  r.norms = (2 * L + 1) * d;
  r.dense_ffn = U(cfg.n_dense_leading) * 3 * d * U(cfg.d_dense_ffn);
  r.routers = l_moe * d * m;
  if (cfg.routing_mode == RoutingMode::pregated && l_moe > 0) {
    r.routers += d * m; // router hosted by the last dense leading layer
  }
  const std::uint64_t pool_count =
      cfg.routing_mode == RoutingMode::standard ? l_moe : groups;
  r.routed_experts = pool_count * m * expert;
  r.shared_experts = l_moe * s * expert;
  r.stored_total = r.embedding_in + r.embedding_out + r.attention + r.norms +
                   r.dense_ffn + r.routers + r.routed_experts +
                   r.shared_experts;
  // Per token: output projection, all attention and norms, one router per
  // MoE layer, k routed + S shared experts per MoE layer, the dense FFNs.
  r.activated_per_token = r.embedding_out + r.attention + r.norms +
                          r.dense_ffn + l_moe * (d * m + (k + s) * expert);
  return r;
}

Tensor rope_apply(const Tensor &q_or_k, const std::vector<int> &positions,
                  double base) {
  if (q_or_k.rank() != 3) {
    throw DimensionError("rope_apply expects [tokens x heads x d_head]");
  }
  const std::size_t tokens = q_or_k.shape()[0];
  const std::size_t heads = q_or_k.shape()[1];
  const std::size_t dh = q_or_k.shape()[2];
  if (dh % 2 != 0) {
    throw ConfigError("rope_apply requires an even d_head, got " +
                      std::to_string(dh));
  }
  if (positions.size() != tokens) {
    throw DimensionError("rope_apply: positions length mismatch");
  }
  Tensor out(q_or_k.shape());
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t j = 0; j < dh / 2; ++j) {
      const double freq =
          std::pow(base, -2.0 * static_cast<double>(j) /
                             static_cast<double>(dh));
      const double angle = static_cast<double>(positions[t]) * freq;
      const double c = std::cos(angle);
      const double s = std::sin(angle);
      for (std::size_t hh = 0; hh < heads; ++hh) {
        const double xe = q_or_k.at(t, hh, 2 * j);
        const double xo = q_or_k.at(t, hh, 2 * j + 1);
        out.at(t, hh, 2 * j) = xe * c - xo * s;
        out.at(t, hh, 2 * j + 1) = xe * s + xo * c;
      }
    }
  }
  ensure_finite(out, "rope_apply");
  return out;
}

namespace {

Tensor rms_norm(const Tensor &x, const Tensor &gain) {
  const std::size_t tokens = x.rows();
  const std::size_t d = x.cols();
  Tensor out({tokens, d});
  for (std::size_t t = 0; t < tokens; ++t) {
    double ms = 0.0;
    for (std::size_t p = 0; p < d; ++p) ms += x.at(t, p) * x.at(t, p);
    ms /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(ms + kRmsEps);
    for (std::size_t p = 0; p < d; ++p) {
      out.at(t, p) = x.at(t, p) * inv * gain[p];
    }
  }
  ensure_finite(out, "rms_norm");
  return out;
}

void fill_named(Tensor &t, const std::string &name, std::uint64_t seed,
                int n_layers, Precision precision) {
  const bool is_norm = name.ends_with("norm");
  const bool residual_out =
      name.ends_with(".wo") || name.ends_with(".w_down");
  if (is_norm) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = 1.0;
    return;
  }
  const double std_dev =
      residual_out ? kInitStd / std::sqrt(2.0 * n_layers) : kInitStd;
  Rng rng(seed, Rng::stream_of(name));
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = rng.normal() * std_dev;
  }
  if (precision == Precision::f32) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      t[i] = static_cast<double>(static_cast<float>(t[i]));
    }
  }
}

ExpertParams make_expert(std::size_t d, std::size_t width) {
  return ExpertParams{Tensor({d, width}), Tensor({d, width}),
                      Tensor({width, d})};
}

} // namespace

Model Model::build(const ModelConfig &cfg) {
  const auto violations = validate(cfg);
  if (!violations.empty()) {
    std::string msg = "invalid config:";
    for (const auto &s : violations) msg += "\n  " + s;
    throw ConfigError(msg);
  }

  Model model;
  model.cfg_ = cfg;
  const std::size_t d = cfg.d_model;
  const std::size_t hd =
      static_cast<std::size_t>(cfg.n_heads) * cfg.d_head;
  const std::size_t m = cfg.routed_experts_per_group;

  model.embedding_in_ = Tensor({static_cast<std::size_t>(cfg.vocab_size), d});
  model.embedding_out_ = Tensor({d, static_cast<std::size_t>(cfg.vocab_size)});
  model.final_norm_ = Tensor({d});

  const int pool_count = cfg.routing_mode == RoutingMode::standard
                             ? cfg.n_moe_layers()
                             : cfg.n_groups();
  for (int g = 0; g < pool_count; ++g) {
    auto pool = std::make_shared<ExpertPool>();
    pool->group_index = g;
    for (int j = 0; j < cfg.routed_experts_per_group; ++j) {
      pool->routed.push_back(make_expert(d, cfg.d_expert));
    }
    model.pools_.push_back(std::move(pool));
  }

  for (int i = 0; i < cfg.n_layers; ++i) {
    TransformerLayer layer;
    layer.attn_norm = Tensor({d});
    layer.wq = Tensor({d, hd});
    layer.wk = Tensor({d, hd});
    layer.wv = Tensor({d, hd});
    layer.wo = Tensor({hd, d});
    layer.ffn_norm = Tensor({d});
    if (i < cfg.n_dense_leading) {
      layer.dense = make_expert(d, cfg.d_dense_ffn);
      // in pre-gated mode the last dense layer hosts the router consumed
      // by the first MoE layer
      if (cfg.routing_mode == RoutingMode::pregated &&
          i == cfg.n_dense_leading - 1 && cfg.n_moe_layers() > 0) {
        layer.router = RouterParams{Tensor({d, m}), std::nullopt};
      }
    } else {
      const int ordinal = i - cfg.n_dense_leading;
      const int pool_idx = cfg.routing_mode == RoutingMode::standard
                               ? ordinal
                               : ordinal / cfg.group_size;
      layer.pool = model.pools_[pool_idx];
      layer.router = RouterParams{Tensor({d, m}), std::nullopt};
      for (int s = 0; s < cfg.shared_experts_per_layer; ++s) {
        layer.shared_experts.push_back(make_expert(d, cfg.d_expert));
      }
    }
    model.layers_.push_back(std::move(layer));
  }

  for (auto &nt : model.named_tensors()) {
    fill_named(*nt.tensor, nt.name, cfg.seed, cfg.n_layers, cfg.precision);
  }
  return model;
}

std::vector<NamedTensor> Model::named_tensors() {
  std::vector<NamedTensor> out;
  out.push_back({"embedding_in", &embedding_in_});
  out.push_back({"embedding_out", &embedding_out_});
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    TransformerLayer &l = layers_[i];
    out.push_back({p + "attn_norm", &l.attn_norm});
    out.push_back({p + "wq", &l.wq});
    out.push_back({p + "wk", &l.wk});
    out.push_back({p + "wv", &l.wv});
    out.push_back({p + "wo", &l.wo});
    out.push_back({p + "ffn_norm", &l.ffn_norm});
    if (l.dense) {
      out.push_back({p + "dense.w_gate", &l.dense->w_gate});
      out.push_back({p + "dense.w_up", &l.dense->w_up});
      out.push_back({p + "dense.w_down", &l.dense->w_down});
    }
    if (l.router) {
      out.push_back({p + "router.weight", &l.router->weight});
      if (l.router->bias) {
        out.push_back({p + "router.bias", &*l.router->bias});
      }
    }
    for (std::size_t s = 0; s < l.shared_experts.size(); ++s) {
      const std::string sp = p + "shared" + std::to_string(s) + ".";
      out.push_back({sp + "w_gate", &l.shared_experts[s].w_gate});
      out.push_back({sp + "w_up", &l.shared_experts[s].w_up});
      out.push_back({sp + "w_down", &l.shared_experts[s].w_down});
    }
  }
  for (std::size_t g = 0; g < pools_.size(); ++g) {
    for (std::size_t j = 0; j < pools_[g]->routed.size(); ++j) {
      const std::string ep =
          "pool" + std::to_string(g) + ".routed" + std::to_string(j) + ".";
      ExpertParams &e = pools_[g]->routed[j];
      out.push_back({ep + "w_gate", &e.w_gate});
      out.push_back({ep + "w_up", &e.w_up});
      out.push_back({ep + "w_down", &e.w_down});
    }
  }
  out.push_back({"final_norm", &final_norm_});
  return out;
}

Tensor Model::attention(const Tensor &x, const std::vector<int> &positions,
                        const AttentionMask &mask,
                        const TransformerLayer &layer) const {
  const std::size_t tokens = x.rows();
  const std::size_t heads = cfg_.n_heads;
  const std::size_t dh = cfg_.d_head;
  const std::size_t hd = heads * dh;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor q = matmul(x, layer.wq);
  Tensor k = matmul(x, layer.wk);
  Tensor v = matmul(x, layer.wv);
  // [T x H*dh] and [T x H x dh] share the row-major layout
  Tensor q3 = Tensor::from({tokens, heads, dh}, q.data());
  Tensor k3 = Tensor::from({tokens, heads, dh}, k.data());
  q3 = rope_apply(q3, positions, cfg_.rope_base);
  k3 = rope_apply(k3, positions, cfg_.rope_base);

  Tensor ctx({tokens, hd});
  std::vector<double> weights(tokens);
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t hh = 0; hh < heads; ++hh) {
      // scores over the allowed keys only; disallowed keys are skipped
      // entirely so packed and standalone runs do identical arithmetic
      double mx = 0.0;
      bool any = false;
      for (std::size_t u = 0; u <= t; ++u) {
        if (!mask.allows(t, u)) continue;
        double s = 0.0;
        for (std::size_t c = 0; c < dh; ++c) {
          s += q3.at(t, hh, c) * k3.at(u, hh, c);
        }
        s *= inv_scale;
        weights[u] = s;
        mx = any ? std::max(mx, s) : s;
        any = true;
      }
      if (!any) {
        throw InputError("attention mask leaves position " +
                         std::to_string(t) + " with no visible key");
      }
      double denom = 0.0;
      for (std::size_t u = 0; u <= t; ++u) {
        if (!mask.allows(t, u)) continue;
        weights[u] = std::exp(weights[u] - mx);
        denom += weights[u];
      }
      for (std::size_t c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          if (!mask.allows(t, u)) continue;
          acc += (weights[u] / denom) * v.at(u, hh * dh + c);
        }
        ctx.at(t, hh * dh + c) = acc;
      }
    }
  }
  return matmul(ctx, layer.wo);
}

Tensor Model::forward(const std::vector<int> &token_ids,
                      const ForwardOptions &opts) const {
  const std::size_t tokens = token_ids.size();
  if (tokens == 0) {
    throw InputError("forward requires at least one token");
  }
  if (tokens > static_cast<std::size_t>(cfg_.seq_len_max)) {
    throw InputError("sequence length " + std::to_string(tokens) +
                     " exceeds seq_len_max " +
                     std::to_string(cfg_.seq_len_max));
  }
  for (int id : token_ids) {
    if (id < 0 || id >= cfg_.vocab_size) {
      throw InputError("token id " + std::to_string(id) +
                       " outside vocab of " +
                       std::to_string(cfg_.vocab_size));
    }
  }
  std::vector<int> default_positions;
  const std::vector<int> *positions = opts.positions;
  if (positions == nullptr) {
    default_positions.resize(tokens);
    for (std::size_t t = 0; t < tokens; ++t) {
      default_positions[t] = static_cast<int>(t);
    }
    positions = &default_positions;
  } else if (positions->size() != tokens) {
    throw DimensionError("positions length does not match token count");
  }
  AttentionMask default_mask;
  const AttentionMask *mask = opts.mask;
  if (mask == nullptr) {
    default_mask = AttentionMask::causal(tokens);
    mask = &default_mask;
  } else if (mask->tokens != tokens) {
    throw DimensionError("attention mask size does not match token count");
  }

  const std::size_t d = cfg_.d_model;
  Tensor x({tokens, d});
  for (std::size_t t = 0; t < tokens; ++t) {
    for (std::size_t p = 0; p < d; ++p) {
      x.at(t, p) = embedding_in_.at(token_ids[t], p);
    }
  }

  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const TransformerLayer &layer = layers_[i];
    x = add(x, attention(rms_norm(x, layer.attn_norm), *positions, *mask,
                         layer));
    const Tensor h = rms_norm(x, layer.ffn_norm);
    Tensor f;
    if (layer.is_dense()) {
      f = expert_forward(*layer.dense, h);
    } else {
      const int ordinal = static_cast<int>(i) - cfg_.n_dense_leading;
      GateDecision decision;
      MoeBlockOutputs outs;
      if (opts.trace) outs.decision = &decision;
      const std::span<const ExpertParams> shared(layer.shared_experts);
      switch (cfg_.routing_mode) {
      case RoutingMode::standard:
        f = moe_block_standard(*layer.pool, shared, *layer.router, h,
                               cfg_.top_k, outs, static_cast<int>(i));
        break;
      case RoutingMode::shared:
        f = moe_block_shared(pools_, ordinal, cfg_.group_size, *layer.router,
                             shared, h, cfg_.top_k, outs,
                             static_cast<int>(i));
        break;
      case RoutingMode::pregated: {
        const auto &prev = layers_[i - 1].router;
        if (!prev) {
          throw ConfigError("layer " + std::to_string(i) +
                            " has no predecessor router");
        }
        f = moe_block_pregated(*layer.pool, *prev, shared, h, cfg_.top_k,
                               static_cast<int>(i) - 1, outs);
        break;
      }
      }
      if (opts.trace) {
        opts.trace->push_back({static_cast<int>(i),
                               layer.pool->group_index, cfg_.routing_mode,
                               std::move(decision)});
      }
    }
    x = add(x, f);
  }
  return matmul(rms_norm(x, final_norm_), embedding_out_);
}

} // namespace m2
