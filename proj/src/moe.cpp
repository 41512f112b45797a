#include "m2/moe.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace m2 {

namespace {

double silu_grad(double x) {
  const double s = sigmoid(x);
  return s * (1.0 + x * (1.0 - s));
}

void check_expert_dims(const ExpertParams &e, std::size_t d_model,
                       const char *what) {
  const std::size_t de = e.w_gate.cols();
  if (e.w_gate.rows() != d_model || e.w_up.rows() != d_model ||
      e.w_up.cols() != de || e.w_down.rows() != de ||
      e.w_down.cols() != d_model) {
    throw ConfigError(std::string(what) + ": inconsistent expert matrices");
  }
}

} // namespace

Tensor router_scores(const RouterParams &router, const Tensor &h) {
  if (h.rank() != 2 || h.cols() != router.weight.rows()) {
    throw ConfigError("router weight does not match hidden width");
  }
  Tensor logits = matmul(h, router.weight);
  if (router.bias) {
    if (router.bias->size() != router.expert_count()) {
      throw ConfigError("router bias length does not match expert count");
    }
    for (std::size_t t = 0; t < logits.rows(); ++t) {
      for (std::size_t j = 0; j < logits.cols(); ++j) {
        logits.at(t, j) += (*router.bias)[j];
      }
    }
  }
  return softmax(logits, 1);
}

GateDecision topk_from_scores(const Tensor &scores, int k, int source_layer) {
  const std::size_t m = scores.cols();
  if (k < 1 || static_cast<std::size_t>(k) > m) {
    throw ConfigError("top_k " + std::to_string(k) +
                      " outside [1, M] for M=" + std::to_string(m));
  }
  GateDecision d;
  d.tokens = scores.rows();
  d.k = k;
  d.source_layer = source_layer;
  d.indices.resize(d.tokens * k);
  d.weights.resize(d.tokens * k);

  std::vector<int> order(m);
  for (std::size_t t = 0; t < d.tokens; ++t) {
    for (std::size_t j = 0; j < m; ++j) order[j] = static_cast<int>(j);
    // k largest scores, ties to the lower expert index
    std::partial_sort(order.begin(), order.begin() + k, order.end(),
                      [&](int a, int b) {
                        const double sa = scores.at(t, a);
                        const double sb = scores.at(t, b);
                        return sa > sb || (sa == sb && a < b);
                      });
    double total = 0.0;
    for (int s = 0; s < k; ++s) total += scores.at(t, order[s]);
    for (int s = 0; s < k; ++s) {
      d.indices[t * k + s] = order[s];
      d.weights[t * k + s] = scores.at(t, order[s]) / total;
    }
  }
  return d;
}

GateDecision route_topk(const RouterParams &router, const Tensor &h, int k,
                        int source_layer) {
  return topk_from_scores(router_scores(router, h), k, source_layer);
}

Tensor expert_forward(const ExpertParams &e, const Tensor &h) {
  if (h.rank() != 2) {
    throw ConfigError("expert_forward expects [tokens x d_model]");
  }
  check_expert_dims(e, h.cols(), "expert_forward");
  return matmul(hadamard(silu(matmul(h, e.w_gate)), matmul(h, e.w_up)),
                e.w_down);
}

namespace {

// Shared aggregation path of all three block variants. Summation order is
// fixed: gate slots in decision order, then shared experts in index order.
Tensor moe_block_core(const ExpertPool &pool,
                      std::span<const ExpertParams> shared_experts,
                      const RouterParams &router, const Tensor &scores,
                      const GateDecision &decision, const Tensor &h,
                      MoeForwardRecord *record) {
  const std::size_t tokens = h.rows();
  const std::size_t d = h.cols();
  if (pool.routed.empty()) {
    throw ConfigError("expert pool is empty");
  }
  for (const auto &e : pool.routed) check_expert_dims(e, d, "moe_block");
  for (const auto &e : shared_experts) check_expert_dims(e, d, "moe_block");

  const std::size_t de = pool.routed[0].w_gate.cols();
  Tensor out({tokens, d});

  std::vector<Tensor> slot_pre_gate, slot_pre_up, slot_out;
  for (int s = 0; s < decision.k; ++s) {
    Tensor c({tokens, de}), u({tokens, de}), y({tokens, d});
    for (std::size_t t = 0; t < tokens; ++t) {
      const ExpertParams &e = pool.routed[decision.index(t, s)];
      for (std::size_t q = 0; q < de; ++q) {
        double cg = 0.0, cu = 0.0;
        for (std::size_t p = 0; p < d; ++p) {
          cg += h.at(t, p) * e.w_gate.at(p, q);
          cu += h.at(t, p) * e.w_up.at(p, q);
        }
        c.at(t, q) = cg;
        u.at(t, q) = cu;
      }
      for (std::size_t p = 0; p < d; ++p) {
        double acc = 0.0;
        for (std::size_t q = 0; q < de; ++q) {
          acc += c.at(t, q) * sigmoid(c.at(t, q)) * u.at(t, q) *
                 e.w_down.at(q, p);
        }
        y.at(t, p) = acc;
        out.at(t, p) += decision.weight(t, s) * acc;
      }
    }
    slot_pre_gate.push_back(std::move(c));
    slot_pre_up.push_back(std::move(u));
    slot_out.push_back(std::move(y));
  }

  std::vector<Tensor> shared_pre_gate, shared_pre_up;
  for (const ExpertParams &e : shared_experts) {
    Tensor c = matmul(h, e.w_gate);
    Tensor u = matmul(h, e.w_up);
    Tensor y = matmul(hadamard(silu(c), u), e.w_down);
    out = add(out, y);
    shared_pre_gate.push_back(std::move(c));
    shared_pre_up.push_back(std::move(u));
  }

  ensure_finite(out, "moe_block");

  if (record) {
    record->valid = true;
    record->pool = &pool;
    record->shared = shared_experts;
    record->router = &router;
    record->h = h;
    record->scores = scores;
    record->decision = decision;
    record->slot_pre_gate = std::move(slot_pre_gate);
    record->slot_pre_up = std::move(slot_pre_up);
    record->slot_out = std::move(slot_out);
    record->shared_pre_gate = std::move(shared_pre_gate);
    record->shared_pre_up = std::move(shared_pre_up);
  }
  return out;
}

} // namespace

Tensor moe_block_standard(const ExpertPool &pool,
                          std::span<const ExpertParams> shared_experts,
                          const RouterParams &router, const Tensor &h, int k,
                          MoeBlockOutputs out, int source_layer) {
  if (router.expert_count() != pool.routed.size()) {
    throw ConfigError("router addresses " +
                      std::to_string(router.expert_count()) +
                      " experts, pool holds " +
                      std::to_string(pool.routed.size()));
  }
  const Tensor scores = router_scores(router, h);
  const GateDecision decision = topk_from_scores(scores, k, source_layer);
  if (out.decision) *out.decision = decision;
  return moe_block_core(pool, shared_experts, router, scores, decision, h,
                        out.record);
}

Tensor moe_block_shared(std::span<const std::shared_ptr<ExpertPool>> pools,
                        int moe_layer_index, int group_size,
                        const RouterParams &router,
                        std::span<const ExpertParams> shared_experts,
                        const Tensor &h, int k, MoeBlockOutputs out,
                        int source_layer) {
  if (group_size < 1 || moe_layer_index < 0) {
    throw ConfigError("moe_block_shared: bad layer index or group size");
  }
  const std::size_t group = static_cast<std::size_t>(moe_layer_index) /
                            static_cast<std::size_t>(group_size);
  if (group >= pools.size()) {
    throw ConfigError("group " + std::to_string(group) +
                      " out of range for " + std::to_string(pools.size()) +
                      " pools");
  }
  const ExpertPool &pool = *pools[group];
  if (router.expert_count() != pool.routed.size()) {
    throw ConfigError("router/pool expert count mismatch");
  }
  const Tensor scores = router_scores(router, h);
  const GateDecision decision = topk_from_scores(scores, k, source_layer);
  if (out.decision) *out.decision = decision;
  return moe_block_core(pool, shared_experts, router, scores, decision, h,
                        out.record);
}

Tensor moe_block_pregated(const ExpertPool &pool,
                          const RouterParams &router_prev,
                          std::span<const ExpertParams> shared_experts,
                          const Tensor &h, int k, int source_layer,
                          MoeBlockOutputs out) {
  if (router_prev.expert_count() != pool.routed.size()) {
    throw ConfigError("predecessor router/pool expert count mismatch");
  }
  const Tensor scores = router_scores(router_prev, h);
  const GateDecision decision = topk_from_scores(scores, k, source_layer);
  if (out.decision) *out.decision = decision;
  return moe_block_core(pool, shared_experts, router_prev, scores, decision,
                        h, out.record);
}

MoeBlockGrads moe_block_backward(const MoeForwardRecord &record,
                                 const Tensor &upstream_grad) {
  if (!record.valid) {
    throw StateError("moe_block_backward without a recorded forward pass");
  }
  const Tensor &h = record.h;
  if (!upstream_grad.same_shape(h)) {
    throw DimensionError("upstream gradient shape does not match block input");
  }
  const std::size_t tokens = h.rows();
  const std::size_t d = h.cols();
  const std::size_t m = record.pool->routed.size();
  const std::size_t de = record.pool->routed[0].w_gate.cols();
  const int k = record.decision.k;

  MoeBlockGrads g;
  g.d_h = Tensor({tokens, d});
  g.d_router_weight = Tensor({d, m});
  if (record.router->bias) {
    g.d_router_bias = Tensor({m});
  }
  auto zero_expert = [&](std::size_t width) {
    return ExpertGrads{Tensor({d, width}), Tensor({d, width}),
                       Tensor({width, d})};
  };
  g.d_routed.reserve(m);
  for (std::size_t j = 0; j < m; ++j) g.d_routed.push_back(zero_expert(de));
  g.d_shared.reserve(record.shared.size());
  for (const auto &e : record.shared) {
    g.d_shared.push_back(zero_expert(e.w_gate.cols()));
  }

  // d upstream/d expert internals for one token row; accumulates into grads.
  auto expert_row_backward = [&](const ExpertParams &e, ExpertGrads &eg,
                                 std::size_t t, const Tensor &pre_gate,
                                 const Tensor &pre_up, const double *gy) {
    const std::size_t width = e.w_gate.cols();
    for (std::size_t q = 0; q < width; ++q) {
      const double c = pre_gate.at(t, q);
      const double u = pre_up.at(t, q);
      const double a = c * sigmoid(c);
      double gm = 0.0;
      for (std::size_t p = 0; p < d; ++p) {
        gm += gy[p] * e.w_down.at(q, p);
        eg.w_down.at(q, p) += a * u * gy[p];
      }
      const double gc = gm * u * silu_grad(c);
      const double gu = gm * a;
      for (std::size_t p = 0; p < d; ++p) {
        eg.w_gate.at(p, q) += h.at(t, p) * gc;
        eg.w_up.at(p, q) += h.at(t, p) * gu;
        g.d_h.at(t, p) += gc * e.w_gate.at(p, q) + gu * e.w_up.at(p, q);
      }
    }
  };

  std::vector<double> gy(d);
  std::vector<double> d_scores(m);
  std::vector<double> dz(m);
  for (std::size_t t = 0; t < tokens; ++t) {
    // shared experts see the raw upstream gradient
    for (std::size_t s = 0; s < record.shared.size(); ++s) {
      for (std::size_t p = 0; p < d; ++p) gy[p] = upstream_grad.at(t, p);
      expert_row_backward(record.shared[s], g.d_shared[s], t,
                          record.shared_pre_gate[s], record.shared_pre_up[s],
                          gy.data());
    }

    // selected experts and their gate weights
    std::fill(d_scores.begin(), d_scores.end(), 0.0);
    double renorm_total = 0.0;
    for (int s = 0; s < k; ++s) {
      renorm_total += record.scores.at(t, record.decision.index(t, s));
    }
    double weighted_dot = 0.0;
    std::vector<double> d_w(k);
    for (int s = 0; s < k; ++s) {
      const int j = record.decision.index(t, s);
      const double w = record.decision.weight(t, s);
      for (std::size_t p = 0; p < d; ++p) gy[p] = w * upstream_grad.at(t, p);
      expert_row_backward(record.pool->routed[j], g.d_routed[j], t,
                          record.slot_pre_gate[s], record.slot_pre_up[s],
                          gy.data());
      double dot = 0.0;
      for (std::size_t p = 0; p < d; ++p) {
        dot += upstream_grad.at(t, p) * record.slot_out[s].at(t, p);
      }
      d_w[s] = dot;
      weighted_dot += dot * w;
    }
    // renormalization: w_s = score_s / sum(selected scores)
    for (int s = 0; s < k; ++s) {
      d_scores[record.decision.index(t, s)] =
          (d_w[s] - weighted_dot) / renorm_total;
    }
    // softmax couples every score entry back to the logits
    double ds_dot_s = 0.0;
    for (std::size_t j = 0; j < m; ++j) {
      ds_dot_s += d_scores[j] * record.scores.at(t, j);
    }
    for (std::size_t j = 0; j < m; ++j) {
      dz[j] = record.scores.at(t, j) * (d_scores[j] - ds_dot_s);
    }
    for (std::size_t p = 0; p < d; ++p) {
      double acc = 0.0;
      for (std::size_t j = 0; j < m; ++j) {
        g.d_router_weight.at(p, j) += h.at(t, p) * dz[j];
        acc += dz[j] * record.router->weight.at(p, j);
      }
      g.d_h.at(t, p) += acc;
    }
    if (g.d_router_bias) {
      for (std::size_t j = 0; j < m; ++j) (*g.d_router_bias)[j] += dz[j];
    }
  }
  return g;
}

double switch_balance_loss(const Tensor &scores, const GateDecision &decision,
                           double coeff) {
  if (decision.tokens == 0 || decision.tokens != scores.rows()) {
    throw DimensionError("balance loss: decision/score token mismatch");
  }
  if (coeff == 0.0) {
    return 0.0;
  }
  const std::size_t m = scores.cols();
  std::vector<double> assigned(m, 0.0);
  for (std::size_t t = 0; t < decision.tokens; ++t) {
    for (int s = 0; s < decision.k; ++s) {
      assigned[decision.index(t, s)] += 1.0;
    }
  }
  const double total = static_cast<double>(decision.tokens) * decision.k;
  double acc = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    double mean_score = 0.0;
    for (std::size_t t = 0; t < decision.tokens; ++t) {
      mean_score += scores.at(t, j);
    }
    mean_score /= static_cast<double>(decision.tokens);
    acc += (assigned[j] / total) * mean_score;
  }
  return coeff * static_cast<double>(m) * acc;
}

} // namespace m2
