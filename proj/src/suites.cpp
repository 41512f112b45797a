#include "m2/suites.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "m2/rng.hpp"
#include "m2/train_utils.hpp"

namespace m2 {

ModelConfig toy_model_config(RoutingMode mode, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.n_layers = 4;
  cfg.n_dense_leading = 1;
  cfg.group_size = 3;
  cfg.d_model = 16;
  cfg.n_heads = 2;
  cfg.d_head = 8;
  cfg.routed_experts_per_group = 8;
  cfg.top_k = 2;
  cfg.shared_experts_per_layer = 1;
  cfg.d_expert = 16;
  cfg.d_dense_ffn = 32;
  cfg.vocab_size = 50;
  cfg.seq_len_max = 64;
  cfg.routing_mode = mode;
  cfg.seed = seed;
  return cfg;
}

std::vector<int> random_token_ids(const ModelConfig &cfg, std::size_t count,
                                  std::uint64_t seed) {
  Rng rng(seed, Rng::stream_of("token_ids"));
  std::vector<int> ids(count);
  for (auto &id : ids) {
    id = static_cast<int>(rng.uniform_int(cfg.vocab_size));
  }
  return ids;
}

bool bitwise_equal(const Tensor &a, const Tensor &b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data().data(), b.data().data(),
                     a.size() * sizeof(double)) == 0;
}

void tie_routers_to_predecessors(Model &model) {
  auto &layers = model.layers();
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (layers[i].is_dense() || !layers[i].router) continue;
    if (i == 0 || !layers[i - 1].router) {
      throw ConfigError("layer " + std::to_string(i) +
                        " has no predecessor router slot to tie into");
    }
    layers[i - 1].router->weight = layers[i].router->weight;
    layers[i - 1].router->bias = layers[i].router->bias;
  }
}

std::vector<PropertyResult> run_equivalence_suite(int seeds) {
  std::vector<PropertyResult> out;

  {
    PropertyResult r{"equivalence.n1_shared_equals_standard", true, ""};
    for (int seed = 0; seed < seeds; ++seed) {
      ModelConfig shared_cfg = toy_model_config(RoutingMode::shared, seed);
      shared_cfg.group_size = 1;
      ModelConfig std_cfg = shared_cfg;
      std_cfg.routing_mode = RoutingMode::standard;
      const Model a = Model::build(shared_cfg);
      const Model b = Model::build(std_cfg);
      const auto ids = random_token_ids(shared_cfg, 8, seed);
      if (!bitwise_equal(a.forward(ids), b.forward(ids))) {
        r.passed = false;
        r.detail = "logits differ at seed " + std::to_string(seed);
        break;
      }
    }
    if (r.passed) r.detail = std::to_string(seeds) + " seeds bitwise equal";
    out.push_back(std::move(r));
  }

  {
    PropertyResult r{"equivalence.pregated_tied_equals_shared", true, ""};
    for (int seed = 0; seed < seeds; ++seed) {
      const ModelConfig shared_cfg =
          toy_model_config(RoutingMode::shared, seed);
      ModelConfig pre_cfg = shared_cfg;
      pre_cfg.routing_mode = RoutingMode::pregated;
      const Model a = Model::build(shared_cfg);
      Model b = Model::build(pre_cfg);
      tie_routers_to_predecessors(b);
      const auto ids = random_token_ids(shared_cfg, 8, seed);
      if (!bitwise_equal(a.forward(ids), b.forward(ids))) {
        r.passed = false;
        r.detail = "logits differ at seed " + std::to_string(seed);
        break;
      }
    }
    if (r.passed) r.detail = std::to_string(seeds) + " seeds bitwise equal";
    out.push_back(std::move(r));
  }

  return out;
}

namespace {

struct BlockFixture {
  ExpertPool pool;
  std::vector<ExpertParams> shared;
  RouterParams router;
  Tensor h;
  Tensor upstream;
  int k = 2;
};

Tensor random_tensor(std::vector<std::size_t> shape, Rng &rng, double sd) {
  Tensor t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal() * sd;
  return t;
}

BlockFixture make_block_fixture(std::uint64_t seed) {
  constexpr std::size_t d = 4, de = 4, m = 4, tokens = 3;
  Rng rng(seed, Rng::stream_of("block_fixture"));
  BlockFixture f;
  for (std::size_t j = 0; j < m; ++j) {
    f.pool.routed.push_back(ExpertParams{random_tensor({d, de}, rng, 0.5),
                                         random_tensor({d, de}, rng, 0.5),
                                         random_tensor({de, d}, rng, 0.5)});
  }
  f.shared.push_back(ExpertParams{random_tensor({d, de}, rng, 0.5),
                                  random_tensor({d, de}, rng, 0.5),
                                  random_tensor({de, d}, rng, 0.5)});
  f.router = RouterParams{random_tensor({d, m}, rng, 0.5), std::nullopt};
  f.h = random_tensor({tokens, d}, rng, 1.0);
  f.upstream = random_tensor({tokens, d}, rng, 1.0);
  return f;
}

double block_loss(const BlockFixture &f) {
  const Tensor out = moe_block_standard(
      f.pool, std::span<const ExpertParams>(f.shared), f.router, f.h, f.k);
  double loss = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    loss += out[i] * f.upstream[i];
  }
  return loss;
}

// |a - b| relative to the larger magnitude, floored so exact zeros compare
// cleanly; gradients in these fixtures are O(0.01..10).
double rel_err(const Tensor &analytic, const Tensor &fd) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    const double denom =
        std::max({std::fabs(analytic[i]), std::fabs(fd[i]), 1e-3});
    worst = std::max(worst, std::fabs(analytic[i] - fd[i]) / denom);
  }
  return worst;
}

// Central differences w.r.t. one tensor of the fixture, selected by ref.
Tensor fd_against(BlockFixture f, Tensor BlockFixture::*unused, Tensor &target,
                  double eps) {
  (void)unused;
  (void)f;
  return finite_diff_grad([](const Tensor &) { return 0.0; }, target, eps);
}

} // namespace

std::vector<PropertyResult> run_gradient_suite(int seeds) {
  constexpr double eps = 1e-5;
  constexpr double tol = 1e-5;
  double worst_h = 0.0, worst_router = 0.0, worst_experts = 0.0;
  std::string fail_detail;

  for (int seed = 0; seed < seeds && fail_detail.empty(); ++seed) {
    BlockFixture f = make_block_fixture(seed);
    MoeForwardRecord record;
    MoeBlockOutputs outs;
    outs.record = &record;
    moe_block_standard(f.pool, std::span<const ExpertParams>(f.shared),
                       f.router, f.h, f.k, outs);
    const MoeBlockGrads grads = moe_block_backward(record, f.upstream);

    auto fd_for = [&](Tensor &target) {
      return finite_diff_grad(
          [&](const Tensor &x) {
            const Tensor saved = target;
            target = x;
            const double loss = block_loss(f);
            target = saved;
            return loss;
          },
          target, eps);
    };

    worst_h = std::max(worst_h, rel_err(grads.d_h, fd_for(f.h)));
    worst_router =
        std::max(worst_router, rel_err(grads.d_router_weight,
                                       fd_for(f.router.weight)));
    for (std::size_t j = 0; j < f.pool.routed.size(); ++j) {
      worst_experts = std::max(
          {worst_experts,
           rel_err(grads.d_routed[j].w_gate, fd_for(f.pool.routed[j].w_gate)),
           rel_err(grads.d_routed[j].w_up, fd_for(f.pool.routed[j].w_up)),
           rel_err(grads.d_routed[j].w_down,
                   fd_for(f.pool.routed[j].w_down))});
    }
    worst_experts = std::max(
        {worst_experts,
         rel_err(grads.d_shared[0].w_gate, fd_for(f.shared[0].w_gate)),
         rel_err(grads.d_shared[0].w_up, fd_for(f.shared[0].w_up)),
         rel_err(grads.d_shared[0].w_down, fd_for(f.shared[0].w_down))});
  }

  auto result = [&](const std::string &name, double worst) {
    std::ostringstream os;
    os << "max rel err " << worst << " over " << seeds << " seeds";
    return PropertyResult{name, worst < tol, os.str()};
  };
  return {result("gradients.block_input", worst_h),
          result("gradients.router_weight", worst_router),
          result("gradients.expert_weights", worst_experts)};
}

std::vector<PropertyResult> run_packing_suite(int packings) {
  PropertyResult r{"packing.isolation", true, ""};
  constexpr double tol = 1e-10;
  double worst = 0.0;

  const ModelConfig cfg = toy_model_config(RoutingMode::shared, 7);
  const Model model = Model::build(cfg);
  for (int trial = 0; trial < packings && r.passed; ++trial) {
    Rng rng(trial, Rng::stream_of("packing"));
    const std::size_t n_samples = 2 + rng.uniform_int(4);
    std::vector<std::vector<int>> samples(n_samples);
    for (auto &sample : samples) {
      sample.resize(1 + rng.uniform_int(6));
      for (auto &id : sample) {
        id = static_cast<int>(rng.uniform_int(cfg.vocab_size));
      }
    }
    const PackedBatch batch = build_packed_batch(samples, cfg.seq_len_max);
    const AttentionMask mask = batch.mask();
    ForwardOptions opts;
    opts.mask = &mask;
    opts.positions = &batch.positions;
    const Tensor packed = model.forward(batch.token_ids, opts);

    for (std::size_t s = 0; s < samples.size(); ++s) {
      const Tensor alone = model.forward(samples[s]);
      const std::size_t begin = batch.sample_begin(s);
      for (std::size_t t = 0; t < samples[s].size(); ++t) {
        for (int vcb = 0; vcb < cfg.vocab_size; ++vcb) {
          const double diff =
              std::fabs(packed.at(begin + t, vcb) - alone.at(t, vcb));
          worst = std::max(worst, diff);
        }
      }
    }
    if (worst >= tol) {
      r.passed = false;
      r.detail = "divergence " + std::to_string(worst) + " at trial " +
                 std::to_string(trial);
    }
  }
  if (r.passed) {
    std::ostringstream os;
    os << packings << " packings, worst divergence " << worst;
    r.detail = os.str();
  }
  return {r};
}

std::vector<PropertyResult> run_balance_suite(int seeds) {
  std::vector<PropertyResult> out;

  {
    PropertyResult r{"balance.counts_match_tally", true, ""};
    for (int seed = 0; seed < seeds && r.passed; ++seed) {
      BlockFixture f = make_block_fixture(seed);
      const GateDecision d = route_topk(f.router, f.h, f.k);
      const BalanceMetrics m =
          balance_metrics({d}, static_cast<int>(f.pool.routed.size()));
      std::vector<long> tally(f.pool.routed.size(), 0);
      long total = 0;
      for (std::size_t t = 0; t < d.tokens; ++t) {
        for (int s = 0; s < d.k; ++s) {
          ++tally[d.index(t, s)];
          ++total;
        }
      }
      if (tally != m.counts ||
          total != static_cast<long>(d.tokens) * d.k) {
        r.passed = false;
        r.detail = "tally mismatch at seed " + std::to_string(seed);
      }
    }
    if (r.passed) r.detail = std::to_string(seeds) + " seeds match";
    out.push_back(std::move(r));
  }

  {
    PropertyResult r{"balance.uniform_and_concentrated", true, ""};
    const int m = 8;
    GateDecision uniform;
    uniform.tokens = 4 * m;
    uniform.k = 1;
    uniform.indices.resize(uniform.tokens);
    uniform.weights.assign(uniform.tokens, 1.0);
    for (std::size_t t = 0; t < uniform.tokens; ++t) {
      uniform.indices[t] = static_cast<int>(t % m);
    }
    const BalanceMetrics bu = balance_metrics({uniform}, m);
    GateDecision one;
    one.tokens = 16;
    one.k = 1;
    one.indices.assign(one.tokens, 0);
    one.weights.assign(one.tokens, 1.0);
    const BalanceMetrics bo = balance_metrics({one}, m);
    if (bu.max_over_mean != 1.0 ||
        std::fabs(bu.entropy - std::log(static_cast<double>(m))) > 1e-12 ||
        bo.entropy != 0.0) {
      r.passed = false;
      r.detail = "closed-form balance values violated";
    } else {
      r.detail = "uniform: max/mean=1, entropy=log M; concentrated: 0";
    }
    out.push_back(std::move(r));
  }

  {
    PropertyResult r{"balance.switch_loss_floor", true, ""};
    const std::size_t m = 4, tokens = 8;
    Tensor scores({tokens, m});
    for (std::size_t t = 0; t < tokens; ++t) {
      for (std::size_t j = 0; j < m; ++j) scores.at(t, j) = 1.0 / m;
    }
    GateDecision d;
    d.tokens = tokens;
    d.k = 1;
    d.indices.resize(tokens);
    d.weights.assign(tokens, 1.0);
    for (std::size_t t = 0; t < tokens; ++t) {
      d.indices[t] = static_cast<int>(t % m);
    }
    const double at_uniform = switch_balance_loss(scores, d, 0.01);
    GateDecision skew = d;
    std::fill(skew.indices.begin(), skew.indices.end(), 0);
    Tensor skew_scores({tokens, m});
    for (std::size_t t = 0; t < tokens; ++t) {
      skew_scores.at(t, 0) = 0.7;
      for (std::size_t j = 1; j < m; ++j) skew_scores.at(t, j) = 0.1;
    }
    const double at_skew = switch_balance_loss(skew_scores, skew, 0.01);
    if (std::fabs(at_uniform - 0.01) > 1e-12 || at_skew <= at_uniform ||
        switch_balance_loss(scores, d, 0.0) != 0.0) {
      r.passed = false;
      r.detail = "switch loss floor/ordering violated";
    } else {
      std::ostringstream os;
      os << "uniform=" << at_uniform << " skewed=" << at_skew;
      r.detail = os.str();
    }
    out.push_back(std::move(r));
  }

  return out;
}

std::vector<PropertyResult> run_check_suite(const std::string &name) {
  if (name == "equivalence") return run_equivalence_suite();
  if (name == "gradients") return run_gradient_suite();
  if (name == "packing") return run_packing_suite();
  if (name == "balance") return run_balance_suite();
  throw ConfigError("unknown suite '" + name +
                    "' (expected equivalence|gradients|packing|balance)");
}

} // namespace m2
