#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "m2/attention_mask.hpp"
#include "m2/moe.hpp"
#include "m2/tensor.hpp"

namespace m2 {

// Half-open token range of one conversational turn. Only trainable turns
// (assistant turns) contribute loss.
struct Turn {
  std::size_t begin = 0;
  std::size_t end = 0;
  bool trainable = false;
};

struct SampleTurns {
  std::vector<Turn> turns;
};

struct TurnSegmentation {
  std::vector<SampleTurns> samples;
};

// Mean over trainable turns of (turn loss sum / turn length). Each turn is
// normalized by its own token count, never by the sequence length; the
// cross-turn reduction is a plain mean (swap for a sum here if needed).
double turn_level_loss(const Tensor &token_losses,
                       const TurnSegmentation &seg);

// Samples concatenated into one sequence: positions restart at 0 at every
// sample boundary and the mask keeps samples mutually invisible.
struct PackedBatch {
  std::vector<int> token_ids;
  std::vector<std::size_t> sample_offsets; // start of each sample
  std::vector<int> sample_ids;             // per token
  std::vector<int> positions;              // reset per sample

  std::size_t size() const { return token_ids.size(); }
  std::size_t sample_count() const { return sample_offsets.size(); }
  std::size_t sample_begin(std::size_t s) const { return sample_offsets[s]; }
  std::size_t sample_end(std::size_t s) const {
    return s + 1 < sample_offsets.size() ? sample_offsets[s + 1]
                                         : token_ids.size();
  }
  AttentionMask mask() const { return AttentionMask::block_causal(sample_ids); }
};

// All samples into one packed sequence. Errors if any single sample, or the
// concatenation, exceeds max_len.
PackedBatch build_packed_batch(const std::vector<std::vector<int>> &samples,
                               std::size_t max_len);

// Greedy split: consecutive samples fill a batch until the next one would
// overflow max_len.
std::vector<PackedBatch> pack_greedy(const std::vector<std::vector<int>> &samples,
                                     std::size_t max_len);

struct BalanceMetrics {
  std::vector<long> counts; // assignments per expert
  double max_over_mean = 0.0;
  double entropy = 0.0; // natural log; log(M) under perfect uniformity
};

BalanceMetrics balance_metrics(const std::vector<GateDecision> &decisions,
                               int n_experts);

// Line-oriented descriptions: one JSON object per line.
// Turns:   {"sample":0,"begin":0,"end":5,"trainable":true}
// Samples: {"sample":0,"tokens":[1,2,3]}
TurnSegmentation segmentation_from_jsonl(const std::string &path);
std::vector<std::vector<int>> samples_from_jsonl(const std::string &path);

} // namespace m2
