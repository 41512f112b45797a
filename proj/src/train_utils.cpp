#include "m2/train_utils.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace m2 {

double turn_level_loss(const Tensor &token_losses,
                       const TurnSegmentation &seg) {
  if (token_losses.rank() != 1) {
    throw DimensionError("token_losses must be rank 1");
  }
  const std::size_t tokens = token_losses.size();

  std::vector<const Turn *> all;
  for (const auto &sample : seg.samples) {
    for (const auto &turn : sample.turns) {
      if (turn.end < turn.begin || turn.end > tokens) {
        throw InputError("turn range [" + std::to_string(turn.begin) + ", " +
                         std::to_string(turn.end) + ") outside sequence of " +
                         std::to_string(tokens) + " tokens");
      }
      if (turn.trainable && turn.begin == turn.end) {
        throw InputError("empty trainable turn at " +
                         std::to_string(turn.begin));
      }
      all.push_back(&turn);
    }
  }
  std::vector<const Turn *> sorted = all;
  std::sort(sorted.begin(), sorted.end(),
            [](const Turn *a, const Turn *b) { return a->begin < b->begin; });
  for (std::size_t i = 1; i < sorted.size(); ++i) {
    if (sorted[i]->begin < sorted[i - 1]->end) {
      throw InputError("overlapping turns at token " +
                       std::to_string(sorted[i]->begin));
    }
  }

  double total = 0.0;
  std::size_t trainable_turns = 0;
  for (const Turn *turn : all) {
    if (!turn->trainable) continue;
    double turn_sum = 0.0;
    for (std::size_t t = turn->begin; t < turn->end; ++t) {
      turn_sum += token_losses[t];
    }
    total += turn_sum / static_cast<double>(turn->end - turn->begin);
    ++trainable_turns;
  }
  if (trainable_turns == 0) {
    throw InputError("segmentation has no trainable turns");
  }
  return total / static_cast<double>(trainable_turns);
}

PackedBatch build_packed_batch(const std::vector<std::vector<int>> &samples,
                               std::size_t max_len) {
  if (samples.empty()) {
    throw InputError("cannot pack zero samples");
  }
  std::size_t total = 0;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    if (samples[s].empty()) {
      throw InputError("sample " + std::to_string(s) + " is empty");
    }
    if (samples[s].size() > max_len) {
      throw InputError("sample " + std::to_string(s) + " has " +
                       std::to_string(samples[s].size()) +
                       " tokens, exceeding max_len " +
                       std::to_string(max_len));
    }
    total += samples[s].size();
  }
  if (total > max_len) {
    throw InputError("packed length " + std::to_string(total) +
                     " exceeds max_len " + std::to_string(max_len));
  }
  PackedBatch batch;
  batch.token_ids.reserve(total);
  for (std::size_t s = 0; s < samples.size(); ++s) {
    batch.sample_offsets.push_back(batch.token_ids.size());
    for (std::size_t t = 0; t < samples[s].size(); ++t) {
      batch.token_ids.push_back(samples[s][t]);
      batch.sample_ids.push_back(static_cast<int>(s));
      batch.positions.push_back(static_cast<int>(t));
    }
  }
  return batch;
}

std::vector<PackedBatch> pack_greedy(const std::vector<std::vector<int>> &samples,
                                     std::size_t max_len) {
  std::vector<PackedBatch> out;
  std::vector<std::vector<int>> current;
  std::size_t current_len = 0;
  for (const auto &sample : samples) {
    if (sample.size() > max_len) {
      throw InputError("sample of " + std::to_string(sample.size()) +
                       " tokens exceeds max_len " + std::to_string(max_len));
    }
    if (current_len + sample.size() > max_len && !current.empty()) {
      out.push_back(build_packed_batch(current, max_len));
      current.clear();
      current_len = 0;
    }
    current.push_back(sample);
    current_len += sample.size();
  }
  if (!current.empty()) {
    out.push_back(build_packed_batch(current, max_len));
  }
  return out;
}

BalanceMetrics balance_metrics(const std::vector<GateDecision> &decisions,
                               int n_experts) {
  if (decisions.empty()) {
    throw InputError("balance_metrics needs at least one decision");
  }
  if (n_experts < 1) {
    throw ConfigError("n_experts must be positive");
  }
  BalanceMetrics m;
  m.counts.assign(n_experts, 0);
  long total = 0;
  for (const auto &d : decisions) {
    for (std::size_t t = 0; t < d.tokens; ++t) {
      for (int s = 0; s < d.k; ++s) {
        const int j = d.index(t, s);
        if (j < 0 || j >= n_experts) {
          throw InputError("expert index " + std::to_string(j) +
                           " outside [0, " + std::to_string(n_experts) + ")");
        }
        ++m.counts[j];
        ++total;
      }
    }
  }
  if (total == 0) {
    throw InputError("decisions contain no selections");
  }
  const double mean =
      static_cast<double>(total) / static_cast<double>(n_experts);
  const long mx = *std::max_element(m.counts.begin(), m.counts.end());
  m.max_over_mean = static_cast<double>(mx) / mean;
  for (long c : m.counts) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    m.entropy -= p * std::log(p);
  }
  return m;
}

namespace {

std::vector<nlohmann::json> parse_jsonl(const std::string &path) {
  std::ifstream is(path);
  if (!is) {
    throw IoError("cannot open: " + path);
  }
  std::vector<nlohmann::json> lines;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      lines.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception &e) {
      throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return lines;
}

} // namespace

TurnSegmentation segmentation_from_jsonl(const std::string &path) {
  TurnSegmentation seg;
  for (const auto &j : parse_jsonl(path)) {
    try {
      const std::size_t sample = j.at("sample").get<std::size_t>();
      if (sample >= seg.samples.size()) {
        seg.samples.resize(sample + 1);
      }
      Turn turn;
      turn.begin = j.at("begin").get<std::size_t>();
      turn.end = j.at("end").get<std::size_t>();
      turn.trainable = j.at("trainable").get<bool>();
      seg.samples[sample].turns.push_back(turn);
    } catch (const nlohmann::json::exception &e) {
      throw IoError(path + ": " + e.what());
    }
  }
  return seg;
}

std::vector<std::vector<int>> samples_from_jsonl(const std::string &path) {
  std::vector<std::vector<int>> samples;
  for (const auto &j : parse_jsonl(path)) {
    try {
      const std::size_t sample = j.at("sample").get<std::size_t>();
      if (sample >= samples.size()) {
        samples.resize(sample + 1);
      }
      samples[sample] = j.at("tokens").get<std::vector<int>>();
    } catch (const nlohmann::json::exception &e) {
      throw IoError(path + ": " + e.what());
    }
  }
  return samples;
}

} // namespace m2
