#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "m2/model.hpp"

namespace m2 {

// Abstract device: how many routed experts fit in fast memory and how long
// loads/compute take (unitless). Shared experts are permanently resident;
// only routed experts contend for cache.
struct DeviceSpec {
  int cache_capacity_experts = 8;
  double load_time_per_expert = 1.0;
  double attn_compute_time_per_layer = 1.0;
  double expert_compute_time_per_expert = 0.25;
  bool overlap_enabled = true;
};

DeviceSpec device_from_json(const nlohmann::json &j);
nlohmann::json device_to_json(const DeviceSpec &d);

// One MoE layer's expert working set. Expert identity is (group, expert):
// per-layer pools give every layer its own group index, so nothing is
// shared; group pools make reuse within a group visible.
struct TraceRecord {
  int layer = 0;
  int group = 0;
  RoutingMode mode = RoutingMode::standard;
  std::vector<int> experts; // distinct, selection order preserved
};

using SelectionTrace = std::vector<TraceRecord>;

SelectionTrace trace_from_forward(const ForwardTrace &fwd);
SelectionTrace trace_from_jsonl(const std::string &path);
std::string trace_to_jsonl(const SelectionTrace &trace);

struct LayerTimeline {
  int layer = 0;
  int group = 0;
  double gate_ready = 0.0;
  double load_start = 0.0;
  double load_end = 0.0;
  double compute_start = 0.0;
  double compute_end = 0.0;
  double stall = 0.0;
  int selected = 0;
  int hits = 0;
  int misses = 0;
  int reloads = 0;
};

struct SimReport {
  double total_latency = 0.0;
  double stall_time = 0.0;
  long loads = 0;
  long cache_hits = 0;
  long intra_group_reloads = 0;
  long total_selected = 0; // loads + cache_hits == total_selected
  std::vector<LayerTimeline> timeline;

  nlohmann::json to_json() const;
  std::string timeline_csv() const;
};

using ExpertKey = std::pair<int, int>; // (group, expert)

struct CacheEntryView {
  ExpertKey key;
  long last_use = 0;  // tick of the most recent touch
  long loaded_at = 0; // tick when the load was requested
};

// Eviction policy over the evictable (unpinned) entries. `next_record` is
// the index into the trace of the record whose miss forced the eviction,
// which lets an oracle policy look ahead.
class CachePolicy {
public:
  virtual ~CachePolicy() = default;
  virtual std::string name() const = 0;
  virtual void begin(const SelectionTrace &trace) { (void)trace; }
  virtual ExpertKey pick_victim(const std::vector<CacheEntryView> &evictable,
                                std::size_t next_record) = 0;
};

class LruPolicy : public CachePolicy {
public:
  std::string name() const override { return "lru"; }
  ExpertKey pick_victim(const std::vector<CacheEntryView> &evictable,
                        std::size_t next_record) override;
};

class FifoPolicy : public CachePolicy {
public:
  std::string name() const override { return "fifo"; }
  ExpertKey pick_victim(const std::vector<CacheEntryView> &evictable,
                        std::size_t next_record) override;
};

// Evicts the entry whose next use lies farthest in the future (never-used
// entries first). An upper bound to compare tunable policies against.
class BeladyPolicy : public CachePolicy {
public:
  std::string name() const override { return "belady"; }
  void begin(const SelectionTrace &trace) override;
  ExpertKey pick_victim(const std::vector<CacheEntryView> &evictable,
                        std::size_t next_record) override;

private:
  std::map<ExpertKey, std::vector<std::size_t>> uses_;
};

std::unique_ptr<CachePolicy> make_policy(const std::string &name);

// Event-driven walk over the trace with one load channel and one compute
// channel per layer phase (attention, then expert compute). Gating:
//   - pre-gated records may start their loads when the layer's input is
//     ready (end of the previous layer), overlapping this layer's attention
//     window when the device allows overlap;
//   - all other records wait for the layer's own gate, i.e. the end of the
//     layer's attention.
// Experts touched by the current group stay pinned until the group ends.
SimReport simulate(const SelectionTrace &trace, const DeviceSpec &device,
                   CachePolicy &policy);
SimReport simulate(const SelectionTrace &trace, const DeviceSpec &device);

// Builds one model per routing mode from the same config/seed, collects a
// selection trace from a real forward over `token_ids`, and simulates each
// under the same device.
std::map<RoutingMode, SimReport> compare_modes(const ModelConfig &cfg,
                                               const DeviceSpec &device,
                                               const std::vector<int> &token_ids);

} // namespace m2
