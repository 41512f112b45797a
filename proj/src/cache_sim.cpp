#include "m2/cache_sim.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <limits>
#include <queue>
#include <set>
#include <sstream>

namespace m2 {

DeviceSpec device_from_json(const nlohmann::json &j) {
  DeviceSpec d;
  try {
    for (const auto &[key, value] : j.items()) {
      if (key == "cache_capacity_experts")
        d.cache_capacity_experts = value.get<int>();
      else if (key == "load_time_per_expert")
        d.load_time_per_expert = value.get<double>();
      else if (key == "attn_compute_time_per_layer")
        d.attn_compute_time_per_layer = value.get<double>();
      else if (key == "expert_compute_time_per_expert")
        d.expert_compute_time_per_expert = value.get<double>();
      else if (key == "overlap_enabled")
        d.overlap_enabled = value.get<bool>();
      else
        throw IoError("unknown device key '" + key + "'");
    }
  } catch (const nlohmann::json::exception &e) {
    throw IoError(std::string("bad device value: ") + e.what());
  }
  if (d.load_time_per_expert < 0 || d.attn_compute_time_per_layer < 0 ||
      d.expert_compute_time_per_expert < 0) {
    throw ConfigError("device times must be >= 0");
  }
  return d;
}

nlohmann::json device_to_json(const DeviceSpec &d) {
  return {{"cache_capacity_experts", d.cache_capacity_experts},
          {"load_time_per_expert", d.load_time_per_expert},
          {"attn_compute_time_per_layer", d.attn_compute_time_per_layer},
          {"expert_compute_time_per_expert", d.expert_compute_time_per_expert},
          {"overlap_enabled", d.overlap_enabled}};
}

SelectionTrace trace_from_forward(const ForwardTrace &fwd) {
  SelectionTrace trace;
  for (const auto &entry : fwd) {
    TraceRecord rec;
    rec.layer = entry.layer;
    rec.group = entry.group;
    rec.mode = entry.mode;
    // distinct experts, first-occurrence order across tokens and slots
    std::set<int> seen;
    for (std::size_t t = 0; t < entry.decision.tokens; ++t) {
      for (int s = 0; s < entry.decision.k; ++s) {
        const int j = entry.decision.index(t, s);
        if (seen.insert(j).second) {
          rec.experts.push_back(j);
        }
      }
    }
    trace.push_back(std::move(rec));
  }
  return trace;
}

SelectionTrace trace_from_jsonl(const std::string &path) {
  std::ifstream is(path);
  if (!is) {
    throw IoError("cannot open: " + path);
  }
  SelectionTrace trace;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
      TraceRecord rec;
      rec.layer = j.at("layer").get<int>();
      rec.group = j.at("group").get<int>();
      rec.mode = routing_mode_from_string(j.at("mode").get<std::string>());
      rec.experts = j.at("experts").get<std::vector<int>>();
      trace.push_back(std::move(rec));
    } catch (const nlohmann::json::exception &e) {
      throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return trace;
}

std::string trace_to_jsonl(const SelectionTrace &trace) {
  std::string out;
  for (const auto &rec : trace) {
    nlohmann::json j{{"layer", rec.layer},
                     {"group", rec.group},
                     {"mode", to_string(rec.mode)},
                     {"experts", rec.experts}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

nlohmann::json SimReport::to_json() const {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto &row : timeline) {
    layers.push_back({{"layer", row.layer},
                      {"group", row.group},
                      {"gate_ready", row.gate_ready},
                      {"load_start", row.load_start},
                      {"load_end", row.load_end},
                      {"compute_start", row.compute_start},
                      {"compute_end", row.compute_end},
                      {"stall", row.stall},
                      {"selected", row.selected},
                      {"hits", row.hits},
                      {"misses", row.misses},
                      {"reloads", row.reloads}});
  }
  return {{"total_latency", total_latency},
          {"stall_time", stall_time},
          {"loads", loads},
          {"cache_hits", cache_hits},
          {"intra_group_reloads", intra_group_reloads},
          {"total_selected", total_selected},
          {"timeline", layers}};
}

std::string SimReport::timeline_csv() const {
  std::ostringstream os;
  os << "layer,group,gate_ready,load_start,load_end,compute_start,"
        "compute_end,stall,selected,hits,misses,reloads\n";
  for (const auto &r : timeline) {
    os << r.layer << ',' << r.group << ',' << r.gate_ready << ','
       << r.load_start << ',' << r.load_end << ',' << r.compute_start << ','
       << r.compute_end << ',' << r.stall << ',' << r.selected << ','
       << r.hits << ',' << r.misses << ',' << r.reloads << '\n';
  }
  return os.str();
}

ExpertKey LruPolicy::pick_victim(const std::vector<CacheEntryView> &evictable,
                                 std::size_t) {
  const auto it = std::min_element(
      evictable.begin(), evictable.end(), [](const auto &a, const auto &b) {
        return a.last_use < b.last_use ||
               (a.last_use == b.last_use && a.key < b.key);
      });
  return it->key;
}

ExpertKey FifoPolicy::pick_victim(const std::vector<CacheEntryView> &evictable,
                                  std::size_t) {
  const auto it = std::min_element(
      evictable.begin(), evictable.end(), [](const auto &a, const auto &b) {
        return a.loaded_at < b.loaded_at ||
               (a.loaded_at == b.loaded_at && a.key < b.key);
      });
  return it->key;
}

void BeladyPolicy::begin(const SelectionTrace &trace) {
  uses_.clear();
  for (std::size_t r = 0; r < trace.size(); ++r) {
    for (int e : trace[r].experts) {
      uses_[{trace[r].group, e}].push_back(r);
    }
  }
}

ExpertKey BeladyPolicy::pick_victim(const std::vector<CacheEntryView> &evictable,
                                    std::size_t next_record) {
  constexpr std::size_t kNever = std::numeric_limits<std::size_t>::max();
  ExpertKey best = evictable.front().key;
  std::size_t best_use = 0;
  bool first = true;
  for (const auto &entry : evictable) {
    std::size_t next_use = kNever;
    const auto it = uses_.find(entry.key);
    if (it != uses_.end()) {
      const auto &v = it->second;
      const auto pos = std::lower_bound(v.begin(), v.end(), next_record);
      if (pos != v.end()) next_use = *pos;
    }
    if (first || next_use > best_use ||
        (next_use == best_use && entry.key < best)) {
      best = entry.key;
      best_use = next_use;
      first = false;
    }
  }
  return best;
}

std::unique_ptr<CachePolicy> make_policy(const std::string &name) {
  if (name == "lru") return std::make_unique<LruPolicy>();
  if (name == "fifo") return std::make_unique<FifoPolicy>();
  if (name == "belady") return std::make_unique<BeladyPolicy>();
  throw ConfigError("unknown cache policy '" + name + "'");
}

namespace {

enum class EventKind { attn_start, attn_done, load_done, compute_done };

struct Event {
  double time = 0.0;
  long seq = 0;
  EventKind kind{};
  std::size_t record = 0;

  bool operator>(const Event &other) const {
    return time > other.time || (time == other.time && seq > other.seq);
  }
};

struct CacheEntry {
  long last_use = 0;
  long loaded_at = 0;
};

struct LoadRequest {
  ExpertKey key;
  std::size_t record = 0;
  long touch_tick = 0;
};

struct Simulation {
  const SelectionTrace &trace;
  const DeviceSpec &device;
  CachePolicy &policy;

  std::priority_queue<Event, std::vector<Event>, std::greater<Event>> events;
  long next_seq = 0;
  long tick = 0;      // logical touch counter for recency
  long load_tick = 0; // insertion counter

  std::map<ExpertKey, CacheEntry> cache;
  std::set<ExpertKey> in_flight; // queued or loading
  std::map<ExpertKey, std::vector<std::size_t>> waiters;
  std::deque<LoadRequest> load_queue;
  bool load_busy = false;
  ExpertKey loading_key{};

  int current_group = -1;
  std::set<ExpertKey> group_touched; // keys this group has hit or loaded
  std::set<ExpertKey> hard_pinned;   // needed by a record awaiting compute

  std::vector<int> pending;     // outstanding loads per record
  std::vector<bool> attn_done;
  std::vector<bool> gate_fired;
  std::vector<bool> load_started;
  std::vector<bool> compute_started;
  SimReport report;

  Simulation(const SelectionTrace &t, const DeviceSpec &d, CachePolicy &p)
      : trace(t), device(d), policy(p) {}

  void push(double time, EventKind kind, std::size_t record) {
    events.push(Event{time, next_seq++, kind, record});
  }

  bool pregated_overlap(const TraceRecord &rec) const {
    return device.overlap_enabled && rec.mode == RoutingMode::pregated;
  }

  void run() {
    report.timeline.resize(trace.size());
    pending.assign(trace.size(), 0);
    attn_done.assign(trace.size(), false);
    gate_fired.assign(trace.size(), false);
    load_started.assign(trace.size(), false);
    compute_started.assign(trace.size(), false);
    for (std::size_t r = 0; r < trace.size(); ++r) {
      report.timeline[r].layer = trace[r].layer;
      report.timeline[r].group = trace[r].group;
      report.timeline[r].selected = static_cast<int>(trace[r].experts.size());
      report.total_selected += static_cast<long>(trace[r].experts.size());
    }
    policy.begin(trace);
    if (!trace.empty()) {
      push(0.0, EventKind::attn_start, 0);
    }
    while (!events.empty()) {
      const Event ev = events.top();
      events.pop();
      dispatch(ev);
    }
    for (const auto &row : report.timeline) {
      report.total_latency = std::max(report.total_latency, row.compute_end);
    }
  }

  void dispatch(const Event &ev) {
    switch (ev.kind) {
    case EventKind::attn_start: {
      if (pregated_overlap(trace[ev.record])) {
        fire_gate(ev.record, ev.time);
      }
      push(ev.time + device.attn_compute_time_per_layer, EventKind::attn_done,
           ev.record);
      break;
    }
    case EventKind::attn_done: {
      attn_done[ev.record] = true;
      if (!gate_fired[ev.record]) {
        fire_gate(ev.record, ev.time);
      }
      maybe_start_compute(ev.record, ev.time);
      break;
    }
    case EventKind::load_done: {
      complete_load(ev.time);
      break;
    }
    case EventKind::compute_done: {
      finish_compute(ev.record, ev.time);
      break;
    }
    }
  }

  void fire_gate(std::size_t r, double now) {
    gate_fired[r] = true;
    const TraceRecord &rec = trace[r];
    LayerTimeline &row = report.timeline[r];
    row.gate_ready = now;
    row.load_start = now;
    row.load_end = now;

    if (rec.group != current_group) {
      current_group = rec.group;
      group_touched.clear();
    }
    for (int e : rec.experts) {
      const ExpertKey key{rec.group, e};
      ++tick;
      hard_pinned.insert(key);
      if (auto it = cache.find(key); it != cache.end()) {
        it->second.last_use = tick;
        ++report.cache_hits;
        ++row.hits;
        group_touched.insert(key);
      } else if (in_flight.count(key)) {
        // an earlier request is already fetching this expert
        waiters[key].push_back(r);
        ++pending[r];
        ++report.cache_hits;
        ++row.hits;
      } else {
        ++report.loads;
        ++row.misses;
        if (group_touched.count(key)) {
          ++report.intra_group_reloads;
          ++row.reloads;
        }
        in_flight.insert(key);
        waiters[key].push_back(r);
        ++pending[r];
        load_queue.push_back(LoadRequest{key, r, tick});
      }
    }
    service_load_channel(now);
  }

  void service_load_channel(double now) {
    if (load_busy || load_queue.empty()) {
      return;
    }
    const LoadRequest req = load_queue.front();
    load_queue.pop_front();
    load_busy = true;
    loading_key = req.key;
    if (!load_started[req.record]) {
      load_started[req.record] = true;
      report.timeline[req.record].load_start = now;
    }
    push(now + device.load_time_per_expert, EventKind::load_done, req.record);
  }

  void complete_load(double now) {
    const ExpertKey key = loading_key;
    load_busy = false;
    in_flight.erase(key);
    insert_into_cache(key);
    group_touched.insert(key);
    auto w = waiters.find(key);
    if (w != waiters.end()) {
      for (std::size_t r : w->second) {
        --pending[r];
        report.timeline[r].load_end = now;
        if (pending[r] == 0 && attn_done[r]) {
          maybe_start_compute(r, now);
        }
      }
      waiters.erase(w);
    }
    service_load_channel(now);
  }

  void insert_into_cache(const ExpertKey &key) {
    if (static_cast<int>(cache.size()) >= device.cache_capacity_experts) {
      evict_one();
    }
    CacheEntry entry;
    entry.last_use = tick;
    entry.loaded_at = ++load_tick;
    cache[key] = entry;
  }

  void evict_one() {
    std::vector<CacheEntryView> free_entries;
    std::vector<CacheEntryView> soft_pinned;
    for (const auto &[key, entry] : cache) {
      if (hard_pinned.count(key)) {
        continue;
      }
      const CacheEntryView view{key, entry.last_use, entry.loaded_at};
      if (group_touched.count(key)) {
        soft_pinned.push_back(view);
      } else {
        free_entries.push_back(view);
      }
    }
    std::size_t next_record = trace.size();
    for (std::size_t r = 0; r < trace.size(); ++r) {
      if (!compute_started[r]) {
        next_record = r;
        break;
      }
    }
    if (!free_entries.empty()) {
      cache.erase(policy.pick_victim(free_entries, next_record));
      return;
    }
    if (!soft_pinned.empty()) {
      // the group's working set exceeds capacity; give up the oldest pin
      LruPolicy lru;
      cache.erase(lru.pick_victim(soft_pinned, next_record));
      return;
    }
    throw ConfigError("cache deadlock: every resident expert is pinned");
  }

  void maybe_start_compute(std::size_t r, double now) {
    if (compute_started[r] || !attn_done[r] || pending[r] != 0 ||
        !gate_fired[r]) {
      return;
    }
    compute_started[r] = true;
    LayerTimeline &row = report.timeline[r];
    row.compute_start = now;
    row.compute_end =
        now + static_cast<double>(trace[r].experts.size()) *
                  device.expert_compute_time_per_expert;
    push(row.compute_end, EventKind::compute_done, r);
  }

  void finish_compute(std::size_t r, double now) {
    for (int e : trace[r].experts) {
      hard_pinned.erase(ExpertKey{trace[r].group, e});
    }
    if (r + 1 < trace.size()) {
      push(now, EventKind::attn_start, r + 1);
    }
  }
};

} // namespace

SimReport simulate(const SelectionTrace &trace, const DeviceSpec &device,
                   CachePolicy &policy) {
  if (device.cache_capacity_experts < 1) {
    throw ConfigError("cache_capacity_experts must be >= 1");
  }
  for (const auto &rec : trace) {
    std::set<int> seen;
    for (int e : rec.experts) {
      if (e < 0) {
        throw InputError("negative expert id in trace record for layer " +
                         std::to_string(rec.layer));
      }
      if (!seen.insert(e).second) {
        throw InputError("duplicate expert id in trace record for layer " +
                         std::to_string(rec.layer));
      }
    }
    if (static_cast<int>(rec.experts.size()) >
        device.cache_capacity_experts) {
      throw ConfigError("cache capacity " +
                        std::to_string(device.cache_capacity_experts) +
                        " cannot hold the " +
                        std::to_string(rec.experts.size()) +
                        " experts selected by layer " +
                        std::to_string(rec.layer));
    }
  }
  Simulation sim(trace, device, policy);
  sim.run();
  // attention end of layer r is gate time for non-overlapped records and
  // attn_start + A for overlapped ones; stall is compute_start - attn_end
  double prev_end = 0.0;
  for (std::size_t r = 0; r < sim.report.timeline.size(); ++r) {
    LayerTimeline &row = sim.report.timeline[r];
    const double attn_end = prev_end + device.attn_compute_time_per_layer;
    row.stall = row.compute_start - attn_end;
    prev_end = row.compute_end;
  }
  sim.report.stall_time = 0.0;
  for (const auto &row : sim.report.timeline) {
    sim.report.stall_time += row.stall;
  }
  return sim.report;
}

SimReport simulate(const SelectionTrace &trace, const DeviceSpec &device) {
  LruPolicy lru;
  return simulate(trace, device, lru);
}

std::map<RoutingMode, SimReport> compare_modes(const ModelConfig &cfg,
                                               const DeviceSpec &device,
                                               const std::vector<int> &token_ids) {
  std::map<RoutingMode, SimReport> out;
  for (RoutingMode mode : {RoutingMode::standard, RoutingMode::shared,
                           RoutingMode::pregated}) {
    ModelConfig mode_cfg = cfg;
    mode_cfg.routing_mode = mode;
    const Model model = Model::build(mode_cfg);
    ForwardTrace fwd;
    ForwardOptions opts;
    opts.trace = &fwd;
    model.forward(token_ids, opts);
    out.emplace(mode, simulate(trace_from_forward(fwd), device));
  }
  return out;
}

} // namespace m2
