// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <string>
#include <vector>

#include "cmt/error.hpp"

namespace cmt {

struct AutoscalePolicy {
  double high_watermark = 4.0;     ///< mean queue depth that triggers scale-up
  double low_watermark_pct = 20.0; ///< utilisation (%) below which replicas are idle
  double cooldown_s = 10.0;        ///< idle time required before scale-down
  std::size_t max_replicas = 4;

  void validate() const {
    if (max_replicas < 1) throw ConfigError("autoscaler max_replicas must be >= 1");
    if (!(high_watermark >= 0.0)) throw ConfigError("autoscaler high_watermark must be >= 0");
    if (!(low_watermark_pct >= 0.0 && low_watermark_pct <= 100.0))
      throw ConfigError("autoscaler low_watermark_pct must be in [0, 100]");
    if (!(cooldown_s >= 0.0)) throw ConfigError("autoscaler cooldown_s must be >= 0");
  }
};

/// One observation of a stage: queue depth counts requests waiting or running.
struct LoadSample {
  double time_s = 0.0;
  double queue_depth = 0.0;
  double utilization = 0.0;  ///< fraction of replica time spent computing, 0..1
  double requests_per_s = 0.0;
};

enum class ScaleAction { scale_up, scale_down, hold };

inline const char* to_string(ScaleAction a) {
  switch (a) {
    case ScaleAction::scale_up: return "scale_up";
    case ScaleAction::scale_down: return "scale_down";
    case ScaleAction::hold: return "hold";
  }
  return "?";
}

struct ScalingDecision {
  std::string stage;
  double requests_per_s = 0.0;
  double queue_depth = 0.0;
  ScaleAction action = ScaleAction::hold;
  std::size_t replicas = 1;  ///< count after the action
};

/// Pure policy over a metrics window (oldest first).
///  - scale up when mean queue depth > high watermark and replicas < max;
///  - scale down when the window spans >= cooldown, mean utilisation is under
///    the low watermark, no sample saw a queue, and replicas > 1;
///  - otherwise hold. Replica counts are clamped into [1, max].
inline ScalingDecision autoscale(const std::string& stage, const std::vector<LoadSample>& window,
                                 std::size_t replicas, const AutoscalePolicy& p) {
  ScalingDecision d;
  d.stage = stage;
  const std::size_t cap = std::max<std::size_t>(1, p.max_replicas);
  d.replicas = std::min(std::max<std::size_t>(1, replicas), cap);
  if (window.empty()) return d;
  double depth = 0, util = 0, rate = 0;
  bool queued = false;
  for (const auto& s : window) {
    depth += s.queue_depth;
    util += s.utilization;
    rate += s.requests_per_s;
    queued = queued || s.queue_depth > 0.0;
  }
  const double n = static_cast<double>(window.size());
  d.queue_depth = depth / n;
  d.requests_per_s = rate / n;
  const double span = window.back().time_s - window.front().time_s;
  if (d.queue_depth > p.high_watermark && d.replicas < cap) {
    d.action = ScaleAction::scale_up;
    ++d.replicas;
  } else if (!queued && d.replicas > 1 && span >= p.cooldown_s && 100.0 * util / n < p.low_watermark_pct) {
    d.action = ScaleAction::scale_down;
    --d.replicas;
  }
  return d;
}

}  // namespace cmt
