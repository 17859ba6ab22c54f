// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "cmt/metrics.hpp"
#include "cmt/serving/gateway.hpp"

namespace cmt {

struct LatencyStats {
  std::size_t count = 0;
  double mean = 0.0, p50 = 0.0, p95 = 0.0, p99 = 0.0;
  double mean_visual = 0.0, mean_audio = 0.0, mean_text = 0.0, mean_fuse = 0.0, mean_transport = 0.0;
  double mean_encode_phase = 0.0;
};

/// Nearest-rank percentile of an ascending-sorted population.
inline double percentile(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw InputError("percentile of an empty population");
  const double rank = std::ceil(q / 100.0 * static_cast<double>(sorted.size()));
  const std::size_t i = rank < 1.0 ? 0 : static_cast<std::size_t>(rank) - 1;
  return sorted[std::min(i, sorted.size() - 1)];
}

inline LatencyStats latency_stats(const std::vector<LatencyRecord>& recs) {
  LatencyStats s;
  s.count = recs.size();
  if (recs.empty()) return s;
  std::vector<double> totals;
  for (const auto& r : recs) {
    totals.push_back(r.total_ms);
    s.mean += r.total_ms;
    s.mean_visual += r.visual_ms;
    s.mean_audio += r.audio_ms;
    s.mean_text += r.text_ms;
    s.mean_fuse += r.fuse_ms;
    s.mean_transport += r.transport_ms;
    s.mean_encode_phase += r.encode_phase_ms;
  }
  const double n = static_cast<double>(recs.size());
  for (double* v : {&s.mean, &s.mean_visual, &s.mean_audio, &s.mean_text, &s.mean_fuse, &s.mean_transport,
                    &s.mean_encode_phase})
    *v /= n;
  std::sort(totals.begin(), totals.end());
  s.p50 = percentile(totals, 50);
  s.p95 = percentile(totals, 95);
  s.p99 = percentile(totals, 99);
  return s;
}

struct Workload {
  std::size_t requests = 100;
  std::size_t concurrency = 1;
  double rate_per_s = 0.0;  ///< > 0: open loop at this arrival rate; 0: closed loop
  bool sequential_baseline = false;
};

/// One inference; `sequential` asks for encoders one after another.
using InferFn = std::function<InferResult(const MultimodalSample&, bool sequential)>;

struct BenchReport {
  std::vector<LatencyRecord> records;
  LatencyStats stats;
  double wall_s = 0.0;
  double throughput_rps = 0.0;
  bool incomplete = false;
  std::string error;
  std::optional<LatencyStats> baseline;
  double speedup = 0.0;  ///< baseline mean / concurrent mean, when a baseline ran
};

namespace detail {

inline BenchReport run_phase(const InferFn& infer, const std::vector<MultimodalSample>& samples, const Workload& w,
                             bool sequential) {
  if (samples.empty()) throw InputError("bench needs at least one sample");
  if (w.concurrency == 0) throw ConfigError("bench concurrency must be >= 1");
  BenchReport rep;
  std::mutex mu;
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  const auto t0 = net::Clock::now();
  auto worker = [&] {
    for (;;) {
      const std::size_t i = next++;
      if (i >= w.requests || failed) return;
      if (w.rate_per_s > 0.0)
        std::this_thread::sleep_until(t0 + std::chrono::duration_cast<net::Clock::duration>(
                                               std::chrono::duration<double>(static_cast<double>(i) / w.rate_per_s)));
      try {
        InferResult r = infer(samples[i % samples.size()], sequential);
        std::lock_guard lk(mu);
        rep.records.push_back(r.latency);
      } catch (const Error& e) {
        std::lock_guard lk(mu);
        if (!failed.exchange(true)) rep.error = e.what();
        return;
      }
    }
  };
  std::vector<std::thread> threads;
  for (std::size_t k = 0; k < w.concurrency; ++k) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  rep.wall_s = std::chrono::duration<double>(net::Clock::now() - t0).count();
  rep.incomplete = failed;
  std::sort(rep.records.begin(), rep.records.end(),
            [](const LatencyRecord& a, const LatencyRecord& b) { return a.request_id < b.request_id; });
  rep.stats = latency_stats(rep.records);
  rep.throughput_rps = rep.wall_s > 0 ? static_cast<double>(rep.records.size()) / rep.wall_s : 0.0;
  return rep;
}

}  // namespace detail

/// Runs the workload, then (optionally) the same workload with sequential
/// encoder dispatch to report the fan-out speedup.
inline BenchReport run_bench(const InferFn& infer, const std::vector<MultimodalSample>& samples, const Workload& w) {
  BenchReport rep = detail::run_phase(infer, samples, w, false);
  if (w.sequential_baseline && !rep.incomplete) {
    BenchReport base = detail::run_phase(infer, samples, w, true);
    if (base.incomplete) {
      rep.incomplete = true;
      rep.error = "baseline: " + base.error;
    } else {
      rep.baseline = base.stats;
      if (rep.stats.mean > 0) rep.speedup = base.stats.mean / rep.stats.mean;
    }
  }
  return rep;
}

inline std::string bench_csv(const BenchReport& r) {
  std::ostringstream os;
  os << "request_id,total_ms,visual_ms,audio_ms,text_ms,fuse_ms,transport_ms\n";
  auto row = [&](const std::string& id, double t, double v, double a, double x, double f, double tr) {
    os << id << ',' << format_fixed(t, 1) << ',' << format_fixed(v, 1) << ',' << format_fixed(a, 1) << ','
       << format_fixed(x, 1) << ',' << format_fixed(f, 1) << ',' << format_fixed(tr, 1) << '\n';
  };
  for (const auto& l : r.records)
    row(std::to_string(l.request_id), l.total_ms, l.visual_ms, l.audio_ms, l.text_ms, l.fuse_ms, l.transport_ms);
  const auto& s = r.stats;
  row(r.incomplete ? "mean_incomplete" : "mean", s.mean, s.mean_visual, s.mean_audio, s.mean_text, s.mean_fuse,
      s.mean_transport);
  return os.str();
}

inline std::string format_bench(const BenchReport& r) {
  std::ostringstream os;
  const auto& s = r.stats;
  os << "requests     " << s.count << (r.incomplete ? " (incomplete: " + r.error + ")" : std::string()) << '\n'
     << "latency ms   mean " << format_fixed(s.mean, 1) << "  p50 " << format_fixed(s.p50, 1) << "  p95 "
     << format_fixed(s.p95, 1) << "  p99 " << format_fixed(s.p99, 1) << '\n'
     << "encode phase " << format_fixed(s.mean_encode_phase, 1) << " ms, fuse " << format_fixed(s.mean_fuse, 1)
     << " ms, transport " << format_fixed(s.mean_transport, 1) << " ms\n"
     << "throughput   " << format_fixed(r.throughput_rps, 1) << " req/s\n";
  if (r.baseline)
    os << "sequential   mean " << format_fixed(r.baseline->mean, 1) << " ms, speedup " << format_fixed(r.speedup, 2)
       << "x\n";
  return os.str();
}

}  // namespace cmt
