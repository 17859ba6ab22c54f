// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <deque>
#include <future>
#include <map>

#include "cmt/serving/adapt.hpp"
#include "cmt/serving/autoscale.hpp"
#include "cmt/serving/service.hpp"

namespace cmt {

/// Per-request timings in milliseconds. Stage columns are the time each stage
/// spent computing; transport is the rest of the critical path (network,
/// serialisation, queueing).
struct LatencyRecord {
  std::uint64_t request_id = 0;
  double total_ms = 0.0;
  double visual_ms = 0.0;
  double audio_ms = 0.0;
  double text_ms = 0.0;
  double fuse_ms = 0.0;
  double transport_ms = 0.0;
  double encode_phase_ms = 0.0;  ///< dispatch of the encoders until the last reply
};

struct InferResult {
  EmotionDistribution distribution;
  std::optional<AdaptationDirective> directive;  ///< unset when the label has no adaptation rule
  LatencyRecord latency;
};

inline std::optional<AdaptationDirective> try_adapt(std::size_t category, const EmotionLabelSet& labels) {
  try {
    return adapt_response(category, labels);
  } catch (const InputError&) {
    return std::nullopt;
  }
}

/// Starts and stops stage replicas on behalf of the autoscaler.
class ReplicaLauncher {
 public:
  virtual ~ReplicaLauncher() = default;
  virtual net::Endpoint start(Stage s) = 0;
  virtual void stop(Stage s, const net::Endpoint& e) = 0;
};

struct GatewayOptions {
  std::chrono::milliseconds timeout{2000};
  AutoscalePolicy policy;
  std::chrono::milliseconds tick{1000};  ///< supervisor sampling period
  std::size_t window = 5;                ///< samples per scaling decision
};

class Gateway {
 public:
  using StageMap = std::map<Stage, std::vector<net::Endpoint>>;

  /// Connects to every replica, checks health and that all stages were built
  /// from the same configuration.
  Gateway(const StageMap& stages, GatewayOptions opt = {}, ReplicaLauncher* launcher = nullptr)
      : opt_(opt), launcher_(launcher) {
    opt_.policy.validate();
    for (Stage s : kAllStages) {
      auto it = stages.find(s);
      if (it == stages.end() || it->second.empty())
        throw ConfigError(std::string("no replicas configured for stage ") + stage_name(s));
      for (const auto& e : it->second) add_replica(s, e);
    }
  }

  Gateway(const Gateway&) = delete;
  Gateway& operator=(const Gateway&) = delete;
  ~Gateway() { stop_supervisor(); }

  const EmotionLabelSet& labels() const { return labels_; }
  const std::string& config_hash() const { return hash_; }

  /// Registers a replica after a health check.
  void add_replica(Stage s, const net::Endpoint& e) {
    const HealthInfo h = health(s, e);
    std::lock_guard lk(mu_);
    if (h.stage != stage_name(s))
      throw ServiceError("replica at " + e.str() + " serves stage " + h.stage + ", expected " + stage_name(s));
    if (hash_.empty()) {
      hash_ = h.config_hash;
      labels_ = EmotionLabelSet(h.labels);
    } else if (h.config_hash != hash_) {
      throw ServiceError(std::string("config hash mismatch: ") + stage_name(s) + " replica at " + e.str() + " has " +
                         h.config_hash + ", pipeline has " + hash_);
    }
    auto r = std::make_shared<Replica>();
    r->endpoint = e;
    group(s).replicas.push_back(std::move(r));
  }

  std::size_t replicas(Stage s) const {
    std::lock_guard lk(mu_);
    std::size_t n = 0;
    for (const auto& r : groups_.at(s).replicas) n += !r->draining;
    return n;
  }

  std::size_t outstanding(Stage s) const {
    std::lock_guard lk(mu_);
    std::size_t n = 0;
    for (const auto& r : groups_.at(s).replicas) n += r->outstanding;
    return n;
  }

  /// Full inference: concurrent encoder fan-out (or one after another when
  /// `sequential`), then fusion, then the adaptation directive.
  InferResult infer(const MultimodalSample& sample, bool sequential = false) {
    const std::uint64_t id = next_id_++;
    const auto t0 = net::Clock::now();
    std::array<wire::EncodeOutput, 3> enc;
    std::array<wire::Message, 3> requests;
    for (std::size_t i = 0; i < 3; ++i) {
      wire::EncodeInput in{static_cast<wire::StageTag>(i), {}, {}, {}};
      if (i == 0) in.visual = sample.visual;
      if (i == 1) in.audio = sample.audio;
      if (i == 2) in.text = sample.text;
      requests[i] = {wire::MsgType::encode_request, id, wire::encode_request_payload(in)};
    }
    auto encode = [&](std::size_t i) {
      const wire::Message reply = call(static_cast<Stage>(i), requests[i]);
      expect_type(reply, wire::MsgType::encode_response, static_cast<Stage>(i));
      return wire::decode_response_payload(reply.payload);
    };
    if (sequential) {
      for (std::size_t i = 0; i < 3; ++i) enc[i] = encode(i);
    } else {
      std::array<std::future<wire::EncodeOutput>, 3> f;
      for (std::size_t i = 0; i < 3; ++i) f[i] = std::async(std::launch::async, encode, i);
      std::exception_ptr first;
      for (std::size_t i = 0; i < 3; ++i) {
        try {
          enc[i] = f[i].get();
        } catch (...) {
          if (!first) first = std::current_exception();
        }
      }
      if (first) std::rethrow_exception(first);
    }
    const double encode_phase = elapsed_ms(t0);
    for (std::size_t i = 0; i < 3; ++i)
      if (enc[i].embedding.modality != static_cast<Modality>(i))
        throw ServiceError(std::string(stage_name(static_cast<Stage>(i))) + " stage returned a " +
                           modality_name(enc[i].embedding.modality) + " embedding");

    const wire::Message fuse_req{wire::MsgType::fuse_request, id,
                                 wire::fuse_request_payload(enc[0].embedding, enc[1].embedding, enc[2].embedding)};
    const wire::Message fuse_reply = call(Stage::fusion, fuse_req);
    expect_type(fuse_reply, wire::MsgType::fuse_response, Stage::fusion);
    const wire::FuseOutput fused = wire::decode_fuse_response(fuse_reply.payload);

    InferResult r;
    r.distribution = fused.distribution;
    r.directive = try_adapt(r.distribution.argmax, labels_);
    auto& L = r.latency;
    L.request_id = id;
    L.total_ms = elapsed_ms(t0);
    L.visual_ms = enc[0].service_ms;
    L.audio_ms = enc[1].service_ms;
    L.text_ms = enc[2].service_ms;
    L.fuse_ms = fused.service_ms;
    L.encode_phase_ms = encode_phase;
    const double compute = sequential ? L.visual_ms + L.audio_ms + L.text_ms
                                      : std::max({L.visual_ms, L.audio_ms, L.text_ms});
    L.transport_ms = std::max(0.0, L.total_ms - compute - L.fuse_ms);
    return r;
  }

  // --- elastic scaling ------------------------------------------------------

  /// Observes every stage once and applies the policy. Exposed so tests and
  /// the supervisor thread share one code path.
  std::vector<ScalingDecision> supervise_once() {
    std::vector<ScalingDecision> out;
    const auto now = net::Clock::now();
    for (Stage s : kAllStages) {
      ScalingDecision d;
      std::shared_ptr<Replica> victim;
      {
        std::lock_guard lk(mu_);
        reap_drained(s);
        auto& g = group(s);
        LoadSample sample;
        sample.time_s = std::chrono::duration<double>(now - epoch_).count();
        double busy = 0;
        std::size_t active = 0;
        for (auto& r : g.replicas) {
          sample.queue_depth += static_cast<double>(r->outstanding);
          busy += r->busy_seconds(now);
          active += !r->draining;
        }
        if (!g.window.empty()) {
          const double dt = sample.time_s - g.last_time;
          if (dt > 0 && active > 0) sample.utilization = std::clamp((busy - g.last_busy) / (dt * active), 0.0, 1.0);
          if (dt > 0) sample.requests_per_s = static_cast<double>(g.completed - g.last_completed) / dt;
        }
        g.last_time = sample.time_s;
        g.last_busy = busy;
        g.last_completed = g.completed;
        g.window.push_back(sample);
        // Keep enough history to judge the cooldown; scale-up only looks at
        // the most recent `window` samples.
        const double horizon = opt_.policy.cooldown_s + 2.0 * std::chrono::duration<double>(opt_.tick).count();
        while (g.window.size() > 1 && sample.time_s - g.window.front().time_s > horizon) g.window.pop_front();
        const std::size_t recent = std::min(g.window.size(), std::max<std::size_t>(opt_.window, 1));
        d = autoscale(stage_name(s), {g.window.end() - static_cast<std::ptrdiff_t>(recent), g.window.end()}, active,
                      opt_.policy);
        if (d.action != ScaleAction::scale_up) {
          const ScalingDecision slow = autoscale(stage_name(s), {g.window.begin(), g.window.end()}, active, opt_.policy);
          if (slow.action == ScaleAction::scale_down) d = slow;
        }
        if (!launcher_) d = {d.stage, d.requests_per_s, d.queue_depth, ScaleAction::hold, active};
        if (d.action == ScaleAction::scale_down) {
          for (auto it = g.replicas.rbegin(); it != g.replicas.rend(); ++it)
            if (!(*it)->draining) {
              (*it)->draining = true;
              victim = *it;
              break;
            }
          g.window.clear();
        }
      }
      if (d.action == ScaleAction::scale_up) {
        try {
          add_replica(s, launcher_->start(s));
          std::lock_guard lk(mu_);
          group(s).window.clear();
        } catch (const Error& e) {
          d.action = ScaleAction::hold;
          --d.replicas;
          log_line(std::string("scale_up of ") + stage_name(s) + " failed: " + e.what());
        }
      }
      if (victim) {
        std::lock_guard lk(mu_);
        reap_drained(s);
      }
      if (d.action != ScaleAction::hold) {
        log_line(std::string(to_string(d.action)) + " " + d.stage + " -> " + std::to_string(d.replicas) +
                 " replicas (queue " + std::to_string(d.queue_depth) + ")");
        std::lock_guard lk(mu_);
        decisions_.push_back(d);
      }
      out.push_back(d);
    }
    return out;
  }

  void start_supervisor() {
    if (supervisor_.joinable()) return;
    supervising_ = true;
    supervisor_ = std::thread([this] {
      std::unique_lock lk(sup_mu_);
      while (supervising_) {
        if (sup_cv_.wait_for(lk, opt_.tick, [this] { return !supervising_; })) break;
        lk.unlock();
        try {
          supervise_once();
        } catch (const Error& e) {
          log_line(std::string("supervisor: ") + e.what());
        }
        lk.lock();
      }
    });
  }

  void stop_supervisor() {
    {
      std::lock_guard lk(sup_mu_);
      supervising_ = false;
    }
    sup_cv_.notify_all();
    if (supervisor_.joinable()) supervisor_.join();
  }

  std::vector<ScalingDecision> decisions() const {
    std::lock_guard lk(mu_);
    return decisions_;
  }

  void set_logger(std::function<void(const std::string&)> f) {
    std::lock_guard lk(mu_);
    logger_ = std::move(f);
  }

 private:
  struct Replica {
    net::Endpoint endpoint;
    std::size_t outstanding = 0;
    bool draining = false;
    std::vector<std::unique_ptr<net::Connection>> idle;
    net::Clock::time_point busy_since{};
    double busy_s = 0.0;

    double busy_seconds(net::Clock::time_point now) const {
      return busy_s + (outstanding > 0 ? std::chrono::duration<double>(now - busy_since).count() : 0.0);
    }
  };

  struct Group {
    std::vector<std::shared_ptr<Replica>> replicas;
    std::deque<LoadSample> window;
    double last_time = 0.0, last_busy = 0.0;
    std::uint64_t completed = 0, last_completed = 0;
  };

  Group& group(Stage s) { return groups_[s]; }

  HealthInfo health(Stage s, const net::Endpoint& e) {
    try {
      net::Connection c(net::connect_to(e, opt_.timeout));
      const wire::Message reply =
          net::round_trip(c, {wire::MsgType::health, next_id_++, {}}, net::Clock::now() + opt_.timeout);
      if (reply.type != wire::MsgType::health)
        throw ServiceError(std::string("unexpected ") + wire::msg_type_name(reply.type) + " to health check");
      return parse_health(wire::decode_string_payload(reply.payload));
    } catch (const TimeoutError&) {
      throw TimeoutError(stage_name(s), std::string("health check of ") + stage_name(s) + " at " + e.str() + " timed out");
    } catch (const ServiceError& err) {
      throw ServiceError(std::string("health check of ") + stage_name(s) + " at " + e.str() + " failed: " + err.what());
    } catch (const FormatError& err) {
      throw ServiceError(std::string("health check of ") + stage_name(s) + " at " + e.str() + " failed: " + err.what());
    }
  }

  /// Least outstanding requests; ties go to the lowest index.
  std::shared_ptr<Replica> choose(Stage s) {
    std::shared_ptr<Replica> best;
    for (auto& r : group(s).replicas)
      if (!r->draining && (!best || r->outstanding < best->outstanding)) best = r;
    if (!best) throw ServiceError(std::string("no live replica for stage ") + stage_name(s));
    return best;
  }

  wire::Message call(Stage s, const wire::Message& req) {
    std::shared_ptr<Replica> r;
    std::unique_ptr<net::Connection> conn;
    {
      std::lock_guard lk(mu_);
      r = choose(s);
      if (r->outstanding++ == 0) r->busy_since = net::Clock::now();
      if (!r->idle.empty()) {
        conn = std::move(r->idle.back());
        r->idle.pop_back();
      }
    }
    bool ok = false;
    auto release = [&] {
      std::lock_guard lk(mu_);
      if (--r->outstanding == 0) r->busy_s += std::chrono::duration<double>(net::Clock::now() - r->busy_since).count();
      ++group(s).completed;
      if (ok && conn && conn->open() && !r->draining) r->idle.push_back(std::move(conn));
    };
    const auto deadline = net::Clock::now() + opt_.timeout;
    try {
      if (!conn) conn = std::make_unique<net::Connection>(net::connect_to(r->endpoint, opt_.timeout));
      wire::Message reply = net::round_trip(*conn, req, deadline);
      ok = true;
      release();
      if (reply.type == wire::MsgType::error)
        throw ServiceError(std::string(stage_name(s)) + " stage error: " + wire::decode_string_payload(reply.payload));
      return reply;
    } catch (const TimeoutError&) {
      release();
      throw TimeoutError(stage_name(s), std::string("stage ") + stage_name(s) + " timed out after " +
                                            std::to_string(opt_.timeout.count()) + " ms (request " +
                                            std::to_string(req.request_id) + ")");
    } catch (const ServiceError&) {
      if (!ok) release();
      throw;
    } catch (const FormatError& e) {
      if (!ok) release();
      throw ServiceError(std::string(stage_name(s)) + " stage sent a malformed reply: " + e.what());
    }
  }

  static void expect_type(const wire::Message& m, wire::MsgType t, Stage s) {
    if (m.type != t)
      throw ServiceError(std::string(stage_name(s)) + " stage replied with " + wire::msg_type_name(m.type) +
                         ", expected " + wire::msg_type_name(t));
  }

  /// Stops drained replicas. Called with mu_ held.
  void reap_drained(Stage s) {
    auto& reps = group(s).replicas;
    for (auto it = reps.begin(); it != reps.end();) {
      if ((*it)->draining && (*it)->outstanding == 0) {
        if (launcher_) launcher_->stop(s, (*it)->endpoint);
        it = reps.erase(it);
      } else {
        ++it;
      }
    }
  }

  void log_line(const std::string& s) {
    std::function<void(const std::string&)> f;
    {
      std::lock_guard lk(mu_);
      f = logger_;
    }
    if (f) f(s);
  }

  GatewayOptions opt_;
  ReplicaLauncher* launcher_;
  mutable std::mutex mu_;
  std::map<Stage, Group> groups_;
  std::string hash_;
  EmotionLabelSet labels_;
  std::atomic<std::uint64_t> next_id_{1};
  std::vector<ScalingDecision> decisions_;
  std::function<void(const std::string&)> logger_;
  const net::Clock::time_point epoch_ = net::Clock::now();

  std::thread supervisor_;
  std::mutex sup_mu_;
  std::condition_variable sup_cv_;
  bool supervising_ = false;
};

// --- gateway as a service ------------------------------------------------------

/// Serves full inferences: EncodeRequest tagged `sample` in, FuseResponse out.
/// The reply's service_ms is the gateway's end-to-end time, followed by the
/// latency breakdown.
inline Handler gateway_handler(Gateway& g) {
  return [&g](const wire::Message& m) -> wire::Message {
    if (m.type != wire::MsgType::encode_request) throw InputError("gateway only accepts sample EncodeRequests");
    const auto in = wire::decode_request_payload(m.payload);
    if (!wire::is_sample(in.tag)) throw InputError("gateway only accepts sample EncodeRequests");
    MultimodalSample s;
    s.visual = in.visual;
    s.audio = in.audio;
    s.text = in.text;
    const InferResult r = g.infer(s, in.tag == wire::StageTag::sample_sequential);
    wire::FuseOutput out{r.distribution, r.latency.total_ms};
    Bytes payload = wire::fuse_response_payload(out);
    ByteWriter w(payload);
    const auto& L = r.latency;
    write_cmtt(w, Tensor({6}, std::vector<double>{L.visual_ms, L.audio_ms, L.text_ms, L.fuse_ms, L.transport_ms,
                                                    L.encode_phase_ms}));
    return {wire::MsgType::fuse_response, m.request_id, std::move(payload)};
  };
}

/// Client side of gateway_handler.
class GatewayClient {
 public:
  GatewayClient(const net::Endpoint& e, std::chrono::milliseconds timeout, EmotionLabelSet labels)
      : endpoint_(e), timeout_(timeout), labels_(std::move(labels)) {}

  InferResult infer(const MultimodalSample& s, bool sequential = false) {
    std::unique_ptr<net::Connection> c;
    {
      std::lock_guard lk(mu_);
      if (!idle_.empty()) {
        c = std::move(idle_.back());
        idle_.pop_back();
      }
    }
    if (!c) c = std::make_unique<net::Connection>(net::connect_to(endpoint_, timeout_));
    const std::uint64_t id = next_id_++;
    const auto t0 = net::Clock::now();
    wire::Message reply;
    try {
      reply = net::round_trip(*c, {wire::MsgType::encode_request, id, wire::encode_request_payload(wire::sample_input(s, sequential))},
                              t0 + timeout_);
    } catch (const TimeoutError&) {
      throw TimeoutError("gateway", "gateway at " + endpoint_.str() + " timed out");
    }
    if (reply.type == wire::MsgType::error)
      throw ServiceError("gateway error: " + wire::decode_string_payload(reply.payload));
    if (reply.type != wire::MsgType::fuse_response)
      throw ServiceError(std::string("gateway replied with ") + wire::msg_type_name(reply.type));
    ByteReader r(reply.payload);
    InferResult out;
    try {
      out.distribution.logits = read_cmtt(r);
      out.distribution.probs = read_cmtt(r);
      out.distribution.argmax = argmax_lowest(out.distribution.logits);
      out.latency.total_ms = r.f64();
      const Tensor b = read_cmtt(r);
      if (b.size() != 6) throw FormatError("latency breakdown must have 6 entries");
      out.latency.visual_ms = b[0];
      out.latency.audio_ms = b[1];
      out.latency.text_ms = b[2];
      out.latency.fuse_ms = b[3];
      out.latency.transport_ms = b[4] + std::max(0.0, elapsed_ms(t0) - out.latency.total_ms);
      out.latency.encode_phase_ms = b[5];
    } catch (const FormatError& e) {
      throw ServiceError(std::string("malformed gateway reply: ") + e.what());
    }
    out.latency.request_id = id;
    out.latency.total_ms = elapsed_ms(t0);
    out.directive = try_adapt(out.distribution.argmax, labels_);
    std::lock_guard lk(mu_);
    idle_.push_back(std::move(c));
    return out;
  }

  /// Labels and config hash reported by the gateway's health endpoint.
  static HealthInfo probe(const net::Endpoint& e, std::chrono::milliseconds timeout) {
    net::Connection c(net::connect_to(e, timeout));
    const auto reply = net::round_trip(c, {wire::MsgType::health, 0, {}}, net::Clock::now() + timeout);
    if (reply.type != wire::MsgType::health) throw ServiceError("gateway did not answer the health check");
    return parse_health(wire::decode_string_payload(reply.payload));
  }

 private:
  net::Endpoint endpoint_;
  std::chrono::milliseconds timeout_;
  EmotionLabelSet labels_;
  std::mutex mu_;
  std::vector<std::unique_ptr<net::Connection>> idle_;
  std::atomic<std::uint64_t> next_id_{1};
};

}  // namespace cmt
