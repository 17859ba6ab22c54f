// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <condition_variable>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <thread>

#include <nlohmann/json.hpp>

#include "cmt/serving/net.hpp"

namespace cmt {

enum class Stage : std::uint8_t { visual = 0, acoustic = 1, textual = 2, fusion = 3 };

inline constexpr std::array<Stage, 4> kAllStages = {Stage::visual, Stage::acoustic, Stage::textual, Stage::fusion};

inline const char* stage_name(Stage s) {
  switch (s) {
    case Stage::visual: return "visual";
    case Stage::acoustic: return "acoustic";
    case Stage::textual: return "textual";
    case Stage::fusion: return "fusion";
  }
  return "?";
}

inline Stage parse_stage(const std::string& s) {
  for (Stage st : kAllStages)
    if (s == stage_name(st)) return st;
  throw ConfigError("unknown stage '" + s + "' (expected visual, acoustic, textual or fusion)");
}

inline double elapsed_ms(net::Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(net::Clock::now() - since).count();
}

/// Maps an EncodeRequest / FuseRequest to its reply. Throwing cmt::Error turns
/// into an Error reply carrying the request id.
using Handler = std::function<wire::Message(const wire::Message&)>;

struct ServerOptions {
  std::size_t capacity = 1;        ///< requests computed at once (models one accelerator)
  std::size_t max_in_flight = 256; ///< beyond this, requests are refused
  std::uint32_t max_payload = wire::kDefaultMaxPayload;
};

/// TCP service: one thread per connection, requests on a connection handled
/// in arrival order, connections independent of each other.
class StageServer {
 public:
  StageServer(std::string name, Handler handler, std::string health_info, const net::Endpoint& listen = {},
              ServerOptions opt = {})
      : name_(std::move(name)),
        handler_(std::move(handler)),
        health_(std::move(health_info)),
        opt_(opt),
        listener_(listen) {
    if (opt_.capacity == 0) throw ConfigError("server capacity must be >= 1");
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  StageServer(const StageServer&) = delete;
  StageServer& operator=(const StageServer&) = delete;
  ~StageServer() { stop(); }

  const net::Endpoint& endpoint() const noexcept { return listener_.endpoint(); }
  const std::string& name() const noexcept { return name_; }
  std::size_t in_flight() const noexcept { return in_flight_.load(); }
  std::uint64_t served() const noexcept { return served_.load(); }

  void stop() {
    if (stopping_.exchange(true)) return;
    if (acceptor_.joinable()) acceptor_.join();
    listener_.close();
    std::list<Worker> workers;
    {
      std::lock_guard lk(mu_);
      for (auto& w : workers_) w.conn->socket().shutdown();
      workers.swap(workers_);
    }
    for (auto& w : workers) w.thread.join();
  }

 private:
  struct Worker {
    std::shared_ptr<net::Connection> conn;
    std::shared_ptr<std::atomic<bool>> done;
    std::thread thread;
  };

  void accept_loop() {
    while (!stopping_) {
      net::Socket s = listener_.accept(std::chrono::milliseconds(50));
      std::lock_guard lk(mu_);
      // Join connections that have already closed.
      for (auto it = workers_.begin(); it != workers_.end();)
        if (it->done->load()) {
          it->thread.join();
          it = workers_.erase(it);
        } else {
          ++it;
        }
      if (!s.valid()) continue;
      auto conn = std::make_shared<net::Connection>(std::move(s), opt_.max_payload);
      auto done = std::make_shared<std::atomic<bool>>(false);
      workers_.push_back({conn, done, std::thread([this, conn, done] {
                            serve(*conn);
                            *done = true;
                          })});
    }
  }

  void serve(net::Connection& c) {
    try {
      while (auto m = c.receive_until([this] { return stopping_.load(); })) c.send(respond(*m));
    } catch (const wire::WireError& e) {
      // Malformed stream: report and drop the connection.
      try {
        c.send(wire::error_message(0, std::string("decode error: ") + e.what()));
      } catch (const Error&) {
      }
    } catch (const Error&) {
    }
    c.socket().shutdown();
  }

  wire::Message respond(const wire::Message& m) {
    using wire::MsgType;
    if (m.type == MsgType::health) return {MsgType::health, m.request_id, wire::string_payload(health_)};
    if (m.type != MsgType::encode_request && m.type != MsgType::fuse_request)
      return wire::error_message(m.request_id, name_ + ": unexpected " + wire::msg_type_name(m.type));
    if (in_flight_.fetch_add(1) >= opt_.max_in_flight) {
      --in_flight_;
      return wire::error_message(m.request_id, name_ + ": overloaded");
    }
    struct Exit {
      StageServer* s;
      ~Exit() { --s->in_flight_; }
    } exit{this};
    {
      std::unique_lock lk(slot_mu_);
      slot_cv_.wait(lk, [this] { return busy_ < opt_.capacity; });
      ++busy_;
    }
    wire::Message reply;
    try {
      reply = handler_(m);
      reply.request_id = m.request_id;
    } catch (const Error& e) {
      reply = wire::error_message(m.request_id, name_ + ": " + e.what());
    }
    {
      std::lock_guard lk(slot_mu_);
      --busy_;
    }
    slot_cv_.notify_one();
    ++served_;
    return reply;
  }

  std::string name_;
  Handler handler_;
  std::string health_;
  ServerOptions opt_;
  net::Listener listener_;
  std::atomic<bool> stopping_{false};
  std::atomic<std::size_t> in_flight_{0};
  std::atomic<std::uint64_t> served_{0};
  std::mutex slot_mu_;
  std::condition_variable slot_cv_;
  std::size_t busy_ = 0;
  std::mutex mu_;
  std::list<Worker> workers_;
  std::thread acceptor_;
};

// --- health ---------------------------------------------------------------

struct HealthInfo {
  std::string stage;
  std::string config_hash;
  std::vector<std::string> labels;
  std::size_t d_model = 0;
};

inline std::string health_json(const HealthInfo& h) {
  return nlohmann::json{{"stage", h.stage}, {"config_hash", h.config_hash}, {"labels", h.labels}, {"d_model", h.d_model}}
      .dump();
}

inline HealthInfo parse_health(const std::string& s) {
  try {
    const auto j = nlohmann::json::parse(s);
    return {j.at("stage").get<std::string>(), j.at("config_hash").get<std::string>(),
            j.at("labels").get<std::vector<std::string>>(), j.at("d_model").get<std::size_t>()};
  } catch (const nlohmann::json::exception& e) {
    throw ServiceError(std::string("malformed health reply: ") + e.what());
  }
}

inline HealthInfo model_health(Stage s, const CmtModel& m) {
  return {stage_name(s), config_hash(m.config), m.config.labels, m.config.d_model};
}

// --- handlers ---------------------------------------------------------------

inline wire::StageTag stage_tag(Stage s) {
  if (s == Stage::fusion) throw InputError("fusion has no encode tag");
  return static_cast<wire::StageTag>(s);
}

namespace detail {
inline wire::EncodeInput expect_encode(const wire::Message& m, Stage s) {
  if (m.type != wire::MsgType::encode_request)
    throw InputError(std::string(stage_name(s)) + " stage only accepts EncodeRequest");
  auto in = wire::decode_request_payload(m.payload);
  if (in.tag != stage_tag(s))
    throw InputError(std::string(stage_name(s)) + " stage received a " + wire::stage_tag_name(in.tag) + " request");
  return in;
}
inline wire::FuseInput expect_fuse(const wire::Message& m) {
  if (m.type != wire::MsgType::fuse_request) throw InputError("fusion stage only accepts FuseRequest");
  return wire::decode_fuse_request(m.payload);
}
}  // namespace detail

/// Runs the real module for `s` in inference mode.
inline Handler model_handler(Stage s, std::shared_ptr<const CmtModel> model) {
  return [s, model](const wire::Message& m) -> wire::Message {
    const Rng rng(0);
    const auto t0 = net::Clock::now();
    if (s == Stage::fusion) {
      const auto in = detail::expect_fuse(m);
      wire::FuseOutput out{fuse_and_classify(in.visual, in.acoustic, in.textual, *model, rng), 0.0};
      out.service_ms = elapsed_ms(t0);
      return {wire::MsgType::fuse_response, m.request_id, wire::fuse_response_payload(out)};
    }
    const auto in = detail::expect_encode(m, s);
    MultimodalSample sample;
    sample.visual = in.visual;
    sample.audio = in.audio;
    sample.text = in.text;
    wire::EncodeOutput out{encode_modality(sample, static_cast<Modality>(s), *model, rng), 0.0};
    out.service_ms = elapsed_ms(t0);
    return {wire::MsgType::encode_response, m.request_id, wire::encode_response_payload(out)};
  };
}

/// Sleeps `delay` then answers with zeros (encoders) or a uniform distribution
/// (fusion). Used to time the pipeline independently of model cost.
inline Handler stub_handler(Stage s, std::chrono::milliseconds delay, std::size_t d_model, std::size_t classes) {
  return [=](const wire::Message& m) -> wire::Message {
    const auto t0 = net::Clock::now();
    if (s == Stage::fusion) {
      detail::expect_fuse(m);
      std::this_thread::sleep_for(delay);
      wire::FuseOutput out{distribution_from_logits(Tensor({classes}, 0.0)), 0.0};
      out.service_ms = elapsed_ms(t0);
      return {wire::MsgType::fuse_response, m.request_id, wire::fuse_response_payload(out)};
    }
    detail::expect_encode(m, s);
    std::this_thread::sleep_for(delay);
    wire::EncodeOutput out{{Tensor({d_model}, 0.0), static_cast<Modality>(s)}, 0.0};
    out.service_ms = elapsed_ms(t0);
    return {wire::MsgType::encode_response, m.request_id, wire::encode_response_payload(out)};
  };
}

inline HealthInfo stub_health(Stage s, std::size_t d_model, std::size_t classes) {
  std::vector<std::string> labels = default_emotion_labels();
  if (classes != labels.size()) {
    labels.clear();
    for (std::size_t k = 0; k < classes; ++k) labels.push_back("class" + std::to_string(k));
  }
  return {stage_name(s), "stub", labels, d_model};
}

}  // namespace cmt
