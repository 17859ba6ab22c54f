// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <signal.h>
#include <sys/prctl.h>
#include <sys/wait.h>

#include "cmt/serving/gateway.hpp"

namespace cmt {

/// Replicas as StageServer objects inside this process. Used by tests and by
/// stub pipelines.
class InProcessLauncher : public ReplicaLauncher {
 public:
  using Factory = std::function<std::pair<Handler, HealthInfo>(Stage)>;

  InProcessLauncher(Factory f, ServerOptions opt = {}) : factory_(std::move(f)), opt_(opt) {}

  net::Endpoint start(Stage s) override {
    auto [handler, health] = factory_(s);
    auto srv = std::make_unique<StageServer>(stage_name(s), std::move(handler), health_json(health), net::Endpoint{},
                                             options(s));
    const net::Endpoint e = srv->endpoint();
    std::lock_guard lk(mu_);
    servers_.push_back(std::move(srv));
    return e;
  }

  void stop(Stage, const net::Endpoint& e) override {
    std::unique_ptr<StageServer> victim;
    {
      std::lock_guard lk(mu_);
      for (auto it = servers_.begin(); it != servers_.end(); ++it)
        if ((*it)->endpoint() == e) {
          victim = std::move(*it);
          servers_.erase(it);
          break;
        }
    }
  }

  /// Overrides the server options for one stage (e.g. a slowed bottleneck).
  void set_options(Stage s, ServerOptions o) {
    std::lock_guard lk(mu_);
    per_stage_[s] = o;
  }

  std::size_t running() const {
    std::lock_guard lk(mu_);
    return servers_.size();
  }

 private:
  ServerOptions options(Stage s) {
    std::lock_guard lk(mu_);
    auto it = per_stage_.find(s);
    return it == per_stage_.end() ? opt_ : it->second;
  }

  Factory factory_;
  ServerOptions opt_;
  mutable std::mutex mu_;
  std::map<Stage, ServerOptions> per_stage_;
  std::vector<std::unique_ptr<StageServer>> servers_;
};

/// Replicas as child processes running `<exe> stage ...`. The child prints
/// its bound port on the first stdout line.
class ProcessLauncher : public ReplicaLauncher {
 public:
  /// `args(stage)` gives the argument list after the executable path.
  ProcessLauncher(std::string exe, std::function<std::vector<std::string>(Stage)> args)
      : exe_(std::move(exe)), args_(std::move(args)) {}

  ~ProcessLauncher() override {
    std::vector<Child> kids;
    {
      std::lock_guard lk(mu_);
      kids.swap(children_);
    }
    for (auto& c : kids) terminate(c.pid);
  }

  net::Endpoint start(Stage s) override {
    int fds[2];
    if (::pipe2(fds, O_CLOEXEC) != 0) throw ServiceError("pipe: " + net::errno_str());
    std::vector<std::string> argv_s{exe_};
    for (auto& a : args_(s)) argv_s.push_back(a);
    std::vector<char*> argv;
    for (auto& a : argv_s) argv.push_back(a.data());
    argv.push_back(nullptr);
    const pid_t pid = ::fork();
    if (pid < 0) throw ServiceError("fork: " + net::errno_str());
    if (pid == 0) {
      sigset_t none;
      sigemptyset(&none);
      ::sigprocmask(SIG_SETMASK, &none, nullptr);
      ::prctl(PR_SET_PDEATHSIG, SIGTERM);
      ::dup2(fds[1], STDOUT_FILENO);
      ::execv(exe_.c_str(), argv.data());
      ::_exit(127);
    }
    ::close(fds[1]);
    net::Socket rd(fds[0]);
    std::string line;
    const auto deadline = net::Clock::now() + std::chrono::seconds(30);
    while (line.find('\n') == std::string::npos) {
      pollfd p{rd.fd(), POLLIN, 0};
      if (::poll(&p, 1, net::remaining_ms(deadline)) <= 0) {
        terminate(pid);
        throw ServiceError(std::string(stage_name(s)) + " replica did not announce its port");
      }
      char buf[256];
      const ssize_t n = ::read(rd.fd(), buf, sizeof buf);
      if (n <= 0) {
        terminate(pid);
        throw ServiceError(std::string(stage_name(s)) + " replica exited during startup");
      }
      line.append(buf, static_cast<std::size_t>(n));
    }
    const net::Endpoint e = net::parse_endpoint(line.substr(0, line.find('\n')));
    std::lock_guard lk(mu_);
    children_.push_back({pid, e});
    return e;
  }

  void stop(Stage, const net::Endpoint& e) override {
    pid_t pid = -1;
    {
      std::lock_guard lk(mu_);
      for (auto it = children_.begin(); it != children_.end(); ++it)
        if (it->endpoint == e) {
          pid = it->pid;
          children_.erase(it);
          break;
        }
    }
    if (pid > 0) terminate(pid);
  }

 private:
  struct Child {
    pid_t pid;
    net::Endpoint endpoint;
  };

  static void terminate(pid_t pid) {
    ::kill(pid, SIGTERM);
    int status = 0;
    ::waitpid(pid, &status, 0);
  }

  std::string exe_;
  std::function<std::vector<std::string>(Stage)> args_;
  std::mutex mu_;
  std::vector<Child> children_;
};

/// Stages and gateway configuration as read from the serving JSON file.
struct StageConfig {
  Stage stage = Stage::visual;
  std::size_t replicas = 1;
  std::string listen = "127.0.0.1:0";
  std::string checkpoint;
  std::size_t max_in_flight = 256;
  std::size_t capacity = 1;
};

struct ServingConfig {
  std::vector<StageConfig> stages;
  std::string gateway_listen = "127.0.0.1:7700";
  GatewayOptions gateway;
  bool autoscale = true;

  void validate() const {
    for (Stage s : kAllStages) {
      std::size_t n = 0;
      for (const auto& c : stages) n += c.stage == s;
      if (n != 1) throw ConfigError(std::string("serving config needs exactly one entry for stage ") + stage_name(s));
    }
    for (const auto& c : stages) {
      if (c.replicas < 1) throw ConfigError(std::string("stage ") + stage_name(c.stage) + ": replicas must be >= 1");
      if (c.capacity < 1) throw ConfigError(std::string("stage ") + stage_name(c.stage) + ": capacity must be >= 1");
      if (c.checkpoint.empty()) throw ConfigError(std::string("stage ") + stage_name(c.stage) + ": checkpoint missing");
    }
    gateway.policy.validate();
    if (gateway.timeout.count() <= 0) throw ConfigError("gateway timeout_ms must be positive");
  }
};

inline ServingConfig parse_serving_config(const nlohmann::json& j) {
  ServingConfig c;
  try {
    for (const auto& s : j.at("stages")) {
      StageConfig sc;
      sc.stage = parse_stage(s.at("stage").get<std::string>());
      sc.replicas = s.value("replicas", std::size_t{1});
      sc.listen = s.value("listen", sc.listen);
      sc.checkpoint = s.value("checkpoint", std::string{});
      sc.max_in_flight = s.value("max_in_flight", sc.max_in_flight);
      sc.capacity = s.value("capacity", sc.capacity);
      c.stages.push_back(sc);
    }
    if (j.contains("gateway")) {
      const auto& g = j.at("gateway");
      c.gateway_listen = g.value("listen", c.gateway_listen);
      c.gateway.timeout = std::chrono::milliseconds(g.value("timeout_ms", 2000));
      if (g.contains("autoscaler")) {
        const auto& a = g.at("autoscaler");
        auto& p = c.gateway.policy;
        p.high_watermark = a.value("high_watermark", p.high_watermark);
        p.low_watermark_pct = a.value("low_watermark_pct", p.low_watermark_pct);
        p.cooldown_s = a.value("cooldown_s", p.cooldown_s);
        p.max_replicas = a.value("max_replicas", p.max_replicas);
        c.autoscale = a.value("enabled", true);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("serving config: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json serving_config_json(const ServingConfig& c) {
  nlohmann::json stages = nlohmann::json::array();
  for (const auto& s : c.stages)
    stages.push_back({{"stage", stage_name(s.stage)}, {"replicas", s.replicas}, {"listen", s.listen},
                      {"checkpoint", s.checkpoint}, {"max_in_flight", s.max_in_flight}, {"capacity", s.capacity}});
  const auto& p = c.gateway.policy;
  return {{"stages", stages},
          {"gateway",
           {{"listen", c.gateway_listen},
            {"timeout_ms", c.gateway.timeout.count()},
            {"autoscaler",
             {{"enabled", c.autoscale},
              {"high_watermark", p.high_watermark},
              {"low_watermark_pct", p.low_watermark_pct},
              {"cooldown_s", p.cooldown_s},
              {"max_replicas", p.max_replicas}}}}}};
}

}  // namespace cmt
