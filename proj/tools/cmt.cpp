// SPDX-License-Identifier: Apache-2.0
// cmt: data generation, training, evaluation, gradient checks, serving and
// benchmarking from one binary.
//
// Configuration precedence is flags > --config file > built-in defaults.
// Exit codes: 0 ok, 2 usage, 3 config, 4 runtime. Failures print one JSON
// line on stderr: {"error":"<kind>","exit":<code>,"message":"..."}.

#include <signal.h>
#include <unistd.h>

#include <CLI11.hpp>
#include <cstdio>
#include <iostream>

#include "cmt/checkpoint.hpp"
#include "cmt/grad_suite.hpp"
#include "cmt/run_config.hpp"
#include "cmt/serving/bench.hpp"
#include "cmt/serving/launcher.hpp"

namespace fs = std::filesystem;
using namespace cmt;

namespace {

constexpr int kExitUsage = 2;
constexpr int kExitConfig = 3;
constexpr int kExitRuntime = 4;

int fail(const char* kind, int code, const std::string& msg) {
  std::cerr << nlohmann::json{{"error", kind}, {"exit", code}, {"message", msg}}.dump() << std::endl;
  return code;
}

/// Blocks SIGINT/SIGTERM in every thread so the main thread can wait for them.
sigset_t block_stop_signals() {
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);
  return set;
}

int wait_for_stop(const sigset_t& set) {
  int sig = 0;
  sigwait(&set, &sig);
  return sig;
}

std::string self_exe() {
  std::error_code ec;
  auto p = fs::read_symlink("/proc/self/exe", ec);
  if (ec) throw ServiceError("cannot resolve own executable: " + ec.message());
  return p.string();
}

std::vector<MultimodalSample> load_samples(const std::string& dir, nlohmann::json* spec = nullptr) {
  if (!fs::exists(fs::path(dir) / "manifest.json")) throw ConfigError("no dataset at " + dir + " (manifest.json missing)");
  auto d = read_dataset(dir);
  if (spec) *spec = d.spec;
  return std::move(d.samples);
}

CmtModel load_model(const std::string& path) {
  if (!fs::exists(path)) throw ConfigError("checkpoint not found: " + path);
  return load_checkpoint(path);
}

/// Flags shared by every subcommand that builds a RunConfig.
struct CommonFlags {
  std::string config;
  std::uint64_t seed = 0;
  std::string out;

  void add(CLI::App* app, const std::string& default_out) {
    app->add_option("--config", config, "RunConfig JSON file (overridden by flags)");
    app->add_option("--seed", seed, "seed for every random stream (default 0)");
    app->add_option("--out", out, "output directory (default " + default_out + ")");
    out_default = default_out;
  }

  /// Defaults, then the file, then any flags the user actually passed.
  RunConfig resolve(CLI::App* app) const {
    RunConfig c = load_run_config(config);
    if (config.empty()) c.output_dir = out_default;
    if (app->count("--seed")) c.seed = seed;
    if (app->count("--out")) c.output_dir = out;
    return c;
  }

  std::string out_default;
};

// --- gen ----------------------------------------------------------------------

struct GenFlags {
  CommonFlags common;
  std::size_t classes = 0, per_class = 0, val_per_class = 0, test_per_class = 0;
  double noise = 0.0;
  std::string coupling;
};

void apply_data_flags(CLI::App* app, const GenFlags& f, RunConfig& c) {
  if (app->count("--classes")) c.data.num_classes = f.classes;
  if (app->count("--per-class")) c.data.samples_per_class = f.per_class;
  if (app->count("--val-per-class")) c.val_per_class = f.val_per_class;
  if (app->count("--test-per-class")) c.test_per_class = f.test_per_class;
  if (app->count("--noise")) c.data.noise = f.noise;
  if (app->count("--coupling")) c.data.coupling = parse_coupling(f.coupling);
}

void add_data_flags(CLI::App* app, GenFlags& f) {
  app->add_option("--classes", f.classes, "number of classes C");
  app->add_option("--per-class", f.per_class, "training samples per class");
  app->add_option("--val-per-class", f.val_per_class, "validation samples per class");
  app->add_option("--test-per-class", f.test_per_class, "test samples per class");
  app->add_option("--noise", f.noise, "noise level sigma");
  app->add_option("--coupling", f.coupling, "independent | xor");
}

int cmd_gen(CLI::App* app, const GenFlags& f) {
  RunConfig c = f.common.resolve(app);
  apply_data_flags(app, f, c);
  c.resolve();
  c.validate();
  const DatasetSplits d = generate_splits(c.data, c.val_per_class, c.test_per_class);
  const fs::path out(c.output_dir);
  const nlohmann::json spec = c.data;
  write_dataset(out / "train", d.train, spec);
  write_dataset(out / "val", d.validation, spec);
  if (!d.test.empty()) write_dataset(out / "test", d.test, spec);
  write_run_config(out, c);
  std::cout << "wrote " << d.train.size() << " train, " << d.validation.size() << " val, " << d.test.size()
            << " test samples to " << out.string() << '\n';
  return 0;
}

// --- train --------------------------------------------------------------------

struct TrainFlags {
  GenFlags data;
  std::string data_dir;
  std::size_t epochs = 0, batch = 0, workers = 0, patience = 0;
  double lr = 0.0, min_delta = 0.0, weight_decay = 0.0, dropout = 0.0, clip = 0.0;
  std::string optimizer;
  bool serial = false, wall_time = false;
};

int cmd_train(CLI::App* app, const TrainFlags& f) {
  RunConfig c = f.data.common.resolve(app);
  apply_data_flags(app, f.data, c);
  if (app->count("--epochs")) c.train.max_epochs = f.epochs;
  if (app->count("--batch")) c.train.batch_size = f.batch;
  if (app->count("--workers")) c.train.workers = f.workers;
  if (app->count("--patience")) c.train.patience = f.patience;
  if (app->count("--lr")) c.train.learning_rate = f.lr;
  if (app->count("--min-delta")) c.train.min_delta = f.min_delta;
  if (app->count("--weight-decay")) c.train.weight_decay = f.weight_decay;
  if (app->count("--clip")) c.train.clip_norm = f.clip;
  if (app->count("--optimizer")) c.train.optimizer = parse_optimizer(f.optimizer);
  if (app->count("--dropout")) c.model.dropout = f.dropout;
  if (f.serial) c.train.parallel_workers = false;
  if (f.wall_time) c.wall_time = true;

  std::vector<MultimodalSample> train_set, val_set;
  if (!f.data_dir.empty()) {
    nlohmann::json spec;
    train_set = load_samples((fs::path(f.data_dir) / "train").string(), &spec);
    val_set = load_samples((fs::path(f.data_dir) / "val").string());
    try {
      const std::uint64_t seed = c.seed;
      c.data = spec.get<SyntheticSpec>();
      c.seed = seed;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("dataset spec in " + f.data_dir + ": " + e.what());
    }
    c.resolve();
    c.validate();
  } else {
    c.resolve();
    c.validate();
    auto d = generate_splits(c.data, c.val_per_class, 0);
    train_set = std::move(d.train);
    val_set = std::move(d.validation);
  }

  const fs::path out(c.output_dir);
  fs::create_directories(out);
  write_run_config(out, c);
  TrainConfig tc = c.train;
  tc.checkpoint_path = (out / "model.cmtc").string();
  const auto t0 = std::chrono::steady_clock::now();
  TrainResult r = train(init_model(c.model, c.seed), train_set, val_set, tc);
  write_training_log((out / "training_log.csv").string(), r.log, c.wall_time);
  save_checkpoint((out / "model.cmtc").string(), r.model);
  const auto& best = r.log.epochs.at(r.log.best_epoch - 1);
  std::cout << "epochs " << r.log.epochs.size() << (r.log.early_stopped ? " (early stop)" : "") << ", best epoch "
            << r.log.best_epoch << ": val_loss " << format_fixed(best.val_loss, 4) << ", val_accuracy "
            << format_fixed(best.val_accuracy, 4) << '\n'
            << "checkpoint " << (out / "model.cmtc").string() << ", log " << (out / "training_log.csv").string()
            << " (" << format_fixed(std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(), 1)
            << " s)\n";
  return 0;
}

// --- eval ---------------------------------------------------------------------

struct EvalFlags {
  std::string checkpoint = "run/model.cmtc";
  std::string data_dir = "data/test";
  std::string csv;
  std::string name = "cmt";
  std::string ablate;
};

int cmd_eval(const EvalFlags& f) {
  CmtModel m = load_model(f.checkpoint);
  nlohmann::json spec;
  const auto data = load_samples(f.data_dir, &spec);
  if (spec.contains("num_classes")) {
    const auto dc = spec.at("num_classes").get<std::size_t>();
    if (dc != m.config.num_classes())
      throw ConfigError("class count mismatch: checkpoint has C=" + std::to_string(m.config.num_classes()) +
                        ", dataset has C=" + std::to_string(dc));
  }
  if (!f.ablate.empty()) {
    // Keep only the named modality; the others contribute zero embeddings.
    const std::size_t keep = static_cast<std::size_t>(parse_modality(f.ablate));
    for (std::size_t i = 0; i < 3; ++i) m.config.modalities[i] = i == keep;
  }
  const Evaluation e = evaluate(m, data);
  std::cout << format_report(e.report, m.config.labels);
  const std::string row = table_csv_row(f.name, e.report);
  std::cout << table_csv_header() << '\n' << row << '\n';
  if (!f.csv.empty()) {
    const bool fresh = !fs::exists(f.csv);
    std::ofstream out(f.csv, std::ios::app);
    if (!out) throw InputError("cannot write " + f.csv);
    if (fresh) out << table_csv_header() << '\n';
    out << row << '\n';
  }
  return 0;
}

// --- gradcheck ----------------------------------------------------------------

struct GradFlags {
  CommonFlags common;
  std::size_t coords = 8;
  bool tiny = false;
};

int cmd_gradcheck(CLI::App* app, const GradFlags& f) {
  RunConfig c = f.common.resolve(app);
  ModelConfig mc = f.tiny ? tiny_config() : c.model;
  mc.validate();
  GradSuiteOptions opt;
  opt.model_coords = f.coords;
  const auto t0 = std::chrono::steady_clock::now();
  const GradSuiteReport r = run_grad_suite(mc, c.seed, opt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::cout << format_grad_suite(r);
  char buf[160];
  std::snprintf(buf, sizeof buf, "gradcheck %s: %zu families, max_rel_err %.3e (tolerance %.0e, eps %.0e), %.1f s\n",
                r.passed() ? "PASS" : "FAIL", r.families.size(), r.max_rel_error, opt.check.tolerance, opt.check.eps,
                secs);
  std::cout << buf;
  if (!r.passed()) return fail("gradcheck", kExitRuntime, "gradient check failed, max_rel_err " + std::to_string(r.max_rel_error));
  return 0;
}

// --- stage --------------------------------------------------------------------

struct StageFlags {
  std::string stage;
  std::string checkpoint;
  std::string listen = "127.0.0.1:0";
  std::size_t capacity = 1, max_in_flight = 256;
  std::string expect_hash;
  int stub_delay_ms = -1;
  std::size_t stub_d_model = 32, stub_classes = 8;
};

int cmd_stage(const StageFlags& f) {
  const sigset_t signals = block_stop_signals();
  const Stage s = parse_stage(f.stage);
  Handler handler;
  HealthInfo health;
  if (f.stub_delay_ms >= 0) {
    handler = stub_handler(s, std::chrono::milliseconds(f.stub_delay_ms), f.stub_d_model, f.stub_classes);
    health = stub_health(s, f.stub_d_model, f.stub_classes);
  } else {
    if (f.checkpoint.empty()) throw ConfigError("stage needs --checkpoint or --stub-delay-ms");
    auto m = std::make_shared<const CmtModel>(load_model(f.checkpoint));
    health = model_health(s, *m);
    handler = model_handler(s, m);
  }
  if (!f.expect_hash.empty() && f.expect_hash != health.config_hash)
    throw ConfigError("config hash mismatch: expected " + f.expect_hash + ", checkpoint has " + health.config_hash);
  StageServer srv(stage_name(s), handler, health_json(health), net::parse_endpoint(f.listen),
                  {f.capacity, f.max_in_flight, wire::kDefaultMaxPayload});
  // First stdout line: the bound endpoint, read by the launcher.
  std::cout << srv.endpoint().str() << std::endl;
  wait_for_stop(signals);
  srv.stop();
  return 0;
}

// --- serve --------------------------------------------------------------------

struct ServeFlags {
  std::string config;
  std::string listen;
  bool no_autoscale = false;
};

int cmd_serve(CLI::App* app, const ServeFlags& f) {
  const sigset_t signals = block_stop_signals();
  nlohmann::json j = read_json_file(f.config);
  if (j.contains("serving")) j = j.at("serving");  // a full RunConfig is accepted too
  ServingConfig sc = parse_serving_config(j);
  if (app->count("--listen")) sc.gateway_listen = f.listen;
  if (f.no_autoscale) sc.autoscale = false;

  std::map<Stage, StageConfig> by_stage;
  for (const auto& s : sc.stages) {
    if (!fs::exists(s.checkpoint)) throw ConfigError("checkpoint not found: " + s.checkpoint);
    by_stage[s.stage] = s;
  }
  const std::string hash = config_hash(load_checkpoint(by_stage.at(Stage::visual).checkpoint).config);
  ProcessLauncher launcher(self_exe(), [&](Stage s) {
    const auto& c = by_stage.at(s);
    const auto host = net::parse_endpoint(c.listen).host;
    return std::vector<std::string>{"stage",      "--stage",           stage_name(s),
                                    "--checkpoint", c.checkpoint,      "--listen",
                                    host + ":0",  "--capacity",        std::to_string(c.capacity),
                                    "--max-in-flight", std::to_string(c.max_in_flight), "--expect-hash",
                                    hash};
  });
  Gateway::StageMap map;
  for (const auto& s : sc.stages)
    for (std::size_t r = 0; r < s.replicas; ++r) map[s.stage].push_back(launcher.start(s.stage));
  Gateway g(map, sc.gateway, &launcher);
  g.set_logger([](const std::string& line) { std::cerr << line << std::endl; });
  HealthInfo h{"gateway", g.config_hash(), g.labels().names(), 0};
  StageServer front("gateway", gateway_handler(g), health_json(h), net::parse_endpoint(sc.gateway_listen),
                    {64, 1024, wire::kDefaultMaxPayload});
  if (sc.autoscale) g.start_supervisor();
  std::cout << "gateway " << front.endpoint().str() << std::endl;
  for (Stage s : kAllStages) {
    std::cout << stage_name(s) << ":";
    for (const auto& e : map[s]) std::cout << ' ' << e.str();
    std::cout << '\n';
  }
  std::cout.flush();
  wait_for_stop(signals);
  g.stop_supervisor();
  front.stop();
  return 0;
}

// --- bench --------------------------------------------------------------------

struct BenchFlags {
  std::string gateway;
  std::string data_dir = "data/test";
  std::size_t requests = 100, concurrency = 1;
  double rate = 0.0;
  bool baseline = false;
  std::string csv;
  int timeout_ms = 2000;
  int stub_delay_ms = -1;
  std::size_t stub_replicas = 1;
};

int cmd_bench(const BenchFlags& f) {
  Workload w{f.requests, f.concurrency, f.rate, f.baseline};
  BenchReport rep;
  const auto timeout = std::chrono::milliseconds(f.timeout_ms);
  if (f.stub_delay_ms >= 0) {
    // Self-contained: stub stages and a gateway in this process.
    const auto delay = std::chrono::milliseconds(f.stub_delay_ms);
    InProcessLauncher launcher([delay](Stage s) {
      return std::make_pair(stub_handler(s, s == Stage::fusion ? std::chrono::milliseconds(0) : delay, 8, 8),
                            stub_health(s, 8, 8));
    });
    Gateway::StageMap map;
    for (Stage s : kAllStages)
      for (std::size_t r = 0; r < (s == Stage::fusion ? 1 : f.stub_replicas); ++r) map[s].push_back(launcher.start(s));
    GatewayOptions o;
    o.timeout = timeout;
    Gateway g(map, o);
    std::vector<MultimodalSample> samples{{0, {Tensor({4, 4, 1})}, {Tensor({8}), 100.0}, {{kClsToken, 3}}, 0}};
    rep = run_bench([&](const MultimodalSample& s, bool seq) { return g.infer(s, seq); }, samples, w);
  } else {
    if (f.gateway.empty()) throw ConfigError("bench needs --gateway or --stub-delay-ms");
    const auto e = net::parse_endpoint(f.gateway);
    const HealthInfo h = GatewayClient::probe(e, timeout);
    GatewayClient client(e, timeout, EmotionLabelSet(h.labels));
    const auto samples = load_samples(f.data_dir);
    rep = run_bench([&](const MultimodalSample& s, bool seq) { return client.infer(s, seq); }, samples, w);
  }
  std::cerr << format_bench(rep);
  const std::string csv = bench_csv(rep);
  if (f.csv.empty()) {
    std::cout << csv;
  } else {
    std::ofstream out(f.csv, std::ios::trunc);
    if (!out) throw InputError("cannot write " + f.csv);
    out << csv;
  }
  if (rep.incomplete) return fail("runtime", kExitRuntime, "benchmark incomplete: " + rep.error);
  return 0;
}

// --- demo ---------------------------------------------------------------------

struct DemoFlags {
  std::string checkpoint = "run/model.cmtc";
  std::string data_dir = "data/test";
  std::int64_t id = -1;
  std::string gateway;
};

int cmd_demo(const DemoFlags& f) {
  const auto data = load_samples(f.data_dir);
  const MultimodalSample* s = &data.front();
  if (f.id >= 0) {
    auto it = std::find_if(data.begin(), data.end(), [&](const auto& x) { return x.id == static_cast<std::uint64_t>(f.id); });
    if (it == data.end()) throw ConfigError("sample id " + std::to_string(f.id) + " not in " + f.data_dir);
    s = &*it;
  }
  EmotionDistribution d;
  std::vector<std::string> labels;
  if (!f.gateway.empty()) {
    const auto e = net::parse_endpoint(f.gateway);
    labels = GatewayClient::probe(e, std::chrono::seconds(2)).labels;
    d = GatewayClient(e, std::chrono::seconds(5), EmotionLabelSet(labels)).infer(*s).distribution;
  } else {
    const CmtModel m = load_model(f.checkpoint);
    labels = m.config.labels;
    d = forward(*s, m, Rng(0));
  }
  const EmotionLabelSet set(labels);
  nlohmann::json probs = nlohmann::json::object();
  for (std::size_t k = 0; k < set.size(); ++k) probs[set.name(k)] = d.probs[k];
  nlohmann::json out{{"sample", s->id}, {"label", set.name(s->label)}, {"predicted", set.name(d.argmax)},
                     {"probs", probs}};
  if (auto dir = try_adapt(d.argmax, set)) out["directive"] = nlohmann::json::parse(to_json_string(*dir));
  std::cout << out.dump(2) << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cmt: cross-modal transformer toolkit"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "help for every subcommand");

  GenFlags gen;
  auto* gen_cmd = app.add_subcommand("gen", "generate synthetic train/val/test datasets");
  gen.common.add(gen_cmd, "data");
  add_data_flags(gen_cmd, gen);

  TrainFlags tr;
  auto* train_cmd = app.add_subcommand("train", "train a model; writes model.cmtc and training_log.csv");
  tr.data.common.add(train_cmd, "run");
  add_data_flags(train_cmd, tr.data);
  train_cmd->add_option("--data", tr.data_dir, "dataset directory from `cmt gen` (else generated in memory)");
  train_cmd->add_option("--epochs", tr.epochs, "maximum epochs");
  train_cmd->add_option("--batch", tr.batch, "global batch size");
  train_cmd->add_option("--workers", tr.workers, "data-parallel workers");
  train_cmd->add_option("--patience", tr.patience, "early-stopping patience (epochs)");
  train_cmd->add_option("--min-delta", tr.min_delta, "minimum validation-loss improvement");
  train_cmd->add_option("--lr", tr.lr, "learning rate");
  train_cmd->add_option("--weight-decay", tr.weight_decay, "AdamW weight decay");
  train_cmd->add_option("--clip", tr.clip, "gradient norm clip (0 = off)");
  train_cmd->add_option("--optimizer", tr.optimizer, "adamw | sgd");
  train_cmd->add_option("--dropout", tr.dropout, "dropout rate");
  train_cmd->add_flag("--serial", tr.serial, "run workers one after another");
  train_cmd->add_flag("--wall-time", tr.wall_time, "record epoch seconds in the log (breaks byte-identity)");

  EvalFlags ev;
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval_cmd->add_option("--checkpoint", ev.checkpoint, "checkpoint path")->capture_default_str();
  eval_cmd->add_option("--data", ev.data_dir, "dataset directory")->capture_default_str();
  eval_cmd->add_option("--csv", ev.csv, "append the table row to this CSV file");
  eval_cmd->add_option("--name", ev.name, "model name in the CSV row")->capture_default_str();
  eval_cmd->add_option("--only", ev.ablate, "keep one modality: visual | acoustic | textual");

  GradFlags gc;
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference gradient checks per operation family");
  gc.common.add(grad_cmd, "run");
  grad_cmd->add_option("--coords", gc.coords, "coordinates per parameter tensor at model level (0 = all)")
      ->capture_default_str();
  grad_cmd->add_flag("--tiny", gc.tiny, "use the tiny model config and check every coordinate");

  StageFlags st;
  auto* stage_cmd = app.add_subcommand("stage", "run one pipeline stage; prints its endpoint first");
  stage_cmd->add_option("--stage", st.stage, "visual | acoustic | textual | fusion")->required();
  stage_cmd->add_option("--checkpoint", st.checkpoint, "checkpoint path");
  stage_cmd->add_option("--listen", st.listen, "host:port (port 0 = ephemeral)")->capture_default_str();
  stage_cmd->add_option("--capacity", st.capacity, "concurrent compute slots")->capture_default_str();
  stage_cmd->add_option("--max-in-flight", st.max_in_flight, "refuse beyond this many requests")
      ->capture_default_str();
  stage_cmd->add_option("--expect-hash", st.expect_hash, "refuse to start unless the config hash matches");
  stage_cmd->add_option("--stub-delay-ms", st.stub_delay_ms, "serve a stub that sleeps this long");
  stage_cmd->add_option("--stub-d-model", st.stub_d_model, "stub embedding width")->capture_default_str();
  stage_cmd->add_option("--stub-classes", st.stub_classes, "stub class count")->capture_default_str();

  ServeFlags sv;
  auto* serve_cmd = app.add_subcommand("serve", "run stages and gateway until SIGINT/SIGTERM");
  serve_cmd->add_option("--config", sv.config, "serving config JSON")->required();
  serve_cmd->add_option("--listen", sv.listen, "gateway host:port");
  serve_cmd->add_flag("--no-autoscale", sv.no_autoscale, "fixed replica counts");

  BenchFlags bf;
  auto* bench_cmd = app.add_subcommand("bench", "latency benchmark; writes per-request CSV");
  bench_cmd->add_option("--gateway", bf.gateway, "gateway host:port");
  bench_cmd->add_option("--data", bf.data_dir, "samples to send")->capture_default_str();
  bench_cmd->add_option("--requests", bf.requests, "request count")->capture_default_str();
  bench_cmd->add_option("--concurrency", bf.concurrency, "concurrent clients")->capture_default_str();
  bench_cmd->add_option("--rate", bf.rate, "open-loop arrivals per second (0 = closed loop)");
  bench_cmd->add_flag("--baseline", bf.baseline, "also run with sequential encoders and report the speedup");
  bench_cmd->add_option("--csv", bf.csv, "CSV output file (default stdout)");
  bench_cmd->add_option("--timeout-ms", bf.timeout_ms, "per-request timeout")->capture_default_str();
  bench_cmd->add_option("--stub-delay-ms", bf.stub_delay_ms, "use in-process stub stages sleeping this long");
  bench_cmd->add_option("--stub-replicas", bf.stub_replicas, "encoder replicas per stub stage")
      ->capture_default_str();

  DemoFlags df;
  auto* demo_cmd = app.add_subcommand("demo", "classify one sample and print its adaptation directive");
  demo_cmd->add_option("--checkpoint", df.checkpoint, "checkpoint path")->capture_default_str();
  demo_cmd->add_option("--data", df.data_dir, "dataset directory")->capture_default_str();
  demo_cmd->add_option("--id", df.id, "sample id (default: first)");
  demo_cmd->add_option("--gateway", df.gateway, "classify through a running gateway instead");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    return fail("usage", kExitUsage, e.what());
  }

  try {
    if (*gen_cmd) return cmd_gen(gen_cmd, gen);
    if (*train_cmd) return cmd_train(train_cmd, tr);
    if (*eval_cmd) return cmd_eval(ev);
    if (*grad_cmd) return cmd_gradcheck(grad_cmd, gc);
    if (*stage_cmd) return cmd_stage(st);
    if (*serve_cmd) return cmd_serve(serve_cmd, sv);
    if (*bench_cmd) return cmd_bench(bf);
    if (*demo_cmd) return cmd_demo(df);
  } catch (const ConfigError& e) {
    return fail("config", kExitConfig, e.what());
  } catch (const FormatError& e) {
    return fail("format", kExitConfig, e.what());
  } catch (const TimeoutError& e) {
    return fail("timeout", kExitRuntime, e.what());
  } catch (const Error& e) {
    return fail("runtime", kExitRuntime, e.what());
  } catch (const std::exception& e) {
    return fail("runtime", kExitRuntime, e.what());
  }
  return fail("usage", kExitUsage, "no subcommand");
}
