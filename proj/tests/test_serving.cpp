// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cstring>

#include "cmt/serving/bench.hpp"
#include "cmt/serving/launcher.hpp"
#include "support.hpp"

using namespace cmt;
using namespace std::chrono_literals;

namespace {

Bytes frame_bytes(std::uint8_t type, std::uint64_t id, const Bytes& payload) {
  // Oracle written straight from the frame layout.
  Bytes b = {'C', 'M', 'T', '1', type};
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(id >> (8 * i)));
  const auto n = static_cast<std::uint32_t>(payload.size());
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(n >> (8 * i)));
  b.insert(b.end(), payload.begin(), payload.end());
  return b;
}

wire::Message random_message(Rng& rng) {
  wire::Message m;
  m.type = static_cast<wire::MsgType>(rng.below(6));
  m.request_id = rng.next_u64();
  m.payload.resize(rng.below(64));
  for (auto& b : m.payload) b = static_cast<std::uint8_t>(rng.below(256));
  return m;
}

struct StubPipeline {
  std::vector<std::unique_ptr<StageServer>> servers;
  Gateway::StageMap map;

  StubPipeline(std::array<int, 4> delay_ms, std::size_t d = 8, std::size_t classes = 8,
               std::array<std::size_t, 4> replicas = {1, 1, 1, 1}) {
    for (Stage s : kAllStages) {
      const auto i = static_cast<std::size_t>(s);
      for (std::size_t r = 0; r < replicas[i]; ++r) {
        servers.push_back(std::make_unique<StageServer>(
            stage_name(s), stub_handler(s, std::chrono::milliseconds(delay_ms[i]), d, classes),
            health_json(stub_health(s, d, classes))));
        map[s].push_back(servers.back()->endpoint());
      }
    }
  }
};

struct ModelPipeline {
  std::shared_ptr<CmtModel> model;
  std::vector<std::unique_ptr<StageServer>> servers;
  Gateway::StageMap map;

  explicit ModelPipeline(CmtModel m) : model(std::make_shared<CmtModel>(std::move(m))) {
    for (Stage s : kAllStages) {
      servers.push_back(std::make_unique<StageServer>(stage_name(s), model_handler(s, model),
                                                      health_json(model_health(s, *model))));
      map[s].push_back(servers.back()->endpoint());
    }
  }
};

}  // namespace

// --- wire -------------------------------------------------------------------

TEST(Wire, HealthFrameIsSeventeenBytes) {
  wire::Message m{wire::MsgType::health, 0x0102030405060708ULL, {}};
  const Bytes b = wire::encode_message(m);
  EXPECT_EQ(b.size(), 17u);
  EXPECT_EQ(b, frame_bytes(4, 0x0102030405060708ULL, {}));
  EXPECT_EQ(wire::decode_message(b), m);
}

TEST(Wire, EncodeRequestPayloadLayout) {
  Tensor t({2, 2}, std::vector<double>{1, 2, 3, 4});
  const Bytes payload = wire::encode_request_payload({wire::StageTag::visual, {t}, {}, {}});
  Bytes oracle = {0, 'C', 'M', 'T', 'T', 2, 2, 0, 0, 0, 2, 0, 0, 0};
  for (double v : {1.0, 2.0, 3.0, 4.0}) {
    std::uint8_t raw[8];
    std::memcpy(raw, &v, 8);
    oracle.insert(oracle.end(), raw, raw + 8);
  }
  EXPECT_EQ(payload, oracle);
  const wire::Message m{wire::MsgType::encode_request, 9, payload};
  EXPECT_EQ(wire::encode_message(m), frame_bytes(0, 9, oracle));
  const auto back = wire::decode_message(wire::encode_message(m));
  EXPECT_EQ(back, m);
  EXPECT_EQ(wire::decode_request_payload(back.payload).visual.pixels, t);
}

TEST(Wire, ChunkedDeliveryMatchesContiguous) {
  Rng rng(1);
  for (int trial = 0; trial < 2000; ++trial) {
    std::vector<wire::Message> msgs;
    Bytes stream;
    for (std::size_t k = 0, n = 1 + rng.below(3); k < n; ++k) {
      msgs.push_back(random_message(rng));
      const Bytes b = wire::encode_message(msgs.back());
      stream.insert(stream.end(), b.begin(), b.end());
    }
    std::array<std::size_t, 3> cuts = {rng.below(stream.size() + 1), rng.below(stream.size() + 1),
                                       rng.below(stream.size() + 1)};
    std::sort(cuts.begin(), cuts.end());
    wire::Decoder d;
    std::vector<wire::Message> got;
    std::size_t prev = 0;
    for (std::size_t c : {cuts[0], cuts[1], cuts[2], stream.size()}) {
      d.feed({stream.data() + prev, c - prev});
      prev = c;
      while (auto m = d.next()) got.push_back(*m);
    }
    d.finish();
    ASSERT_EQ(got, msgs);
  }
}

TEST(Wire, TypedDecodeErrors) {
  auto kind_of = [](const Bytes& b, std::uint32_t max = wire::kDefaultMaxPayload) {
    try {
      wire::decode_message(b, max);
    } catch (const wire::WireError& e) {
      return e.kind();
    }
    ADD_FAILURE() << "no error";
    return wire::WireError::Kind::bad_payload;
  };
  Bytes good = wire::encode_message({wire::MsgType::error, 1, wire::string_payload("x")});
  Bytes bad = good;
  bad[0] = 'X';
  EXPECT_EQ(kind_of(bad), wire::WireError::Kind::bad_magic);
  bad = good;
  bad[4] = 6;
  EXPECT_EQ(kind_of(bad), wire::WireError::Kind::unknown_type);
  EXPECT_EQ(kind_of(Bytes(good.begin(), good.end() - 1)), wire::WireError::Kind::truncated);
  EXPECT_EQ(kind_of(good, 2), wire::WireError::Kind::oversize);
  Bytes extra = good;
  extra.push_back('C');
  EXPECT_EQ(kind_of(extra), wire::WireError::Kind::bad_payload);
  // Oversize is rejected from the header alone, before the payload arrives.
  Bytes header = frame_bytes(2, 0, {});
  header[13] = header[14] = header[15] = header[16] = 0xff;
  wire::Decoder d;
  d.feed(header);
  EXPECT_THROW(d.next(), wire::WireError);
}

TEST(Wire, PropertyRoundtripAndMutationFuzz) {
  Rng rng(2);
  for (int i = 0; i < 20000; ++i) {
    const auto m = random_message(rng);
    Bytes b = wire::encode_message(m);
    ASSERT_EQ(wire::decode_message(b), m);
    // Mutate: flip bytes, truncate or extend, then decode the whole stream.
    const auto op = rng.below(3);
    if (op == 0)
      for (std::size_t k = 0, n = 1 + rng.below(4); k < n; ++k) b[rng.below(b.size())] ^= static_cast<std::uint8_t>(1 + rng.below(255));
    else if (op == 1)
      b.resize(rng.below(b.size()));
    else
      for (std::size_t k = 0, n = 1 + rng.below(20); k < n; ++k) b.push_back(static_cast<std::uint8_t>(rng.below(256)));
    try {
      wire::Decoder d(1024);
      d.feed(b);
      while (auto got = d.next()) {
        ASSERT_LE(got->payload.size(), 1024u);
      }
      d.finish();
    } catch (const wire::WireError&) {
    }
  }
}

TEST(Wire, PayloadCodecsRoundtrip) {
  Rng rng(3);
  AudioWaveform a{cmt::testing::random_tensor({16}, rng), 8000.0};
  TokenSequence t{{0, 5, 7}};
  wire::EncodeInput in{wire::StageTag::sample, {cmt::testing::random_tensor({4, 4, 1}, rng)}, a, t};
  auto back = wire::decode_request_payload(wire::encode_request_payload(in));
  EXPECT_EQ(back.visual.pixels, in.visual.pixels);
  EXPECT_EQ(back.audio.samples, a.samples);
  EXPECT_EQ(back.audio.sample_rate, 8000.0);
  EXPECT_EQ(back.text.ids, t.ids);

  wire::EncodeOutput eo{{cmt::testing::random_tensor({8}, rng), Modality::textual}, 1.5};
  auto eb = wire::decode_response_payload(wire::encode_response_payload(eo));
  EXPECT_EQ(eb.embedding.vector, eo.embedding.vector);
  EXPECT_EQ(eb.embedding.modality, Modality::textual);
  EXPECT_EQ(eb.service_ms, 1.5);

  wire::FuseOutput fo{distribution_from_logits(cmt::testing::random_tensor({5}, rng)), 2.0};
  auto fb = wire::decode_fuse_response(wire::fuse_response_payload(fo));
  EXPECT_EQ(fb.distribution.probs, fo.distribution.probs);
  EXPECT_EQ(fb.distribution.argmax, fo.distribution.argmax);

  Bytes bad_tokens;
  ByteWriter w(bad_tokens);
  w.u8(2);
  write_cmtt(w, Tensor({2}, std::vector<double>{1.0, 2.5}));
  EXPECT_THROW(wire::decode_request_payload(bad_tokens), wire::WireError);
  EXPECT_THROW(wire::decode_request_payload(Bytes{9}), wire::WireError);
  EXPECT_EQ(wire::decode_string_payload(wire::string_payload("héllo")), "héllo");
}

// --- adaptation, autoscaling, stats ------------------------------------------

TEST(Adapt, TableIsTotalAndMatchesStatedRows) {
  EmotionLabelSet labels;
  for (std::size_t k = 0; k < labels.size(); ++k) EXPECT_NO_THROW(adapt_response(k, labels));
  EXPECT_EQ(adapt_response("happiness").theme, Theme::bright);
  const auto sad = adapt_response("sadness");
  EXPECT_EQ(sad.tone, Tone::empathetic);
  EXPECT_TRUE(sad.supportive_cues);
  EXPECT_EQ(adapt_response("neutral"), AdaptationDirective{});
  EXPECT_EQ(adapt_response("surprise"), (AdaptationDirective{Theme::bright, Tone::celebratory, Speed::fast, false}));
  EXPECT_EQ(adapt_response("fear"), (AdaptationDirective{Theme::dim, Tone::empathetic, Speed::deliberate, true}));
  for (const char* n : {"anger", "disgust", "contempt"})
    EXPECT_EQ(adapt_response(n), (AdaptationDirective{Theme::standard, Tone::empathetic, Speed::deliberate, true}));
  EXPECT_THROW(adapt_response("boredom"), InputError);
  EXPECT_THROW(adapt_response(8, labels), InputError);
  EXPECT_EQ(to_json_string(AdaptationDirective{}),
            R"({"theme":"default","tone":"neutral","response_speed":"normal","supportive_cues":false})");
}

TEST(Autoscale, PolicyExamples) {
  AutoscalePolicy p;
  std::vector<LoadSample> busy;
  for (int t = 0; t < 5; ++t) busy.push_back({double(t), 10.0, 1.0, 50.0});
  auto up = autoscale("visual", busy, 1, p);
  EXPECT_EQ(up.action, ScaleAction::scale_up);
  EXPECT_EQ(up.replicas, 2u);
  EXPECT_EQ(autoscale("visual", busy, 4, p).action, ScaleAction::hold);
  std::vector<LoadSample> idle;
  for (int t = 0; t <= 15; ++t) idle.push_back({double(t), 0.0, 0.0, 0.0});
  auto down = autoscale("visual", idle, 2, p);
  EXPECT_EQ(down.action, ScaleAction::scale_down);
  EXPECT_EQ(down.replicas, 1u);
  EXPECT_EQ(autoscale("visual", idle, 1, p).action, ScaleAction::hold);
  // Shorter than the cooldown: hold.
  EXPECT_EQ(autoscale("visual", {idle.begin(), idle.begin() + 5}, 2, p).action, ScaleAction::hold);
  EXPECT_EQ(autoscale("visual", {}, 2, p).action, ScaleAction::hold);
}

TEST(Autoscale, InvariantsOverRandomWindows) {
  Rng rng(4);
  AutoscalePolicy p;
  p.cooldown_s = 3;
  for (int trial = 0; trial < 20000; ++trial) {
    p.max_replicas = 1 + rng.below(5);
    std::vector<LoadSample> w;
    double t = 0;
    for (std::size_t k = 0, n = rng.below(8); k < n; ++k) {
      t += rng.uniform(0, 2);
      w.push_back({t, rng.bernoulli(0.5) ? 0.0 : double(rng.below(12)), rng.uniform(), rng.uniform(0, 100)});
    }
    const std::size_t replicas = 1 + rng.below(p.max_replicas);
    const auto d = autoscale("s", w, replicas, p);
    ASSERT_GE(d.replicas, 1u);
    ASSERT_LE(d.replicas, p.max_replicas);
    if (d.action == ScaleAction::scale_down) {
      for (const auto& s : w) {
        ASSERT_EQ(s.queue_depth, 0.0);
      }
    }
  }
}

TEST(LatencyStatsTest, MeanAndPercentilesFollowDefinition) {
  std::vector<LatencyRecord> recs;
  double sum = 0;
  for (int i = 1; i <= 100; ++i) {
    recs.push_back({static_cast<std::uint64_t>(i), double(101 - i), 0, 0, 0, 0, 0, 0});
    sum += 101 - i;
  }
  auto s = latency_stats(recs);
  EXPECT_NEAR(s.mean, sum / 100.0, 1e-12);
  EXPECT_EQ(s.p50, 50.0);
  EXPECT_EQ(s.p95, 95.0);
  EXPECT_EQ(s.p99, 99.0);
  EXPECT_EQ(latency_stats({}).count, 0u);
}

// --- services -----------------------------------------------------------------

TEST(StageService, HealthPingKeepsRequestId) {
  StageServer srv("visual", stub_handler(Stage::visual, 0ms, 4, 3), health_json(stub_health(Stage::visual, 4, 3)));
  net::Connection c(net::connect_to(srv.endpoint(), 1s));
  const auto reply = net::round_trip(c, {wire::MsgType::health, 77, {}}, net::Clock::now() + 1s);
  EXPECT_EQ(reply.type, wire::MsgType::health);
  EXPECT_EQ(reply.request_id, 77u);
  EXPECT_EQ(parse_health(wire::decode_string_payload(reply.payload)).stage, "visual");
}

TEST(StageService, ModelStagesMatchInProcessBitExactly) {
  auto spec = cmt::testing::tiny_spec(1);
  ModelPipeline p(init_model(cmt::testing::tiny_model_config(spec), 3));
  const auto data = generate_dataset(spec);
  net::Connection c(net::connect_to(p.map[Stage::visual][0], 1s));
  for (const auto& s : data) {
    const auto reply = net::round_trip(
        c, {wire::MsgType::encode_request, s.id, wire::encode_request_payload({wire::StageTag::visual, s.visual, {}, {}})},
        net::Clock::now() + 2s);
    ASSERT_EQ(reply.type, wire::MsgType::encode_response);
    EXPECT_EQ(wire::decode_response_payload(reply.payload).embedding.vector,
              encode_visual(s.visual, *p.model, Rng(0)).vector);
  }
}

TEST(StageService, ModelErrorsBecomeErrorReplies) {
  auto spec = cmt::testing::tiny_spec(1);
  ModelPipeline p(init_model(cmt::testing::tiny_model_config(spec), 3));
  net::Connection c(net::connect_to(p.map[Stage::textual][0], 1s));
  auto reply = net::round_trip(
      c, {wire::MsgType::encode_request, 5, wire::encode_request_payload({wire::StageTag::textual, {}, {}, {{0, 99}}})},
      net::Clock::now() + 2s);
  EXPECT_EQ(reply.type, wire::MsgType::error);
  EXPECT_EQ(reply.request_id, 5u);
  EXPECT_NE(wire::decode_string_payload(reply.payload).find("99"), std::string::npos);
  reply = net::round_trip(c,
                          {wire::MsgType::encode_request, 6,
                           wire::encode_request_payload({wire::StageTag::visual, {Tensor({4, 4, 1})}, {}, {}})},
                          net::Clock::now() + 2s);
  EXPECT_EQ(reply.type, wire::MsgType::error);
  EXPECT_EQ(reply.request_id, 6u);
}

TEST(StageService, InterleavedConnectionsSeeOwnIds) {
  StageServer srv("acoustic", stub_handler(Stage::acoustic, 2ms, 4, 3), health_json(stub_health(Stage::acoustic, 4, 3)),
                  {}, {4, 256});
  const Bytes payload = wire::encode_request_payload({wire::StageTag::acoustic, {}, {Tensor({8}), 100.0}, {}});
  std::vector<std::thread> ts;
  std::atomic<int> mismatches{0};
  for (int k = 0; k < 4; ++k)
    ts.emplace_back([&, k] {
      net::Connection c(net::connect_to(srv.endpoint(), 1s));
      for (std::uint64_t i = 0; i < 20; ++i) c.send({wire::MsgType::encode_request, 1000 * k + i, payload});
      for (std::uint64_t i = 0; i < 20; ++i) {
        auto r = c.receive(net::Clock::now() + 5s);
        if (!r || r->request_id != 1000 * static_cast<std::uint64_t>(k) + i) ++mismatches;
      }
    });
  for (auto& t : ts) t.join();
  EXPECT_EQ(mismatches.load(), 0);
}

TEST(StageService, MalformedStreamGetsErrorThenClose) {
  StageServer srv("fusion", stub_handler(Stage::fusion, 0ms, 4, 3), health_json(stub_health(Stage::fusion, 4, 3)));
  net::Socket s = net::connect_to(srv.endpoint(), 1s);
  const char junk[] = "XXXXXXXXXXXXXXXXXXXX";
  ASSERT_GT(::send(s.fd(), junk, sizeof junk, MSG_NOSIGNAL), 0);
  net::Connection c(std::move(s));
  auto r = c.receive(net::Clock::now() + 2s);
  ASSERT_TRUE(r);
  EXPECT_EQ(r->type, wire::MsgType::error);
  EXPECT_THROW(c.receive(net::Clock::now() + 2s), ServiceError);
}

// --- gateway ------------------------------------------------------------------

TEST(GatewayTest, DistributedEqualsInProcess) {
  SyntheticSpec spec;
  spec.samples_per_class = 1;
  ModelConfig cfg;
  spec.apply_to(cfg);
  ModelPipeline p(init_model(cfg, 4));
  Gateway g(p.map);
  for (const auto& s : generate_dataset(spec)) {
    const auto r = g.infer(s);
    const auto ref = forward(s, *p.model, Rng(0));
    EXPECT_LE(max_abs_diff(r.distribution.probs, ref.probs), 1e-12);
    EXPECT_EQ(r.distribution.argmax, ref.argmax);
    ASSERT_TRUE(r.directive);
    EXPECT_EQ(*r.directive, adapt_response(ref.argmax, EmotionLabelSet{}));
    EXPECT_LE(r.latency.visual_ms, r.latency.total_ms);
    EXPECT_LE(r.latency.fuse_ms + r.latency.transport_ms, r.latency.total_ms + 1e-9);
  }
}

TEST(GatewayTest, EncodersRunConcurrently) {
  StubPipeline p({30, 30, 30, 0});
  Gateway g(p.map);
  MultimodalSample s{0, {Tensor({4, 4, 1})}, {Tensor({8}), 100}, {{0, 3}}, 0};
  g.infer(s);  // warm connections
  double worst = 0, seq = 1e9;
  for (int i = 0; i < 5; ++i) worst = std::max(worst, g.infer(s).latency.encode_phase_ms);
  for (int i = 0; i < 2; ++i) seq = std::min(seq, g.infer(s, true).latency.encode_phase_ms);
  EXPECT_LT(worst, 60.0);
  EXPECT_GE(seq, 90.0);
}

TEST(GatewayTest, TimeoutNamesLaggingStage) {
  StubPipeline p({0, 300, 0, 0});
  GatewayOptions o;
  o.timeout = 100ms;
  Gateway g(p.map, o);
  MultimodalSample s{0, {Tensor({4, 4, 1})}, {Tensor({8}), 100}, {{0, 3}}, 0};
  try {
    g.infer(s);
    FAIL();
  } catch (const TimeoutError& e) {
    EXPECT_EQ(e.stage(), "acoustic");
    EXPECT_NE(std::string(e.what()).find("acoustic"), std::string::npos);
  }
}

TEST(GatewayTest, RejectsMixedConfigurations) {
  auto spec = cmt::testing::tiny_spec(1);
  ModelPipeline a(init_model(cmt::testing::tiny_model_config(spec), 1));
  ModelConfig other = cmt::testing::tiny_model_config(spec);
  other.dropout = 0.2;
  ModelPipeline b(init_model(other, 1));
  auto map = a.map;
  map[Stage::fusion] = b.map[Stage::fusion];
  EXPECT_THROW(Gateway g(map), ServiceError);
  auto swapped = a.map;
  std::swap(swapped[Stage::visual], swapped[Stage::acoustic]);
  EXPECT_THROW(Gateway g(swapped), ServiceError);
}

TEST(GatewayTest, LeastOutstandingSpreadsLoad) {
  StubPipeline p({40, 0, 0, 0}, 8, 8, {2, 1, 1, 1});
  Gateway g(p.map);
  MultimodalSample s{0, {Tensor({4, 4, 1})}, {Tensor({8}), 100}, {{0, 3}}, 0};
  std::thread t1([&] { g.infer(s); }), t2([&] { g.infer(s); });
  t1.join();
  t2.join();
  EXPECT_EQ(p.servers[0]->served(), 1u);
  EXPECT_EQ(p.servers[1]->served(), 1u);
  g.infer(s);  // idle again: ties go to replica 0
  EXPECT_EQ(p.servers[0]->served(), 2u);
}

TEST(GatewayTest, DoublingBottleneckReplicasRaisesThroughput) {
  std::vector<MultimodalSample> samples{{0, {Tensor({4, 4, 1})}, {Tensor({8}), 100}, {{0, 3}}, 0}};
  Workload w;
  w.requests = 40;
  w.concurrency = 8;
  double rps[2];
  for (std::size_t k = 0; k < 2; ++k) {
    StubPipeline p({20, 1, 1, 1}, 8, 8, {k + 1, 1, 1, 1});
    Gateway g(p.map);
    auto rep = run_bench([&](const MultimodalSample& x, bool seq) { return g.infer(x, seq); }, samples, w);
    ASSERT_FALSE(rep.incomplete) << rep.error;
    rps[k] = rep.throughput_rps;
  }
  EXPECT_GE(rps[1] / rps[0], 1.5) << rps[0] << " vs " << rps[1];
}

TEST(GatewayTest, SupervisorScalesUpUnderLoadAndDownWhenIdle) {
  InProcessLauncher launcher([](Stage s) {
    return std::make_pair(stub_handler(s, s == Stage::visual ? 15ms : 0ms, 8, 8), stub_health(s, 8, 8));
  });
  Gateway::StageMap map;
  for (Stage s : kAllStages) map[s].push_back(launcher.start(s));
  GatewayOptions o;
  o.tick = 50ms;
  o.window = 3;
  o.policy.high_watermark = 2;
  o.policy.cooldown_s = 0.4;
  o.policy.max_replicas = 3;
  Gateway g(map, o, &launcher);
  std::vector<std::string> log;
  std::mutex log_mu;
  g.set_logger([&](const std::string& l) {
    std::lock_guard lk(log_mu);
    log.push_back(l);
  });
  g.start_supervisor();
  std::atomic<bool> run{true};
  std::size_t peak = 1;
  std::vector<std::thread> clients;
  MultimodalSample s{0, {Tensor({4, 4, 1})}, {Tensor({8}), 100}, {{0, 3}}, 0};
  for (int k = 0; k < 8; ++k)
    clients.emplace_back([&] {
      while (run) g.infer(s);
    });
  for (int i = 0; i < 40; ++i) {
    std::this_thread::sleep_for(25ms);
    peak = std::max(peak, g.replicas(Stage::visual));
  }
  run = false;
  for (auto& t : clients) t.join();
  EXPECT_GE(peak, 2u);
  EXPECT_LE(peak, 3u);
  for (int i = 0; i < 60 && g.replicas(Stage::visual) > 1; ++i) std::this_thread::sleep_for(50ms);
  g.stop_supervisor();
  EXPECT_EQ(g.replicas(Stage::visual), 1u);
  for (const auto& d : g.decisions()) {
    EXPECT_GE(d.replicas, 1u);
    EXPECT_LE(d.replicas, 3u);
  }
  EXPECT_FALSE(log.empty());
}

TEST(GatewayTest, ServedGatewayMatchesDirectCall) {
  auto spec = cmt::testing::tiny_spec(1);
  ModelPipeline p(init_model(cmt::testing::tiny_model_config(spec), 6));
  Gateway g(p.map);
  HealthInfo h = model_health(Stage::fusion, *p.model);
  h.stage = "gateway";
  StageServer front("gateway", gateway_handler(g), health_json(h), {}, {16, 256});
  GatewayClient client(front.endpoint(), 2s, EmotionLabelSet(p.model->config.labels));
  for (const auto& s : generate_dataset(spec)) {
    const auto r = client.infer(s);
    EXPECT_EQ(r.distribution.probs, forward(s, *p.model, Rng(0)).probs);
    EXPECT_GT(r.latency.total_ms, 0.0);
  }
  EXPECT_EQ(GatewayClient::probe(front.endpoint(), 1s).config_hash, config_hash(p.model->config));
}

TEST(Bench, StubSpeedupAndCsv) {
  StubPipeline p({30, 30, 30, 0});
  Gateway g(p.map);
  std::vector<MultimodalSample> samples{{0, {Tensor({4, 4, 1})}, {Tensor({8}), 100}, {{0, 3}}, 0}};
  Workload w;
  w.requests = 5;
  w.sequential_baseline = true;
  auto rep = run_bench([&](const MultimodalSample& x, bool seq) { return g.infer(x, seq); }, samples, w);
  ASSERT_FALSE(rep.incomplete);
  ASSERT_TRUE(rep.baseline);
  EXPECT_GE(rep.speedup, 2.0);
  double sum = 0;
  for (const auto& r : rep.records) sum += r.total_ms;
  EXPECT_NEAR(rep.stats.mean, sum / 5.0, 1e-9);
  const std::string csv = bench_csv(rep);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "request_id,total_ms,visual_ms,audio_ms,text_ms,fuse_ms,transport_ms");
  EXPECT_NE(csv.find("\nmean,"), std::string::npos);
}

TEST(Bench, FailureMarksIncomplete) {
  StubPipeline p({0, 0, 0, 0});
  Gateway g(p.map);
  std::vector<MultimodalSample> samples{{0, {Tensor({4, 4, 1})}, {Tensor({8}), 100}, {{0, 3}}, 0}};
  std::atomic<int> n{0};
  auto rep = run_bench(
      [&](const MultimodalSample& x, bool seq) {
        if (++n == 3) throw ServiceError("stage down");
        return g.infer(x, seq);
      },
      samples, {10, 1, 0.0, false});
  EXPECT_TRUE(rep.incomplete);
  EXPECT_EQ(rep.records.size(), 2u);
  EXPECT_NE(bench_csv(rep).find("mean_incomplete"), std::string::npos);
}

TEST(ServingConfigTest, ParsesAndValidates) {
  auto j = nlohmann::json::parse(R"({
    "stages": [
      {"stage": "visual", "replicas": 2, "checkpoint": "m.cmtc"},
      {"stage": "acoustic", "checkpoint": "m.cmtc"},
      {"stage": "textual", "checkpoint": "m.cmtc"},
      {"stage": "fusion", "checkpoint": "m.cmtc", "capacity": 2}
    ],
    "gateway": {"listen": "127.0.0.1:9000", "timeout_ms": 500,
                "autoscaler": {"high_watermark": 3, "low_watermark_pct": 10, "cooldown_s": 5, "max_replicas": 6}}
  })");
  auto c = parse_serving_config(j);
  EXPECT_EQ(c.stages[0].replicas, 2u);
  EXPECT_EQ(c.gateway.timeout, 500ms);
  EXPECT_EQ(c.gateway.policy.max_replicas, 6u);
  EXPECT_EQ(parse_serving_config(serving_config_json(c)).gateway.policy.cooldown_s, 5.0);
  j["stages"].erase(3);
  EXPECT_THROW(parse_serving_config(j), ConfigError);
  EXPECT_THROW(parse_stage("audio"), ConfigError);
  EXPECT_EQ(net::parse_endpoint("127.0.0.1:80").port, 80);
  EXPECT_THROW(net::parse_endpoint("host:x"), ConfigError);
}
