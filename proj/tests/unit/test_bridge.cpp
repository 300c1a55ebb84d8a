#include <doctest.h>

#include <thread>

#include "bodyloop/bridge.hpp"
#include "helpers.hpp"
#include "ws_client.hpp"

using namespace bodyloop;
using namespace bodyloop::bridge;
using nlohmann::json;
using testing_support::WsClient;

namespace {

Inbound msg(std::int64_t seq, std::string type = "start") {
  Inbound in;
  in.seq = seq;
  in.type = std::move(type);
  return in;
}

session::SessionConfig bridge_config(const std::filesystem::path& dir) {
  const json ev{{"onset", 0.2}, {"peak_level", 0.9}, {"rise_time", 0.05}, {"decay_time", 0.3}};
  const json profile{{"events", {ev}}};
  const json j{{"mode", "corpus"},
               {"seed", 2},
               {"duration", 1.0},
               {"output_dir", "served"},
               {"sources",
                {{{"kind", "emg"}, {"channel_id", 0}, {"synth", {{"profile", profile}}}},
                 {{"kind", "mmg"}, {"channel_id", 0}, {"synth", {{"profile", profile}}}}}},
               {"ritual", {{"episodes", 100}, {"steps", 5}, {"step_rate", 20.0}}}};
  return session::parse_config(j, dir);
}

std::vector<std::int64_t> seqs(const std::vector<Inbound>& v) {
  std::vector<std::int64_t> out;
  for (const auto& in : v) out.push_back(in.seq);
  return out;
}

}  // namespace

TEST_CASE("envelope parsing") {
  CHECK_FALSE(parse_inbound("{nope").message);
  CHECK_FALSE(parse_inbound("[1,2]").message);
  CHECK_FALSE(parse_inbound(R"({"v":1,"type":"start"})").message);
  CHECK_FALSE(parse_inbound(R"({"v":1,"seq":0,"type":"start"})").message);
  CHECK_FALSE(parse_inbound(R"({"v":1,"seq":"3","type":"start"})").message);

  const auto ok = parse_inbound(R"({"v":1,"seq":3,"t":0.5,"type":"train","payload":{"lambda":0.1}})");
  REQUIRE(ok.message);
  CHECK(ok.message->problem.empty());
  CHECK(ok.message->type == "train");
  CHECK(ok.message->payload.at("lambda") == 0.1);

  CHECK_FALSE(parse_inbound(R"({"v":2,"seq":3,"type":"start"})").message->problem.empty());
  CHECK_FALSE(parse_inbound(R"({"seq":3,"type":"start"})").message->problem.empty());
  CHECK_FALSE(parse_inbound(R"({"v":1,"seq":3})").message->problem.empty());
  CHECK_FALSE(parse_inbound(R"({"v":1,"seq":3,"type":"x","payload":[1]})").message->problem.empty());

  const auto env = make_envelope(7, 1.5, "ack", {{"seq", 2}});
  CHECK(env.at("v") == 1);
  CHECK(env.at("seq") == 7);
  CHECK(env.at("type") == "ack");
}

TEST_CASE("sequencer: in order, buffered and duplicate delivery") {
  Sequencer s;
  CHECK(seqs(s.accept(msg(1), 0.0).ready) == std::vector<std::int64_t>{1});
  CHECK(s.accept(msg(3), 0.0).ready.empty());
  CHECK(s.accept(msg(4), 0.0).ready.empty());
  CHECK(s.pending() == 2);
  CHECK(seqs(s.accept(msg(2), 0.0).ready) == std::vector<std::int64_t>{2, 3, 4});
  CHECK(s.next() == 5);

  s.remember(2, {"ack", {{"seq", 2}}});
  const auto dup = s.accept(msg(2), 0.0);
  CHECK(dup.ready.empty());
  REQUIRE(dup.replay);
  CHECK(dup.replay->type == "ack");
  const auto gone = s.accept(msg(1), 0.0);
  CHECK(gone.error);

  CHECK(s.accept(msg(6), 0.0).ready.empty());
  CHECK(s.accept(msg(6), 0.0).ready.empty());  // repeat of a waiting seq
  CHECK(s.pending() == 1);
}

TEST_CASE("sequencer: stale gaps are skipped, pending is bounded") {
  Sequencer s(3);
  s.accept(msg(1), 0.0);
  s.accept(msg(4), 0.0);
  s.accept(msg(5), 0.5);
  CHECK(s.expire(0.9, 1.0).empty());
  CHECK(seqs(s.expire(1.1, 1.0)) == std::vector<std::int64_t>{4, 5});
  CHECK(s.next() == 6);

  s.accept(msg(8), 2.0);
  s.accept(msg(9), 2.0);
  s.accept(msg(10), 2.0);
  CHECK(s.accept(msg(11), 2.0).error);
  CHECK(seqs(s.accept(msg(6), 2.0).ready) == std::vector<std::int64_t>{6});
}

TEST_CASE("server: protocol session") {
  const auto dir = testing_support::scratch_dir("bridge_live");
  Server server(bridge_config(dir), {});
  server.start();
  WsClient op("127.0.0.1", server.port());

  const auto first = op.read();
  CHECK(first.at("type") == "snapshot");
  CHECK(first.at("v") == 1);
  CHECK(first.at("payload").at("running") == false);

  SUBCASE("calibrate flow") {
    CHECK(op.reply(op.send("start")).at("type") == "ack");
    REQUIRE(op.reply(op.send("record_demo", {{"label", {{"tension", 0.9}, {"abruptness", 0.5}, {"relaxation", 0.1}}}}))
                .at("type") == "ack");
    std::this_thread::sleep_for(std::chrono::milliseconds(400));
    const auto a = op.reply(op.send("end_demo"));
    REQUIRE(a.at("type") == "ack");
    REQUIRE(op.reply(op.send("record_demo", {{"label", {{"tension", 0.1}, {"abruptness", 0.2}, {"relaxation", 0.8}}}}))
                .at("type") == "ack");
    std::this_thread::sleep_for(std::chrono::milliseconds(400));
    const auto b = op.reply(op.send("end_demo"));
    REQUIRE(b.at("type") == "ack");
    const auto trained = op.reply(op.send("train", {{"lambda", 0.05}}));
    REQUIRE(trained.at("type") == "ack");
    const auto& p = trained.at("payload");
    CHECK(p.at("row_count") == a.at("payload").at("rows").get<int>() + b.at("payload").at("rows").get<int>());
    CHECK(p.at("requested_lambda") == 0.05);
    CHECK(p.contains("lambda"));
  }

  SUBCASE("bad gain leaves state unchanged") {
    const auto before = op.reply(op.send("snapshot"));
    CHECK(before.at("type") == "ack");
    const auto err = op.reply(op.send("set_gain", {{"i", 0}, {"j", 0}, {"value", 5.0}}));
    CHECK(err.at("type") == "err");
    CHECK(err.at("payload").contains("reason"));
    op.send("snapshot");
    const auto snap = op.read_type("snapshot");
    CHECK(snap.at("payload").at("oscnet").at("feedback_gain")[0][0] != 5.0);
    CHECK(op.reply(op.send("set_gain", {{"i", 0}, {"j", 1}, {"value", 0.5}})).at("type") == "ack");
  }

  SUBCASE("malformed input keeps the connection open") {
    op.send_raw("{this is not json");
    const auto err = op.reply();
    CHECK(err.at("type") == "err");
    CHECK(err.at("payload").at("seq").is_null());
    op.send_raw(R"({"v":1,"type":"start"})");
    CHECK(op.reply().at("type") == "err");

    const auto unknown = op.reply(op.send("juggle"));
    CHECK(unknown.at("type") == "err");
    CHECK(op.reply(op.send("start")).at("type") == "ack");
  }

  CHECK(op.ordered());
  server.stop();
}

TEST_CASE("server: retries and reordering") {
  const auto dir = testing_support::scratch_dir("bridge_order");
  Server server(bridge_config(dir), {});
  server.start();
  WsClient op("127.0.0.1", server.port());
  op.read_type("snapshot");

  op.send_with_seq(1, "set_sigma", {{"value", 0.3}});
  const auto ack1 = op.reply(1);
  CHECK(ack1.at("payload").at("sigma") == 0.3);
  op.send_with_seq(1, "set_sigma", {{"value", 0.3}});
  const auto again = op.reply(1);
  CHECK(again.at("type") == "ack");
  CHECK(again.at("payload") == ack1.at("payload"));
  CHECK(again.at("seq").get<int>() > ack1.at("seq").get<int>());

  // seq 3 arrives before 2: effects still apply as 2 then 3.
  op.send_with_seq(3, "set_sigma", {{"value", 0.7}});
  op.send_with_seq(2, "set_sigma", {{"value", 0.1}});
  const auto r2 = op.reply();
  const auto r3 = op.reply();
  CHECK(r2.at("payload").at("seq") == 2);
  CHECK(r3.at("payload").at("seq") == 3);
  op.send_with_seq(4, "snapshot");
  CHECK(op.read_type("snapshot").at("payload").at("ritual").at("sigma") == 0.7);
  CHECK(op.ordered());
  server.stop();
}

TEST_CASE("server: operator lock and takeover") {
  const auto dir = testing_support::scratch_dir("bridge_lock");
  Server server(bridge_config(dir), {});
  server.start();
  WsClient a("127.0.0.1", server.port());
  WsClient b("127.0.0.1", server.port());
  a.read_type("snapshot");
  b.read_type("snapshot");

  CHECK(a.reply(a.send("start")).at("type") == "ack");
  const auto denied = b.reply(b.send("stop"));
  CHECK(denied.at("type") == "err");
  CHECK(b.reply(b.send("snapshot")).at("type") == "ack");  // read-only is fine
  CHECK(b.reply(b.send("takeover")).at("type") == "ack");
  CHECK(a.read_type("operator").at("payload").at("operator") == false);
  CHECK(b.reply(b.send("stop")).at("type") == "ack");
  CHECK(a.reply(a.send("start")).at("type") == "err");
  CHECK(b.reply(b.send("release")).at("type") == "ack");
  CHECK(a.reply(a.send("start")).at("type") == "ack");
  server.stop();
}

TEST_CASE("server: a stalled reader does not stall the engine or other clients") {
  const auto dir = testing_support::scratch_dir("bridge_slow");
  ServerOptions options;
  options.start_running = true;
  Server server(bridge_config(dir), options);
  server.start();
  WsClient slow("127.0.0.1", server.port());
  WsClient fast("127.0.0.1", server.port());
  fast.read_type("snapshot");

  const auto t0 = std::chrono::steady_clock::now();
  double first_t = -1.0;
  double last_t = -1.0;
  int frames = 0;
  while (std::chrono::steady_clock::now() - t0 < std::chrono::milliseconds(1500)) {
    const auto j = fast.read();
    if (j.at("type") != "oscnet_state") continue;
    const double t = j.at("payload").at("t").get<double>();
    if (first_t < 0) first_t = t;
    last_t = t;
    ++frames;
  }
  CHECK(frames >= 10);
  CHECK(frames <= 17);  // <= 10 Hz
  CHECK(last_t - first_t > 1.0);

  // The stalled client then sees a snapshot first, coalesced state and no
  // reply lost.
  CHECK(slow.read().at("type") == "snapshot");
  const auto seq = slow.send("snapshot");
  CHECK(slow.reply(seq).at("type") == "ack");
  CHECK(slow.ordered());
  CHECK(fast.ordered());
  server.stop();
}
