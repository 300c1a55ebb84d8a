#include <doctest.h>

#include <cmath>
#include <map>

#include "bodyloop/engine.hpp"
#include "bodyloop/error.hpp"
#include "helpers.hpp"

using namespace bodyloop;
using namespace bodyloop::live;
using nlohmann::json;

namespace {

json event(double onset, double peak) {
  return {{"onset", onset}, {"peak_level", peak}, {"rise_time", 0.05}, {"decay_time", 0.3}};
}

session::SessionConfig live_config(const std::filesystem::path& dir) {
  const json profile{{"events", {event(0.3, 0.9), event(1.2, 0.6)}}};
  const json j{{"mode", "corpus"},
               {"seed", 4},
               {"duration", 2.0},
               {"output_dir", "live"},
               {"sources",
                {{{"kind", "emg"}, {"channel_id", 0}, {"synth", {{"profile", profile}}}},
                 {{"kind", "mmg"}, {"channel_id", 0}, {"synth", {{"profile", profile}}}}}},
               {"ritual", {{"episodes", 3}, {"steps", 4}, {"step_rate", 8.0}}}};
  return session::parse_config(j, dir);
}

std::map<std::string, int> run_for(Engine& engine, double seconds, double dt = 0.025) {
  std::map<std::string, int> counts;
  for (double t = 0.0; t < seconds - 1e-9; t += dt) {
    for (const auto& f : engine.tick(dt)) ++counts[f.type];
  }
  return counts;
}

const json label{{"tension", 0.8}, {"abruptness", 0.4}, {"relaxation", 0.2}};

}  // namespace

TEST_CASE("engine: idle until started") {
  const auto dir = testing_support::scratch_dir("engine_idle");
  Engine engine(live_config(dir));
  CHECK(engine.tick(0.1).empty());
  CHECK(engine.time() == 0.0);
  CHECK(engine.execute("start", json::object()).ok);
  CHECK_FALSE(engine.tick(0.1).empty());
  CHECK(engine.time() == doctest::Approx(0.1));
  CHECK(engine.execute("stop", json::object()).ok);
  CHECK(engine.tick(0.1).empty());
}

TEST_CASE("engine: stream rates stay within their limits") {
  const auto dir = testing_support::scratch_dir("engine_rates");
  Engine engine(live_config(dir));
  engine.execute("start", json::object());
  const double seconds = 4.0;  // sources loop after 2 s
  const auto counts = run_for(engine, seconds, 0.01);
  CHECK(counts.at("features") <= 40 * seconds + 1);
  CHECK(counts.at("features") >= 30 * seconds);
  CHECK(counts.at("regime") <= 40 * seconds + 1);
  CHECK(counts.at("oscnet_state") <= 10 * seconds + 1);
  CHECK(counts.at("oscnet_state") >= 9 * seconds);
  CHECK(counts.at("ritual_proximity") <= 10 * seconds + 1);
  CHECK(counts.at("ritual_episode") == 3);  // 3 episodes x 4 steps at 8 steps/s
  CHECK(engine.ritual()->finished());
}

TEST_CASE("engine: audio sink receives real-time sample counts") {
  const auto dir = testing_support::scratch_dir("engine_audio");
  Engine engine(live_config(dir));
  std::size_t frames = 0;
  bool bounded = true;
  engine.set_audio_sink([&](const std::vector<std::vector<double>>& block) {
    frames += block.front().size();
    for (const auto& ch : block) {
      for (double v : ch) bounded = bounded && std::isfinite(v) && std::abs(v) < 1.0;
    }
  });
  engine.execute("start", json::object());
  run_for(engine, 1.0);
  CHECK(frames == 48000);
  CHECK(bounded);
}

TEST_CASE("engine: record, end and train report the model summary") {
  const auto dir = testing_support::scratch_dir("engine_train");
  Engine engine(live_config(dir));
  CHECK_FALSE(engine.execute("train", json::object()).ok);  // nothing recorded
  CHECK_FALSE(engine.execute("end_demo", json::object()).ok);
  engine.execute("start", json::object());

  REQUIRE(engine.execute("record_demo", {{"label", label}, {"id", "tense"}}).ok);
  CHECK_FALSE(engine.execute("record_demo", {{"label", label}}).ok);  // already recording
  run_for(engine, 1.0);
  const auto first = engine.execute("end_demo", json::object());
  REQUIRE(first.ok);
  const auto rows_a = first.detail.at("rows").get<std::size_t>();
  CHECK(rows_a >= 35);

  REQUIRE(engine.execute("record_demo", {{"label", {{"tension", 0.1}, {"abruptness", 0.1}, {"relaxation", 0.9}}}}).ok);
  run_for(engine, 1.0);
  const auto second = engine.execute("end_demo", json::object());
  REQUIRE(second.ok);
  CHECK(second.detail.at("id") == "demo-2");

  const auto trained = engine.execute("train", {{"lambda", 0.01}});
  REQUIRE(trained.ok);
  CHECK(trained.detail.at("row_count") == rows_a + second.detail.at("rows").get<std::size_t>());
  CHECK(trained.detail.at("requested_lambda") == 0.01);
  CHECK(engine.model().has_value());
  CHECK(std::filesystem::exists(dir / "live" / "models" / "nuance.json"));
  CHECK(std::filesystem::exists(dir / "live" / "demos" / "tense.json"));
  CHECK(engine.snapshot().at("model").at("row_count") == trained.detail.at("row_count"));

  CHECK_FALSE(engine.execute("train", {{"lambda", -1.0}}).ok);
  CHECK_FALSE(engine.execute("train", {{"lambda", "big"}}).ok);
  CHECK_FALSE(engine.execute("record_demo", {{"label", label}, {"id", "tense"}}).ok);  // id reused
  CHECK_FALSE(engine.execute("record_demo", {{"label", {{"tension", 2.0}, {"abruptness", 0.0}, {"relaxation", 0.0}}}}).ok);
}

TEST_CASE("engine: set_gain validates and leaves state unchanged on error") {
  const auto dir = testing_support::scratch_dir("engine_gain");
  Engine engine(live_config(dir));
  const auto before = engine.network().base_gain();
  CHECK_FALSE(engine.execute("set_gain", {{"i", 0}, {"j", 1}, {"value", 0.9}}).ok);  // above g_max
  CHECK_FALSE(engine.execute("set_gain", {{"i", 20}, {"j", 1}, {"value", 0.1}}).ok);
  CHECK_FALSE(engine.execute("set_gain", {{"i", -1}, {"j", 1}, {"value", 0.1}}).ok);
  CHECK_FALSE(engine.execute("set_gain", {{"i", 0}, {"j", 1}}).ok);
  CHECK_FALSE(engine.execute("set_gain", {{"i", 0}, {"j", 1}, {"value", 0.1}, {"k", 2}}).ok);
  CHECK(engine.network().base_gain() == before);
  REQUIRE(engine.execute("set_gain", {{"i", 3}, {"j", 7}, {"value", 0.8}}).ok);
  CHECK(engine.network().base_gain()[3][7] == 0.8);
}

TEST_CASE("engine: thresholds, sigma and agent transport") {
  const auto dir = testing_support::scratch_dir("engine_agent");
  Engine engine(live_config(dir));
  CHECK_FALSE(engine.execute("set_thresholds", {{"near", 3.0}, {"far", 1.0}}).ok);
  CHECK(engine.ritual()->proximity_config().near == 0.5);
  CHECK_FALSE(engine.execute("set_thresholds", {{"activity_fraction", 1.5}}).ok);
  CHECK(engine.execute("set_thresholds", {{"near", 1.0}, {"far", 3.0}, {"invert", true}}).ok);
  CHECK(engine.ritual()->proximity_config().far == 3.0);
  CHECK(engine.ritual()->proximity_config().invert);

  CHECK_FALSE(engine.execute("set_sigma", {{"value", -0.1}}).ok);
  CHECK(engine.execute("set_sigma", {{"value", 0.2}}).ok);
  CHECK(engine.snapshot().at("ritual").at("sigma") == 0.2);

  engine.execute("start", json::object());
  CHECK(engine.execute("agent_pause", json::object()).ok);
  const auto paused = run_for(engine, 1.0);
  CHECK_FALSE(paused.contains("ritual_episode"));
  CHECK(engine.execute("agent_resume", json::object()).ok);
  const auto resumed = run_for(engine, 1.0);
  CHECK(resumed.at("ritual_episode") >= 1);

  CHECK_FALSE(engine.execute("dance", json::object()).ok);
  CHECK_FALSE(engine.execute("start", json::array()).ok);
}

TEST_CASE("engine: snapshot carries the full state") {
  const auto dir = testing_support::scratch_dir("engine_snapshot");
  Engine engine(live_config(dir));
  engine.execute("start", json::object());
  run_for(engine, 0.5);
  const auto s = engine.snapshot();
  for (const auto* key : {"running", "time", "model", "recording", "demos", "oscnet", "ritual", "features", "commands"}) {
    CHECK_MESSAGE(s.contains(key), key);
  }
  CHECK(s.at("oscnet").at("oscillators").size() == 20);
  CHECK(s.at("commands").size() == Engine::command_types().size());
}
