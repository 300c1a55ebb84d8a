#include <doctest.h>

#include <cmath>
#include <cstring>
#include <numbers>

#include "bodyloop/error.hpp"
#include "bodyloop/oscnet.hpp"
#include "bodyloop/rng.hpp"
#include "helpers.hpp"

using namespace bodyloop;
using namespace bodyloop::oscnet;

namespace {

ControlAction all(bool on) {
  ControlAction a;
  for (std::size_t i = 0; i < kOscillatorCount; ++i) (on ? a.activate : a.mute).push_back(i);
  return a;
}

ControlAction random_action(Rng& rng, const OscNetwork& net) {
  ControlAction a;
  const auto pick = [&] { return static_cast<std::size_t>(rng.below(kOscillatorCount)); };
  for (int k = 0; k < 3; ++k) {
    if (rng.uniform() < 0.5) a.activate.push_back(pick());
    if (rng.uniform() < 0.3) a.mute.push_back(pick());
    a.volume_targets[pick()] = rng.uniform(-0.5, 1.5);
    a.phase_offsets[pick()] = rng.uniform(-10.0, 10.0);
    const auto g = pick();
    a.glissandi[g] = {net.oscillators()[g].base_freq * rng.uniform(0.5, 2.0), rng.uniform(0.0, 500.0)};
    a.feedback_delta[{pick(), pick()}] = rng.uniform(-1.0, 1.0);
  }
  if (rng.uniform() < 0.2) a.feedback_scale = rng.uniform(0.0, 4.0);
  if (rng.uniform() < 0.1) a.master_gain = rng.uniform(-0.5, 1.5);
  return a;
}

// |X(f)| of x[first, first+len) by direct correlation.
double magnitude_at(const std::vector<double>& x, double f, double rate, std::size_t first, std::size_t len) {
  return testing_support::lock_in(x, f, rate, first, len).amplitude;
}

}  // namespace

TEST_CASE("network always has twenty oscillators near the pitch set") {
  OscConfig cfg;
  OscNetwork net(cfg, 7);
  REQUIRE(net.oscillators().size() == 20);
  const double span = std::exp2(cfg.glide_semitones / 12.0);
  for (const auto& o : net.oscillators()) {
    const double pitch = cfg.pitch_set[o.index % cfg.pitch_set.size()];
    CHECK(o.base_freq >= pitch / span);
    CHECK(o.base_freq <= pitch * span);
    CHECK(std::abs(1200.0 * std::log2(o.base_freq / pitch)) <= cfg.detune_cents + 1e-9);
  }
  for (const auto& row : net.feedback_gain()) {
    REQUIRE(row.size() == 20);
    for (double g : row) CHECK((g >= 0.0 && g <= cfg.g_max));
  }
}

TEST_CASE("mute all gives silence after the slew") {
  OscNetwork net(OscConfig{}, 3);
  net.apply(all(true));
  net.render(4800);
  net.apply(all(false));
  net.render(static_cast<std::size_t>(0.05 * 48000) + 1);
  const auto block = net.render(4800);
  for (const auto& ch : block) {
    CHECK(std::sqrt(testing_support::energy(ch) / static_cast<double>(ch.size())) < 1e-4);
    for (double v : ch) REQUIRE(v == 0.0);
  }
}

TEST_CASE("volume target reached after the slew") {
  OscNetwork net(OscConfig{}, 3);
  ControlAction a;
  a.activate = {3};
  a.volume_targets[3] = 0.5;
  net.apply(a);
  net.render(static_cast<std::size_t>(0.05 * 48000) + 2);
  CHECK(std::abs(net.oscillators()[3].amp - 0.5) <= 1e-3);
}

TEST_CASE("amplitude and frequency move without jumps") {
  OscConfig cfg;
  OscNetwork net(cfg, 11);
  ControlAction a = all(true);
  for (std::size_t i = 0; i < 20; ++i) {
    a.volume_targets[i] = 1.0;
    a.glissandi[i] = {net.oscillators()[i].base_freq * 1.05, 30.0};
  }
  net.apply(a);
  const double amp_step = 1.0 / (cfg.slew_time * cfg.sample_rate);
  const double freq_step = 30.0 / cfg.sample_rate;
  auto prev = net.oscillators();
  for (int s = 0; s < 3000; ++s) {
    net.render(1);
    const auto& now = net.oscillators();
    for (std::size_t i = 0; i < 20; ++i) {
      REQUIRE(std::abs(now[i].amp - prev[i].amp) <= amp_step * (1 + 1e-9));
      REQUIRE(std::abs(now[i].freq - prev[i].freq) <= freq_step * (1 + 1e-9));
    }
    prev = now;
  }
}

TEST_CASE("feedback gains are clipped to g_max exactly") {
  OscConfig cfg;
  OscNetwork net(cfg, 5);
  ControlAction a;
  a.feedback_delta[{2, 4}] = 5.0;
  a.feedback_delta[{4, 2}] = -5.0;
  net.apply(a);
  CHECK(net.base_gain()[2][4] == cfg.g_max);
  net.render(static_cast<std::size_t>(cfg.slew_time * cfg.sample_rate) + 2);
  CHECK(net.feedback_gain()[2][4] == cfg.g_max);
  CHECK(net.feedback_gain()[4][2] == 0.0);

  ControlAction scale;
  scale.feedback_scale = 100.0;
  net.apply(scale);
  net.render(static_cast<std::size_t>(cfg.slew_time * cfg.sample_rate) + 2);
  for (const auto& row : net.feedback_gain()) {
    for (double g : row) CHECK(g <= cfg.g_max);
  }
}

TEST_CASE("single oscillator without feedback renders a clean sine") {
  OscConfig cfg;
  cfg.pitch_set = {110.0};
  cfg.detune_cents = 0.0;
  OscNetwork net(cfg, 1);
  ControlAction a;
  a.activate = {0};
  a.volume_targets[0] = 1.0;
  a.feedback_scale = 0.0;
  net.apply(a);
  const auto fs = static_cast<std::size_t>(cfg.sample_rate);
  const auto x = net.render(fs / 10 + fs)[0];
  const std::size_t first = fs / 10;

  // 1 Hz bins over one second.
  double best = 0.0;
  int best_bin = 0;
  for (int f = 1; f <= 1000; ++f) {
    const double m = magnitude_at(x, f, cfg.sample_rate, first, fs);
    if (m > best) {
      best = m;
      best_bin = f;
    }
  }
  CHECK(std::abs(best_bin - 110) <= 1);

  const double fundamental = magnitude_at(x, 110.0, cfg.sample_rate, first, fs);
  double harmonics = 0.0;
  for (int h = 2; h <= 10; ++h) {
    const double m = magnitude_at(x, 110.0 * h, cfg.sample_rate, first, fs);
    harmonics += m * m;
  }
  CHECK(std::sqrt(harmonics) / fundamental < 0.01);
}

TEST_CASE("zero active oscillators yield exact digital silence") {
  OscNetwork net(OscConfig{}, 9);
  for (const auto& ch : net.render(2048)) {
    for (double v : ch) REQUIRE(v == 0.0);
  }
}

TEST_CASE("rendering in pieces matches one call sample for sample") {
  OscConfig cfg;
  cfg.channels = 4;
  OscNetwork a(cfg, 21);
  OscNetwork b(cfg, 21);
  a.apply(all(true));
  b.apply(all(true));
  const auto whole = a.render(6000);
  auto first = b.render(3000);
  const auto second = b.render(3000);
  for (std::size_t c = 0; c < 4; ++c) {
    first[c].insert(first[c].end(), second[c].begin(), second[c].end());
    REQUIRE(std::memcmp(whole[c].data(), first[c].data(), whole[c].size() * sizeof(double)) == 0);
  }
}

TEST_CASE("same seed and actions give bit-identical audio") {
  auto run = [](std::uint64_t seed) {
    OscNetwork net(OscConfig{}, seed);
    Rng control(99);
    std::vector<double> out;
    for (int b = 0; b < 200; ++b) {
      net.enqueue(random_action(control, net));
      const auto block = net.render(256);
      out.insert(out.end(), block[0].begin(), block[0].end());
    }
    return out;
  };
  const auto x = run(4);
  const auto y = run(4);
  REQUIRE(std::memcmp(x.data(), y.data(), x.size() * sizeof(double)) == 0);
  const auto z = run(5);
  CHECK(std::memcmp(x.data(), z.data(), x.size() * sizeof(double)) != 0);
}

TEST_CASE("maximum feedback with everything active stays bounded") {
  OscConfig cfg;
  OscNetwork net(cfg, 17);
  ControlAction a = all(true);
  for (std::size_t i = 0; i < 20; ++i) {
    a.volume_targets[i] = 1.0;
    for (std::size_t j = 0; j < 20; ++j) a.feedback_set[{i, j}] = cfg.g_max;
  }
  a.master_gain = 1.0;
  net.apply(a);
  const auto total = static_cast<std::size_t>(10 * cfg.sample_rate);
  std::size_t done = 0;
  double peak = 0.0;
  while (done < total) {
    for (const auto& ch : net.render(cfg.block_size)) {
      for (double v : ch) {
        REQUIRE(std::isfinite(v));
        REQUIRE(std::abs(v) < 1.0);
        peak = std::max(peak, std::abs(v));
      }
    }
    done += cfg.block_size;
  }
  CHECK(peak > 0.1);
}

TEST_CASE("randomized actions keep every state within bounds") {
  OscConfig cfg;
  OscNetwork net(cfg, 23);
  Rng control(5);
  for (int b = 0; b < 400; ++b) {
    net.enqueue(random_action(control, net));
    for (const auto& ch : net.render(256)) {
      for (double v : ch) REQUIRE((std::isfinite(v) && std::abs(v) < 1.0));
    }
    REQUIRE(net.oscillators().size() == 20);
    const double span = std::exp2(cfg.glide_semitones / 12.0);
    for (const auto& o : net.oscillators()) {
      REQUIRE((o.amp >= 0.0 && o.amp <= 1.0));
      REQUIRE((o.phase >= 0.0 && o.phase < 2.0 * std::numbers::pi));
      REQUIRE(o.freq >= o.base_freq / span * (1 - 1e-12));
      REQUIRE(o.freq <= o.base_freq * span * (1 + 1e-12));
    }
    for (const auto& row : net.feedback_gain()) {
      for (double g : row) REQUIRE((g >= 0.0 && g <= cfg.g_max));
    }
    REQUIRE((net.master_gain() >= 0.0 && net.master_gain() <= 1.0));
  }
}

TEST_CASE("malformed actions are rejected") {
  OscNetwork net(OscConfig{}, 1);
  ControlAction a;
  a.activate = {20};
  CHECK_THROWS_AS(net.apply(a), Error);
  CHECK_THROWS_AS(net.enqueue(a), Error);

  ControlAction g;
  g.feedback_delta[{0, 25}] = 0.1;
  CHECK_THROWS_AS(net.apply(g), Error);

  ControlAction d;
  d.diffusion = Matrix(20, std::vector<double>{0.7, 0.7});
  CHECK_THROWS_AS(net.apply(d), Error);
  d.diffusion = Matrix(20, std::vector<double>{0.5});
  CHECK_THROWS_AS(net.apply(d), Error);
  d.diffusion = Matrix(20, std::vector<double>{-0.1, 0.5});
  CHECK_THROWS_AS(net.apply(d), Error);

  ControlAction n;
  n.volume_targets[1] = std::nan("");
  CHECK_THROWS_AS(net.apply(n), Error);

  OscConfig bad;
  bad.channels = 9;
  CHECK_THROWS_AS(OscNetwork(bad, 1), Error);
}

TEST_CASE("queued actions apply at the next block boundary") {
  OscNetwork net(OscConfig{}, 1);
  net.enqueue(all(true));
  CHECK_FALSE(net.oscillators()[0].active);
  net.render(1);
  CHECK(net.oscillators()[0].active);
}

TEST_CASE("control action JSON round trip") {
  OscNetwork net(OscConfig{}, 2);
  Rng rng(8);
  for (int k = 0; k < 20; ++k) {
    auto a = random_action(rng, net);
    a.diffusion = default_diffusion(2);
    a.feedback_set[{1, 2}] = 0.25;
    const nlohmann::json j = a;
    const auto b = j.get<ControlAction>();
    CHECK(nlohmann::json(b) == j);
  }
  CHECK_THROWS_AS(nlohmann::json::parse(R"({"volume_targets":{"x":1}})").get<ControlAction>(), Error);
}

TEST_CASE("default diffusion rows are non-negative and sum to one") {
  for (std::size_t c = 1; c <= kMaxChannels; ++c) {
    const auto d = default_diffusion(c);
    REQUIRE(d.size() == 20);
    for (const auto& row : d) {
      double s = 0.0;
      for (double w : row) {
        CHECK(w >= 0.0);
        s += w;
      }
      CHECK(s == doctest::Approx(1.0));
    }
  }
  const auto d2 = default_diffusion(2);
  CHECK(d2.front()[0] == 1.0);
  CHECK(d2.back()[1] == 1.0);
}

TEST_CASE("soft saturation is linear below the knee and bounded above") {
  CHECK(soft_saturate(0.3) == 0.3);
  CHECK(soft_saturate(-0.5) == -0.5);
  double prev = -2.0;
  for (double x = -50.0; x <= 50.0; x += 0.01) {
    const double y = soft_saturate(x);
    REQUIRE(std::abs(y) < 1.0);
    REQUIRE(y >= prev);
    prev = y;
  }
  CHECK(soft_saturate(0.5 + 1e-9) == doctest::Approx(0.5 + 1e-9));
  CHECK(soft_saturate(1e300) < 1.0);
}

TEST_CASE("snapshot carries oscillators and the gain matrix") {
  OscNetwork net(OscConfig{}, 2);
  net.apply(all(true));
  net.render(480);
  const auto s = net.snapshot();
  REQUIRE(s.at("oscillators").size() == 20);
  CHECK(s.at("oscillators")[0].at("active").get<bool>());
  REQUIRE(s.at("feedback_gain").size() == 20);
  CHECK(s.at("feedback_gain")[0].size() == 20);
  CHECK(s.at("t").get<double>() == doctest::Approx(0.01));
}
