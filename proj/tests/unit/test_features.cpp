#include <doctest.h>

#include "bodyloop/bandpass.hpp"
#include "bodyloop/error.hpp"
#include "bodyloop/features.hpp"
#include "bodyloop/rng.hpp"
#include "helpers.hpp"

using namespace bodyloop;
using namespace bodyloop::features;
using signals::ChannelSignal;
using signals::SignalKind;
using testing_support::sine;

namespace {

ChannelSignal channel(std::vector<double> x, double rate = 1000.0, int id = 0, SignalKind kind = SignalKind::emg) {
  return ChannelSignal{id, kind, rate, 0.0, std::move(x)};
}

ChannelFeatures cf(int id, double env, double rate = 0.0) {
  ChannelFeatures c;
  c.channel_id = id;
  c.envelope = env;
  c.change_rate = rate;
  return c;
}

Calibration unit_calibration(int channels) {
  Calibration cal;
  for (int i = 0; i < channels; ++i) cal.channels[{SignalKind::emg, i}] = {1.0, 10.0, 10.0};
  return cal;
}

}  // namespace

TEST_CASE("envelope: sine RMS, zeros, step response") {
  const auto env = envelope(channel(sine(50.0, 1000.0, 3000)), 0.2, 0.025);
  CHECK(env.step == 0.025);
  CHECK(env.start_time == doctest::Approx(0.025));
  CHECK(env.size() == 120);
  for (std::size_t k = 8; k < env.size(); ++k) CHECK(env.values[k] == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(0.01));

  for (double v : envelope(channel(std::vector<double>(1000, 0.0)), 0.2, 0.025).values) CHECK(v == 0.0);

  std::vector<double> step(2000, 0.0);
  std::fill(step.begin() + 1000, step.end(), 1.0);
  const auto s = envelope(channel(step), 0.2, 0.025);
  for (std::size_t k = 1; k < s.size(); ++k) CHECK(s.values[k] >= s.values[k - 1]);
  // Step at 1.0 s; one window later the envelope has settled.
  for (std::size_t k = 0; k < s.size(); ++k) {
    if (s.time_at(k) >= 1.0 + 0.2 - 1e-9) CHECK(s.values[k] >= 0.95);
  }
  CHECK_THROWS_AS(envelope(channel(step), 0.0015, 0.001), Error);
  CHECK_THROWS_AS(envelope(channel(step), 0.01, 0.02), Error);
}

TEST_CASE("change_rate: constant, ramp, triangle") {
  Series constant{0.0, 0.025, std::vector<double>(10, 0.3)};
  for (double v : change_rate(constant).values) CHECK(v == 0.0);

  Series ramp{0.0, 0.025, {}};
  for (int i = 0; i < 20; ++i) ramp.values.push_back(0.1 + 1.7 * 0.025 * i);
  const auto r = change_rate(ramp);
  for (std::size_t i = 1; i + 1 < r.size(); ++i) CHECK(std::abs(r.values[i] - 1.7) <= 1e-9);

  Series tri{0.0, 0.025, {0.0, 0.1, 0.2, 0.3, 0.2, 0.1, 0.0}};
  const auto t = change_rate(tri);
  CHECK(t.values[2] > 0.0);
  CHECK(t.values[3] == 0.0);
  CHECK(t.values[4] < 0.0);
  CHECK_THROWS_AS(change_rate(Series{0.0, 0.025, {1.0}}), Error);
}

TEST_CASE("spectral_centroid: single line, symmetric pair, silence") {
  const double rate = 1000.0;
  const auto one = spectral_centroid(channel(sine(10.0, rate, 3000)), 0.5);
  for (std::size_t k = 20; k < one.values.size(); ++k) {
    REQUIRE(one.values[k].has_value());
    CHECK(std::abs(*one.values[k] - 10.0) <= 0.5);
  }
  auto pair = sine(5.0, rate, 3000);
  const auto hi = sine(15.0, rate, 3000, 1.0, 0.7);
  for (std::size_t i = 0; i < pair.size(); ++i) pair[i] = 0.5 * (pair[i] + hi[i]);
  const auto two = spectral_centroid(channel(pair), 0.5);
  for (std::size_t k = 20; k < two.values.size(); ++k) CHECK(std::abs(*two.values[k] - 10.0) <= 0.5);

  const auto silent = spectral_centroid(channel(std::vector<double>(2000, 0.0)), 0.5);
  for (const auto& v : silent.values) CHECK_FALSE(v.has_value());
  CHECK_THROWS_AS(spectral_centroid(channel(pair), 0.003), Error);
}

TEST_CASE("features: scale covariance") {
  Rng rng(4);
  std::vector<double> x(4000);
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] = 0.3 * std::sin(0.05 * static_cast<double>(i)) + 0.2 * rng.uniform(-1.0, 1.0);
  }
  const double c = 0.37;
  std::vector<double> y(x);
  for (double& v : y) v *= c;
  const auto ex = envelope(channel(x), 0.2, 0.025);
  const auto ey = envelope(channel(y), 0.2, 0.025);
  const auto rx = change_rate(ex);
  const auto ry = change_rate(ey);
  for (std::size_t k = 0; k < ex.size(); ++k) {
    CHECK(ey.values[k] == doctest::Approx(c * ex.values[k]).epsilon(1e-12));
    CHECK(std::abs(ry.values[k]) == doctest::Approx(c * std::abs(rx.values[k])).epsilon(1e-9).scale(1e-12));
  }
  const auto cx = spectral_centroid(channel(x), 0.5);
  const auto cy = spectral_centroid(channel(y), 0.5);
  for (std::size_t k = 0; k < cx.values.size(); ++k) {
    REQUIRE(cx.values[k].has_value() == cy.values[k].has_value());
    if (cx.values[k]) CHECK(std::abs(*cy.values[k] - *cx.values[k]) <= 1e-3 * *cx.values[k]);
  }
}

TEST_CASE("features: time shift moves every series by the shift") {
  Rng rng(8);
  std::vector<double> x(3000);
  for (double& v : x) v = rng.uniform(-0.5, 0.5);
  const std::size_t shift_hops = 4;  // 100 ms at 1000 Hz
  std::vector<double> shifted(shift_hops * 25, 0.0);
  shifted.insert(shifted.end(), x.begin(), x.end());
  const auto a = envelope(channel(x), 0.2, 0.025);
  const auto b = envelope(channel(shifted), 0.2, 0.025);
  const auto ca = spectral_centroid(channel(x), 0.5);
  const auto cb = spectral_centroid(channel(shifted), 0.5);
  for (std::size_t k = 0; k < a.size(); ++k) {
    CHECK(b.values[k + shift_hops] == doctest::Approx(a.values[k]).epsilon(1e-12));
    REQUIRE(cb.values[k + shift_hops].has_value() == ca.values[k].has_value());
    if (ca.values[k]) CHECK(*cb.values[k + shift_hops] == doctest::Approx(*ca.values[k]).epsilon(1e-9));
  }
}

TEST_CASE("aggregate_nuance: boundary cases") {
  const auto cal = unit_calibration(3);
  std::vector<ChannelFeatures> silent{cf(0, 0.0), cf(1, 0.0), cf(2, 0.0)};
  const auto s = aggregate_nuance(silent, cal);
  CHECK(s.effort == 0.0);
  CHECK(s.abruptness == 0.0);
  CHECK(s.relaxation_rate == 0.0);
  CHECK(s.complexity == 0);

  std::vector<ChannelFeatures> one{cf(0, 0.5), cf(1, 0.05), cf(2, 0.0)};
  CHECK(aggregate_nuance(one, cal).complexity == 1);

  std::vector<ChannelFeatures> full{cf(0, 1.0), cf(1, 1.0), cf(2, 1.0)};
  const auto f = aggregate_nuance(full, cal);
  CHECK(f.effort == 1.0);
  CHECK(f.abruptness == 0.0);

  std::vector<ChannelFeatures> moving{cf(0, 0.2, 5.0), cf(1, 0.2, -20.0), cf(2, 0.2, 1.0)};
  const auto m = aggregate_nuance(moving, cal);
  CHECK(m.abruptness == doctest::Approx(0.5));
  CHECK(m.relaxation_rate == 1.0);

  Calibration zero = cal;
  zero.channels[{SignalKind::emg, 1}].envelope_max = 0.0;
  try {
    aggregate_nuance(full, zero);
    FAIL("expected calibration error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::calibration);
    CHECK(std::string(e.what()).find("calibrat") != std::string::npos);
  }
  CHECK_THROWS_AS(aggregate_nuance(full, unit_calibration(2)), Error);
}

TEST_CASE("aggregate_nuance: complexity is monotone in each envelope") {
  Rng rng(21);
  const auto cal = unit_calibration(4);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<ChannelFeatures> chans;
    for (int i = 0; i < 4; ++i) chans.push_back(cf(i, rng.uniform(0.0, 0.3), rng.uniform(-5.0, 5.0)));
    const auto before = aggregate_nuance(chans, cal);
    const auto which = static_cast<std::size_t>(rng.below(4));
    chans[which].envelope += rng.uniform(0.0, 0.2);
    const auto after = aggregate_nuance(chans, cal);
    CHECK(after.complexity >= before.complexity);
    CHECK(after.complexity <= 4);
    for (double v : {after.effort, after.abruptness, after.relaxation_rate}) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("calibration: floors keep silence usable, JSON round trip") {
  FeatureVector row;
  row.channels = {cf(0, 0.0), cf(1, 0.4, -2.0)};
  const auto cal = Calibration::capture({row});
  CHECK(cal.channels.at({SignalKind::emg, 0}).envelope_max == Calibration::kEnvelopeFloor);
  CHECK(cal.channels.at({SignalKind::emg, 1}).fall_max == 2.0);
  CHECK_NOTHROW(aggregate_nuance(row.channels, cal));
  const nlohmann::json j = cal;
  const auto back = j.get<Calibration>();
  CHECK(back.channels.at({SignalKind::emg, 1}).envelope_max == 0.4);
}

namespace {

signals::FrameStream emg_stream(std::uint64_t seed, double duration, std::size_t block) {
  signals::ContractionProfile p;
  p.events = {{0.3, 0.9, 0.05, 0.2}, {1.1, 0.6, 0.1, 0.3}};
  auto a = signals::synth_emg(p, duration, 1000.0, seed, 0, block);
  auto b = signals::synth_emg(p, duration, 1000.0, seed + 1, 1, block);
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

signals::FrameStream mmg_stream(double duration, std::size_t block) {
  signals::ContractionProfile p;
  p.events = {{0.3, 1.0, 0.05, 0.2}, {1.1, 0.7, 0.05, 0.2}};
  return signals::synth_mmg(0.15, 2.0 * std::numbers::pi * 9.0, p, duration, 4000.0, 3, 0, block);
}

}  // namespace

TEST_CASE("extractor: block size does not change the rows") {
  const FeatureParams params;
  const regime::RegimeParams rp;
  const auto a = analyze(emg_stream(1, 2.0, 256), mmg_stream(2.0, 256), params, rp);
  const auto b = analyze(emg_stream(1, 2.0, 37), mmg_stream(2.0, 1000), params, rp);
  REQUIRE(a.rows.size() == b.rows.size());
  CHECK(a.rows.size() == 80);
  CHECK(to_jsonl(a.rows) == to_jsonl(b.rows));
}

TEST_CASE("extractor: matches the batch operations on the band-limited signal") {
  const FeatureParams params;
  const auto emg = emg_stream(3, 2.0, 256);
  const auto result = analyze(emg, {}, params, {});
  const auto filtered = signals::assemble(signals::bandpass(emg), 1);
  const auto env = envelope(filtered, params.window, params.hop);
  const auto rate = change_rate(env);
  const auto cen = spectral_centroid(filtered, params.centroid_window, params.hop);
  REQUIRE(result.rows.size() == env.size());
  for (std::size_t k = 0; k < env.size(); ++k) {
    const auto& c = result.rows[k].channels[1];
    CHECK(result.rows[k].time == doctest::Approx(env.time_at(k)));
    CHECK(c.envelope == doctest::Approx(env.values[k]).epsilon(1e-12));
    CHECK(c.change_rate == doctest::Approx(rate.values[k]).epsilon(1e-9).scale(1e-9));
    REQUIRE(c.spectral_centroid.has_value() == cen.values[k].has_value());
    if (c.spectral_centroid) CHECK(*c.spectral_centroid == doctest::Approx(*cen.values[k]).epsilon(1e-9));
  }
}

TEST_CASE("extractor: rows are well formed and survive JSON lines") {
  const auto result = analyze(emg_stream(5, 2.0, 256), mmg_stream(2.0, 256), {}, {});
  bool some_damping = false;
  for (const auto& row : result.rows) {
    CHECK(row.channels.size() == 3);
    CHECK(row.complexity <= 3);
    CHECK(row.regime.size() == 1);
    for (double v : {row.effort, row.abruptness, row.relaxation_rate}) {
      CHECK(std::isfinite(v));
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    for (const auto& c : row.channels) {
      CHECK(c.envelope >= 0.0);
      if (c.spectral_centroid) {
        CHECK(*c.spectral_centroid >= 1.0);
        CHECK(*c.spectral_centroid <= 40.0);
      }
      if (c.damping_ratio) some_damping = true;
    }
    CHECK(row.flatten().size() == FeatureVector::flat_size(3));
  }
  CHECK(some_damping);
  const auto text = to_jsonl(result.rows);
  CHECK(to_jsonl(parse_jsonl(text)) == text);
  CHECK_THROWS_AS(parse_jsonl("{\"time\": 1}\n"), Error);
}
