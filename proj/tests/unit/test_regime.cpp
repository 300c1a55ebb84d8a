#include <doctest.h>

#include <Eigen/Dense>

#include "bodyloop/bandpass.hpp"
#include "bodyloop/error.hpp"
#include "bodyloop/features.hpp"
#include "bodyloop/regime.hpp"
#include "bodyloop/rng.hpp"
#include "helpers.hpp"

using namespace bodyloop;
using namespace bodyloop::regime;
using signals::ContractionProfile;

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

ContractionProfile impulse_at(double onset) {
  ContractionProfile p;
  p.events.push_back({onset, 1.0, 0.05, 0.2});
  return p;
}

// Sampled free response coefficients from the underdamped closed form.
std::array<double, 2> true_coefficients(double zeta, double omega, double period) {
  const double decay = std::exp(-zeta * omega * period);
  const double wd = omega * std::sqrt(1.0 - zeta * zeta);
  return {2.0 * decay * std::cos(wd * period), -decay * decay};
}

signals::FrameStream raw_stream(std::vector<double> x, double rate) {
  return signals::to_frames(signals::ChannelSignal{0, signals::SignalKind::mmg, rate, 0.0, std::move(x)});
}

}  // namespace

TEST_CASE("pole mapping inverts the sampled model") {
  const double period = 1.0 / 200.0;
  for (double zeta : {0.0, 0.05, 0.3, 0.7, 0.99, 1.0, 1.5, 3.0}) {
    for (double f0 : {2.0, 8.0, 15.0, 40.0}) {
      const double omega = kTwoPi * f0;
      const auto c = continuous_to_coefficients(zeta, omega, period);
      if (zeta < 1.0) {
        const auto ref = true_coefficients(zeta, omega, period);
        CHECK(c[0] == doctest::Approx(ref[0]).epsilon(1e-12));
        CHECK(c[1] == doctest::Approx(ref[1]).epsilon(1e-12));
      }
      const auto back = poles_to_continuous(c[0], c[1], period);
      REQUIRE(back.has_value());
      CAPTURE(zeta);
      CAPTURE(f0);
      CHECK(back->zeta == doctest::Approx(zeta).epsilon(1e-6).scale(1.0));
      CHECK(back->omega == doctest::Approx(omega).epsilon(1e-6));
    }
  }
}

TEST_CASE("pole mapping rejects non-physical roots") {
  const double period = 1.0 / 200.0;
  CHECK_FALSE(poles_to_continuous(-0.5, 0.2, period).has_value());  // negative real root
  CHECK_FALSE(poles_to_continuous(1.0, -1.2, period).has_value());  // |z| > 1, zeta < 0
  CHECK_FALSE(poles_to_continuous(2.2, -1.0, period).has_value());  // growing real mode
  CHECK_FALSE(poles_to_continuous(0.0, 0.0, period).has_value());   // roots at the origin
}

TEST_CASE("recursive estimate converges to the true coefficients") {
  const double rate = 200.0;
  const double zeta = 0.02;
  const double omega = kTwoPi * 5.0;
  const auto truth = true_coefficients(zeta, omega, 1.0 / rate);
  std::vector<double> x(800, 0.0);
  x[1] = 0.3;
  for (std::size_t n = 2; n < x.size(); ++n) x[n] = truth[0] * x[n - 1] + truth[1] * x[n - 2];

  RegimeParams params;
  RegimeEstimator est(rate, params);
  REQUIRE(est.decimation() == 1);
  const std::size_t budget = 10 * static_cast<std::size_t>(params.window * rate);
  est.push(std::span<const double>(x.data(), budget));
  CHECK(std::abs(est.coefficients()(0) - truth[0]) <= 1e-6);
  CHECK(std::abs(est.coefficients()(1) - truth[1]) <= 1e-6);
}

TEST_CASE("recursive estimate equals the batch weighted least-squares solution") {
  Rng rng(13);
  const double rate = 200.0;
  const auto truth = true_coefficients(0.2, kTwoPi * 6.0, 1.0 / rate);
  std::vector<double> x(600, 0.0);
  for (std::size_t n = 2; n < x.size(); ++n) x[n] = truth[0] * x[n - 1] + truth[1] * x[n - 2] + 0.1 * rng.gaussian();

  const double lambda = 0.98;
  RegimeParams params;
  params.forgetting = lambda;
  RegimeEstimator est(rate, params);
  for (std::size_t stop : {50u, 200u, 599u}) {
    RegimeEstimator fresh(rate, params);
    fresh.push(std::span<const double>(x.data(), stop + 1));
    // Weighted normal equations over rows 2..stop, solved by QR.
    const auto rows = static_cast<Eigen::Index>(stop - 1);
    Eigen::MatrixXd a(rows, 2);
    Eigen::VectorXd b(rows);
    for (std::size_t n = 2; n <= stop; ++n) {
      const double w = std::sqrt(std::pow(lambda, static_cast<double>(stop - n)));
      const auto r = static_cast<Eigen::Index>(n - 2);
      a(r, 0) = w * x[n - 1];
      a(r, 1) = w * x[n - 2];
      b(r) = w * x[n];
    }
    const Eigen::Vector2d batch = a.colPivHouseholderQr().solve(b);
    CAPTURE(stop);
    CHECK(fresh.coefficients()(0) == doctest::Approx(batch(0)).epsilon(1e-9));
    CHECK(fresh.coefficients()(1) == doctest::Approx(batch(1)).epsilon(1e-9));
  }
}

TEST_CASE("estimate_stream recovers the generator parameters during ringing") {
  const double rate = 4000.0;
  for (auto [zeta, f0] : {std::pair{0.1, 8.0}, std::pair{0.5, 3.0}}) {
    const double omega = kTwoPi * f0;
    const auto frames = signals::synth_mmg(zeta, omega, impulse_at(0.2), 3.0, rate, 1);
    const auto estimates = estimate_stream(frames, 0.2, 0.995);
    CHECK(estimates.size() == 120);
    int checked = 0;
    for (const auto& e : estimates) {
      if (!e.valid || e.time < 0.3 || e.time > 1.2) continue;
      ++checked;
      CAPTURE(e.time);
      CHECK(std::abs(e.zeta - zeta) <= 0.02);
      CHECK(std::abs(e.omega - omega) / omega <= 0.05);
      CHECK(e.omega < std::numbers::pi * 200.0);
    }
    CAPTURE(zeta);
    CHECK(checked >= 30);
  }
}

TEST_CASE("white noise is mostly flagged invalid") {
  Rng rng(99);
  std::vector<double> x(4000 * 4);
  for (double& v : x) v = std::clamp(0.3 * rng.gaussian(), -1.0, 1.0);
  const auto estimates = estimate_stream(raw_stream(x, 4000.0), 0.2, 0.995);
  std::size_t invalid = 0;
  for (const auto& e : estimates) {
    if (!e.valid) {
      ++invalid;
      CHECK(e.reason != InvalidReason::none);
    }
  }
  CHECK(invalid * 2 > estimates.size());
}

TEST_CASE("silence is ill-conditioned") {
  const auto estimates = estimate_stream(raw_stream(std::vector<double>(4000, 0.0), 4000.0), 0.2, 0.995);
  REQUIRE_FALSE(estimates.empty());
  for (const auto& e : estimates) {
    CHECK_FALSE(e.valid);
    CHECK(e.reason == InvalidReason::ill_conditioned);
  }
}

TEST_CASE("amplitude scaling leaves parameters unchanged and scales excitation") {
  const auto base = signals::assemble(signals::synth_mmg(0.2, kTwoPi * 7.0, impulse_at(0.1), 2.0, 4000.0, 1), 0);
  for (double c : {0.01, 0.3, 25.0}) {
    auto scaled = base.samples;
    for (double& v : scaled) v *= c;
    const auto a = estimate_stream(raw_stream(base.samples, 4000.0), 0.2, 0.995);
    const auto b = estimate_stream(raw_stream(scaled, 4000.0), 0.2, 0.995);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CAPTURE(c);
      // The silence floor is absolute, so only windows near it may change
      // validity, and only as ill-conditioned.
      if (a[i].valid != b[i].valid) {
        CHECK((a[i].valid ? b[i] : a[i]).reason == InvalidReason::ill_conditioned);
        continue;
      }
      if (!a[i].valid) continue;
      CHECK(std::abs(b[i].zeta - a[i].zeta) <= 1e-6);
      CHECK(std::abs(b[i].omega - a[i].omega) <= 1e-6 * a[i].omega);
      CHECK(b[i].excitation == doctest::Approx(c * a[i].excitation).epsilon(1e-6));
    }
  }
}

TEST_CASE("estimator output does not depend on block size") {
  const auto a = estimate_stream(signals::synth_mmg(0.3, kTwoPi * 4.0, impulse_at(0.1), 1.5, 4000.0, 1, 0, 256), 0.2,
                                 0.995);
  const auto b = estimate_stream(signals::synth_mmg(0.3, kTwoPi * 4.0, impulse_at(0.1), 1.5, 4000.0, 1, 0, 77), 0.2,
                                 0.995);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(nlohmann::json(a[i]).dump() == nlohmann::json(b[i]).dump());
  }
}

// Known shortfall: band-limited noise biases the equation-error fit toward
// heavier damping for lightly damped slow regimes.
TEST_CASE("20 dB noise widens the damping error to at most 0.05" * doctest::may_fail()) {
  Rng rng(2024);
  const double rate = 4000.0;
  const auto low = signals::butterworth_sections(signals::EdgeType::lowpass, 8, 40.0, rate);
  std::size_t total = 0;
  std::size_t good = 0;
  for (double zeta : {0.05, 0.3, 0.6}) {
    for (double f0 : {4.0, 8.0, 12.0}) {
      const double omega = kTwoPi * f0;
      auto x = signals::assemble(signals::synth_mmg(zeta, omega, impulse_at(0.2), 3.0, rate, 1), 0).samples;
      double power = 0.0;
      for (double v : x) power += v * v;
      power /= static_cast<double>(x.size());
      // Band-limited noise at one hundredth of the signal power.
      auto sections = low;
      std::vector<double> noise(x.size());
      double noise_power = 0.0;
      for (double& v : noise) {
        v = rng.gaussian();
        for (auto& s : sections) v = s.process(v);
        noise_power += v * v;
      }
      noise_power /= static_cast<double>(noise.size());
      const double gain = std::sqrt(power / 100.0 / noise_power);
      for (std::size_t i = 0; i < x.size(); ++i) x[i] += gain * noise[i];
      for (const auto& e : estimate_stream(raw_stream(x, rate), 0.2, 0.995)) {
        if (!e.valid || e.time < 0.3) continue;
        ++total;
        if (std::abs(e.zeta - zeta) <= 0.05 && std::abs(e.omega - omega) <= 0.05 * omega) ++good;
      }
    }
  }
  REQUIRE(total > 0);
  MESSAGE("in tolerance: " << good << "/" << total);
  CHECK(static_cast<double>(good) >= 0.9 * static_cast<double>(total));
}

TEST_CASE("damping_from_decay: exact exponential, constant, too short") {
  Series env{0.0, 0.025, {}};
  for (int i = 0; i < 40; ++i) env.values.push_back(std::exp(-env.time_at(static_cast<std::size_t>(i)) / 0.2));
  CHECK(damping_from_decay(env, 0) == doctest::Approx(5.0).epsilon(0.02));

  Series flat{0.0, 0.025, std::vector<double>(20, 0.4)};
  CHECK_THROWS_AS(damping_from_decay(flat, 0), Error);
  Series shortish{0.0, 0.025, {1.0, 0.5, 0.25, 0.12}};
  CHECK_THROWS_AS(damping_from_decay(shortish, 0), Error);
}

TEST_CASE("damping_from_decay ranks bursts by their decay rate") {
  std::vector<double> truth;
  std::vector<double> fitted;
  const double rate = 4000.0;
  for (int i = 0; i < 10; ++i) {
    const double f0 = 5.0 + static_cast<double>(i % 4) * 3.0;
    const double decay = 2.0 + 1.4 * static_cast<double>(i);
    const double omega = kTwoPi * f0;
    const double zeta = decay / omega;
    const auto sig = signals::assemble(signals::synth_mmg(zeta, omega, impulse_at(0.2), 3.0, rate, 1), 0);
    const auto env = features::envelope(sig, 0.2, 0.025);
    std::size_t peak = 0;
    for (std::size_t k = 0; k < env.size(); ++k) {
      if (env.values[k] > env.values[peak]) peak = k;
    }
    truth.push_back(zeta * omega);
    fitted.push_back(damping_from_decay(env, peak));
  }
  CHECK(testing_support::rank_correlation(truth, fitted) > 0.9);
}

TEST_CASE("estimate JSON round trip") {
  RegimeEstimate e;
  e.channel_id = 1;
  e.time = 0.5;
  e.zeta = 0.2;
  e.omega = 40.0;
  e.excitation = 0.01;
  e.residual_rms = 0.002;
  e.valid = false;
  e.reason = InvalidReason::non_physical;
  const nlohmann::json j = e;
  CHECK(j.at("reason") == "non_physical");
  const auto back = j.get<RegimeEstimate>();
  CHECK(back.reason == InvalidReason::non_physical);
  CHECK(back.omega == 40.0);
}
