#include "bodyloop/regime.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <map>
#include <numbers>

#include "bodyloop/error.hpp"

namespace bodyloop::regime {

std::string_view to_string(InvalidReason reason) {
  switch (reason) {
    case InvalidReason::none: return "none";
    case InvalidReason::ill_conditioned: return "ill_conditioned";
    case InvalidReason::non_physical: return "non_physical";
    case InvalidReason::residual_ceiling: return "residual_ceiling";
  }
  return "none";
}

InvalidReason reason_from_string(std::string_view name) {
  if (name == "none") return InvalidReason::none;
  if (name == "ill_conditioned") return InvalidReason::ill_conditioned;
  if (name == "non_physical") return InvalidReason::non_physical;
  if (name == "residual_ceiling") return InvalidReason::residual_ceiling;
  fail(ErrorCode::format, "unknown regime reason '" + std::string(name) + "'");
}

void to_json(nlohmann::json& j, const RegimeEstimate& e) {
  j = nlohmann::json{{"channel_id", e.channel_id},     {"time", e.time},
                     {"zeta", e.zeta},                 {"omega", e.omega},
                     {"excitation", e.excitation},     {"residual_rms", e.residual_rms},
                     {"valid", e.valid}};
  if (!e.valid) j["reason"] = to_string(e.reason);
}

void from_json(const nlohmann::json& j, RegimeEstimate& e) {
  e.channel_id = j.value("channel_id", 0);
  e.time = j.at("time").get<double>();
  e.zeta = j.at("zeta").get<double>();
  e.omega = j.at("omega").get<double>();
  e.excitation = j.at("excitation").get<double>();
  e.residual_rms = j.at("residual_rms").get<double>();
  e.valid = j.at("valid").get<bool>();
  e.reason = e.valid ? InvalidReason::none : reason_from_string(j.value("reason", std::string("ill_conditioned")));
}

std::optional<ContinuousPoles> poles_to_continuous(double a1, double a2, double period) {
  if (!(period > 0.0) || !std::isfinite(a1) || !std::isfinite(a2)) return std::nullopt;
  const double disc = a1 * a1 + 4.0 * a2;
  ContinuousPoles out;
  if (disc < 0.0) {
    // Complex pair r e^{+-i theta}; a2 = -r^2.
    const double r = std::sqrt(-a2);
    const double theta = std::atan2(std::sqrt(-disc) / 2.0, a1 / 2.0);
    const double sigma = std::log(r) / period;
    const double w = theta / period;
    out.omega = std::hypot(sigma, w);
    if (!(out.omega > 0.0)) return std::nullopt;
    out.zeta = -sigma / out.omega;
  } else {
    const double root = std::sqrt(disc);
    const double z1 = (a1 + root) / 2.0;
    const double z2 = (a1 - root) / 2.0;
    if (!(z1 > 0.0) || !(z2 > 0.0)) return std::nullopt;
    const double s1 = std::log(z1) / period;
    const double s2 = std::log(z2) / period;
    const double product = s1 * s2;
    if (!(product > 0.0)) return std::nullopt;
    out.omega = std::sqrt(product);
    out.zeta = -(s1 + s2) / (2.0 * out.omega);
  }
  if (!std::isfinite(out.zeta) || !std::isfinite(out.omega) || out.zeta < 0.0) return std::nullopt;
  return out;
}

std::array<double, 2> continuous_to_coefficients(double zeta, double omega, double period) {
  // Poles s = -zeta omega +- omega sqrt(zeta^2 - 1), mapped by z = e^{sT}.
  const std::complex<double> root = std::sqrt(std::complex<double>(zeta * zeta - 1.0, 0.0));
  const std::complex<double> s1 = omega * (-zeta + root);
  const std::complex<double> s2 = omega * (-zeta - root);
  const std::complex<double> z1 = std::exp(s1 * period);
  const std::complex<double> z2 = std::exp(s2 * period);
  return {(z1 + z2).real(), -(z1 * z2).real()};
}

RegimeEstimator::RegimeEstimator(double sample_rate, RegimeParams params, int channel_id, double start_time)
    : sample_rate_(sample_rate), params_(params), channel_id_(channel_id), start_time_(start_time) {
  require(sample_rate > 0.0, "sample rate must be positive");
  require(params.forgetting > 0.0 && params.forgetting <= 1.0, "forgetting factor must lie in (0, 1]");
  require(params.hop > 0.0 && params.window >= params.hop, "regime window must be >= hop > 0");
  require(params.target_rate > 0.0, "target rate must be positive");
  decimation_ = std::max(1, static_cast<int>(std::lround(sample_rate / params.target_rate)));
  window_len_ = std::max<std::size_t>(3, static_cast<std::size_t>(std::lround(params.window * effective_rate())));
  require(window_len_ >= 3, "regime window too short for the decimated rate");
}

bool RegimeEstimator::solve() {
  const double a = info_(0, 0);
  const double b = info_(0, 1);
  const double d = info_(1, 1);
  const double half_trace = (a + d) / 2.0;
  const double spread = std::sqrt(std::max(0.0, half_trace * half_trace - (a * d - b * b)));
  const double hi = half_trace + spread;
  const double lo = half_trace - spread;
  if (!(lo > 0.0) || hi / lo > params_.max_condition) return false;
  const double det = a * d - b * b;
  if (!(det > 0.0)) return false;
  theta_ = Eigen::Vector2d((d * cross_(0) - b * cross_(1)) / det, (a * cross_(1) - b * cross_(0)) / det);
  return true;
}

void RegimeEstimator::update(double y) {
  if (decimated_count_ >= 2) {
    const Eigen::Vector2d phi(y1_, y2_);
    innovation_.push_back(y - theta_.dot(phi));
    if (innovation_.size() > window_len_) innovation_.pop_front();
    const double lambda = params_.forgetting;
    info_ = lambda * info_ + phi * phi.transpose();
    cross_ = lambda * cross_ + phi * y;
    solvable_ = solve();
  }
  recent_.push_back(y);
  if (recent_.size() > window_len_ + 2) recent_.pop_front();
  y2_ = y1_;
  y1_ = y;
  ++decimated_count_;
}

RegimeEstimate RegimeEstimator::emit(double time) const {
  RegimeEstimate est;
  est.channel_id = channel_id_;
  est.time = time;
  est.a1 = theta_(0);
  est.a2 = theta_(1);
  est.valid = false;

  const std::size_t n = recent_.size();
  if (n < 3) {
    est.reason = InvalidReason::ill_conditioned;
    return est;
  }
  double signal_sq = 0.0;
  double residual_sq = 0.0;
  for (std::size_t i = 2; i < n; ++i) {
    const double y = recent_[i];
    const double r = y - theta_(0) * recent_[i - 1] - theta_(1) * recent_[i - 2];
    signal_sq += y * y;
    residual_sq += r * r;
  }
  const double count = static_cast<double>(n - 2);
  const double signal_rms = std::sqrt(signal_sq / count);
  est.residual_rms = std::sqrt(residual_sq / count);
  double innovation_sq = 0.0;
  for (double e : innovation_) innovation_sq += e * e;
  est.excitation = innovation_.empty() ? 0.0 : std::sqrt(innovation_sq / static_cast<double>(innovation_.size()));

  const double period = 1.0 / effective_rate();
  const auto poles = poles_to_continuous(theta_(0), theta_(1), period);
  if (poles) {
    est.zeta = poles->zeta;
    est.omega = poles->omega;
  }

  if (!solvable_ || signal_rms < params_.min_rms) {
    est.reason = InvalidReason::ill_conditioned;
  } else if (!poles || !(poles->omega < std::numbers::pi * effective_rate())) {
    est.reason = InvalidReason::non_physical;
  } else if (est.residual_rms > params_.validity_ratio * signal_rms) {
    est.reason = InvalidReason::residual_ceiling;
  } else {
    est.valid = true;
    est.reason = InvalidReason::none;
  }
  return est;
}

std::vector<RegimeEstimate> RegimeEstimator::push(std::span<const double> samples) {
  std::vector<RegimeEstimate> out;
  for (double x : samples) {
    if (raw_index_ % static_cast<std::size_t>(decimation_) == 0) update(x);
    ++raw_index_;
    for (;;) {
      const auto boundary =
          static_cast<std::size_t>(std::llround(static_cast<double>(next_hop_) * params_.hop * sample_rate_));
      if (boundary > raw_index_) break;
      out.push_back(emit(start_time_ + static_cast<double>(next_hop_) * params_.hop));
      ++next_hop_;
    }
  }
  return out;
}

std::vector<RegimeEstimate> estimate_stream(const signals::FrameStream& frames, double window, double forgetting,
                                            RegimeParams params) {
  params.window = window;
  params.forgetting = forgetting;
  std::map<int, RegimeEstimator> estimators;
  std::vector<RegimeEstimate> out;
  for (const auto& frame : frames) {
    auto it = estimators.find(frame.channel_id);
    if (it == estimators.end()) {
      it = estimators.emplace(frame.channel_id,
                              RegimeEstimator(frame.sample_rate, params, frame.channel_id, frame.start_time))
               .first;
    } else if (it->second.sample_rate() != frame.sample_rate) {
      fail(ErrorCode::invalid_argument, "sample rate changed within channel " + std::to_string(frame.channel_id));
    }
    auto estimates = it->second.push(frame.samples);
    out.insert(out.end(), estimates.begin(), estimates.end());
  }
  std::stable_sort(out.begin(), out.end(), [](const RegimeEstimate& a, const RegimeEstimate& b) {
    if (a.time != b.time) return a.time < b.time;
    return a.channel_id < b.channel_id;
  });
  return out;
}

double damping_from_decay(const Series& envelope, std::size_t peak_index) {
  require(peak_index < envelope.size(), "peak index outside the envelope");
  require(envelope.step > 0.0, "envelope step must be positive");
  const double peak = envelope.values[peak_index];
  if (!(peak > 0.0)) fail(ErrorCode::invalid_argument, "non-decaying segment: peak is not positive");

  std::vector<double> ts;
  std::vector<double> logs;
  for (std::size_t i = peak_index; i < envelope.size(); ++i) {
    const double v = envelope.values[i];
    if (!(v > 0.0) || v < 0.05 * peak) break;
    ts.push_back(envelope.time_at(i));
    logs.push_back(std::log(v));
  }
  if (ts.size() < 6) fail(ErrorCode::invalid_argument, "non-decaying segment: fewer than 5 points follow the peak");

  const double n = static_cast<double>(ts.size());
  double mt = 0.0;
  double ml = 0.0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    mt += ts[i];
    ml += logs[i];
  }
  mt /= n;
  ml /= n;
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < ts.size(); ++i) {
    sxy += (ts[i] - mt) * (logs[i] - ml);
    sxx += (ts[i] - mt) * (ts[i] - mt);
  }
  const double slope = sxy / sxx;
  if (!(slope < -1e-9)) fail(ErrorCode::invalid_argument, "non-decaying segment: envelope does not fall after the peak");
  return -slope;
}

void to_json(nlohmann::json& j, const RegimeParams& p) {
  j = nlohmann::json{{"window", p.window},
                     {"hop", p.hop},
                     {"forgetting", p.forgetting},
                     {"target_rate", p.target_rate},
                     {"validity_ratio", p.validity_ratio},
                     {"min_rms", p.min_rms},
                     {"max_condition", p.max_condition}};
}

void from_json(const nlohmann::json& j, RegimeParams& p) {
  RegimeParams d;
  p.window = j.value("window", d.window);
  p.hop = j.value("hop", d.hop);
  p.forgetting = j.value("forgetting", d.forgetting);
  p.target_rate = j.value("target_rate", d.target_rate);
  p.validity_ratio = j.value("validity_ratio", d.validity_ratio);
  p.min_rms = j.value("min_rms", d.min_rms);
  p.max_condition = j.value("max_condition", d.max_condition);
  require(p.window > 0.0 && p.hop > 0.0, "regime window and hop must be positive");
  require(p.forgetting > 0.0 && p.forgetting <= 1.0, "regime forgetting factor must lie in (0, 1]");
  require(p.target_rate > 0.0 && p.validity_ratio > 0.0 && p.min_rms >= 0.0 && p.max_condition > 1.0,
          "regime thresholds out of range");
}

}  // namespace bodyloop::regime
