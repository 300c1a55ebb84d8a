#include "bodyloop/oscnet.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <numbers>
#include <string>

#include "bodyloop/error.hpp"
#include "bodyloop/rng.hpp"

namespace bodyloop::oscnet {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kOutputLimit = 1.0 - 0x1.0p-24;

double approach(double current, double target, double step) {
  if (std::abs(target - current) <= step) return target;
  return current < target ? current + step : current - step;
}

void check_index(std::size_t i, const char* what) {
  if (i >= kOscillatorCount) {
    fail(ErrorCode::invalid_argument, std::string(what) + ": oscillator index " + std::to_string(i) + " out of range 0..19");
  }
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) fail(ErrorCode::invalid_argument, std::string(what) + ": non-finite value");
}

std::size_t parse_index(const std::string& key) {
  std::size_t value = 0;
  const auto* end = key.data() + key.size();
  auto [ptr, ec] = std::from_chars(key.data(), end, value);
  if (key.empty() || ec != std::errc{} || ptr != end) {
    fail(ErrorCode::invalid_argument, "oscillator index '" + key + "' is not a non-negative integer");
  }
  return value;
}

double wrap_pi(double x) {
  x = std::fmod(x, kTwoPi);
  if (x > std::numbers::pi) x -= kTwoPi;
  if (x < -std::numbers::pi) x += kTwoPi;
  return x;
}

template <typename T>
nlohmann::json indexed(const std::map<std::size_t, T>& m) {
  auto j = nlohmann::json::object();
  for (const auto& [k, v] : m) j[std::to_string(k)] = v;
  return j;
}

}  // namespace

double soft_saturate(double x, double knee) {
  const double m = std::abs(x);
  if (m <= knee) return x;
  const double shoulder = 1.0 - knee;
  const double y = knee + shoulder * std::tanh((m - knee) / shoulder);
  return std::copysign(std::min(y, kOutputLimit), x);
}

void OscConfig::validate() const {
  require(sample_rate > 0.0 && std::isfinite(sample_rate), "oscnet: sample_rate must be positive");
  require(channels >= 1 && channels <= kMaxChannels, "oscnet: channels must be in 1..8");
  require(block_size > 0, "oscnet: block_size must be positive");
  require(!pitch_set.empty(), "oscnet: pitch_set is empty");
  for (double p : pitch_set) require(p > 0.0 && p < sample_rate / 2.0, "oscnet: pitches must lie in (0, Nyquist)");
  require(glide_semitones >= 0.0, "oscnet: glide_semitones must be non-negative");
  require(detune_cents >= 0.0 && detune_cents <= 100.0 * glide_semitones,
          "oscnet: detune_cents must lie within the glissando range");
  require(g_max > 0.0 && std::isfinite(g_max), "oscnet: g_max must be positive");
  require(base_gain >= 0.0 && base_gain <= g_max, "oscnet: base_gain must lie in [0, g_max]");
  require(mod_depth >= 0.0 && std::isfinite(mod_depth), "oscnet: mod_depth must be non-negative");
  require(slew_time > 0.0 && std::isfinite(slew_time), "oscnet: slew_time must be positive");
  require(master_gain >= 0.0 && master_gain <= 1.0, "oscnet: master_gain must lie in [0, 1]");
  require(bus_scale > 0.0 && std::isfinite(bus_scale), "oscnet: bus_scale must be positive");
}

void to_json(nlohmann::json& j, const OscConfig& c) {
  j = nlohmann::json{{"sample_rate", c.sample_rate}, {"channels", c.channels},
                     {"block_size", c.block_size},   {"pitch_set", c.pitch_set},
                     {"detune_cents", c.detune_cents}, {"glide_semitones", c.glide_semitones},
                     {"g_max", c.g_max},             {"base_gain", c.base_gain},
                     {"mod_depth", c.mod_depth},     {"slew_time", c.slew_time},
                     {"master_gain", c.master_gain}, {"bus_scale", c.bus_scale}};
}

void from_json(const nlohmann::json& j, OscConfig& c) {
  OscConfig d;
  c.sample_rate = j.value("sample_rate", d.sample_rate);
  c.channels = j.value("channels", d.channels);
  c.block_size = j.value("block_size", d.block_size);
  c.pitch_set = j.value("pitch_set", d.pitch_set);
  c.detune_cents = j.value("detune_cents", d.detune_cents);
  c.glide_semitones = j.value("glide_semitones", d.glide_semitones);
  c.g_max = j.value("g_max", d.g_max);
  c.base_gain = j.value("base_gain", d.base_gain);
  c.mod_depth = j.value("mod_depth", d.mod_depth);
  c.slew_time = j.value("slew_time", d.slew_time);
  c.master_gain = j.value("master_gain", d.master_gain);
  c.bus_scale = j.value("bus_scale", d.bus_scale);
}

void ControlAction::validate(std::size_t channels) const {
  for (auto i : activate) check_index(i, "activate");
  for (auto i : mute) check_index(i, "mute");
  for (const auto& [i, v] : volume_targets) {
    check_index(i, "volume_targets");
    check_finite(v, "volume_targets");
  }
  for (const auto& [i, v] : phase_offsets) {
    check_index(i, "phase_offsets");
    check_finite(v, "phase_offsets");
  }
  for (const auto& [i, g] : glissandi) {
    check_index(i, "glissandi");
    check_finite(g.target_hz, "glissandi");
    check_finite(g.rate_hz_per_s, "glissandi");
    require(g.target_hz > 0.0, "glissandi: target must be positive");
    require(g.rate_hz_per_s >= 0.0, "glissandi: rate must be non-negative");
  }
  if (feedback_scale) {
    check_finite(*feedback_scale, "feedback_scale");
    require(*feedback_scale >= 0.0, "feedback_scale must be non-negative");
  }
  for (const auto& [ij, v] : feedback_delta) {
    check_index(ij.first, "feedback_delta");
    check_index(ij.second, "feedback_delta");
    check_finite(v, "feedback_delta");
  }
  for (const auto& [ij, v] : feedback_set) {
    check_index(ij.first, "feedback_set");
    check_index(ij.second, "feedback_set");
    check_finite(v, "feedback_set");
  }
  if (diffusion) {
    require(diffusion->size() == kOscillatorCount, "diffusion: expected 20 rows");
    for (const auto& row : *diffusion) {
      require(row.size() == channels, "diffusion: row width must equal the channel count");
      double sum = 0.0;
      for (double w : row) {
        check_finite(w, "diffusion");
        require(w >= 0.0, "diffusion: weights must be non-negative");
        sum += w;
      }
      require(sum <= 1.0 + 1e-9, "diffusion: row sums must not exceed 1");
    }
  }
  if (master_gain) check_finite(*master_gain, "master_gain");
}

void to_json(nlohmann::json& j, const ControlAction& a) {
  j = nlohmann::json::object();
  if (!a.activate.empty()) j["activate"] = a.activate;
  if (!a.mute.empty()) j["mute"] = a.mute;
  if (!a.volume_targets.empty()) j["volume_targets"] = indexed(a.volume_targets);
  if (!a.phase_offsets.empty()) j["phase_offsets"] = indexed(a.phase_offsets);
  if (!a.glissandi.empty()) {
    auto g = nlohmann::json::object();
    for (const auto& [k, v] : a.glissandi) {
      g[std::to_string(k)] = {{"target_hz", v.target_hz}, {"rate_hz_per_s", v.rate_hz_per_s}};
    }
    j["glissandi"] = g;
  }
  if (a.feedback_scale) j["feedback_scale"] = *a.feedback_scale;
  if (!a.feedback_delta.empty()) {
    auto arr = nlohmann::json::array();
    for (const auto& [ij, v] : a.feedback_delta) arr.push_back({{"i", ij.first}, {"j", ij.second}, {"delta", v}});
    j["feedback_delta"] = arr;
  }
  if (!a.feedback_set.empty()) {
    auto arr = nlohmann::json::array();
    for (const auto& [ij, v] : a.feedback_set) arr.push_back({{"i", ij.first}, {"j", ij.second}, {"value", v}});
    j["feedback_set"] = arr;
  }
  if (a.diffusion) j["diffusion"] = *a.diffusion;
  if (a.master_gain) j["master_gain"] = *a.master_gain;
}

void from_json(const nlohmann::json& j, ControlAction& a) {
  a = ControlAction{};
  if (!j.is_object()) fail(ErrorCode::invalid_argument, "control action must be a JSON object");
  if (j.contains("activate")) a.activate = j.at("activate").get<std::vector<std::size_t>>();
  if (j.contains("mute")) a.mute = j.at("mute").get<std::vector<std::size_t>>();
  if (j.contains("volume_targets")) {
    for (const auto& [k, v] : j.at("volume_targets").items()) a.volume_targets[parse_index(k)] = v.get<double>();
  }
  if (j.contains("phase_offsets")) {
    for (const auto& [k, v] : j.at("phase_offsets").items()) a.phase_offsets[parse_index(k)] = v.get<double>();
  }
  if (j.contains("glissandi")) {
    for (const auto& [k, v] : j.at("glissandi").items()) {
      a.glissandi[parse_index(k)] = {v.at("target_hz").get<double>(), v.at("rate_hz_per_s").get<double>()};
    }
  }
  if (j.contains("feedback_scale")) a.feedback_scale = j.at("feedback_scale").get<double>();
  if (j.contains("feedback_delta")) {
    for (const auto& e : j.at("feedback_delta")) {
      a.feedback_delta[{e.at("i").get<std::size_t>(), e.at("j").get<std::size_t>()}] = e.at("delta").get<double>();
    }
  }
  if (j.contains("feedback_set")) {
    for (const auto& e : j.at("feedback_set")) {
      a.feedback_set[{e.at("i").get<std::size_t>(), e.at("j").get<std::size_t>()}] = e.at("value").get<double>();
    }
  }
  if (j.contains("diffusion")) a.diffusion = j.at("diffusion").get<Matrix>();
  if (j.contains("master_gain")) a.master_gain = j.at("master_gain").get<double>();
}

void ActionQueue::push(ControlAction action) {
  std::lock_guard lock(mutex_);
  pending_.push_back(std::move(action));
}

std::vector<ControlAction> ActionQueue::drain() {
  std::lock_guard lock(mutex_);
  std::vector<ControlAction> out(std::make_move_iterator(pending_.begin()), std::make_move_iterator(pending_.end()));
  pending_.clear();
  return out;
}

Matrix default_diffusion(std::size_t channels) {
  Matrix d(kOscillatorCount, std::vector<double>(channels, 0.0));
  for (std::size_t i = 0; i < kOscillatorCount; ++i) {
    if (channels == 1) {
      d[i][0] = 1.0;
      continue;
    }
    const double pos = static_cast<double>(i) / static_cast<double>(kOscillatorCount - 1) * static_cast<double>(channels - 1);
    const auto lo = std::min(static_cast<std::size_t>(pos), channels - 1);
    const double frac = pos - static_cast<double>(lo);
    d[i][lo] = 1.0 - frac;
    if (lo + 1 < channels) d[i][lo + 1] = frac;
  }
  return d;
}

OscNetwork::OscNetwork(OscConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  master_gain_ = config_.master_gain;
  Rng rng(seed);
  for (std::size_t i = 0; i < kOscillatorCount; ++i) {
    auto& o = osc_[i];
    o.index = i;
    const double pitch = config_.pitch_set[i % config_.pitch_set.size()];
    o.base_freq = pitch * std::exp2(config_.detune_cents * rng.uniform(-1.0, 1.0) / 1200.0);
    o.freq = o.base_freq;
    o.gliss_target = o.base_freq;
    o.volume = 0.5;
  }
  base_gain_.assign(kOscillatorCount, std::vector<double>(kOscillatorCount, 0.0));
  for (auto& row : base_gain_) {
    for (auto& g : row) g = rng.uniform(0.0, config_.base_gain);
  }
  refresh_gain_target();
  gain_ = gain_target_;
  diffusion_ = default_diffusion(config_.channels);
}

std::array<double, kOscillatorCount> OscNetwork::base_frequencies() const {
  std::array<double, kOscillatorCount> f{};
  for (std::size_t i = 0; i < kOscillatorCount; ++i) f[i] = osc_[i].base_freq;
  return f;
}

void OscNetwork::refresh_gain_target() {
  gain_target_ = base_gain_;
  for (auto& row : gain_target_) {
    for (auto& g : row) g = std::clamp(g * feedback_scale_, 0.0, config_.g_max);
  }
}

void OscNetwork::apply(const ControlAction& action) {
  action.validate(config_.channels);
  for (auto i : action.activate) osc_[i].active = true;
  for (auto i : action.mute) osc_[i].active = false;
  for (const auto& [i, v] : action.volume_targets) osc_[i].volume = std::clamp(v, 0.0, 1.0);
  for (const auto& [i, v] : action.phase_offsets) osc_[i].phase_target = wrap_pi(v);
  const double span = std::exp2(config_.glide_semitones / 12.0);
  for (const auto& [i, g] : action.glissandi) {
    auto& o = osc_[i];
    o.gliss_target = std::clamp(g.target_hz, o.base_freq / span, o.base_freq * span);
    o.gliss_rate = g.rate_hz_per_s;
  }
  bool gains_changed = false;
  for (const auto& [ij, v] : action.feedback_set) {
    base_gain_[ij.first][ij.second] = std::clamp(v, 0.0, config_.g_max);
    gains_changed = true;
  }
  for (const auto& [ij, v] : action.feedback_delta) {
    auto& g = base_gain_[ij.first][ij.second];
    g = std::clamp(g + v, 0.0, config_.g_max);
    gains_changed = true;
  }
  if (action.feedback_scale) {
    feedback_scale_ = *action.feedback_scale;
    gains_changed = true;
  }
  if (gains_changed) refresh_gain_target();
  if (action.diffusion) diffusion_ = *action.diffusion;
  if (action.master_gain) master_gain_ = std::clamp(*action.master_gain, 0.0, 1.0);
}

void OscNetwork::enqueue(ControlAction action) {
  action.validate(config_.channels);
  queue_.push(std::move(action));
}

std::vector<std::vector<double>> OscNetwork::render(std::size_t n) {
  for (const auto& action : queue_.drain()) apply(action);

  const std::size_t channels = config_.channels;
  std::vector<std::vector<double>> out(channels, std::vector<double>(n, 0.0));
  const double dt = 1.0 / config_.sample_rate;
  const double amp_step = dt / config_.slew_time;
  const double phase_step = kTwoPi * dt / config_.slew_time;
  const double gain_step = config_.g_max * dt / config_.slew_time;
  const double bus = master_gain_ * config_.bus_scale;

  bool gain_moving = gain_ != gain_target_;
  std::array<double, kOscillatorCount> raw{};
  std::array<double, kOscillatorCount> fed{};
  std::vector<double> mix(channels);

  for (std::size_t s = 0; s < n; ++s) {
    if (gain_moving) {
      gain_moving = false;
      for (std::size_t i = 0; i < kOscillatorCount; ++i) {
        for (std::size_t j = 0; j < kOscillatorCount; ++j) {
          gain_[i][j] = approach(gain_[i][j], gain_target_[i][j], gain_step);
          gain_moving = gain_moving || gain_[i][j] != gain_target_[i][j];
        }
      }
    }
    for (std::size_t i = 0; i < kOscillatorCount; ++i) {
      auto& o = osc_[i];
      o.amp = approach(o.amp, o.active ? o.volume : 0.0, amp_step);
      o.freq = approach(o.freq, o.gliss_target, o.gliss_rate * dt);
      o.phase_offset = approach(o.phase_offset, o.phase_target, phase_step);

      raw[i] = o.amp * std::sin(o.phase + o.phase_offset);
      fed[i] = soft_saturate(raw[i]);

      double modulation = 0.0;
      const auto& row = gain_[i];
      for (std::size_t j = 0; j < kOscillatorCount; ++j) modulation += row[j] * last_out_[j];
      o.phase += kTwoPi * (o.freq + config_.mod_depth * modulation) * dt;
      o.phase -= kTwoPi * std::floor(o.phase / kTwoPi);
    }
    last_out_ = fed;

    std::fill(mix.begin(), mix.end(), 0.0);
    for (std::size_t i = 0; i < kOscillatorCount; ++i) {
      if (raw[i] == 0.0) continue;
      const auto& d = diffusion_[i];
      for (std::size_t c = 0; c < channels; ++c) mix[c] += d[c] * raw[i];
    }
    for (std::size_t c = 0; c < channels; ++c) {
      out[c][s] = std::clamp(soft_saturate(bus * mix[c]), -kOutputLimit, kOutputLimit);
    }
  }
  frames_rendered_ += n;
  return out;
}

nlohmann::json OscNetwork::snapshot() const {
  auto oscillators = nlohmann::json::array();
  for (const auto& o : osc_) {
    oscillators.push_back({{"index", o.index},
                           {"base_freq", o.base_freq},
                           {"freq", o.freq},
                           {"amp", o.amp},
                           {"active", o.active},
                           {"volume", o.volume},
                           {"phase", o.phase}});
  }
  return {{"t", time()},
          {"oscillators", oscillators},
          {"feedback_gain", gain_},
          {"feedback_scale", feedback_scale_},
          {"g_max", config_.g_max},
          {"master_gain", master_gain_},
          {"channels", config_.channels},
          {"diffusion", diffusion_}};
}

}  // namespace bodyloop::oscnet
