#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <map>
#include <mutex>
#include <optional>
#include <utility>
#include <vector>

#include <json.hpp>

namespace bodyloop::oscnet {

inline constexpr std::size_t kOscillatorCount = 20;
inline constexpr std::size_t kMaxChannels = 8;

using Matrix = std::vector<std::vector<double>>;  // row-major

struct OscConfig {
  double sample_rate = 48000.0;
  std::size_t channels = 2;
  std::size_t block_size = 256;
  std::vector<double> pitch_set{55.0, 73.42, 82.41, 110.0, 146.83, 164.81, 220.0};
  double detune_cents = 25.0;
  double glide_semitones = 1.0;  // glissando range around each base pitch
  double g_max = 0.8;
  double base_gain = 0.3;  // seeded initial gains drawn from [0, base_gain]
  double mod_depth = 20.0;  // Hz per unit of feedback
  double slew_time = 0.05;
  double master_gain = 0.8;
  double bus_scale = 0.25;  // mix headroom before the master saturator

  void validate() const;
};

void to_json(nlohmann::json& j, const OscConfig& c);
void from_json(const nlohmann::json& j, OscConfig& c);

struct OscState {
  std::size_t index = 0;
  double base_freq = 0.0;
  double freq = 0.0;  // slewed frequency before feedback modulation
  double phase = 0.0;
  double phase_offset = 0.0;
  double amp = 0.0;
  bool active = false;
  double volume = 0.0;  // amplitude target while active
  double gliss_target = 0.0;
  double gliss_rate = 0.0;
  double phase_target = 0.0;
};

struct Glissando {
  double target_hz = 0.0;
  double rate_hz_per_s = 0.0;
};

struct ControlAction {
  std::vector<std::size_t> activate;
  std::vector<std::size_t> mute;
  std::map<std::size_t, double> volume_targets;
  std::map<std::size_t, double> phase_offsets;
  std::map<std::size_t, Glissando> glissandi;
  // Global multiplier relative to the base gain matrix.
  std::optional<double> feedback_scale;
  // Additive changes to base gain entries.
  std::map<std::pair<std::size_t, std::size_t>, double> feedback_delta;
  // Absolute base gain entries.
  std::map<std::pair<std::size_t, std::size_t>, double> feedback_set;
  std::optional<Matrix> diffusion;
  std::optional<double> master_gain;

  // Throws Error{invalid_argument} on an index outside 0..19, non-finite
  // values, a negative glissando rate or a malformed diffusion matrix.
  void validate(std::size_t channels) const;
};

void to_json(nlohmann::json& j, const ControlAction& a);
void from_json(const nlohmann::json& j, ControlAction& a);

// Control queue shared between producers and the render loop.
class ActionQueue {
 public:
  void push(ControlAction action);
  std::vector<ControlAction> drain();

 private:
  std::mutex mutex_;
  std::deque<ControlAction> pending_;
};

// Saturator with a linear region up to the knee and a tanh shoulder above;
// the output magnitude stays strictly below 1.
double soft_saturate(double x, double knee = 0.5);

// Twenty sine oscillators with one-sample-delayed frequency cross
// modulation through a gain matrix. Every control target is approached with
// a linear slew; the state is advanced only by render.
class OscNetwork {
 public:
  OscNetwork(OscConfig config, std::uint64_t seed);

  void apply(const ControlAction& action);
  // Validates now, applies at the start of the next render call.
  void enqueue(ControlAction action);

  // n frames, one vector per output channel.
  std::vector<std::vector<double>> render(std::size_t n);

  const OscConfig& config() const { return config_; }
  const std::array<OscState, kOscillatorCount>& oscillators() const { return osc_; }
  std::array<double, kOscillatorCount> base_frequencies() const;
  const Matrix& base_gain() const { return base_gain_; }
  const Matrix& feedback_gain() const { return gain_; }
  const Matrix& diffusion() const { return diffusion_; }
  double feedback_scale() const { return feedback_scale_; }
  double master_gain() const { return master_gain_; }
  double time() const { return static_cast<double>(frames_rendered_) / config_.sample_rate; }
  std::uint64_t frames_rendered() const { return frames_rendered_; }

  nlohmann::json snapshot() const;

 private:
  void refresh_gain_target();

  OscConfig config_;
  std::array<OscState, kOscillatorCount> osc_{};
  Matrix base_gain_;
  Matrix gain_target_;
  Matrix gain_;
  Matrix diffusion_;
  double feedback_scale_ = 1.0;
  double master_gain_;
  std::array<double, kOscillatorCount> last_out_{};
  std::uint64_t frames_rendered_ = 0;
  ActionQueue queue_;
};

// Linear pan of oscillator i across the output channels; rows sum to 1.
Matrix default_diffusion(std::size_t channels);

}  // namespace bodyloop::oscnet
