#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace bodyloop::signals {

enum class SignalKind { emg, mmg };

std::string_view to_string(SignalKind kind);
SignalKind kind_from_string(std::string_view name);

inline constexpr double kDefaultEmgRate = 1000.0;
inline constexpr double kDefaultMmgRate = 4000.0;
inline constexpr std::size_t kDefaultBlockSize = 256;

// A timestamped block of one channel. Samples are normalized amplitudes.
struct SignalFrame {
  int channel_id = 0;
  SignalKind kind = SignalKind::emg;
  double sample_rate = 0.0;
  double start_time = 0.0;
  std::vector<double> samples;

  double end_time() const { return start_time + static_cast<double>(samples.size()) / sample_rate; }
  void validate() const;
};

using FrameStream = std::vector<SignalFrame>;

// One channel assembled into a contiguous buffer; the form the analysis
// stages work on.
struct ChannelSignal {
  int channel_id = 0;
  SignalKind kind = SignalKind::emg;
  double sample_rate = 0.0;
  double start_time = 0.0;
  std::vector<double> samples;

  double duration() const { return static_cast<double>(samples.size()) / sample_rate; }
};

FrameStream to_frames(const ChannelSignal& signal, std::size_t block = kDefaultBlockSize);

// Concatenates the frames of one channel. Throws when frames are not
// contiguous (gap of one sample period or more) or disagree on rate/kind.
ChannelSignal assemble(const FrameStream& frames, int channel_id);

// All channels in ascending channel_id order.
std::vector<ChannelSignal> assemble_all(const FrameStream& frames);

std::vector<int> channel_ids(const FrameStream& frames);

// Reads a WAV recording. Each channel is rescaled so its absolute peak is 1,
// unless a calibration gain is supplied (samples * gain, clipped to [-1, 1]).
// All-zero channels stay zero.
FrameStream load_recording(const std::filesystem::path& path, SignalKind kind,
                           std::optional<double> calibration_gain = std::nullopt,
                           std::size_t block = kDefaultBlockSize);

struct ContractionEvent {
  double onset = 0.0;
  double peak_level = 1.0;
  double rise_time = 0.05;
  double decay_time = 0.2;
};

struct ContractionProfile {
  std::vector<ContractionEvent> events;
  double noise_floor = 0.0;

  void validate() const;

  // Contraction envelope in [0, 1]: raised-cosine rise to peak_level over
  // rise_time, then exponential decay with time constant decay_time.
  // Overlapping events add and the sum is clipped at 1.
  double envelope_at(double t) const;
};

void to_json(nlohmann::json& j, const ContractionEvent& e);
void from_json(const nlohmann::json& j, ContractionEvent& e);
void to_json(nlohmann::json& j, const ContractionProfile& p);
void from_json(const nlohmann::json& j, ContractionProfile& p);

ContractionProfile load_profile(const std::filesystem::path& path);

// EMG surrogate: band-limited Gaussian noise (5-150 Hz, capped below
// Nyquist) with unit-variance carrier scaled to RMS 1/3, amplitude-modulated
// by the profile envelope, plus an independent noise floor. Hard-clipped to
// [-1, 1]. Pure function of its arguments.
FrameStream synth_emg(const ContractionProfile& profile, double duration, double sample_rate, std::uint64_t seed,
                      int channel_id = 0, std::size_t block = kDefaultBlockSize);

// MMG surrogate: exact sampled response of x'' + 2 zeta omega x' + omega^2 x = u
// to impulses of weight peak_level at each onset. A lone unit impulse peaks
// at exactly 1; if superposition exceeds 1 the whole signal is rescaled.
// noise_floor adds seeded Gaussian noise before clipping.
FrameStream synth_mmg(double zeta, double omega, const ContractionProfile& profile, double duration,
                      double sample_rate, std::uint64_t seed, int channel_id = 0,
                      std::size_t block = kDefaultBlockSize);

// Impulse response of the damped oscillator (unit impulse, zero initial
// state) at time t >= 0, and the time of its absolute peak.
double oscillator_impulse_response(double zeta, double omega, double t);
double oscillator_peak_time(double zeta, double omega);

}  // namespace bodyloop::signals
