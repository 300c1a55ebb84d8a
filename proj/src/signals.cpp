#include "bodyloop/signals.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>

#include "bodyloop/bandpass.hpp"
#include "bodyloop/error.hpp"
#include "bodyloop/rng.hpp"
#include "bodyloop/wav.hpp"

namespace bodyloop::signals {

std::string_view to_string(SignalKind kind) { return kind == SignalKind::emg ? "emg" : "mmg"; }

SignalKind kind_from_string(std::string_view name) {
  if (name == "emg" || name == "EMG") return SignalKind::emg;
  if (name == "mmg" || name == "MMG") return SignalKind::mmg;
  fail(ErrorCode::invalid_argument, "unknown signal kind '" + std::string(name) + "' (expected emg or mmg)");
}

void SignalFrame::validate() const {
  require(sample_rate > 0.0, "frame sample_rate must be positive");
  require(start_time >= 0.0, "frame start_time must be non-negative");
  require(!samples.empty(), "frame must contain samples");
  for (double x : samples) {
    if (!std::isfinite(x) || x < -1.0 || x > 1.0) {
      fail(ErrorCode::invalid_argument, "frame sample outside [-1, 1] or non-finite");
    }
  }
}

FrameStream to_frames(const ChannelSignal& signal, std::size_t block) {
  require(block > 0, "block size must be positive");
  FrameStream frames;
  for (std::size_t start = 0; start < signal.samples.size(); start += block) {
    const std::size_t end = std::min(signal.samples.size(), start + block);
    SignalFrame f;
    f.channel_id = signal.channel_id;
    f.kind = signal.kind;
    f.sample_rate = signal.sample_rate;
    f.start_time = signal.start_time + static_cast<double>(start) / signal.sample_rate;
    f.samples.assign(signal.samples.begin() + static_cast<std::ptrdiff_t>(start),
                     signal.samples.begin() + static_cast<std::ptrdiff_t>(end));
    frames.push_back(std::move(f));
  }
  return frames;
}

ChannelSignal assemble(const FrameStream& frames, int channel_id) {
  std::vector<const SignalFrame*> own;
  for (const auto& f : frames) {
    if (f.channel_id == channel_id) own.push_back(&f);
  }
  if (own.empty()) fail(ErrorCode::not_found, "no frames for channel " + std::to_string(channel_id));
  std::stable_sort(own.begin(), own.end(),
                   [](const SignalFrame* a, const SignalFrame* b) { return a->start_time < b->start_time; });

  ChannelSignal out;
  out.channel_id = channel_id;
  out.kind = own.front()->kind;
  out.sample_rate = own.front()->sample_rate;
  out.start_time = own.front()->start_time;
  double expected = out.start_time;
  for (const SignalFrame* f : own) {
    if (f->sample_rate != out.sample_rate || f->kind != out.kind) {
      fail(ErrorCode::invalid_argument, "frames of channel " + std::to_string(channel_id) +
                                            " disagree on sample rate or kind");
    }
    if (std::abs(f->start_time - expected) >= 1.0 / out.sample_rate) {
      fail(ErrorCode::invalid_argument, "frames of channel " + std::to_string(channel_id) + " are not contiguous");
    }
    out.samples.insert(out.samples.end(), f->samples.begin(), f->samples.end());
    expected = out.start_time + static_cast<double>(out.samples.size()) / out.sample_rate;
  }
  return out;
}

std::vector<int> channel_ids(const FrameStream& frames) {
  std::set<int> ids;
  for (const auto& f : frames) ids.insert(f.channel_id);
  return {ids.begin(), ids.end()};
}

std::vector<ChannelSignal> assemble_all(const FrameStream& frames) {
  std::vector<ChannelSignal> out;
  for (int id : channel_ids(frames)) out.push_back(assemble(frames, id));
  return out;
}

FrameStream load_recording(const std::filesystem::path& path, SignalKind kind, std::optional<double> calibration_gain,
                           std::size_t block) {
  if (!std::filesystem::exists(path)) fail(ErrorCode::not_found, "file not found: " + path.string(), path);
  const WavAudio audio = read_wav(path);
  if (audio.channels.size() > 4) {
    fail(ErrorCode::format, "recordings carry 1-4 channels, got " + std::to_string(audio.channels.size()), path);
  }
  if (calibration_gain) require(*calibration_gain > 0.0, "calibration gain must be positive");

  FrameStream frames;
  for (std::size_t c = 0; c < audio.channels.size(); ++c) {
    ChannelSignal ch;
    ch.channel_id = static_cast<int>(c);
    ch.kind = kind;
    ch.sample_rate = audio.sample_rate;
    ch.samples.assign(audio.channels[c].begin(), audio.channels[c].end());
    for (double x : ch.samples) {
      if (!std::isfinite(x)) fail(ErrorCode::format, "non-finite sample in recording", path);
    }
    if (calibration_gain) {
      for (double& x : ch.samples) x = std::clamp(x * *calibration_gain, -1.0, 1.0);
    } else {
      double peak = 0.0;
      for (double x : ch.samples) peak = std::max(peak, std::abs(x));
      if (peak > 0.0) {
        for (double& x : ch.samples) x /= peak;
      }
    }
    auto chunked = to_frames(ch, block);
    frames.insert(frames.end(), std::make_move_iterator(chunked.begin()), std::make_move_iterator(chunked.end()));
  }
  return frames;
}

void ContractionProfile::validate() const {
  require(noise_floor >= 0.0 && noise_floor <= 1.0, "noise_floor must lie in [0, 1]");
  for (std::size_t i = 0; i < events.size(); ++i) {
    const auto& e = events[i];
    require(e.onset >= 0.0, "event onset must be non-negative");
    require(e.peak_level >= 0.0 && e.peak_level <= 1.0, "event peak_level must lie in [0, 1]");
    require(e.rise_time > 0.0 && e.decay_time > 0.0, "event rise_time and decay_time must be positive");
    if (i > 0) require(e.onset > events[i - 1].onset, "event onsets must be strictly increasing");
  }
}

double ContractionProfile::envelope_at(double t) const {
  double level = 0.0;
  for (const auto& e : events) {
    const double tau = t - e.onset;
    if (tau < 0.0) break;
    if (tau <= e.rise_time) {
      level += e.peak_level * 0.5 * (1.0 - std::cos(std::numbers::pi * tau / e.rise_time));
    } else {
      level += e.peak_level * std::exp(-(tau - e.rise_time) / e.decay_time);
    }
  }
  return std::min(level, 1.0);
}

void to_json(nlohmann::json& j, const ContractionEvent& e) {
  j = {{"onset", e.onset}, {"peak_level", e.peak_level}, {"rise_time", e.rise_time}, {"decay_time", e.decay_time}};
}

void from_json(const nlohmann::json& j, ContractionEvent& e) {
  e.onset = j.at("onset").get<double>();
  e.peak_level = j.at("peak_level").get<double>();
  e.rise_time = j.at("rise_time").get<double>();
  e.decay_time = j.at("decay_time").get<double>();
}

void to_json(nlohmann::json& j, const ContractionProfile& p) {
  j = {{"events", p.events}, {"noise_floor", p.noise_floor}};
}

void from_json(const nlohmann::json& j, ContractionProfile& p) {
  p.events = j.value("events", std::vector<ContractionEvent>{});
  p.noise_floor = j.value("noise_floor", 0.0);
}

ContractionProfile load_profile(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::not_found, "cannot open profile: " + path.string(), path);
  ContractionProfile profile;
  try {
    profile = nlohmann::json::parse(in).get<ContractionProfile>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::format, std::string("malformed profile: ") + e.what(), path);
  }
  profile.validate();
  return profile;
}

namespace {

std::size_t sample_count(double duration, double sample_rate) {
  require(duration > 0.0, "duration must be positive");
  require(sample_rate > 0.0, "sample rate must be positive");
  return static_cast<std::size_t>(std::llround(duration * sample_rate));
}

// Unit-RMS Gaussian noise band-limited to [5, min(150, 0.4 fs)] Hz.
std::vector<double> band_limited_noise(std::size_t n, double sample_rate, Rng& rng) {
  std::vector<double> x(n);
  for (double& v : x) v = rng.gaussian();
  const double hi = std::min(150.0, 0.4 * sample_rate);
  const double lo = std::min(5.0, 0.5 * hi);
  auto sections = butterworth_sections(EdgeType::highpass, 2, lo, sample_rate);
  auto low = butterworth_sections(EdgeType::lowpass, 2, hi, sample_rate);
  sections.insert(sections.end(), low.begin(), low.end());
  double energy = 0.0;
  for (double& v : x) {
    for (auto& s : sections) v = s.process(v);
    energy += v * v;
  }
  if (energy > 0.0) {
    const double scale = 1.0 / std::sqrt(energy / static_cast<double>(n));
    for (double& v : x) v *= scale;
  }
  return x;
}

ChannelSignal make_channel(int channel_id, SignalKind kind, double sample_rate, std::vector<double> samples) {
  ChannelSignal ch;
  ch.channel_id = channel_id;
  ch.kind = kind;
  ch.sample_rate = sample_rate;
  ch.samples = std::move(samples);
  return ch;
}

}  // namespace

FrameStream synth_emg(const ContractionProfile& profile, double duration, double sample_rate, std::uint64_t seed,
                      int channel_id, std::size_t block) {
  profile.validate();
  const std::size_t n = sample_count(duration, sample_rate);
  std::vector<double> out(n, 0.0);

  if (!profile.events.empty()) {
    Rng rng(derive_seed(seed, "emg-carrier"));
    const auto carrier = band_limited_noise(n, sample_rate, rng);
    for (std::size_t i = 0; i < n; ++i) {
      out[i] += profile.envelope_at(static_cast<double>(i) / sample_rate) * carrier[i] / 3.0;
    }
  }
  if (profile.noise_floor > 0.0) {
    Rng rng(derive_seed(seed, "emg-floor"));
    const auto floor = band_limited_noise(n, sample_rate, rng);
    for (std::size_t i = 0; i < n; ++i) out[i] += profile.noise_floor * floor[i] / 3.0;
  }
  for (double& x : out) x = std::clamp(x, -1.0, 1.0);
  return to_frames(make_channel(channel_id, SignalKind::emg, sample_rate, std::move(out)), block);
}

double oscillator_impulse_response(double zeta, double omega, double t) {
  if (t < 0.0) return 0.0;
  if (zeta < 1.0) {
    const double wd = omega * std::sqrt(1.0 - zeta * zeta);
    return std::exp(-zeta * omega * t) * std::sin(wd * t) / wd;
  }
  if (zeta == 1.0) return t * std::exp(-omega * t);
  const double s = std::sqrt(zeta * zeta - 1.0);
  const double p1 = -omega * (zeta - s);
  const double p2 = -omega * (zeta + s);
  return (std::exp(p1 * t) - std::exp(p2 * t)) / (p1 - p2);
}

double oscillator_peak_time(double zeta, double omega) {
  if (zeta < 1.0) {
    const double wd = omega * std::sqrt(1.0 - zeta * zeta);
    return std::atan2(wd, zeta * omega) / wd;
  }
  if (zeta == 1.0) return 1.0 / omega;
  const double s = std::sqrt(zeta * zeta - 1.0);
  const double p1 = -omega * (zeta - s);
  const double p2 = -omega * (zeta + s);
  return std::log(p2 / p1) / (p1 - p2);
}

FrameStream synth_mmg(double zeta, double omega, const ContractionProfile& profile, double duration,
                      double sample_rate, std::uint64_t seed, int channel_id, std::size_t block) {
  require(zeta >= 0.0 && std::isfinite(zeta), "zeta must be finite and >= 0");
  require(omega > 0.0 && std::isfinite(omega), "omega must be positive");
  if (omega >= std::numbers::pi * sample_rate * (1.0 - 1e-12)) {
    fail(ErrorCode::invalid_argument, "omega at or above Nyquist for sample rate " + std::to_string(sample_rate));
  }
  profile.validate();
  const std::size_t n = sample_count(duration, sample_rate);
  std::vector<double> out(n, 0.0);

  const double peak = std::abs(oscillator_impulse_response(zeta, omega, oscillator_peak_time(zeta, omega)));
  for (const auto& e : profile.events) {
    const auto first = static_cast<std::size_t>(std::ceil(e.onset * sample_rate));
    for (std::size_t i = first; i < n; ++i) {
      const double t = static_cast<double>(i) / sample_rate - e.onset;
      out[i] += e.peak_level * oscillator_impulse_response(zeta, omega, t) / peak;
    }
  }
  double max_abs = 0.0;
  for (double x : out) max_abs = std::max(max_abs, std::abs(x));
  if (max_abs > 1.0) {
    for (double& x : out) x /= max_abs;
  }
  if (profile.noise_floor > 0.0) {
    Rng rng(derive_seed(seed, "mmg-floor"));
    for (double& x : out) x += profile.noise_floor * rng.gaussian();
  }
  for (double& x : out) x = std::clamp(x, -1.0, 1.0);
  return to_frames(make_channel(channel_id, SignalKind::mmg, sample_rate, std::move(out)), block);
}

}  // namespace bodyloop::signals
