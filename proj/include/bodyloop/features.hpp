#pragma once

#include <deque>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include <json.hpp>

#include "bodyloop/bandpass.hpp"
#include "bodyloop/regime.hpp"
#include "bodyloop/series.hpp"
#include "bodyloop/signals.hpp"

namespace bodyloop::features {

using signals::SignalKind;

struct FeatureParams {
  double window = 0.2;   // s, envelope
  double hop = 0.025;    // s, 40 Hz feature rate
  double centroid_window = 0.5;
  double lo = signals::kBandLo;
  double hi = signals::kBandHi;
  int band_order = signals::kDefaultBandpassOrder;
  double silence_rms = 1e-4;       // centroid absent below
  double activity_fraction = 0.1;  // of the calibration envelope max
};

void to_json(nlohmann::json& j, const FeatureParams& p);
void from_json(const nlohmann::json& j, FeatureParams& p);

// Value k sits at start_time + (k+1) * hop and is the RMS of the window
// ending there. Samples before the signal start count as zeros.
Series envelope(const signals::ChannelSignal& signal, double window, double hop);
// Single-channel stream.
Series envelope(const signals::FrameStream& frames, double window, double hop);

// Centered difference over hop; one-sided at both ends.
Series change_rate(const Series& env);

struct CentroidSeries {
  double start_time = 0.0;
  double step = 0.0;
  std::vector<std::optional<double>> values;  // empty optional = silent window
};

CentroidSeries spectral_centroid(const signals::ChannelSignal& signal, double window, double hop = 0.025,
                                 double lo = signals::kBandLo, double hi = signals::kBandHi,
                                 double silence_rms = 1e-4);
CentroidSeries spectral_centroid(const signals::FrameStream& frames, double window, double hop = 0.025,
                                 double lo = signals::kBandLo, double hi = signals::kBandHi,
                                 double silence_rms = 1e-4);

// Amplitude-weighted mean frequency over [lo, hi] of a Hann-windowed,
// zero-padded block (bin spacing <= 0.25 Hz).
class CentroidAnalyzer {
 public:
  CentroidAnalyzer(double sample_rate, std::size_t window_len, double lo, double hi, double silence_rms);
  ~CentroidAnalyzer();
  CentroidAnalyzer(CentroidAnalyzer&&) noexcept;
  CentroidAnalyzer& operator=(CentroidAnalyzer&&) noexcept;

  std::size_t window_len() const { return window_len_; }
  std::optional<double> operator()(std::span<const double> block);

 private:
  struct Plan;
  std::unique_ptr<Plan> plan_;
  std::size_t window_len_;
  double silence_rms_;
};

struct ChannelKey {
  SignalKind kind = SignalKind::emg;
  int channel_id = 0;
  auto operator<=>(const ChannelKey&) const = default;
};

struct ChannelFeatures {
  int channel_id = 0;
  SignalKind kind = SignalKind::emg;
  double envelope = 0.0;
  double change_rate = 0.0;
  std::optional<double> spectral_centroid;
  std::optional<double> damping_ratio;

  ChannelKey key() const { return {kind, channel_id}; }
};

struct NuanceDescriptors {
  double effort = 0.0;
  double abruptness = 0.0;
  double relaxation_rate = 0.0;
  int complexity = 0;
};

struct FeatureVector {
  double time = 0.0;
  std::vector<ChannelFeatures> channels;
  double effort = 0.0;
  double abruptness = 0.0;
  double relaxation_rate = 0.0;
  int complexity = 0;
  std::vector<regime::RegimeEstimate> regime;

  void set(const NuanceDescriptors& d);
  // Numeric layout consumed by the nuance model: per channel (envelope,
  // change_rate, spectral_centroid, damping_ratio) then the four
  // aggregates. Absent values read as 0.
  std::vector<double> flatten() const;
  static std::size_t flat_size(std::size_t channel_count) { return 4 * channel_count + 4; }
};

void to_json(nlohmann::json& j, const ChannelFeatures& c);
void from_json(const nlohmann::json& j, ChannelFeatures& c);
void to_json(nlohmann::json& j, const FeatureVector& v);
void from_json(const nlohmann::json& j, FeatureVector& v);

std::string to_jsonl(const std::vector<FeatureVector>& rows);
std::vector<FeatureVector> parse_jsonl(std::string_view text, const std::filesystem::path& origin = {});

struct ChannelCalibration {
  double envelope_max = 0.0;
  double rise_max = 0.0;  // largest positive change_rate, 1/s
  double fall_max = 0.0;  // largest negative change_rate magnitude, 1/s
};

// Per-channel maxima captured during a calibration pass.
struct Calibration {
  std::map<ChannelKey, ChannelCalibration> channels;
  double activity_fraction = 0.1;

  // Running maxima over feature rows. Maxima never fall below the floors
  // below, so a pass over silence still yields a usable calibration.
  void observe(const FeatureVector& row);
  static Calibration capture(const std::vector<FeatureVector>& rows, double activity_fraction = 0.1);

  static constexpr double kEnvelopeFloor = 1e-4;
  static constexpr double kRateFloor = 1e-3;
};

void to_json(nlohmann::json& j, const Calibration& c);
void from_json(const nlohmann::json& j, Calibration& c);

// Normalized descriptors of one time step. Throws Error{calibration} when a
// channel has no calibration entry or a zero maximum.
NuanceDescriptors aggregate_nuance(std::span<const ChannelFeatures> channels, const Calibration& calibration);

// Fills the aggregate fields of every row.
void apply_calibration(std::vector<FeatureVector>& rows, const Calibration& calibration);

// Streaming extractor over any mix of EMG and MMG channels. Each channel is
// band-limited, then envelope, centroid and (MMG only) regime estimates are
// computed on the shared hop grid. Rows are released once every channel has
// delivered the following hop, because the centered change rate needs it.
class FeatureExtractor {
 public:
  explicit FeatureExtractor(FeatureParams params = {}, regime::RegimeParams regime_params = {},
                            std::optional<Calibration> calibration = std::nullopt);
  ~FeatureExtractor();
  FeatureExtractor(FeatureExtractor&&) noexcept;
  FeatureExtractor& operator=(FeatureExtractor&&) noexcept;

  // Channels must be declared before the first push.
  void add_channel(SignalKind kind, int channel_id, double sample_rate, double start_time = 0.0);
  std::vector<FeatureVector> push(const signals::SignalFrame& frame);
  // Releases the remaining rows using one-sided differences at the end.
  std::vector<FeatureVector> finish();

  void set_calibration(std::optional<Calibration> calibration) { calibration_ = std::move(calibration); }
  const std::optional<Calibration>& calibration() const { return calibration_; }
  const FeatureParams& params() const { return params_; }

 private:
  struct Channel;
  std::vector<FeatureVector> release(bool final);

  FeatureParams params_;
  regime::RegimeParams regime_params_;
  std::optional<Calibration> calibration_;
  std::map<ChannelKey, std::unique_ptr<Channel>> channels_;
  std::size_t next_row_ = 0;
  bool started_ = false;
  std::optional<double> start_time_;
};

// Offline analysis of complete EMG and MMG streams (either may be empty).
// Without a calibration, one is captured from the rows themselves.
struct AnalysisResult {
  std::vector<FeatureVector> rows;
  std::vector<regime::RegimeEstimate> regime;
  Calibration calibration;
};

AnalysisResult analyze(const signals::FrameStream& emg, const signals::FrameStream& mmg, const FeatureParams& params,
                       const regime::RegimeParams& regime_params, std::optional<Calibration> calibration = std::nullopt);

}  // namespace bodyloop::features
