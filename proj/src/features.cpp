#include "bodyloop/features.hpp"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>
#include <sstream>

#include <unsupported/Eigen/FFT>

#include "bodyloop/error.hpp"

namespace bodyloop::features {

namespace {

std::size_t samples_for(double seconds, double rate) {
  return static_cast<std::size_t>(std::llround(seconds * rate));
}

std::size_t hop_boundary(std::size_t k, double hop, double rate) {
  return static_cast<std::size_t>(std::llround(static_cast<double>(k) * hop * rate));
}

signals::ChannelSignal single_channel(const signals::FrameStream& frames) {
  const auto ids = signals::channel_ids(frames);
  require(ids.size() == 1, "expected a single-channel stream");
  return signals::assemble(frames, ids.front());
}

// RMS of the len samples ending before end; indices before 0 read as zero.
double trailing_rms(const std::vector<double>& x, std::size_t end, std::size_t len) {
  double acc = 0.0;
  const std::size_t first = end > len ? end - len : 0;
  for (std::size_t i = first; i < end; ++i) acc += x[i] * x[i];
  return std::sqrt(acc / static_cast<double>(len));
}

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

}  // namespace

void to_json(nlohmann::json& j, const FeatureParams& p) {
  j = nlohmann::json{{"window", p.window},
                     {"hop", p.hop},
                     {"centroid_window", p.centroid_window},
                     {"lo", p.lo},
                     {"hi", p.hi},
                     {"band_order", p.band_order},
                     {"silence_rms", p.silence_rms},
                     {"activity_fraction", p.activity_fraction}};
}

void from_json(const nlohmann::json& j, FeatureParams& p) {
  FeatureParams d;
  p.window = j.value("window", d.window);
  p.hop = j.value("hop", d.hop);
  p.centroid_window = j.value("centroid_window", d.centroid_window);
  p.lo = j.value("lo", d.lo);
  p.hi = j.value("hi", d.hi);
  p.band_order = j.value("band_order", d.band_order);
  p.silence_rms = j.value("silence_rms", d.silence_rms);
  p.activity_fraction = j.value("activity_fraction", d.activity_fraction);
}

Series envelope(const signals::ChannelSignal& signal, double window, double hop) {
  require(hop > 0.0 && window >= hop, "envelope needs window >= hop > 0");
  const std::size_t len = samples_for(window, signal.sample_rate);
  if (window * signal.sample_rate < 2.0) fail(ErrorCode::invalid_argument, "envelope window shorter than 2 sample periods");
  Series out{signal.start_time + hop, hop, {}};
  for (std::size_t k = 1;; ++k) {
    const std::size_t end = hop_boundary(k, hop, signal.sample_rate);
    if (end > signal.samples.size()) break;
    out.values.push_back(trailing_rms(signal.samples, end, len));
  }
  return out;
}

Series envelope(const signals::FrameStream& frames, double window, double hop) {
  return envelope(single_channel(frames), window, hop);
}

Series change_rate(const Series& env) {
  require(env.size() >= 2, "change rate needs at least 2 envelope points");
  require(env.step > 0.0, "envelope step must be positive");
  const auto& v = env.values;
  const std::size_t n = v.size();
  Series out{env.start_time, env.step, std::vector<double>(n)};
  out.values[0] = (v[1] - v[0]) / env.step;
  out.values[n - 1] = (v[n - 1] - v[n - 2]) / env.step;
  for (std::size_t i = 1; i + 1 < n; ++i) out.values[i] = (v[i + 1] - v[i - 1]) / (2.0 * env.step);
  return out;
}

struct CentroidAnalyzer::Plan {
  Eigen::FFT<double> fft;
  std::vector<double> taper;
  std::vector<double> buffer;
  std::vector<std::complex<double>> spectrum;
  std::size_t first_bin = 0;
  std::size_t last_bin = 0;
  double bin_hz = 0.0;
};

CentroidAnalyzer::CentroidAnalyzer(double sample_rate, std::size_t window_len, double lo, double hi,
                                   double silence_rms)
    : plan_(std::make_unique<Plan>()), window_len_(window_len), silence_rms_(silence_rms) {
  if (window_len < 4) fail(ErrorCode::invalid_argument, "centroid window shorter than 4 sample periods");
  require(lo >= 0.0 && lo < hi, "centroid band must satisfy 0 <= lo < hi");
  const std::size_t nfft = next_pow2(std::max(window_len, static_cast<std::size_t>(std::ceil(4.0 * sample_rate))));
  plan_->taper.resize(window_len);
  for (std::size_t i = 0; i < window_len; ++i) {
    plan_->taper[i] =
        0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(window_len - 1));
  }
  plan_->buffer.assign(nfft, 0.0);
  plan_->bin_hz = sample_rate / static_cast<double>(nfft);
  plan_->first_bin = static_cast<std::size_t>(std::ceil(lo / plan_->bin_hz));
  plan_->last_bin = std::min(nfft / 2, static_cast<std::size_t>(std::floor(hi / plan_->bin_hz)));
  require(plan_->first_bin <= plan_->last_bin, "centroid band holds no frequency bins");
}

CentroidAnalyzer::~CentroidAnalyzer() = default;
CentroidAnalyzer::CentroidAnalyzer(CentroidAnalyzer&&) noexcept = default;
CentroidAnalyzer& CentroidAnalyzer::operator=(CentroidAnalyzer&&) noexcept = default;

std::optional<double> CentroidAnalyzer::operator()(std::span<const double> block) {
  require(block.size() == window_len_, "centroid block has the wrong length");
  double energy = 0.0;
  for (double x : block) energy += x * x;
  if (std::sqrt(energy / static_cast<double>(block.size())) < silence_rms_) return std::nullopt;

  auto& p = *plan_;
  std::fill(p.buffer.begin(), p.buffer.end(), 0.0);
  for (std::size_t i = 0; i < block.size(); ++i) p.buffer[i] = block[i] * p.taper[i];
  p.fft.fwd(p.spectrum, p.buffer);
  double weighted = 0.0;
  double total = 0.0;
  for (std::size_t k = p.first_bin; k <= p.last_bin; ++k) {
    const double mag = std::abs(p.spectrum[k]);
    weighted += mag * static_cast<double>(k) * p.bin_hz;
    total += mag;
  }
  if (!(total > 0.0)) return std::nullopt;
  return weighted / total;
}

CentroidSeries spectral_centroid(const signals::ChannelSignal& signal, double window, double hop, double lo, double hi,
                                 double silence_rms) {
  require(hop > 0.0, "centroid hop must be positive");
  if (window * signal.sample_rate < 4.0) fail(ErrorCode::invalid_argument, "centroid window shorter than 4 sample periods");
  const std::size_t len = samples_for(window, signal.sample_rate);
  CentroidAnalyzer analyzer(signal.sample_rate, len, lo, hi, silence_rms);
  CentroidSeries out{signal.start_time + hop, hop, {}};
  std::vector<double> block(len);
  for (std::size_t k = 1;; ++k) {
    const std::size_t end = hop_boundary(k, hop, signal.sample_rate);
    if (end > signal.samples.size()) break;
    for (std::size_t i = 0; i < len; ++i) {
      const std::size_t back = len - i;
      block[i] = end >= back ? signal.samples[end - back] : 0.0;
    }
    out.values.push_back(analyzer(block));
  }
  return out;
}

CentroidSeries spectral_centroid(const signals::FrameStream& frames, double window, double hop, double lo, double hi,
                                 double silence_rms) {
  return spectral_centroid(single_channel(frames), window, hop, lo, hi, silence_rms);
}

void FeatureVector::set(const NuanceDescriptors& d) {
  effort = d.effort;
  abruptness = d.abruptness;
  relaxation_rate = d.relaxation_rate;
  complexity = d.complexity;
}

std::vector<double> FeatureVector::flatten() const {
  std::vector<double> out;
  out.reserve(flat_size(channels.size()));
  for (const auto& c : channels) {
    out.push_back(c.envelope);
    out.push_back(c.change_rate);
    out.push_back(c.spectral_centroid.value_or(0.0));
    out.push_back(c.damping_ratio.value_or(0.0));
  }
  out.push_back(effort);
  out.push_back(abruptness);
  out.push_back(relaxation_rate);
  out.push_back(static_cast<double>(complexity));
  return out;
}

namespace {

nlohmann::json optional_number(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(); }

std::optional<double> read_optional(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

}  // namespace

void to_json(nlohmann::json& j, const ChannelFeatures& c) {
  j = nlohmann::json{{"channel_id", c.channel_id},
                     {"kind", signals::to_string(c.kind)},
                     {"envelope", c.envelope},
                     {"change_rate", c.change_rate},
                     {"spectral_centroid", optional_number(c.spectral_centroid)},
                     {"damping_ratio", optional_number(c.damping_ratio)}};
}

void from_json(const nlohmann::json& j, ChannelFeatures& c) {
  c.channel_id = j.at("channel_id").get<int>();
  c.kind = signals::kind_from_string(j.at("kind").get<std::string>());
  c.envelope = j.at("envelope").get<double>();
  c.change_rate = j.at("change_rate").get<double>();
  c.spectral_centroid = read_optional(j, "spectral_centroid");
  c.damping_ratio = read_optional(j, "damping_ratio");
}

void to_json(nlohmann::json& j, const FeatureVector& v) {
  j = nlohmann::json{{"time", v.time},
                     {"channels", v.channels},
                     {"effort", v.effort},
                     {"abruptness", v.abruptness},
                     {"relaxation_rate", v.relaxation_rate},
                     {"complexity", v.complexity},
                     {"regime", v.regime}};
}

void from_json(const nlohmann::json& j, FeatureVector& v) {
  v.time = j.at("time").get<double>();
  v.channels = j.at("channels").get<std::vector<ChannelFeatures>>();
  v.effort = j.at("effort").get<double>();
  v.abruptness = j.at("abruptness").get<double>();
  v.relaxation_rate = j.at("relaxation_rate").get<double>();
  v.complexity = j.at("complexity").get<int>();
  v.regime = j.contains("regime") ? j.at("regime").get<std::vector<regime::RegimeEstimate>>()
                                  : std::vector<regime::RegimeEstimate>{};
}

std::string to_jsonl(const std::vector<FeatureVector>& rows) {
  std::string out;
  for (const auto& row : rows) {
    out += nlohmann::json(row).dump();
    out += '\n';
  }
  return out;
}

std::vector<FeatureVector> parse_jsonl(std::string_view text, const std::filesystem::path& origin) {
  std::vector<FeatureVector> rows;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      rows.push_back(nlohmann::json::parse(line).get<FeatureVector>());
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::format, "feature row " + std::to_string(number) + ": " + e.what(), origin);
    }
  }
  return rows;
}

void Calibration::observe(const FeatureVector& row) {
  for (const auto& c : row.channels) {
    auto& entry = channels[c.key()];
    entry.envelope_max = std::max({entry.envelope_max, c.envelope, kEnvelopeFloor});
    entry.rise_max = std::max({entry.rise_max, c.change_rate, kRateFloor});
    entry.fall_max = std::max({entry.fall_max, -c.change_rate, kRateFloor});
  }
}

Calibration Calibration::capture(const std::vector<FeatureVector>& rows, double activity_fraction) {
  Calibration cal;
  cal.activity_fraction = activity_fraction;
  for (const auto& row : rows) cal.observe(row);
  return cal;
}

void to_json(nlohmann::json& j, const Calibration& c) {
  auto list = nlohmann::json::array();
  for (const auto& [key, entry] : c.channels) {
    list.push_back({{"kind", signals::to_string(key.kind)},
                    {"channel_id", key.channel_id},
                    {"envelope_max", entry.envelope_max},
                    {"rise_max", entry.rise_max},
                    {"fall_max", entry.fall_max}});
  }
  j = nlohmann::json{{"activity_fraction", c.activity_fraction}, {"channels", list}};
}

void from_json(const nlohmann::json& j, Calibration& c) {
  c.activity_fraction = j.value("activity_fraction", 0.1);
  c.channels.clear();
  for (const auto& item : j.at("channels")) {
    ChannelKey key{signals::kind_from_string(item.at("kind").get<std::string>()), item.at("channel_id").get<int>()};
    c.channels[key] = ChannelCalibration{item.at("envelope_max").get<double>(), item.at("rise_max").get<double>(),
                                         item.at("fall_max").get<double>()};
  }
}

NuanceDescriptors aggregate_nuance(std::span<const ChannelFeatures> channels, const Calibration& calibration) {
  require(!channels.empty(), "aggregate needs at least one channel");
  NuanceDescriptors out;
  double effort_sum = 0.0;
  for (const auto& c : channels) {
    const auto it = calibration.channels.find(c.key());
    const std::string name = std::string(signals::to_string(c.kind)) + " channel " + std::to_string(c.channel_id);
    if (it == calibration.channels.end()) {
      fail(ErrorCode::calibration, "no calibration for " + name + "; run a calibration pass first");
    }
    const auto& cal = it->second;
    if (!(cal.envelope_max > 0.0) || !(cal.rise_max > 0.0) || !(cal.fall_max > 0.0)) {
      fail(ErrorCode::calibration, "calibration maximum is zero for " + name + "; recalibrate with movement");
    }
    effort_sum += c.envelope / cal.envelope_max;
    out.abruptness = std::max(out.abruptness, std::max(0.0, c.change_rate) / cal.rise_max);
    out.relaxation_rate = std::max(out.relaxation_rate, std::max(0.0, -c.change_rate) / cal.fall_max);
    if (c.envelope > calibration.activity_fraction * cal.envelope_max) ++out.complexity;
  }
  out.effort = std::clamp(effort_sum / static_cast<double>(channels.size()), 0.0, 1.0);
  out.abruptness = std::clamp(out.abruptness, 0.0, 1.0);
  out.relaxation_rate = std::clamp(out.relaxation_rate, 0.0, 1.0);
  return out;
}

void apply_calibration(std::vector<FeatureVector>& rows, const Calibration& calibration) {
  for (auto& row : rows) row.set(aggregate_nuance(row.channels, calibration));
}

struct FeatureExtractor::Channel {
  Channel(SignalKind kind, int id, double rate, double start, const FeatureParams& p,
          const regime::RegimeParams& rp)
      : kind(kind),
        id(id),
        rate(rate),
        start(start),
        filter(rate, p.lo, p.hi, p.band_order),
        envelope_len(samples_for(p.window, rate)),
        centroid(rate, samples_for(p.centroid_window, rate), p.lo, p.hi, p.silence_rms) {
    if (p.window * rate < 2.0) fail(ErrorCode::invalid_argument, "envelope window shorter than 2 sample periods");
    history.assign(std::max(envelope_len, centroid.window_len()), 0.0);
    block.resize(centroid.window_len());
    if (kind == SignalKind::mmg) estimator.emplace(rate, rp, id, start);
  }

  SignalKind kind;
  int id;
  double rate;
  double start;
  signals::BandpassFilter filter;
  std::size_t envelope_len;
  CentroidAnalyzer centroid;
  std::optional<regime::RegimeEstimator> estimator;

  std::deque<double> history;
  std::vector<double> block;
  std::size_t raw_index = 0;
  std::size_t next_hop = 1;

  // Per-hop values; index base + i holds hop row base + i.
  std::size_t base = 0;
  std::deque<double> envelopes;
  std::deque<std::optional<double>> centroids;
  std::deque<regime::RegimeEstimate> estimates;

  std::size_t available() const { return base + envelopes.size(); }

  void close_hop() {
    double acc = 0.0;
    for (std::size_t i = history.size() - envelope_len; i < history.size(); ++i) acc += history[i] * history[i];
    envelopes.push_back(std::sqrt(acc / static_cast<double>(envelope_len)));
    const std::size_t offset = history.size() - block.size();
    for (std::size_t i = 0; i < block.size(); ++i) block[i] = history[offset + i];
    centroids.push_back(centroid(block));
  }

  void push(const std::vector<double>& samples, double hop) {
    std::vector<double> filtered(samples);
    filter.process(filtered);
    for (double& x : filtered) x = std::clamp(x, -1.0, 1.0);
    for (double x : filtered) {
      history.pop_front();
      history.push_back(x);
      ++raw_index;
      while (hop_boundary(next_hop, hop, rate) <= raw_index) {
        close_hop();
        ++next_hop;
      }
    }
    if (estimator) {
      auto produced = estimator->push(filtered);
      estimates.insert(estimates.end(), produced.begin(), produced.end());
    }
  }

  void drop_before(std::size_t row) {
    while (base < row && !envelopes.empty()) {
      envelopes.pop_front();
      centroids.pop_front();
      if (!estimates.empty()) estimates.pop_front();
      ++base;
    }
  }
};

FeatureExtractor::FeatureExtractor(FeatureParams params, regime::RegimeParams regime_params,
                                   std::optional<Calibration> calibration)
    : params_(params), regime_params_(regime_params), calibration_(std::move(calibration)) {
  require(params_.hop > 0.0 && params_.window >= params_.hop, "feature window must be >= hop > 0");
  regime_params_.hop = params_.hop;
}

FeatureExtractor::~FeatureExtractor() = default;
FeatureExtractor::FeatureExtractor(FeatureExtractor&&) noexcept = default;
FeatureExtractor& FeatureExtractor::operator=(FeatureExtractor&&) noexcept = default;

void FeatureExtractor::add_channel(SignalKind kind, int channel_id, double sample_rate, double start_time) {
  require(!started_, "channels must be declared before streaming starts");
  const ChannelKey key{kind, channel_id};
  if (channels_.contains(key)) {
    fail(ErrorCode::invalid_argument,
         "duplicate " + std::string(signals::to_string(kind)) + " channel " + std::to_string(channel_id));
  }
  if (start_time_ && *start_time_ != start_time) {
    fail(ErrorCode::invalid_argument, "all channels must share one start time");
  }
  start_time_ = start_time;
  channels_.emplace(key, std::make_unique<Channel>(kind, channel_id, sample_rate, start_time, params_, regime_params_));
}

std::vector<FeatureVector> FeatureExtractor::push(const signals::SignalFrame& frame) {
  started_ = true;
  const auto it = channels_.find(ChannelKey{frame.kind, frame.channel_id});
  if (it == channels_.end()) {
    fail(ErrorCode::invalid_argument, "frame for undeclared " + std::string(signals::to_string(frame.kind)) +
                                          " channel " + std::to_string(frame.channel_id));
  }
  auto& ch = *it->second;
  if (frame.sample_rate != ch.rate) {
    fail(ErrorCode::invalid_argument, "inconsistent sample rate on " + std::string(signals::to_string(frame.kind)) +
                                          " channel " + std::to_string(frame.channel_id));
  }
  ch.push(frame.samples, params_.hop);
  return release(false);
}

std::vector<FeatureVector> FeatureExtractor::finish() { return release(true); }

std::vector<FeatureVector> FeatureExtractor::release(bool final) {
  std::vector<FeatureVector> out;
  if (channels_.empty()) return out;
  std::size_t available = SIZE_MAX;
  for (const auto& [key, ch] : channels_) available = std::min(available, ch->available());
  const double hop = params_.hop;
  while (next_row_ < available && (final || next_row_ + 1 < available)) {
    const std::size_t k = next_row_;
    FeatureVector row;
    row.time = start_time_.value_or(0.0) + static_cast<double>(k + 1) * hop;
    for (const auto& [key, ch] : channels_) {
      const auto env_at = [&](std::size_t i) { return ch->envelopes[i - ch->base]; };
      ChannelFeatures cf;
      cf.channel_id = ch->id;
      cf.kind = ch->kind;
      cf.envelope = env_at(k);
      const bool has_prev = k > 0 && k - 1 >= ch->base;
      const bool has_next = k + 1 < available;
      if (has_prev && has_next) {
        cf.change_rate = (env_at(k + 1) - env_at(k - 1)) / (2.0 * hop);
      } else if (has_next) {
        cf.change_rate = (env_at(k + 1) - env_at(k)) / hop;
      } else if (has_prev) {
        cf.change_rate = (env_at(k) - env_at(k - 1)) / hop;
      }
      cf.spectral_centroid = ch->centroids[k - ch->base];
      if (ch->estimator && k - ch->base < ch->estimates.size()) {
        const auto& est = ch->estimates[k - ch->base];
        row.regime.push_back(est);
        if (est.valid) cf.damping_ratio = est.zeta;
      }
      row.channels.push_back(cf);
    }
    if (calibration_) row.set(aggregate_nuance(row.channels, *calibration_));
    out.push_back(std::move(row));
    ++next_row_;
    // Keep one row of history for the centered difference.
    for (auto& [key, ch] : channels_) ch->drop_before(next_row_ - 1);
  }
  return out;
}

AnalysisResult analyze(const signals::FrameStream& emg, const signals::FrameStream& mmg, const FeatureParams& params,
                       const regime::RegimeParams& regime_params, std::optional<Calibration> calibration) {
  FeatureExtractor extractor(params, regime_params);
  for (const auto* stream : {&emg, &mmg}) {
    for (int id : signals::channel_ids(*stream)) {
      const auto first = std::find_if(stream->begin(), stream->end(),
                                      [id](const signals::SignalFrame& f) { return f.channel_id == id; });
      extractor.add_channel(first->kind, id, first->sample_rate, first->start_time);
    }
  }
  AnalysisResult result;
  for (const auto* stream : {&emg, &mmg}) {
    for (const auto& frame : *stream) {
      auto rows = extractor.push(frame);
      result.rows.insert(result.rows.end(), rows.begin(), rows.end());
    }
  }
  auto tail = extractor.finish();
  result.rows.insert(result.rows.end(), tail.begin(), tail.end());
  result.calibration =
      calibration ? std::move(*calibration) : Calibration::capture(result.rows, params.activity_fraction);
  apply_calibration(result.rows, result.calibration);
  for (const auto& row : result.rows) result.regime.insert(result.regime.end(), row.regime.begin(), row.regime.end());
  return result;
}

}  // namespace bodyloop::features
