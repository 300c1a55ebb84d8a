#include "bodyloop/bandpass.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include "bodyloop/error.hpp"

namespace bodyloop::signals {

std::complex<double> Biquad::response(double omega) const {
  const std::complex<double> z1inv = std::polar(1.0, -omega);
  const std::complex<double> z2inv = z1inv * z1inv;
  return (b0 + b1 * z1inv + b2 * z2inv) / (1.0 + a1 * z1inv + a2 * z2inv);
}

namespace {

// Group delay of a polynomial sum_k c_k z^-k, in samples.
double poly_group_delay(double c0, double c1, double c2, double omega) {
  const std::complex<double> e1 = std::polar(1.0, -omega);
  const std::complex<double> e2 = e1 * e1;
  const std::complex<double> p = c0 + c1 * e1 + c2 * e2;
  const std::complex<double> dp = c1 * e1 + 2.0 * c2 * e2;
  return (dp / p).real();
}

}  // namespace

double Biquad::group_delay(double omega) const {
  return poly_group_delay(b0, b1, b2, omega) - poly_group_delay(1.0, a1, a2, omega);
}

std::vector<Biquad> butterworth_sections(EdgeType type, int order, double cutoff_hz, double sample_rate) {
  require(order >= 2 && order % 2 == 0, "Butterworth order must be even and >= 2");
  require(cutoff_hz > 0.0 && cutoff_hz < sample_rate / 2.0, "cutoff must lie in (0, Nyquist)");

  const double w0 = 2.0 * std::numbers::pi * cutoff_hz / sample_rate;
  const double cw = std::cos(w0);
  const double sw = std::sin(w0);
  std::vector<Biquad> sections;
  for (int k = 0; k < order / 2; ++k) {
    const double q = 1.0 / (2.0 * std::sin((2.0 * k + 1.0) * std::numbers::pi / (2.0 * order)));
    const double alpha = sw / (2.0 * q);
    const double a0 = 1.0 + alpha;
    Biquad s;
    if (type == EdgeType::lowpass) {
      s.b0 = (1.0 - cw) / 2.0 / a0;
      s.b1 = (1.0 - cw) / a0;
      s.b2 = s.b0;
    } else {
      s.b0 = (1.0 + cw) / 2.0 / a0;
      s.b1 = -(1.0 + cw) / a0;
      s.b2 = s.b0;
    }
    s.a1 = -2.0 * cw / a0;
    s.a2 = (1.0 - alpha) / a0;
    sections.push_back(s);
  }
  return sections;
}

BandpassFilter::BandpassFilter(double sample_rate, double lo, double hi, int order)
    : sample_rate_(sample_rate), lo_(lo), hi_(hi), order_(order) {
  require(sample_rate > 0.0, "sample rate must be positive");
  if (!(lo > 0.0 && lo < hi && hi < sample_rate / 2.0)) {
    fail(ErrorCode::invalid_argument, "invalid band edges: need 0 < lo < hi < sample_rate/2 (lo=" +
                                          std::to_string(lo) + ", hi=" + std::to_string(hi) +
                                          ", rate=" + std::to_string(sample_rate) + ")");
  }
  sections_ = butterworth_sections(EdgeType::highpass, order, lo, sample_rate);
  auto low = butterworth_sections(EdgeType::lowpass, order, hi, sample_rate);
  sections_.insert(sections_.end(), low.begin(), low.end());
}

double BandpassFilter::process(double x) {
  for (auto& s : sections_) x = s.process(x);
  return x;
}

void BandpassFilter::process(std::span<double> samples) {
  for (double& x : samples) x = process(x);
}

void BandpassFilter::reset() {
  for (auto& s : sections_) s.reset();
}

std::complex<double> BandpassFilter::response(double freq_hz) const {
  const double omega = 2.0 * std::numbers::pi * freq_hz / sample_rate_;
  std::complex<double> h = 1.0;
  for (const auto& s : sections_) h *= s.response(omega);
  return h;
}

double BandpassFilter::gain_db(double freq_hz) const { return 20.0 * std::log10(std::abs(response(freq_hz))); }

double BandpassFilter::group_delay(double freq_hz) const {
  const double omega = 2.0 * std::numbers::pi * freq_hz / sample_rate_;
  double samples = 0.0;
  for (const auto& s : sections_) samples += s.group_delay(omega);
  return samples / sample_rate_;
}

FrameStream bandpass(const FrameStream& frames, double lo, double hi, int order) {
  std::map<int, BandpassFilter> filters;
  FrameStream out;
  out.reserve(frames.size());
  for (const auto& frame : frames) {
    auto it = filters.find(frame.channel_id);
    if (it == filters.end()) {
      it = filters.emplace(frame.channel_id, BandpassFilter(frame.sample_rate, lo, hi, order)).first;
    } else if (it->second.sample_rate() != frame.sample_rate) {
      fail(ErrorCode::invalid_argument, "sample rate changed within channel " + std::to_string(frame.channel_id));
    }
    SignalFrame filtered = frame;
    it->second.process(filtered.samples);
    // Frames must stay within [-1, 1]; filter overshoot on full-scale input
    // is the only way out, and it is clipped here.
    for (double& x : filtered.samples) x = std::clamp(x, -1.0, 1.0);
    out.push_back(std::move(filtered));
  }
  return out;
}

ChannelSignal bandpass(const ChannelSignal& signal, double lo, double hi, int order) {
  BandpassFilter filter(signal.sample_rate, lo, hi, order);
  ChannelSignal out = signal;
  filter.process(out.samples);
  for (double& x : out.samples) x = std::clamp(x, -1.0, 1.0);
  return out;
}

}  // namespace bodyloop::signals
