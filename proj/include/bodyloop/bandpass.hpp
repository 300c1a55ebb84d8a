#pragma once

#include <complex>
#include <span>
#include <vector>

#include "bodyloop/signals.hpp"

namespace bodyloop::signals {

inline constexpr double kBandLo = 1.0;
inline constexpr double kBandHi = 40.0;
inline constexpr int kDefaultBandpassOrder = 8;

// Transposed direct form II second-order section.
struct Biquad {
  double b0 = 1.0, b1 = 0.0, b2 = 0.0;
  double a1 = 0.0, a2 = 0.0;
  double z1 = 0.0, z2 = 0.0;

  double process(double x) {
    const double y = b0 * x + z1;
    z1 = b1 * x - a1 * y + z2;
    z2 = b2 * x - a2 * y;
    return y;
  }
  void reset() { z1 = z2 = 0.0; }

  std::complex<double> response(double omega) const;
  // Group delay in samples at normalized angular frequency omega.
  double group_delay(double omega) const;
};

enum class EdgeType { lowpass, highpass };

// Butterworth edge of even order realized as order/2 bilinear sections,
// each prewarped at the cutoff.
std::vector<Biquad> butterworth_sections(EdgeType type, int order, double cutoff_hz, double sample_rate);

// Causal band-pass: Butterworth high-pass at lo cascaded with Butterworth
// low-pass at hi, both of the given (even) order. State persists across
// calls, so block-wise filtering is sample-exact with one-shot filtering.
class BandpassFilter {
 public:
  BandpassFilter(double sample_rate, double lo = kBandLo, double hi = kBandHi, int order = kDefaultBandpassOrder);

  double process(double x);
  void process(std::span<double> samples);
  void reset();

  double sample_rate() const { return sample_rate_; }
  double lo() const { return lo_; }
  double hi() const { return hi_; }
  int order() const { return order_; }
  const std::vector<Biquad>& sections() const { return sections_; }

  std::complex<double> response(double freq_hz) const;
  double gain_db(double freq_hz) const;
  // Group delay in seconds.
  double group_delay(double freq_hz) const;

 private:
  double sample_rate_;
  double lo_;
  double hi_;
  int order_;
  std::vector<Biquad> sections_;
};

// Filters every channel of a stream with its own filter instance; frame
// boundaries are preserved.
FrameStream bandpass(const FrameStream& frames, double lo = kBandLo, double hi = kBandHi,
                     int order = kDefaultBandpassOrder);

ChannelSignal bandpass(const ChannelSignal& signal, double lo = kBandLo, double hi = kBandHi,
                       int order = kDefaultBandpassOrder);

}  // namespace bodyloop::signals
