#pragma once

#include <array>
#include <deque>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "bodyloop/series.hpp"
#include "bodyloop/signals.hpp"

namespace bodyloop::regime {

enum class InvalidReason { none, ill_conditioned, non_physical, residual_ceiling };

std::string_view to_string(InvalidReason reason);
InvalidReason reason_from_string(std::string_view name);

// Parameters of x'' + 2 zeta omega x' + omega^2 x = u for one analysis hop.
struct RegimeEstimate {
  int channel_id = 0;
  double time = 0.0;
  double zeta = 0.0;
  double omega = 0.0;
  double excitation = 0.0;
  double residual_rms = 0.0;
  bool valid = false;
  InvalidReason reason = InvalidReason::ill_conditioned;
  // Discrete AR(2) coefficients at the decimated rate.
  double a1 = 0.0;
  double a2 = 0.0;
};

void to_json(nlohmann::json& j, const RegimeEstimate& e);
void from_json(const nlohmann::json& j, RegimeEstimate& e);

struct RegimeParams {
  double window = 0.2;        // s, residual/signal statistics
  double hop = 0.025;         // s, one estimate per hop
  double forgetting = 0.995;  // per decimated sample
  double target_rate = 200.0;
  double validity_ratio = 0.5;  // residual_rms above ratio * signal RMS -> invalid
  double min_rms = 1e-6;        // window RMS below -> ill-conditioned
  double max_condition = 1e10;  // information-matrix condition number ceiling
};

void to_json(nlohmann::json& j, const RegimeParams& p);
void from_json(const nlohmann::json& j, RegimeParams& p);

struct ContinuousPoles {
  double zeta = 0.0;
  double omega = 0.0;
};

// Matched-z mapping of z^2 - a1 z - a2 = 0 back to (zeta, omega) with
// sample period T. Empty when the roots have no physical continuous
// counterpart (non-positive real root, omega <= 0, zeta < 0).
std::optional<ContinuousPoles> poles_to_continuous(double a1, double a2, double period);

// Inverse mapping: exact AR(2) coefficients of the sampled free response.
std::array<double, 2> continuous_to_coefficients(double zeta, double omega, double period);

// Streaming estimator for one channel. Samples arrive at the raw rate, are
// decimated by an integer factor (plain subsampling; input must already be
// band-limited) and feed an exponentially weighted recursive least squares
// fit of x[n] = a1 x[n-1] + a2 x[n-2] + drive. The recursion runs on the
// 2x2 information matrix, so initialization is exact and silence cannot
// wind up a covariance.
class RegimeEstimator {
 public:
  RegimeEstimator(double sample_rate, RegimeParams params = {}, int channel_id = 0, double start_time = 0.0);

  // Consumes raw-rate samples; returns the estimates whose hop boundary was
  // crossed, in time order.
  std::vector<RegimeEstimate> push(std::span<const double> samples);

  double sample_rate() const { return sample_rate_; }
  int decimation() const { return decimation_; }
  double effective_rate() const { return sample_rate_ / decimation_; }
  Eigen::Vector2d coefficients() const { return theta_; }
  const Eigen::Matrix2d& information() const { return info_; }

 private:
  void update(double y);
  bool solve();
  RegimeEstimate emit(double time) const;

  double sample_rate_;
  RegimeParams params_;
  int channel_id_;
  double start_time_;
  int decimation_;
  std::size_t window_len_;

  std::size_t raw_index_ = 0;
  std::size_t next_hop_ = 1;
  std::size_t decimated_count_ = 0;

  bool solvable_ = false;
  Eigen::Vector2d theta_ = Eigen::Vector2d::Zero();
  Eigen::Matrix2d info_ = Eigen::Matrix2d::Zero();
  Eigen::Vector2d cross_ = Eigen::Vector2d::Zero();
  double y1_ = 0.0;
  double y2_ = 0.0;

  std::deque<double> recent_;      // decimated samples, window + 2
  std::deque<double> innovation_;  // a-priori residuals, window
};

// Runs one estimator per channel over an MMG stream. window and forgetting
// override the corresponding RegimeParams fields. Output is ordered by time,
// then channel.
std::vector<RegimeEstimate> estimate_stream(const signals::FrameStream& frames, double window, double forgetting,
                                            RegimeParams params = {});

// Decay rate (1/s) of a log-linear fit to the envelope after peak_index,
// using points down to 5% of the peak. Throws Error{invalid_argument} when
// fewer than 5 decaying points follow the peak or the fitted slope is not
// negative.
double damping_from_decay(const Series& envelope, std::size_t peak_index);

}  // namespace bodyloop::regime
