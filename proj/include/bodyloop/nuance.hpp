#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "bodyloop/features.hpp"
#include "bodyloop/oscnet.hpp"

namespace bodyloop::nuance {

// Target descriptors, each in [0, 1].
struct Nuance {
  double tension = 0.0;
  double abruptness = 0.0;
  double relaxation = 0.0;

  static constexpr std::size_t kSize = 3;
  std::array<double, kSize> values() const { return {tension, abruptness, relaxation}; }
  static Nuance from(const std::array<double, kSize>& v) { return {v[0], v[1], v[2]}; }
  bool operator==(const Nuance&) const = default;
};

void to_json(nlohmann::json& j, const Nuance& n);
void from_json(const nlohmann::json& j, Nuance& n);

struct Demonstration {
  std::string id;
  std::vector<features::FeatureVector> rows;
  Nuance label;
  std::string created_at;

  // Throws Error{invalid_argument}: empty rows, a label outside [0, 1], or
  // an id that is not usable as a file name ([A-Za-z0-9_.-], no leading dot).
  void validate() const;
};

// One directory per session; each demonstration is <id>.features.jsonl plus
// <id>.json with the label and metadata.
class DemonstrationStore {
 public:
  explicit DemonstrationStore(std::filesystem::path dir);

  // Identical content under an existing id is a no-op; different content
  // raises Error{conflict}. created_at does not count as content.
  void add(const Demonstration& demo);
  std::vector<std::string> list() const;
  bool contains(const std::string& id) const;
  Demonstration get(const std::string& id) const;
  std::vector<Demonstration> all() const;

  const std::filesystem::path& directory() const { return dir_; }

 private:
  std::filesystem::path dir_;
};

struct Prediction {
  Nuance value;  // clipped
  Nuance raw;
};

struct NuanceModel {
  // Weights act on standardized features.
  Eigen::MatrixXd weights;  // 3 x d
  Eigen::VectorXd intercept;  // 3
  Eigen::VectorXd feature_means;
  Eigen::VectorXd feature_scales;
  std::vector<std::string> trained_on;
  std::vector<features::ChannelKey> channels;  // feature layout, empty if unknown
  double requested_lambda = 0.0;
  double ridge_lambda = 0.0;  // lambda actually used
  std::size_t row_count = 0;
  std::optional<features::Calibration> calibration;

  std::size_t feature_dim() const { return static_cast<std::size_t>(feature_means.size()); }

  // Equivalent affine map on raw features.
  Eigen::MatrixXd raw_weights() const;
  Eigen::VectorXd raw_intercept() const;

  // Throws Error{invalid_argument} on a dimension mismatch.
  Prediction predict(const Eigen::VectorXd& x) const;
  // Also checks the channel layout against the one trained on.
  Prediction predict(const features::FeatureVector& fv) const;

  void validate() const;
};

void to_json(nlohmann::json& j, const NuanceModel& m);
void from_json(const nlohmann::json& j, NuanceModel& m);

void save_model(const NuanceModel& model, const std::filesystem::path& path);
NuanceModel load_model(const std::filesystem::path& path);

inline constexpr double kFallbackLambda = 1e-3;

// Standardized ridge regression on a design matrix (rows = samples).
// Constant columns get scale 1 and weight 0; if every column is constant
// the fit raises Error{degenerate}. With lambda = 0 and a rank-deficient
// design the fit falls back to kFallbackLambda and logs a warning.
NuanceModel fit(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double lambda);

// Every row of a demonstration carries that demonstration's label.
NuanceModel train(const std::vector<Demonstration>& demos, double lambda);
NuanceModel train(const DemonstrationStore& store, double lambda);

struct MappingConfig {
  double volume_ceiling = 0.8;
  double gliss_semitones = 1.0;  // glissando depth at full abruptness
  double max_gliss_rate = 40.0;  // Hz/s at full abruptness
  double min_gliss_rate = 2.0;  // Hz/s used to return toward base pitch
  double max_phase_scatter = 3.141592653589793;  // radians at full abruptness
};

void to_json(nlohmann::json& j, const MappingConfig& c);
void from_json(const nlohmann::json& j, MappingConfig& c);

// The seed fixes the oscillator ordering, so for a fixed seed the active
// set for a lower tension is a subset of the one for a higher tension.
oscnet::ControlAction map_to_actions(const Nuance& nuance, std::uint64_t seed,
                                     const std::array<double, oscnet::kOscillatorCount>& base_freqs,
                                     const MappingConfig& config = {});

// With no active channel the instrument stays silent.
Nuance gate(const Nuance& nuance, int active_channels);

}  // namespace bodyloop::nuance
