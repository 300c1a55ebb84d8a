#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bodyloop/features.hpp"
#include "bodyloop/nuance.hpp"
#include "bodyloop/oscnet.hpp"
#include "bodyloop/regime.hpp"
#include "bodyloop/ritual.hpp"
#include "bodyloop/signals.hpp"

namespace bodyloop::session {

enum class Mode { corpus, ritual };

std::string_view to_string(Mode mode);

struct SynthSource {
  double sample_rate = 0.0;  // 0 picks the default rate of the kind
  std::optional<signals::ContractionProfile> profile;
  std::optional<std::filesystem::path> profile_file;
  double zeta = 0.3;  // MMG only
  double frequency = 8.0;  // Hz, MMG only
};

struct SignalSource {
  signals::SignalKind kind = signals::SignalKind::emg;
  int channel_id = 0;
  std::optional<std::filesystem::path> file;
  std::optional<double> gain;  // calibration gain for recordings
  std::optional<SynthSource> synth;
};

struct LightMirrorConfig {
  std::string host = "127.0.0.1";
  unsigned short port = 0;
};

struct RitualSettings {
  std::optional<ritual::RitualTarget> target;  // seeded random when absent
  int episodes = 50;
  int steps = 50;
  double max_step = 1.0;
  double step_rate = 2.0;  // steps per second of performance time
  ritual::Position start = [] {
    ritual::Position p;
    p.fill(4.5);
    return p;
  }();
  ritual::AgentParams agent;
  ritual::ProximityConfig proximity;
  ritual::DirectiveConfig directives;
  std::optional<std::filesystem::path> pattern_bank;
  std::optional<double> stop_distance;
  std::optional<LightMirrorConfig> light_mirror;
};

struct SessionConfig {
  Mode mode = Mode::corpus;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "out";
  double duration = 10.0;  // seconds of synthesized input
  std::vector<SignalSource> sources;
  features::FeatureParams features;
  regime::RegimeParams regime;
  std::optional<std::filesystem::path> nuance_model;
  std::optional<std::filesystem::path> calibration;
  bool calibration_only = false;
  nuance::MappingConfig mapping;
  oscnet::OscConfig oscnet;
  RitualSettings ritual;

  // Referenced files must exist; rates must agree within each signal kind
  // for synthesized sources.
  void validate() const;
};

void to_json(nlohmann::json& j, const SessionConfig& c);
// Relative paths stay as written; load_config resolves them.
void from_json(const nlohmann::json& j, SessionConfig& c);

// Parses, resolves relative paths against the config file's directory and
// validates. Error{not_found} names any missing referenced file.
// overrides is merged into the document (JSON merge patch) before parsing;
// relative paths inside it resolve like those in the file.
SessionConfig load_config(const std::filesystem::path& path, const nlohmann::json& overrides = nullptr);
SessionConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir);

}  // namespace bodyloop::session
