#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bodyloop/config.hpp"
#include "bodyloop/features.hpp"
#include "bodyloop/nuance.hpp"
#include "bodyloop/oscnet.hpp"
#include "bodyloop/ritual.hpp"
#include "bodyloop/signals.hpp"

namespace bodyloop::session {

struct SourceSet {
  signals::FrameStream emg;
  signals::FrameStream mmg;
  double duration = 0.0;  // longest channel, seconds
};

// Recordings and synthesized channels. Throws Error{invalid_argument}
// "inconsistent sample rates" when channels of one kind disagree.
SourceSet load_sources(const SessionConfig& config);

// Contractions every 1.5 s, used when a synth source names no profile.
signals::ContractionProfile default_profile(double duration);

// Writes into <dir>.partial and renames it over <dir> on commit. If never
// committed, the staging directory is left with meta.json marking it
// incomplete.
class OutputStage {
 public:
  explicit OutputStage(std::filesystem::path final_dir);
  ~OutputStage();
  OutputStage(const OutputStage&) = delete;
  OutputStage& operator=(const OutputStage&) = delete;

  void write_text(const std::string& relative, std::string_view text);
  void write_wav(const std::string& relative, double sample_rate, const std::vector<std::vector<float>>& channels);
  void commit(nlohmann::json meta);
  void abandon(const std::string& reason);

  const std::filesystem::path& staging() const { return staging_; }
  const std::vector<std::string>& artifacts() const { return artifacts_; }

 private:
  std::filesystem::path final_;
  std::filesystem::path staging_;
  std::vector<std::string> artifacts_;
  std::string started_at_;
  bool done_ = false;
};

std::string utc_timestamp();

// Maps calibrated feature rows to control actions through the nuance model.
class Instrument {
 public:
  Instrument(const SessionConfig& config, nuance::NuanceModel model);

  struct Outcome {
    nuance::Prediction prediction;
    nuance::Nuance applied;
    bool gated = false;
    oscnet::ControlAction action;
  };

  Outcome handle(const features::FeatureVector& row, const std::array<double, oscnet::kOscillatorCount>& base_freqs) const;
  const nuance::NuanceModel& model() const { return model_; }

 private:
  nuance::NuanceModel model_;
  nuance::MappingConfig mapping_;
  std::uint64_t action_seed_;
};

nlohmann::json outcome_json(double time, const Instrument::Outcome& o);

// The agent performing in time: one call per performed step. A new episode
// is learned whenever the previous one has been played out.
class RitualPerformance {
 public:
  RitualPerformance(const RitualSettings& settings, std::uint64_t seed);

  struct Step {
    double time = 0.0;
    int episode = 0;
    int step = 0;
    ritual::Position position{};
    ritual::ProximityReport report;
    ritual::AVDirective directive{};
    std::vector<ritual::ScheduledEvent> events;  // released up to time
    std::optional<ritual::EpisodeSummary> summary;  // set on an episode's first step
  };

  // Throws Error{invalid_argument} once finished.
  Step advance();
  bool finished() const { return finished_; }
  // "running", "completed" or "target_reached".
  const std::string& status() const { return status_; }
  // Remaining events up to the end of the last performed step.
  std::vector<ritual::ScheduledEvent> flush();

  ritual::Learner& learner() { return learner_; }
  const ritual::Learner& learner() const { return learner_; }
  const ritual::RitualTarget& target() const { return learner_.env().target(); }
  ritual::ProximityConfig& proximity_config() { return proximity_; }
  const ritual::ProximityConfig& proximity_config() const { return proximity_; }
  ritual::AgentState agent_state() const;
  double time() const { return time_; }

 private:
  RitualSettings settings_;
  ritual::Learner learner_;
  ritual::ProximityConfig proximity_;
  ritual::Scheduler scheduler_;
  std::optional<ritual::EpisodeSummary> current_;
  int step_ = 0;
  double time_ = 0.0;
  ritual::Position position_;
  bool stop_after_episode_ = false;
  bool finished_ = false;
  std::string status_ = "running";
};

struct RunResult {
  std::string status;
  std::filesystem::path output_dir;
  std::vector<std::string> artifacts;
};

// Offline instrument: analysis, nuance prediction, oscillator rendering.
// Writes audio/output.wav, logs/{features,regime,actions}.jsonl,
// models/calibration.json and meta.json; calibration-only mode skips the
// model, the actions and the audio.
RunResult run_corpus(const SessionConfig& config);

// Learning loop and scheduler: logs/{episodes,proximity,events}.jsonl,
// models/agent.json and meta.json.
RunResult run_ritual(const SessionConfig& config);

RunResult run(const SessionConfig& config);

}  // namespace bodyloop::session
