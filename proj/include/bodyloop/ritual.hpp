#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bodyloop/rng.hpp"

namespace bodyloop::ritual {

inline constexpr std::size_t kDims = 10;
inline constexpr double kBoxMax = 9.0;

using Position = std::array<double, kDims>;
using Action = std::array<double, kDims>;
using ActionSequence = std::vector<Action>;

struct RitualTarget {
  std::array<int, kDims> digits{};

  void validate() const;
  static RitualTarget random(std::uint64_t seed);
  Position as_position() const;
};

void to_json(nlohmann::json& j, const RitualTarget& t);
void from_json(const nlohmann::json& j, RitualTarget& t);

double distance(const Position& a, const Position& b);

class RitualEnv {
 public:
  RitualEnv(RitualTarget target, Position start, double max_step);

  struct StepResult {
    Position position;
    double reward;
  };

  // Clipped move; reward is minus the distance to the target over the box
  // diagonal, so it lies in [-1, 0]. Throws when |action_i| > max_step.
  StepResult step(const Position& position, const Action& action) const;
  StepResult step(const Position& position, const std::vector<double>& action) const;
  double reward(const Position& position) const;

  const RitualTarget& target() const { return target_; }
  const Position& start() const { return start_; }
  double max_step() const { return max_step_; }

 private:
  RitualTarget target_;
  Position target_pos_;
  Position start_;
  double max_step_;
};

struct AgentParams {
  std::string kind = "cem";  // "cem" or "random"
  std::size_t population = 32;
  std::size_t elite = 8;
  double sigma = 0.5;  // initial perturbation scale, in position units
  double sigma_decay = 0.99;
  double smoothing = 1.0;  // weight of the elite mean in the mean update

  void validate() const;
};

void to_json(nlohmann::json& j, const AgentParams& p);
void from_json(const nlohmann::json& j, AgentParams& p);

// Episodic open-loop optimizer: proposes whole action sequences for an
// episode and learns from their scores at the end of it.
class Agent {
 public:
  virtual ~Agent() = default;
  virtual std::vector<ActionSequence> propose(Rng& rng) = 0;
  // scores[k] belongs to the k-th proposal; higher is better.
  virtual void update(const std::vector<ActionSequence>& proposals, const std::vector<double>& scores) = 0;
  virtual double sigma() const = 0;
  virtual void set_sigma(double sigma) = 0;
  virtual std::vector<double> policy_params() const = 0;
  virtual std::string name() const = 0;
};

// Cross-entropy method over steps x 10 action sequences with an isotropic
// Gaussian whose scale decays geometrically per episode.
class CemAgent final : public Agent {
 public:
  CemAgent(AgentParams params, std::size_t steps, double max_step);

  std::vector<ActionSequence> propose(Rng& rng) override;
  void update(const std::vector<ActionSequence>& proposals, const std::vector<double>& scores) override;
  double sigma() const override { return sigma_; }
  void set_sigma(double sigma) override;
  std::vector<double> policy_params() const override;
  std::string name() const override { return "cem"; }

  const ActionSequence& mean() const { return mean_; }

 private:
  AgentParams params_;
  double max_step_;
  ActionSequence mean_;
  double sigma_;
};

// Same sampler around a zero mean, never updated.
class RandomSearchAgent final : public Agent {
 public:
  RandomSearchAgent(AgentParams params, std::size_t steps, double max_step);

  std::vector<ActionSequence> propose(Rng& rng) override;
  void update(const std::vector<ActionSequence>&, const std::vector<double>&) override {}
  double sigma() const override { return sigma_; }
  void set_sigma(double sigma) override;
  std::vector<double> policy_params() const override { return {sigma_}; }
  std::string name() const override { return "random"; }

 private:
  AgentParams params_;
  std::size_t steps_;
  double max_step_;
  double sigma_;
};

std::unique_ptr<Agent> make_agent(const AgentParams& params, std::size_t steps, double max_step);

struct Trajectory {
  std::vector<Position> positions;  // after each step
  std::vector<double> rewards;
};

Trajectory rollout(const RitualEnv& env, const ActionSequence& actions);

struct EpisodeSummary {
  int episode = 0;
  double best_reward = -1.0;  // best final reward this episode
  double best_distance = 0.0;  // running minimum over all episodes so far
  double sigma = 0.0;
  Trajectory trajectory;  // of the best proposal this episode
};

void to_json(nlohmann::json& j, const EpisodeSummary& s);

struct AgentState {
  Position position{};
  int episode = 0;
  int step = 0;
  double best_distance = 0.0;
  std::vector<double> policy_params;
};

void to_json(nlohmann::json& j, const AgentState& s);

// Agent, environment and running bookkeeping for consecutive episodes.
class Learner {
 public:
  Learner(RitualEnv env, std::unique_ptr<Agent> agent, std::uint64_t seed);

  EpisodeSummary run_episode();

  const RitualEnv& env() const { return env_; }
  Agent& agent() { return *agent_; }
  const Agent& agent() const { return *agent_; }
  int episodes_run() const { return episode_; }
  double best_distance() const { return best_distance_; }

 private:
  RitualEnv env_;
  std::unique_ptr<Agent> agent_;
  Rng rng_;
  int episode_ = 0;
  double best_distance_;
};

struct ProximityConfig {
  double near = 0.5;  // t_hi
  double far = 2.0;  // t_lo
  bool invert = false;  // 3 means farthest when set

  void validate() const;
};

void to_json(nlohmann::json& j, const ProximityConfig& c);
void from_json(const nlohmann::json& j, ProximityConfig& c);

struct ProximityReport {
  double time = 0.0;
  std::array<int, kDims> values{};
};

void to_json(nlohmann::json& j, const ProximityReport& r);

ProximityReport proximity(const Position& position, const RitualTarget& target, const ProximityConfig& config = {},
                          double time = 0.0);

struct DirectiveConfig {
  double volume_min = 0.1;
  double volume_max = 1.0;
  double brightness_min = 0.05;
  double brightness_max = 1.0;
  double pulse_min = 0.5;  // Hz
  double pulse_max = 2.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const DirectiveConfig& c);
void from_json(const nlohmann::json& j, DirectiveConfig& c);

struct Directive {
  int pattern_id = 0;
  double volume = 0.0;
  double brightness = 0.0;
  double pulse_rate = 0.0;
};

using AVDirective = std::array<Directive, kDims>;

void to_json(nlohmann::json& j, const Directive& d);

AVDirective direct(const ProximityReport& report, const DirectiveConfig& config = {});

struct Note {
  int pitch = 60;  // MIDI
  double onset = 0.0;  // beats
  double duration = 0.5;  // beats
  double velocity = 1.0;
};

struct Pattern {
  std::vector<Note> notes;  // ordered by onset
  double loop_beats = 4.0;
};

struct LightPoint {
  double beat = 0.0;
  double level = 0.0;
};

struct LightShape {
  std::vector<LightPoint> points;  // ordered by beat
  double loop_beats = 4.0;
};

struct PatternBank {
  double tempo = 120.0;  // BPM
  std::vector<Pattern> patterns;  // 10
  std::vector<LightShape> lights;  // 10

  // Throws Error{format} on anything malformed.
  void validate() const;
  double beat_seconds() const { return 60.0 / tempo; }
};

void to_json(nlohmann::json& j, const PatternBank& b);
void from_json(const nlohmann::json& j, PatternBank& b);

PatternBank default_pattern_bank();
PatternBank load_pattern_bank(const std::filesystem::path& path);

struct ScheduledEvent {
  enum class Type { note, light };
  Type type = Type::note;
  double time = 0.0;
  int pattern = 0;
  int pitch = 0;
  double velocity = 0.0;
  double duration = 0.0;  // seconds
  double level = 0.0;
};

void to_json(nlohmann::json& j, const ScheduledEvent& e);

// Loops all ten patterns and light shapes concurrently. A directive
// submitted at time t takes effect from the first beat boundary at or after
// t; events are released strictly before the clock.
class Scheduler {
 public:
  Scheduler(PatternBank bank, AVDirective initial);

  void submit(double time, const AVDirective& directive);
  // Throws Error{invalid_argument} if time is earlier than the clock.
  std::vector<ScheduledEvent> advance_to(double time);

  double clock() const { return clock_; }
  const PatternBank& bank() const { return bank_; }

 private:
  struct Pending {
    double beat;
    AVDirective directive;
  };
  const AVDirective& directive_at(double beat);

  PatternBank bank_;
  AVDirective current_;
  std::deque<Pending> pending_;
  double clock_ = 0.0;
  std::array<std::size_t, kDims> note_cursor_{};  // absolute event index per pattern
  std::array<std::size_t, kDims> light_cursor_{};
};

// Sends light events as single-line JSON datagrams.
class LightMirror {
 public:
  LightMirror(const std::string& host, unsigned short port);
  ~LightMirror();
  LightMirror(const LightMirror&) = delete;
  LightMirror& operator=(const LightMirror&) = delete;

  void send(const ScheduledEvent& event);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace bodyloop::ritual
