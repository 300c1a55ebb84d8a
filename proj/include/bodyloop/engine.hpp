#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bodyloop/config.hpp"
#include "bodyloop/features.hpp"
#include "bodyloop/nuance.hpp"
#include "bodyloop/oscnet.hpp"
#include "bodyloop/session.hpp"

namespace bodyloop::live {

// One outbound state or event frame, before it is wrapped in an envelope.
struct Frame {
  std::string type;  // features, regime, oscnet_state, ritual_episode, ritual_proximity
  nlohmann::json payload;
};

struct CommandResult {
  bool ok = true;
  std::string reason;     // set when !ok
  nlohmann::json detail;  // merged into the ack payload
};

struct StreamRates {
  double features = 40.0;
  double regime = 40.0;
  double oscnet_state = 10.0;
  double ritual_proximity = 10.0;
};

// The authoritative live loop. Not thread-safe: the owner serializes
// execute() and tick() on one thread.
class Engine {
 public:
  explicit Engine(session::SessionConfig config, StreamRates rates = {});
  ~Engine();
  Engine(const Engine&) = delete;
  Engine& operator=(const Engine&) = delete;

  static const std::vector<std::string>& command_types();
  static bool is_command(const std::string& type);

  // Applies one command. Invalid arguments leave the state untouched.
  CommandResult execute(const std::string& type, const nlohmann::json& payload);

  // Advances engine time by dt seconds while running and returns the
  // frames due, already thinned to the stream rates.
  std::vector<Frame> tick(double dt);

  nlohmann::json snapshot() const;

  // Receives each rendered audio block (one vector per output channel).
  void set_audio_sink(std::function<void(const std::vector<std::vector<double>>&)> sink);

  bool running() const { return running_; }
  double time() const { return time_; }
  const oscnet::OscNetwork& network() const { return net_; }
  const std::optional<nuance::NuanceModel>& model() const { return model_; }
  const std::vector<nuance::Demonstration>& demonstrations() const { return demos_; }
  const session::RitualPerformance* ritual() const { return ritual_.get(); }
  bool agent_paused() const { return agent_paused_; }

 private:
  struct Source {
    signals::ChannelSignal signal;
    std::uint64_t pushed = 0;  // samples delivered so far, across loops
  };

  CommandResult record_demo(const nlohmann::json& payload);
  CommandResult end_demo();
  CommandResult train(const nlohmann::json& payload);
  CommandResult set_gain(const nlohmann::json& payload);
  CommandResult set_thresholds(const nlohmann::json& payload);
  CommandResult set_sigma(const nlohmann::json& payload);

  void feed_sources(std::vector<Frame>& out);
  void handle_row(features::FeatureVector row, std::vector<Frame>& out);
  void render_to(double t);
  void step_ritual(double dt, std::vector<Frame>& out);
  static bool due(double& last, double rate, double t);
  nlohmann::json model_summary() const;

  session::SessionConfig config_;
  StreamRates rates_;
  std::vector<Source> sources_;
  std::unique_ptr<features::FeatureExtractor> extractor_;
  features::Calibration calibration_;
  bool fixed_calibration_ = false;
  std::optional<nuance::NuanceModel> model_;
  nuance::MappingConfig mapping_;
  std::uint64_t action_seed_;
  oscnet::OscNetwork net_;
  std::function<void(const std::vector<std::vector<double>>&)> audio_sink_;

  struct Recording {
    std::string id;
    nuance::Nuance label;
    std::vector<features::FeatureVector> rows;
  };
  std::optional<Recording> recording_;
  std::vector<nuance::Demonstration> demos_;
  std::unique_ptr<nuance::DemonstrationStore> store_;

  std::unique_ptr<session::RitualPerformance> ritual_;
  bool agent_paused_ = false;
  double ritual_clock_ = 0.0;
  std::optional<nlohmann::json> last_proximity_;

  bool running_ = false;
  double time_ = 0.0;
  std::optional<features::FeatureVector> last_row_;
  double last_features_ = -1e9;
  double last_regime_ = -1e9;
  double last_oscnet_ = -1e9;
  double last_ritual_proximity_ = -1e9;
};

}  // namespace bodyloop::live
