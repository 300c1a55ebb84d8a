#include "bodyloop/engine.hpp"

#include <algorithm>
#include <cmath>

#include <spdlog/spdlog.h>

#include "bodyloop/error.hpp"
#include "bodyloop/fileio.hpp"
#include "bodyloop/rng.hpp"

namespace bodyloop::live {

using nlohmann::json;

namespace {

const std::vector<std::string> kCommands{"start", "stop",           "record_demo", "end_demo",     "train",
                                         "set_gain", "set_thresholds", "agent_pause", "agent_resume", "set_sigma"};

CommandResult rejected(std::string reason) { return {false, std::move(reason), {}}; }

double finite_number(const json& payload, const char* key) {
  if (!payload.contains(key) || !payload.at(key).is_number()) {
    fail(ErrorCode::invalid_argument, std::string("'") + key + "' must be a number");
  }
  const double v = payload.at(key).get<double>();
  require(std::isfinite(v), std::string("'") + key + "' must be finite");
  return v;
}

void only_keys(const json& payload, std::initializer_list<std::string_view> allowed) {
  for (const auto& [key, value] : payload.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      fail(ErrorCode::invalid_argument, "unknown field '" + key + "'");
    }
  }
}

}  // namespace

Engine::Engine(session::SessionConfig config, StreamRates rates)
    : config_(std::move(config)),
      rates_(rates),
      mapping_(config_.mapping),
      action_seed_(derive_seed(config_.seed, "actions")),
      net_(config_.oscnet, derive_seed(config_.seed, "oscnet")) {
  calibration_.activity_fraction = config_.features.activity_fraction;
  if (!config_.sources.empty()) {
    const auto set = session::load_sources(config_);
    extractor_ = std::make_unique<features::FeatureExtractor>(config_.features, config_.regime);
    for (const auto* stream : {&set.emg, &set.mmg}) {
      for (auto& signal : signals::assemble_all(*stream)) {
        extractor_->add_channel(signal.kind, signal.channel_id, signal.sample_rate, 0.0);
        sources_.push_back({std::move(signal), 0});
      }
    }
  }
  if (config_.nuance_model) {
    model_ = nuance::load_model(*config_.nuance_model);
    if (model_->calibration) {
      calibration_ = *model_->calibration;
      fixed_calibration_ = true;
    }
  }
  if (config_.calibration) {
    calibration_ = nlohmann::json::parse(read_text(*config_.calibration)).get<features::Calibration>();
    fixed_calibration_ = true;
  }
  ritual_ = std::make_unique<session::RitualPerformance>(config_.ritual, config_.seed);
}

Engine::~Engine() = default;

const std::vector<std::string>& Engine::command_types() { return kCommands; }

bool Engine::is_command(const std::string& type) {
  return std::find(kCommands.begin(), kCommands.end(), type) != kCommands.end();
}

void Engine::set_audio_sink(std::function<void(const std::vector<std::vector<double>>&)> sink) {
  audio_sink_ = std::move(sink);
}

CommandResult Engine::execute(const std::string& type, const json& payload) {
  if (!payload.is_object()) return rejected("payload must be a JSON object");
  try {
    if (type == "start") {
      running_ = true;
      return {true, {}, {{"running", true}}};
    }
    if (type == "stop") {
      running_ = false;
      return {true, {}, {{"running", false}}};
    }
    if (type == "record_demo") return record_demo(payload);
    if (type == "end_demo") return end_demo();
    if (type == "train") return train(payload);
    if (type == "set_gain") return set_gain(payload);
    if (type == "set_thresholds") return set_thresholds(payload);
    if (type == "agent_pause" || type == "agent_resume") {
      agent_paused_ = type == "agent_pause";
      return {true, {}, {{"paused", agent_paused_}}};
    }
    if (type == "set_sigma") return set_sigma(payload);
  } catch (const Error& e) {
    return rejected(e.what());
  } catch (const json::exception& e) {
    return rejected(std::string("malformed payload: ") + e.what());
  }
  return rejected("unknown command '" + type + "'");
}

CommandResult Engine::record_demo(const json& payload) {
  only_keys(payload, {"label", "id"});
  if (recording_) return rejected("a demonstration is already being recorded");
  if (!extractor_) return rejected("no signal sources configured");
  if (!payload.contains("label")) return rejected("record_demo needs a label {tension, abruptness, relaxation}");
  Recording rec;
  rec.label = payload.at("label").get<nuance::Nuance>();
  for (double v : rec.label.values()) {
    if (!(v >= 0.0 && v <= 1.0)) return rejected("label values must lie in [0, 1]");
  }
  rec.id = payload.value("id", "demo-" + std::to_string(demos_.size() + 1));
  const auto taken = [&](const std::string& id) {
    return std::any_of(demos_.begin(), demos_.end(), [&](const auto& d) { return d.id == id; });
  };
  if (taken(rec.id)) return rejected("demonstration id '" + rec.id + "' already used");
  nuance::Demonstration probe{rec.id, {features::FeatureVector{}}, rec.label, {}};
  probe.validate();
  recording_ = std::move(rec);
  return {true, {}, {{"id", recording_->id}}};
}

CommandResult Engine::end_demo() {
  if (!recording_) return rejected("no demonstration is being recorded");
  if (recording_->rows.empty()) {
    recording_.reset();
    return rejected("demonstration has no feature rows; start the engine before recording");
  }
  nuance::Demonstration demo{recording_->id, std::move(recording_->rows), recording_->label,
                             session::utc_timestamp()};
  recording_.reset();
  if (!store_) store_ = std::make_unique<nuance::DemonstrationStore>(config_.output_dir / "demos");
  store_->add(demo);
  demos_.push_back(std::move(demo));
  return {true, {}, {{"id", demos_.back().id}, {"rows", demos_.back().rows.size()}, {"demos", demos_.size()}}};
}

CommandResult Engine::train(const json& payload) {
  only_keys(payload, {"lambda"});
  const double lambda = payload.contains("lambda") ? finite_number(payload, "lambda") : 0.0;
  if (lambda < 0.0) return rejected("lambda must be non-negative");
  if (demos_.empty()) return rejected("no demonstrations recorded");
  auto model = nuance::train(demos_, lambda);
  model.calibration = calibration_;
  model_ = std::move(model);
  const auto path = config_.output_dir / "models" / "nuance.json";
  std::filesystem::create_directories(path.parent_path());
  nuance::save_model(*model_, path);
  return {true, {}, model_summary()};
}

CommandResult Engine::set_gain(const json& payload) {
  only_keys(payload, {"i", "j", "value"});
  const auto index = [&](const char* key) -> std::optional<std::size_t> {
    if (!payload.contains(key) || !payload.at(key).is_number_integer()) return std::nullopt;
    const auto v = payload.at(key).get<long long>();
    if (v < 0 || v >= static_cast<long long>(oscnet::kOscillatorCount)) return std::nullopt;
    return static_cast<std::size_t>(v);
  };
  const auto i = index("i");
  const auto j = index("j");
  if (!i || !j) return rejected("i and j must be integers in [0, 19]");
  const double value = finite_number(payload, "value");
  if (value < 0.0 || value > config_.oscnet.g_max) {
    return rejected("value must lie in [0, g_max=" + json(config_.oscnet.g_max).dump() + "]");
  }
  oscnet::ControlAction action;
  action.feedback_set[{*i, *j}] = value;
  net_.apply(action);
  return {true, {}, {{"i", *i}, {"j", *j}, {"value", value}}};
}

CommandResult Engine::set_thresholds(const json& payload) {
  only_keys(payload, {"near", "far", "invert", "activity_fraction"});
  auto proximity = ritual_->proximity_config();
  if (payload.contains("near")) proximity.near = finite_number(payload, "near");
  if (payload.contains("far")) proximity.far = finite_number(payload, "far");
  if (payload.contains("invert")) proximity.invert = payload.at("invert").get<bool>();
  proximity.validate();
  double activity = calibration_.activity_fraction;
  if (payload.contains("activity_fraction")) {
    activity = finite_number(payload, "activity_fraction");
    if (!(activity > 0.0 && activity < 1.0)) return rejected("activity_fraction must lie in (0, 1)");
  }
  ritual_->proximity_config() = proximity;
  calibration_.activity_fraction = activity;
  return {true, {}, {{"proximity", proximity}, {"activity_fraction", activity}}};
}

CommandResult Engine::set_sigma(const json& payload) {
  only_keys(payload, {"value"});
  const double value = finite_number(payload, "value");
  if (value < 0.0) return rejected("sigma must be non-negative");
  ritual_->learner().agent().set_sigma(value);
  return {true, {}, {{"sigma", value}}};
}

std::vector<Frame> Engine::tick(double dt) {
  std::vector<Frame> out;
  if (!running_ || !(dt > 0.0)) return out;
  time_ += dt;
  feed_sources(out);
  render_to(time_);
  step_ritual(dt, out);
  if (due(last_oscnet_, rates_.oscnet_state, time_)) out.push_back({"oscnet_state", net_.snapshot()});
  return out;
}

void Engine::feed_sources(std::vector<Frame>& out) {
  for (auto& src : sources_) {
    const auto& s = src.signal;
    const auto target = static_cast<std::uint64_t>(std::floor(time_ * s.sample_rate));
    while (src.pushed < target) {
      const std::size_t n = s.samples.size();
      const std::size_t pos = static_cast<std::size_t>(src.pushed % n);
      const std::size_t count = static_cast<std::size_t>(std::min<std::uint64_t>(target - src.pushed, n - pos));
      signals::SignalFrame frame;
      frame.channel_id = s.channel_id;
      frame.kind = s.kind;
      frame.sample_rate = s.sample_rate;
      frame.start_time = static_cast<double>(src.pushed) / s.sample_rate;
      frame.samples.assign(s.samples.begin() + static_cast<std::ptrdiff_t>(pos),
                           s.samples.begin() + static_cast<std::ptrdiff_t>(pos + count));
      src.pushed += count;
      for (auto& row : extractor_->push(frame)) handle_row(std::move(row), out);
    }
  }
}

void Engine::handle_row(features::FeatureVector row, std::vector<Frame>& out) {
  if (!fixed_calibration_) calibration_.observe(row);
  row.set(features::aggregate_nuance(row.channels, calibration_));
  if (recording_) recording_->rows.push_back(row);

  if (model_) {
    render_to(std::min(row.time, time_));
    try {
      const auto prediction = model_->predict(row);
      const auto applied = nuance::gate(prediction.value, row.complexity);
      net_.enqueue(nuance::map_to_actions(applied, action_seed_, net_.base_frequencies(), mapping_));
    } catch (const Error& e) {
      spdlog::warn("nuance model rejected a feature row: {}", e.what());
    }
  }
  if (!row.regime.empty() && due(last_regime_, rates_.regime, row.time)) {
    out.push_back({"regime", {{"t", row.time}, {"estimates", row.regime}}});
  }
  if (due(last_features_, rates_.features, row.time)) {
    json payload = row;
    payload.erase("regime");
    out.push_back({"features", std::move(payload)});
  }
  last_row_ = std::move(row);
}

void Engine::render_to(double t) {
  const auto target = static_cast<std::uint64_t>(std::llround(t * config_.oscnet.sample_rate));
  while (net_.frames_rendered() < target) {
    const auto n = std::min<std::uint64_t>(config_.oscnet.block_size, target - net_.frames_rendered());
    const auto block = net_.render(static_cast<std::size_t>(n));
    if (audio_sink_) audio_sink_(block);
  }
}

void Engine::step_ritual(double dt, std::vector<Frame>& out) {
  if (agent_paused_ || ritual_->finished()) return;
  ritual_clock_ += dt;
  const double period = 1.0 / config_.ritual.step_rate;
  while (!ritual_->finished() && ritual_->time() + period <= ritual_clock_ + 1e-9) {
    const auto step = ritual_->advance();
    if (step.summary) out.push_back({"ritual_episode", json(*step.summary)});
    last_proximity_ = json{{"t", step.time},
                           {"episode", step.episode},
                           {"step", step.step},
                           {"position", step.position},
                           {"values", step.report.values},
                           {"directives", step.directive}};
    if (due(last_ritual_proximity_, rates_.ritual_proximity, step.time)) out.push_back({"ritual_proximity", *last_proximity_});
  }
}

// A frame is due once 1/rate has elapsed since the last one, in the
// frame's own time base.
bool Engine::due(double& last, double rate, double t) {
  if (t - last + 1e-9 < 1.0 / rate) return false;
  last = t;
  return true;
}

json Engine::model_summary() const {
  if (!model_) return nullptr;
  return {{"row_count", model_->row_count},
          {"lambda", model_->ridge_lambda},
          {"requested_lambda", model_->requested_lambda},
          {"trained_on", model_->trained_on}};
}

json Engine::snapshot() const {
  json demos = json::array();
  for (const auto& d : demos_) demos.push_back({{"id", d.id}, {"rows", d.rows.size()}, {"label", d.label}});
  json recording = nullptr;
  if (recording_) recording = {{"id", recording_->id}, {"label", recording_->label}, {"rows", recording_->rows.size()}};
  json features = nullptr;
  if (last_row_) {
    features = *last_row_;
    features.erase("regime");
  }
  return {{"running", running_},
          {"time", time_},
          {"mode", session::to_string(config_.mode)},
          {"seed", config_.seed},
          {"commands", kCommands},
          {"model", model_summary()},
          {"recording", recording},
          {"demos", demos},
          {"calibration", calibration_},
          {"features", features},
          {"oscnet", net_.snapshot()},
          {"ritual",
           {{"paused", agent_paused_},
            {"status", ritual_->status()},
            {"episodes_run", ritual_->learner().episodes_run()},
            {"best_distance", ritual_->learner().best_distance()},
            {"sigma", ritual_->learner().agent().sigma()},
            {"target", ritual_->target()},
            {"proximity_config", ritual_->proximity_config()},
            {"proximity", last_proximity_ ? *last_proximity_ : json(nullptr)}}}};
}

}  // namespace bodyloop::live
