#include "bodyloop/session.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <numbers>
#include <sstream>

#include <spdlog/spdlog.h>

#include "bodyloop/error.hpp"
#include "bodyloop/fileio.hpp"
#include "bodyloop/rng.hpp"
#include "bodyloop/wav.hpp"

namespace bodyloop::session {

namespace fs = std::filesystem;
using signals::SignalKind;

namespace {

std::string source_tag(const SignalSource& s) {
  return std::string(signals::to_string(s.kind)) + "/" + std::to_string(s.channel_id);
}

void check_rates(const signals::FrameStream& frames, SignalKind kind) {
  for (const auto& f : frames) {
    if (f.sample_rate != frames.front().sample_rate) {
      fail(ErrorCode::invalid_argument, "inconsistent sample rates among " + std::string(signals::to_string(kind)) +
                                            " channels (" + std::to_string(frames.front().sample_rate) + " vs " +
                                            std::to_string(f.sample_rate) + " Hz)");
    }
  }
}

double stream_duration(const signals::FrameStream& frames) {
  double end = 0.0;
  for (const auto& f : frames) end = std::max(end, f.end_time());
  return end;
}

template <typename Rows>
std::string jsonl(const Rows& rows) {
  std::string out;
  for (const auto& r : rows) {
    out += nlohmann::json(r).dump();
    out += '\n';
  }
  return out;
}

nlohmann::json base_meta(const SessionConfig& config, const std::string& status) {
  return {{"status", status},
          {"mode", to_string(config.mode)},
          {"seed", config.seed},
          {"config", config}};
}

}  // namespace

signals::ContractionProfile default_profile(double duration) {
  signals::ContractionProfile p;
  for (double t = 0.5; t < duration; t += 1.5) p.events.push_back({t, 0.8, 0.05, 0.3});
  return p;
}

SourceSet load_sources(const SessionConfig& config) {
  SourceSet set;
  for (const auto& s : config.sources) {
    signals::FrameStream frames;
    if (s.file) {
      frames = signals::load_recording(*s.file, s.kind, s.gain);
      for (auto& f : frames) f.channel_id += s.channel_id;
    } else {
      const auto& syn = *s.synth;
      const double rate = syn.sample_rate > 0.0
                              ? syn.sample_rate
                              : (s.kind == SignalKind::emg ? signals::kDefaultEmgRate : signals::kDefaultMmgRate);
      const auto profile = syn.profile ? *syn.profile
                                       : (syn.profile_file ? signals::load_profile(*syn.profile_file)
                                                           : default_profile(config.duration));
      const auto seed = derive_seed(config.seed, "signal/" + source_tag(s));
      frames = s.kind == SignalKind::emg
                   ? signals::synth_emg(profile, config.duration, rate, seed, s.channel_id)
                   : signals::synth_mmg(syn.zeta, 2.0 * std::numbers::pi * syn.frequency, profile, config.duration, rate,
                                        seed, s.channel_id);
    }
    auto& target = s.kind == SignalKind::emg ? set.emg : set.mmg;
    target.insert(target.end(), std::make_move_iterator(frames.begin()), std::make_move_iterator(frames.end()));
  }
  check_rates(set.emg, SignalKind::emg);
  check_rates(set.mmg, SignalKind::mmg);
  set.duration = std::max(stream_duration(set.emg), stream_duration(set.mmg));
  return set;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

OutputStage::OutputStage(fs::path final_dir) : final_(std::move(final_dir)), started_at_(utc_timestamp()) {
  staging_ = final_;
  staging_ += ".partial";
  std::error_code ec;
  fs::remove_all(staging_, ec);
  fs::create_directories(staging_, ec);
  if (ec) fail(ErrorCode::io, "cannot create output staging directory", staging_);
}

OutputStage::~OutputStage() {
  if (done_) return;
  try {
    abandon("run did not complete");
  } catch (...) {
  }
}

void OutputStage::write_text(const std::string& relative, std::string_view text) {
  const auto path = staging_ / relative;
  fs::create_directories(path.parent_path());
  write_text_atomic(path, text);
  artifacts_.push_back(relative);
}

void OutputStage::write_wav(const std::string& relative, double sample_rate,
                            const std::vector<std::vector<float>>& channels) {
  const auto path = staging_ / relative;
  fs::create_directories(path.parent_path());
  write_wav_float32(path, sample_rate, channels);
  artifacts_.push_back(relative);
}

void OutputStage::commit(nlohmann::json meta) {
  std::sort(artifacts_.begin(), artifacts_.end());
  meta["artifacts"] = artifacts_;
  meta["started_at"] = started_at_;
  meta["finished_at"] = utc_timestamp();
  write_text_atomic(staging_ / "meta.json", meta.dump(2) + "\n");

  std::error_code ec;
  if (fs::exists(final_)) {
    const bool ours = fs::exists(final_ / "meta.json") || fs::is_empty(final_, ec);
    if (!ours) fail(ErrorCode::conflict, "output directory exists and does not hold a previous run", final_);
    fs::remove_all(final_, ec);
    if (ec) fail(ErrorCode::io, "cannot replace previous output", final_);
  }
  if (final_.has_parent_path()) fs::create_directories(final_.parent_path());
  fs::rename(staging_, final_, ec);
  if (ec) fail(ErrorCode::io, "cannot move staged output into place: " + ec.message(), final_);
  done_ = true;
}

void OutputStage::abandon(const std::string& reason) {
  done_ = true;
  const nlohmann::json meta{{"status", "incomplete"}, {"reason", reason}, {"started_at", started_at_}};
  write_text_atomic(staging_ / "meta.json", meta.dump(2) + "\n");
}

Instrument::Instrument(const SessionConfig& config, nuance::NuanceModel model)
    : model_(std::move(model)), mapping_(config.mapping), action_seed_(derive_seed(config.seed, "actions")) {}

Instrument::Outcome Instrument::handle(const features::FeatureVector& row,
                                       const std::array<double, oscnet::kOscillatorCount>& base_freqs) const {
  Outcome o;
  o.prediction = model_.predict(row);
  o.applied = nuance::gate(o.prediction.value, row.complexity);
  o.gated = row.complexity <= 0;
  o.action = nuance::map_to_actions(o.applied, action_seed_, base_freqs, mapping_);
  return o;
}

nlohmann::json outcome_json(double time, const Instrument::Outcome& o) {
  return {{"t", time},
          {"nuance", o.prediction.value},
          {"raw", o.prediction.raw},
          {"applied", o.applied},
          {"gated", o.gated},
          {"action", o.action}};
}

RitualPerformance::RitualPerformance(const RitualSettings& settings, std::uint64_t seed)
    : settings_(settings),
      learner_(ritual::RitualEnv(settings.target ? *settings.target : ritual::RitualTarget::random(derive_seed(seed, "target")),
                                 settings.start, settings.max_step),
               ritual::make_agent(settings.agent, static_cast<std::size_t>(settings.steps), settings.max_step),
               derive_seed(seed, "agent")),
      proximity_(settings.proximity),
      scheduler_(settings.pattern_bank ? ritual::load_pattern_bank(*settings.pattern_bank) : ritual::default_pattern_bank(),
                 ritual::direct(ritual::proximity(settings.start, learner_.env().target(), settings.proximity),
                                settings.directives)),
      position_(settings.start) {}

RitualPerformance::Step RitualPerformance::advance() {
  require(!finished_, "ritual performance already finished");
  Step out;
  if (!current_) {
    current_ = learner_.run_episode();
    out.summary = current_;
    step_ = 0;
    if (settings_.stop_distance && current_->best_distance <= *settings_.stop_distance) stop_after_episode_ = true;
  }
  const auto performed = static_cast<long long>(current_->episode) * settings_.steps + step_ + 1;
  time_ = static_cast<double>(performed) / settings_.step_rate;
  out.time = time_;
  out.episode = current_->episode;
  out.step = step_;
  position_ = current_->trajectory.positions[static_cast<std::size_t>(step_)];
  out.position = position_;
  out.events = scheduler_.advance_to(time_);
  out.report = ritual::proximity(position_, target(), proximity_, time_);
  out.directive = ritual::direct(out.report, settings_.directives);
  scheduler_.submit(time_, out.directive);

  if (++step_ == settings_.steps) {
    current_.reset();
    if (stop_after_episode_) {
      finished_ = true;
      status_ = "target_reached";
    } else if (learner_.episodes_run() >= settings_.episodes) {
      finished_ = true;
      status_ = "completed";
    }
  }
  return out;
}

std::vector<ritual::ScheduledEvent> RitualPerformance::flush() {
  return scheduler_.advance_to(time_ + 1.0 / settings_.step_rate);
}

ritual::AgentState RitualPerformance::agent_state() const {
  ritual::AgentState s;
  s.position = position_;
  s.episode = learner_.episodes_run();
  s.step = step_;
  s.best_distance = learner_.best_distance();
  s.policy_params = learner_.agent().policy_params();
  return s;
}

RunResult run_corpus(const SessionConfig& config) {
  config.validate();
  std::optional<nuance::NuanceModel> model;
  if (!config.calibration_only) {
    if (!config.nuance_model) {
      fail(ErrorCode::not_found, "missing nuance model: set nuance.model or nuance.calibration_only");
    }
    model = nuance::load_model(*config.nuance_model);
  }
  std::optional<features::Calibration> calibration;
  if (model && model->calibration) calibration = model->calibration;
  if (config.calibration) {
    calibration = nlohmann::json::parse(read_text(*config.calibration)).get<features::Calibration>();
  }

  const auto sources = load_sources(config);
  OutputStage stage(config.output_dir);
  const auto analysis = features::analyze(sources.emg, sources.mmg, config.features, config.regime, calibration);
  stage.write_text("logs/features.jsonl", features::to_jsonl(analysis.rows));
  stage.write_text("logs/regime.jsonl", jsonl(analysis.regime));
  stage.write_text("models/calibration.json", nlohmann::json(analysis.calibration).dump(2) + "\n");

  auto meta = base_meta(config, "complete");
  meta["rows"] = analysis.rows.size();
  meta["regime_estimates"] = analysis.regime.size();
  meta["input_duration"] = sources.duration;

  if (model) {
    const Instrument instrument(config, *model);
    oscnet::OscNetwork net(config.oscnet, derive_seed(config.seed, "oscnet"));
    const double fs = config.oscnet.sample_rate;
    const auto total = static_cast<std::uint64_t>(std::llround(sources.duration * fs));
    std::vector<std::vector<float>> audio(config.oscnet.channels);
    for (auto& ch : audio) ch.reserve(total);

    auto render_until = [&](std::uint64_t frame) {
      while (net.frames_rendered() < frame) {
        const auto n = std::min<std::uint64_t>(config.oscnet.block_size, frame - net.frames_rendered());
        const auto block = net.render(static_cast<std::size_t>(n));
        for (std::size_t c = 0; c < block.size(); ++c) {
          for (double v : block[c]) audio[c].push_back(static_cast<float>(v));
        }
      }
    };

    std::string actions;
    for (const auto& row : analysis.rows) {
      render_until(std::min<std::uint64_t>(static_cast<std::uint64_t>(std::llround(row.time * fs)), total));
      const auto outcome = instrument.handle(row, net.base_frequencies());
      net.enqueue(outcome.action);
      actions += outcome_json(row.time, outcome).dump();
      actions += '\n';
    }
    render_until(total);
    stage.write_text("logs/actions.jsonl", actions);
    stage.write_wav("audio/output.wav", fs, audio);
    meta["audio_frames"] = total;
  }
  meta["calibration_only"] = !model.has_value();
  stage.commit(meta);
  spdlog::info("corpus run written to {}", config.output_dir.string());
  return {"complete", config.output_dir, stage.artifacts()};
}

RunResult run_ritual(const SessionConfig& config) {
  config.validate();
  RitualPerformance performance(config.ritual, config.seed);
  OutputStage stage(config.output_dir);
  std::unique_ptr<ritual::LightMirror> mirror;
  if (config.ritual.light_mirror) {
    mirror = std::make_unique<ritual::LightMirror>(config.ritual.light_mirror->host, config.ritual.light_mirror->port);
  }

  std::ostringstream episodes;
  std::ostringstream proximity;
  std::ostringstream events;
  auto log_events = [&](const std::vector<ritual::ScheduledEvent>& batch) {
    for (const auto& e : batch) {
      events << nlohmann::json(e).dump() << '\n';
      if (mirror && e.type == ritual::ScheduledEvent::Type::light) mirror->send(e);
    }
  };

  while (!performance.finished()) {
    const auto step = performance.advance();
    if (step.summary) episodes << nlohmann::json(*step.summary).dump() << '\n';
    log_events(step.events);
    proximity << nlohmann::json{{"t", step.time},
                                {"episode", step.episode},
                                {"step", step.step},
                                {"position", step.position},
                                {"values", step.report.values},
                                {"directives", step.directive}}
                     .dump()
              << '\n';
  }
  log_events(performance.flush());

  stage.write_text("logs/episodes.jsonl", episodes.str());
  stage.write_text("logs/proximity.jsonl", proximity.str());
  stage.write_text("logs/events.jsonl", events.str());
  stage.write_text("models/agent.json", nlohmann::json{{"agent", performance.learner().agent().name()},
                                                       {"target", performance.target()},
                                                       {"state", performance.agent_state()}}
                                                .dump(2) +
                                            "\n");
  auto meta = base_meta(config, performance.status());
  meta["episodes"] = performance.learner().episodes_run();
  meta["best_distance"] = performance.learner().best_distance();
  stage.commit(meta);
  spdlog::info("ritual run written to {} ({})", config.output_dir.string(), performance.status());
  return {performance.status(), config.output_dir, stage.artifacts()};
}

RunResult run(const SessionConfig& config) {
  return config.mode == Mode::corpus ? run_corpus(config) : run_ritual(config);
}

}  // namespace bodyloop::session
