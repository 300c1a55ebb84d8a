#include "bodyloop/ritual.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <boost/asio/io_context.hpp>
#include <boost/asio/ip/udp.hpp>
#include <spdlog/spdlog.h>

#include "bodyloop/error.hpp"
#include "bodyloop/fileio.hpp"

namespace bodyloop::ritual {

namespace {

const double kDiagonal = kBoxMax * std::sqrt(static_cast<double>(kDims));

double clip_box(double v) { return std::clamp(v, 0.0, kBoxMax); }

void require_format(bool ok, const std::string& message) {
  if (!ok) fail(ErrorCode::format, "pattern bank: " + message);
}

}  // namespace

void RitualTarget::validate() const {
  for (int d : digits) require(d >= 0 && d <= 9, "ritual target digits must lie in 0..9");
}

RitualTarget RitualTarget::random(std::uint64_t seed) {
  Rng rng(seed);
  RitualTarget t;
  for (auto& d : t.digits) d = static_cast<int>(rng.below(10));
  return t;
}

Position RitualTarget::as_position() const {
  Position p{};
  for (std::size_t i = 0; i < kDims; ++i) p[i] = digits[i];
  return p;
}

void to_json(nlohmann::json& j, const RitualTarget& t) { j = t.digits; }

void from_json(const nlohmann::json& j, RitualTarget& t) {
  const auto v = j.get<std::vector<int>>();
  require(v.size() == kDims, "ritual target must have exactly 10 digits");
  std::copy(v.begin(), v.end(), t.digits.begin());
  t.validate();
}

double distance(const Position& a, const Position& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < kDims; ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(acc);
}

RitualEnv::RitualEnv(RitualTarget target, Position start, double max_step)
    : target_(target), target_pos_(target.as_position()), start_(start), max_step_(max_step) {
  target_.validate();
  require(max_step > 0.0 && std::isfinite(max_step), "max_step must be positive");
  for (double v : start_) require(v >= 0.0 && v <= kBoxMax, "start position must lie in the box [0, 9]");
}

double RitualEnv::reward(const Position& position) const { return -distance(position, target_pos_) / kDiagonal; }

RitualEnv::StepResult RitualEnv::step(const Position& position, const Action& action) const {
  StepResult r;
  for (std::size_t i = 0; i < kDims; ++i) {
    require(std::isfinite(action[i]) && std::abs(action[i]) <= max_step_, "action component exceeds max_step");
    r.position[i] = clip_box(position[i] + action[i]);
  }
  r.reward = reward(r.position);
  return r;
}

RitualEnv::StepResult RitualEnv::step(const Position& position, const std::vector<double>& action) const {
  require(action.size() == kDims, "action must have exactly 10 components");
  Action a{};
  std::copy(action.begin(), action.end(), a.begin());
  return step(position, a);
}

void AgentParams::validate() const {
  require(kind == "cem" || kind == "random", "agent kind must be 'cem' or 'random'");
  require(population >= 1, "agent population must be positive");
  require(elite >= 1 && elite <= population, "agent elite count must lie in 1..population");
  require(sigma >= 0.0 && std::isfinite(sigma), "agent sigma must be non-negative");
  require(sigma_decay > 0.0 && sigma_decay <= 1.0, "agent sigma_decay must lie in (0, 1]");
  require(smoothing > 0.0 && smoothing <= 1.0, "agent smoothing must lie in (0, 1]");
}

void to_json(nlohmann::json& j, const AgentParams& p) {
  j = nlohmann::json{{"kind", p.kind},   {"population", p.population},   {"elite", p.elite},
                     {"sigma", p.sigma}, {"sigma_decay", p.sigma_decay}, {"smoothing", p.smoothing}};
}

void from_json(const nlohmann::json& j, AgentParams& p) {
  AgentParams d;
  p.kind = j.value("kind", d.kind);
  p.population = j.value("population", d.population);
  p.elite = j.value("elite", d.elite);
  p.sigma = j.value("sigma", d.sigma);
  p.sigma_decay = j.value("sigma_decay", d.sigma_decay);
  p.smoothing = j.value("smoothing", d.smoothing);
  p.validate();
}

CemAgent::CemAgent(AgentParams params, std::size_t steps, double max_step)
    : params_(std::move(params)), max_step_(max_step), mean_(steps, Action{}), sigma_(params_.sigma) {
  params_.validate();
  require(steps >= 1, "episodes need at least one step");
}

std::vector<ActionSequence> CemAgent::propose(Rng& rng) {
  std::vector<ActionSequence> out(params_.population, mean_);
  for (auto& seq : out) {
    for (auto& a : seq) {
      for (auto& v : a) v = std::clamp(v + sigma_ * rng.gaussian(), -max_step_, max_step_);
    }
  }
  return out;
}

void CemAgent::update(const std::vector<ActionSequence>& proposals, const std::vector<double>& scores) {
  require(proposals.size() == scores.size() && !proposals.empty(), "one score per proposal expected");
  std::vector<std::size_t> order(proposals.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  const std::size_t elite = std::min(params_.elite, proposals.size());
  const double alpha = params_.smoothing;
  for (std::size_t s = 0; s < mean_.size(); ++s) {
    for (std::size_t d = 0; d < kDims; ++d) {
      double acc = 0.0;
      for (std::size_t k = 0; k < elite; ++k) acc += proposals[order[k]][s][d];
      mean_[s][d] = (1.0 - alpha) * mean_[s][d] + alpha * acc / static_cast<double>(elite);
    }
  }
  sigma_ *= params_.sigma_decay;
}

void CemAgent::set_sigma(double sigma) {
  require(sigma >= 0.0 && std::isfinite(sigma), "sigma must be non-negative");
  sigma_ = sigma;
}

std::vector<double> CemAgent::policy_params() const {
  std::vector<double> p;
  p.reserve(mean_.size() * kDims + 1);
  p.push_back(sigma_);
  for (const auto& a : mean_) p.insert(p.end(), a.begin(), a.end());
  return p;
}

RandomSearchAgent::RandomSearchAgent(AgentParams params, std::size_t steps, double max_step)
    : params_(std::move(params)), steps_(steps), max_step_(max_step), sigma_(params_.sigma) {
  params_.validate();
  require(steps >= 1, "episodes need at least one step");
}

std::vector<ActionSequence> RandomSearchAgent::propose(Rng& rng) {
  std::vector<ActionSequence> out(params_.population, ActionSequence(steps_, Action{}));
  for (auto& seq : out) {
    for (auto& a : seq) {
      for (auto& v : a) v = std::clamp(sigma_ * rng.gaussian(), -max_step_, max_step_);
    }
  }
  return out;
}

void RandomSearchAgent::set_sigma(double sigma) {
  require(sigma >= 0.0 && std::isfinite(sigma), "sigma must be non-negative");
  sigma_ = sigma;
}

std::unique_ptr<Agent> make_agent(const AgentParams& params, std::size_t steps, double max_step) {
  params.validate();
  if (params.kind == "random") return std::make_unique<RandomSearchAgent>(params, steps, max_step);
  return std::make_unique<CemAgent>(params, steps, max_step);
}

Trajectory rollout(const RitualEnv& env, const ActionSequence& actions) {
  Trajectory t;
  t.positions.reserve(actions.size());
  t.rewards.reserve(actions.size());
  Position p = env.start();
  for (const auto& a : actions) {
    const auto r = env.step(p, a);
    p = r.position;
    t.positions.push_back(p);
    t.rewards.push_back(r.reward);
  }
  return t;
}

void to_json(nlohmann::json& j, const EpisodeSummary& s) {
  j = nlohmann::json{{"episode", s.episode},
                     {"best_reward", s.best_reward},
                     {"best_distance", s.best_distance},
                     {"sigma", s.sigma},
                     {"positions", s.trajectory.positions},
                     {"rewards", s.trajectory.rewards}};
}

void to_json(nlohmann::json& j, const AgentState& s) {
  j = nlohmann::json{{"position", s.position},
                     {"episode", s.episode},
                     {"step", s.step},
                     {"best_distance", s.best_distance},
                     {"policy_params", s.policy_params}};
}

Learner::Learner(RitualEnv env, std::unique_ptr<Agent> agent, std::uint64_t seed)
    : env_(std::move(env)), agent_(std::move(agent)), rng_(seed),
      best_distance_(distance(env_.start(), env_.target().as_position())) {
  require(agent_ != nullptr, "learner needs an agent");
}

EpisodeSummary Learner::run_episode() {
  EpisodeSummary s;
  s.episode = episode_;
  s.sigma = agent_->sigma();
  const auto proposals = agent_->propose(rng_);
  std::vector<double> scores;
  scores.reserve(proposals.size());
  std::size_t best = 0;
  for (std::size_t k = 0; k < proposals.size(); ++k) {
    auto t = rollout(env_, proposals[k]);
    scores.push_back(t.rewards.back());
    if (k == 0 || scores[k] > scores[best]) {
      best = k;
      s.trajectory = std::move(t);
    }
  }
  agent_->update(proposals, scores);
  s.best_reward = scores[best];
  best_distance_ = std::min(best_distance_, distance(s.trajectory.positions.back(), env_.target().as_position()));
  s.best_distance = best_distance_;
  ++episode_;
  return s;
}

void ProximityConfig::validate() const {
  require(near >= 0.0 && near <= far, "proximity thresholds must satisfy 0 <= near <= far");
}

void to_json(nlohmann::json& j, const ProximityConfig& c) {
  j = nlohmann::json{{"near", c.near}, {"far", c.far}, {"invert", c.invert}};
}

void from_json(const nlohmann::json& j, ProximityConfig& c) {
  ProximityConfig d;
  c.near = j.value("near", d.near);
  c.far = j.value("far", d.far);
  c.invert = j.value("invert", d.invert);
  c.validate();
}

void to_json(nlohmann::json& j, const ProximityReport& r) { j = nlohmann::json{{"t", r.time}, {"values", r.values}}; }

ProximityReport proximity(const Position& position, const RitualTarget& target, const ProximityConfig& config,
                          double time) {
  ProximityReport r;
  r.time = time;
  for (std::size_t i = 0; i < kDims; ++i) {
    const double d = std::abs(position[i] - target.digits[i]);
    int v = d <= config.near ? 3 : (d <= config.far ? 2 : 1);
    if (config.invert) v = 4 - v;
    r.values[i] = v;
  }
  return r;
}

void DirectiveConfig::validate() const {
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  require(unit(volume_min) && unit(volume_max) && volume_min < volume_max, "directive volume range must be 0 <= min < max <= 1");
  require(unit(brightness_min) && unit(brightness_max) && brightness_min < brightness_max,
          "directive brightness range must be 0 <= min < max <= 1");
  require(pulse_min > 0.0 && pulse_min <= pulse_max, "directive pulse range must be 0 < min <= max");
}

void to_json(nlohmann::json& j, const DirectiveConfig& c) {
  j = nlohmann::json{{"volume_min", c.volume_min},         {"volume_max", c.volume_max},
                     {"brightness_min", c.brightness_min}, {"brightness_max", c.brightness_max},
                     {"pulse_min", c.pulse_min},           {"pulse_max", c.pulse_max}};
}

void from_json(const nlohmann::json& j, DirectiveConfig& c) {
  DirectiveConfig d;
  c.volume_min = j.value("volume_min", d.volume_min);
  c.volume_max = j.value("volume_max", d.volume_max);
  c.brightness_min = j.value("brightness_min", d.brightness_min);
  c.brightness_max = j.value("brightness_max", d.brightness_max);
  c.pulse_min = j.value("pulse_min", d.pulse_min);
  c.pulse_max = j.value("pulse_max", d.pulse_max);
  c.validate();
}

void to_json(nlohmann::json& j, const Directive& d) {
  j = nlohmann::json{
      {"pattern_id", d.pattern_id}, {"volume", d.volume}, {"brightness", d.brightness}, {"pulse_rate", d.pulse_rate}};
}

AVDirective direct(const ProximityReport& report, const DirectiveConfig& config) {
  AVDirective out{};
  for (std::size_t i = 0; i < kDims; ++i) {
    const int p = report.values[i];
    require(p >= 1 && p <= 3, "proximity values must lie in {1, 2, 3}");
    const double w = (3.0 - p) / 2.0;
    out[i].pattern_id = static_cast<int>(i);
    out[i].volume = config.volume_min + w * (config.volume_max - config.volume_min);
    out[i].brightness = config.brightness_min + w * (config.brightness_max - config.brightness_min);
    out[i].pulse_rate = config.pulse_min + w * (config.pulse_max - config.pulse_min);
  }
  return out;
}

void PatternBank::validate() const {
  require_format(std::isfinite(tempo) && tempo > 0.0, "tempo must be positive");
  require_format(patterns.size() == kDims, "expected exactly 10 patterns");
  require_format(lights.size() == kDims, "expected exactly 10 light shapes");
  for (std::size_t k = 0; k < kDims; ++k) {
    const auto& p = patterns[k];
    const auto tag = "pattern " + std::to_string(k);
    require_format(p.loop_beats > 0.0 && std::isfinite(p.loop_beats), tag + ": loop length must be positive");
    require_format(!p.notes.empty(), tag + ": no notes");
    double last = 0.0;
    for (const auto& n : p.notes) {
      require_format(n.onset >= 0.0 && n.onset < p.loop_beats, tag + ": onset outside the loop");
      require_format(n.onset >= last, tag + ": onsets must be ordered");
      require_format(n.duration > 0.0 && std::isfinite(n.duration), tag + ": duration must be positive");
      require_format(n.pitch >= 0 && n.pitch <= 127, tag + ": pitch must be a MIDI note number");
      require_format(n.velocity >= 0.0 && n.velocity <= 1.0, tag + ": velocity must lie in [0, 1]");
      last = n.onset;
    }
    const auto& l = lights[k];
    const auto ltag = "light " + std::to_string(k);
    require_format(l.loop_beats > 0.0 && std::isfinite(l.loop_beats), ltag + ": loop length must be positive");
    require_format(!l.points.empty(), ltag + ": no points");
    last = 0.0;
    for (const auto& pt : l.points) {
      require_format(pt.beat >= 0.0 && pt.beat < l.loop_beats, ltag + ": point outside the loop");
      require_format(pt.beat >= last, ltag + ": points must be ordered");
      require_format(pt.level >= 0.0 && pt.level <= 1.0, ltag + ": level must lie in [0, 1]");
      last = pt.beat;
    }
  }
}

void to_json(nlohmann::json& j, const PatternBank& b) {
  auto patterns = nlohmann::json::array();
  for (const auto& p : b.patterns) {
    auto notes = nlohmann::json::array();
    for (const auto& n : p.notes) {
      notes.push_back({{"pitch", n.pitch}, {"onset", n.onset}, {"duration", n.duration}, {"velocity", n.velocity}});
    }
    patterns.push_back({{"loop_beats", p.loop_beats}, {"notes", notes}});
  }
  auto lights = nlohmann::json::array();
  for (const auto& l : b.lights) {
    auto points = nlohmann::json::array();
    for (const auto& pt : l.points) points.push_back({{"beat", pt.beat}, {"level", pt.level}});
    lights.push_back({{"loop_beats", l.loop_beats}, {"points", points}});
  }
  j = nlohmann::json{{"tempo", b.tempo}, {"patterns", patterns}, {"lights", lights}};
}

void from_json(const nlohmann::json& j, PatternBank& b) {
  try {
    b = PatternBank{};
    b.tempo = j.at("tempo").get<double>();
    for (const auto& p : j.at("patterns")) {
      Pattern pat;
      pat.loop_beats = p.at("loop_beats").get<double>();
      for (const auto& n : p.at("notes")) {
        pat.notes.push_back({n.at("pitch").get<int>(), n.at("onset").get<double>(), n.at("duration").get<double>(),
                             n.value("velocity", 1.0)});
      }
      b.patterns.push_back(std::move(pat));
    }
    for (const auto& l : j.at("lights")) {
      LightShape shape;
      shape.loop_beats = l.at("loop_beats").get<double>();
      for (const auto& pt : l.at("points")) shape.points.push_back({pt.at("beat").get<double>(), pt.at("level").get<double>()});
      b.lights.push_back(std::move(shape));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::format, std::string("pattern bank: ") + e.what());
  }
  b.validate();
}

PatternBank default_pattern_bank() {
  // Ten arpeggios over a slowly climbing bass line; loops of 3 or 4 beats
  // so the patterns drift against each other.
  static constexpr std::array<int, kDims> roots{45, 48, 50, 52, 53, 55, 57, 59, 60, 62};
  static constexpr std::array<int, 4> major{0, 4, 7, 12};
  static constexpr std::array<int, 4> minor{0, 3, 7, 10};
  PatternBank b;
  b.tempo = 96.0;
  for (std::size_t k = 0; k < kDims; ++k) {
    const double loop = (k % 3 == 2) ? 3.0 : 4.0;
    Pattern p;
    p.loop_beats = loop;
    const auto& chord = (k % 2 == 0) ? minor : major;
    const double step = (k % 4 == 3) ? 0.75 : 0.5;
    const auto count = static_cast<std::size_t>(p.loop_beats / step);
    for (std::size_t n = 0; n < count; ++n) {
      const std::size_t up = n % (2 * chord.size() - 2);
      const std::size_t idx = up < chord.size() ? up : 2 * chord.size() - 2 - up;
      p.notes.push_back({roots[k] + chord[idx], static_cast<double>(n) * step, step, n == 0 ? 1.0 : 0.7});
    }
    b.patterns.push_back(std::move(p));

    LightShape l;
    l.loop_beats = loop;
    const std::size_t points = 4 + k % 4;
    for (std::size_t n = 0; n < points; ++n) {
      const double phase = static_cast<double>(n) / static_cast<double>(points);
      const double level = 0.5 + 0.5 * std::cos(2.0 * 3.141592653589793 * phase * static_cast<double>(1 + k % 2));
      l.points.push_back({std::round(phase * l.loop_beats * 1000.0) / 1000.0, std::round(level * 1000.0) / 1000.0});
    }
    b.lights.push_back(std::move(l));
  }
  return b;
}

PatternBank load_pattern_bank(const std::filesystem::path& path) {
  const auto text = read_text(path);
  try {
    return nlohmann::json::parse(text).get<PatternBank>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::format, std::string("pattern bank: ") + e.what(), path);
  } catch (const Error& e) {
    fail(e.code(), e.what(), path);
  }
}

void to_json(nlohmann::json& j, const ScheduledEvent& e) {
  if (e.type == ScheduledEvent::Type::note) {
    j = nlohmann::json{{"t", e.time},
                       {"type", "note"},
                       {"pattern", e.pattern},
                       {"pitch", e.pitch},
                       {"velocity", e.velocity},
                       {"dur", e.duration}};
  } else {
    j = nlohmann::json{{"t", e.time}, {"type", "light"}, {"pattern", e.pattern}, {"level", e.level}};
  }
}

Scheduler::Scheduler(PatternBank bank, AVDirective initial) : bank_(std::move(bank)), current_(initial) {
  bank_.validate();
}

void Scheduler::submit(double time, const AVDirective& directive) {
  require(std::isfinite(time) && time >= clock_, "directive submitted before the scheduler clock");
  const double beat = std::ceil(time / bank_.beat_seconds() - 1e-9);
  pending_.push_back({beat, directive});
}

const AVDirective& Scheduler::directive_at(double beat) {
  while (!pending_.empty() && pending_.front().beat <= beat) {
    current_ = pending_.front().directive;
    pending_.pop_front();
  }
  return current_;
}

std::vector<ScheduledEvent> Scheduler::advance_to(double time) {
  if (!(time >= clock_)) fail(ErrorCode::invalid_argument, "scheduler clock regression");
  struct Raw {
    double beat;
    ScheduledEvent::Type type;
    std::size_t pattern;
    std::size_t index;
  };
  const double bs = bank_.beat_seconds();
  std::vector<Raw> raw;
  for (std::size_t k = 0; k < kDims; ++k) {
    const auto& p = bank_.patterns[k];
    for (;; ++note_cursor_[k]) {
      const std::size_t m = note_cursor_[k];
      const double beat = static_cast<double>(m / p.notes.size()) * p.loop_beats + p.notes[m % p.notes.size()].onset;
      if (!(beat * bs < time)) break;
      raw.push_back({beat, ScheduledEvent::Type::note, k, m});
    }
    const auto& l = bank_.lights[k];
    for (;; ++light_cursor_[k]) {
      const std::size_t m = light_cursor_[k];
      const double beat = static_cast<double>(m / l.points.size()) * l.loop_beats + l.points[m % l.points.size()].beat;
      if (!(beat * bs < time)) break;
      raw.push_back({beat, ScheduledEvent::Type::light, k, m});
    }
  }
  std::stable_sort(raw.begin(), raw.end(), [](const Raw& a, const Raw& b) {
    if (a.beat != b.beat) return a.beat < b.beat;
    if (a.type != b.type) return a.type < b.type;
    return a.pattern < b.pattern;
  });

  std::vector<ScheduledEvent> out;
  out.reserve(raw.size());
  for (const auto& r : raw) {
    const auto& d = directive_at(r.beat)[r.pattern];
    ScheduledEvent e;
    e.type = r.type;
    e.time = r.beat * bs;
    e.pattern = static_cast<int>(r.pattern);
    if (r.type == ScheduledEvent::Type::note) {
      const auto& p = bank_.patterns[r.pattern];
      const auto& n = p.notes[r.index % p.notes.size()];
      e.pitch = n.pitch;
      e.velocity = n.velocity * d.volume;
      e.duration = n.duration * bs;
    } else {
      const auto& l = bank_.lights[r.pattern];
      e.level = l.points[r.index % l.points.size()].level * d.brightness;
    }
    out.push_back(e);
  }
  clock_ = time;
  return out;
}

struct LightMirror::Impl {
  boost::asio::io_context io;
  boost::asio::ip::udp::socket socket{io};
  boost::asio::ip::udp::endpoint endpoint;
};

LightMirror::LightMirror(const std::string& host, unsigned short port) : impl_(std::make_unique<Impl>()) {
  boost::system::error_code ec;
  const auto address = boost::asio::ip::make_address(host, ec);
  if (ec) fail(ErrorCode::invalid_argument, "light mirror: bad address '" + host + "'");
  impl_->endpoint = {address, port};
  impl_->socket.open(impl_->endpoint.protocol(), ec);
  if (ec) fail(ErrorCode::io, "light mirror: cannot open socket: " + ec.message());
}

LightMirror::~LightMirror() = default;

void LightMirror::send(const ScheduledEvent& event) {
  const auto line = nlohmann::json(event).dump();
  boost::system::error_code ec;
  impl_->socket.send_to(boost::asio::buffer(line), impl_->endpoint, 0, ec);
  if (ec) spdlog::debug("light mirror send failed: {}", ec.message());
}

}  // namespace bodyloop::ritual
