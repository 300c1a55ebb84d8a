#include "bodyloop/config.hpp"

#include <algorithm>
#include <cmath>
#include <initializer_list>

#include "bodyloop/error.hpp"
#include "bodyloop/fileio.hpp"

namespace bodyloop::session {

namespace fs = std::filesystem;

namespace {

void check_keys(const nlohmann::json& j, std::initializer_list<std::string_view> allowed, const std::string& where) {
  if (!j.is_object()) fail(ErrorCode::invalid_argument, where + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      fail(ErrorCode::invalid_argument, "unknown key '" + key + "' in " + where);
    }
  }
}

std::optional<fs::path> optional_path(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return fs::path(j.at(key).get<std::string>());
}

void resolve(std::optional<fs::path>& p, const fs::path& base) {
  if (p && p->is_relative()) p = base / *p;
}

void must_exist(const std::optional<fs::path>& p, const std::string& what) {
  if (p && !fs::exists(*p)) fail(ErrorCode::not_found, what + " not found", *p);
}

nlohmann::json path_json(const std::optional<fs::path>& p) {
  return p ? nlohmann::json(p->string()) : nlohmann::json(nullptr);
}

}  // namespace

std::string_view to_string(Mode mode) { return mode == Mode::corpus ? "corpus" : "ritual"; }

void SessionConfig::validate() const {
  require(duration > 0.0 && std::isfinite(duration), "duration must be positive");
  oscnet.validate();
  ritual.agent.validate();
  ritual.proximity.validate();
  ritual.directives.validate();
  if (ritual.target) ritual.target->validate();
  require(ritual.episodes >= 1, "ritual episodes must be positive");
  require(ritual.steps >= 1, "ritual steps must be positive");
  require(ritual.max_step > 0.0, "ritual max_step must be positive");
  require(ritual.step_rate > 0.0, "ritual step_rate must be positive");
  for (double v : ritual.start) require(v >= 0.0 && v <= ritual::kBoxMax, "ritual start must lie in the box [0, 9]");
  if (ritual.stop_distance) require(*ritual.stop_distance >= 0.0, "ritual stop_distance must be non-negative");
  must_exist(ritual.pattern_bank, "pattern bank");
  must_exist(nuance_model, "nuance model");
  must_exist(calibration, "calibration");

  if (mode == Mode::corpus) require(!sources.empty(), "corpus mode needs at least one signal source");
  std::vector<std::pair<signals::SignalKind, int>> seen;
  for (const auto& s : sources) {
    const std::pair key{s.kind, s.channel_id};
    require(std::find(seen.begin(), seen.end(), key) == seen.end(),
            "duplicate source for " + std::string(signals::to_string(s.kind)) + " channel " + std::to_string(s.channel_id));
    seen.push_back(key);
    require(s.file.has_value() != s.synth.has_value(), "each source needs exactly one of 'file' or 'synth'");
    must_exist(s.file, "signal recording");
    if (s.gain) require(*s.gain > 0.0, "source gain must be positive");
    if (s.synth) {
      require(s.synth->sample_rate >= 0.0, "synth sample_rate must be non-negative");
      require(!(s.synth->profile && s.synth->profile_file), "synth source takes 'profile' or 'profile_file', not both");
      must_exist(s.synth->profile_file, "contraction profile");
      if (s.synth->profile) s.synth->profile->validate();
    }
  }
}

void to_json(nlohmann::json& j, const SessionConfig& c) {
  auto sources = nlohmann::json::array();
  for (const auto& s : c.sources) {
    nlohmann::json js{{"kind", signals::to_string(s.kind)}, {"channel_id", s.channel_id}};
    if (s.file) js["file"] = s.file->string();
    if (s.gain) js["gain"] = *s.gain;
    if (s.synth) {
      nlohmann::json syn{{"sample_rate", s.synth->sample_rate}};
      if (s.synth->profile) syn["profile"] = *s.synth->profile;
      if (s.synth->profile_file) syn["profile_file"] = s.synth->profile_file->string();
      if (s.kind == signals::SignalKind::mmg) {
        syn["zeta"] = s.synth->zeta;
        syn["frequency"] = s.synth->frequency;
      }
      js["synth"] = syn;
    }
    sources.push_back(js);
  }
  const auto& r = c.ritual;
  nlohmann::json rit{{"episodes", r.episodes},
                     {"steps", r.steps},
                     {"max_step", r.max_step},
                     {"step_rate", r.step_rate},
                     {"start", r.start},
                     {"agent", r.agent},
                     {"proximity", r.proximity},
                     {"directives", r.directives},
                     {"pattern_bank", path_json(r.pattern_bank)},
                     {"stop_distance", r.stop_distance ? nlohmann::json(*r.stop_distance) : nlohmann::json(nullptr)}};
  if (r.target) rit["target"] = *r.target;
  if (r.light_mirror) rit["light_mirror"] = {{"host", r.light_mirror->host}, {"port", r.light_mirror->port}};
  j = nlohmann::json{{"mode", to_string(c.mode)},
                     {"seed", c.seed},
                     {"output_dir", c.output_dir.string()},
                     {"duration", c.duration},
                     {"sources", sources},
                     {"features", c.features},
                     {"regime", c.regime},
                     {"nuance",
                      {{"model", path_json(c.nuance_model)},
                       {"calibration", path_json(c.calibration)},
                       {"calibration_only", c.calibration_only},
                       {"mapping", c.mapping}}},
                     {"oscnet", c.oscnet},
                     {"ritual", rit}};
}

void from_json(const nlohmann::json& j, SessionConfig& c) {
  check_keys(j,
             {"$schema", "mode", "seed", "output_dir", "duration", "sources", "features", "regime", "nuance", "oscnet",
              "ritual"},
             "session config");
  c = SessionConfig{};
  const auto mode = j.value("mode", std::string("corpus"));
  require(mode == "corpus" || mode == "ritual", "mode must be 'corpus' or 'ritual'");
  c.mode = mode == "corpus" ? Mode::corpus : Mode::ritual;
  c.seed = j.value("seed", std::uint64_t{0});
  c.output_dir = j.value("output_dir", std::string("out"));
  c.duration = j.value("duration", c.duration);

  for (const auto& js : j.value("sources", nlohmann::json::array())) {
    check_keys(js, {"kind", "channel_id", "file", "gain", "synth"}, "signal source");
    SignalSource s;
    s.kind = signals::kind_from_string(js.at("kind").get<std::string>());
    s.channel_id = js.value("channel_id", 0);
    s.file = optional_path(js, "file");
    if (js.contains("gain") && !js.at("gain").is_null()) s.gain = js.at("gain").get<double>();
    if (js.contains("synth")) {
      const auto& syn = js.at("synth");
      check_keys(syn, {"sample_rate", "profile", "profile_file", "zeta", "frequency"}, "synth source");
      SynthSource ss;
      ss.sample_rate = syn.value("sample_rate", 0.0);
      if (syn.contains("profile")) ss.profile = syn.at("profile").get<signals::ContractionProfile>();
      ss.profile_file = optional_path(syn, "profile_file");
      ss.zeta = syn.value("zeta", ss.zeta);
      ss.frequency = syn.value("frequency", ss.frequency);
      s.synth = ss;
    }
    c.sources.push_back(std::move(s));
  }
  if (j.contains("features")) c.features = j.at("features").get<features::FeatureParams>();
  if (j.contains("regime")) c.regime = j.at("regime").get<regime::RegimeParams>();
  if (j.contains("nuance")) {
    const auto& n = j.at("nuance");
    check_keys(n, {"model", "calibration", "calibration_only", "mapping"}, "nuance section");
    c.nuance_model = optional_path(n, "model");
    c.calibration = optional_path(n, "calibration");
    c.calibration_only = n.value("calibration_only", false);
    if (n.contains("mapping")) c.mapping = n.at("mapping").get<nuance::MappingConfig>();
  }
  if (j.contains("oscnet")) c.oscnet = j.at("oscnet").get<oscnet::OscConfig>();
  if (j.contains("ritual")) {
    const auto& r = j.at("ritual");
    check_keys(r,
               {"target", "episodes", "steps", "max_step", "step_rate", "start", "agent", "proximity", "directives",
                "pattern_bank", "stop_distance", "light_mirror"},
               "ritual section");
    auto& out = c.ritual;
    if (r.contains("target") && !r.at("target").is_null()) out.target = r.at("target").get<ritual::RitualTarget>();
    out.episodes = r.value("episodes", out.episodes);
    out.steps = r.value("steps", out.steps);
    out.max_step = r.value("max_step", out.max_step);
    out.step_rate = r.value("step_rate", out.step_rate);
    if (r.contains("start")) {
      const auto start = r.at("start").get<std::vector<double>>();
      require(start.size() == ritual::kDims, "ritual start must have 10 entries");
      std::copy(start.begin(), start.end(), out.start.begin());
    }
    if (r.contains("agent")) out.agent = r.at("agent").get<ritual::AgentParams>();
    if (r.contains("proximity")) out.proximity = r.at("proximity").get<ritual::ProximityConfig>();
    if (r.contains("directives")) out.directives = r.at("directives").get<ritual::DirectiveConfig>();
    out.pattern_bank = optional_path(r, "pattern_bank");
    if (r.contains("stop_distance") && !r.at("stop_distance").is_null()) {
      out.stop_distance = r.at("stop_distance").get<double>();
    }
    if (r.contains("light_mirror") && !r.at("light_mirror").is_null()) {
      const auto& lm = r.at("light_mirror");
      check_keys(lm, {"host", "port"}, "light_mirror");
      out.light_mirror = LightMirrorConfig{lm.value("host", std::string("127.0.0.1")), lm.at("port").get<unsigned short>()};
    }
  }
}

SessionConfig parse_config(const nlohmann::json& j, const fs::path& base_dir) {
  SessionConfig c;
  try {
    c = j.get<SessionConfig>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::invalid_argument, std::string("session config: ") + e.what());
  }
  if (c.output_dir.is_relative()) c.output_dir = base_dir / c.output_dir;
  resolve(c.nuance_model, base_dir);
  resolve(c.calibration, base_dir);
  resolve(c.ritual.pattern_bank, base_dir);
  for (auto& s : c.sources) {
    resolve(s.file, base_dir);
    if (s.synth) resolve(s.synth->profile_file, base_dir);
  }
  c.validate();
  return c;
}

SessionConfig load_config(const fs::path& path, const nlohmann::json& overrides) {
  const auto text = read_text(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::format, std::string("session config is not valid JSON: ") + e.what(), path);
  }
  if (overrides.is_object()) j.merge_patch(overrides);
  try {
    return parse_config(j, fs::absolute(path).parent_path());
  } catch (const Error& e) {
    if (!e.path().empty()) throw;
    fail(e.code(), e.what(), path);
  }
}

}  // namespace bodyloop::session
