#include "bodyloop/nuance.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <spdlog/spdlog.h>

#include "bodyloop/error.hpp"
#include "bodyloop/fileio.hpp"
#include "bodyloop/rng.hpp"

namespace bodyloop::nuance {

namespace fs = std::filesystem;

namespace {

bool in_unit(double v) { return v >= 0.0 && v <= 1.0; }

bool valid_id(const std::string& id) {
  if (id.empty() || id.size() > 128 || id.front() == '.') return false;
  return std::all_of(id.begin(), id.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' || c == '-' || c == '.';
  });
}

std::vector<features::ChannelKey> layout(const features::FeatureVector& fv) {
  std::vector<features::ChannelKey> keys;
  keys.reserve(fv.channels.size());
  for (const auto& c : fv.channels) keys.push_back(c.key());
  return keys;
}

nlohmann::json vector_json(const Eigen::VectorXd& v) {
  return std::vector<double>(v.data(), v.data() + v.size());
}

Eigen::VectorXd vector_from(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

Nuance clipped(const Nuance& n) {
  return {std::clamp(n.tension, 0.0, 1.0), std::clamp(n.abruptness, 0.0, 1.0), std::clamp(n.relaxation, 0.0, 1.0)};
}

}  // namespace

void to_json(nlohmann::json& j, const Nuance& n) {
  j = nlohmann::json{{"tension", n.tension}, {"abruptness", n.abruptness}, {"relaxation", n.relaxation}};
}

void from_json(const nlohmann::json& j, Nuance& n) {
  n.tension = j.at("tension").get<double>();
  n.abruptness = j.at("abruptness").get<double>();
  n.relaxation = j.at("relaxation").get<double>();
}

void Demonstration::validate() const {
  require(valid_id(id), "demonstration id '" + id + "' must use [A-Za-z0-9_.-] and not start with '.'");
  require(!rows.empty(), "demonstration '" + id + "' has no feature rows");
  for (double v : label.values()) {
    require(in_unit(v), "demonstration '" + id + "' label values must lie in [0, 1]");
  }
}

DemonstrationStore::DemonstrationStore(fs::path dir) : dir_(std::move(dir)) {
  std::error_code ec;
  fs::create_directories(dir_, ec);
  if (ec) fail(ErrorCode::io, "cannot create demonstration store", dir_);
}

void DemonstrationStore::add(const Demonstration& demo) {
  demo.validate();
  const auto rows_text = features::to_jsonl(demo.rows);
  if (contains(demo.id)) {
    const auto existing_rows = read_text(dir_ / (demo.id + ".features.jsonl"));
    const auto meta = nlohmann::json::parse(read_text(dir_ / (demo.id + ".json")));
    if (existing_rows == rows_text && meta.at("label").get<Nuance>() == demo.label) return;
    fail(ErrorCode::conflict, "demonstration '" + demo.id + "' already exists with different content", dir_);
  }
  write_text_atomic(dir_ / (demo.id + ".features.jsonl"), rows_text);
  const nlohmann::json meta{{"id", demo.id},
                            {"label", demo.label},
                            {"created_at", demo.created_at},
                            {"row_count", demo.rows.size()}};
  // The metadata file marks the demonstration as committed.
  write_text_atomic(dir_ / (demo.id + ".json"), meta.dump(2) + "\n");
}

bool DemonstrationStore::contains(const std::string& id) const {
  return valid_id(id) && fs::is_regular_file(dir_ / (id + ".json"));
}

std::vector<std::string> DemonstrationStore::list() const {
  std::vector<std::string> ids;
  for (const auto& entry : fs::directory_iterator(dir_)) {
    if (!entry.is_regular_file()) continue;
    const auto name = entry.path().filename().string();
    if (name.size() <= 5 || !name.ends_with(".json")) continue;
    const auto id = name.substr(0, name.size() - 5);
    if (valid_id(id) && fs::is_regular_file(dir_ / (id + ".features.jsonl"))) ids.push_back(id);
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

Demonstration DemonstrationStore::get(const std::string& id) const {
  if (!contains(id)) fail(ErrorCode::not_found, "no demonstration '" + id + "'", dir_);
  const auto meta_path = dir_ / (id + ".json");
  const auto rows_path = dir_ / (id + ".features.jsonl");
  Demonstration d;
  try {
    const auto meta = nlohmann::json::parse(read_text(meta_path));
    d.id = meta.at("id").get<std::string>();
    d.label = meta.at("label").get<Nuance>();
    d.created_at = meta.value("created_at", std::string{});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::format, std::string("bad demonstration metadata: ") + e.what(), meta_path);
  }
  d.rows = features::parse_jsonl(read_text(rows_path), rows_path);
  return d;
}

std::vector<Demonstration> DemonstrationStore::all() const {
  std::vector<Demonstration> out;
  for (const auto& id : list()) out.push_back(get(id));
  return out;
}

Eigen::MatrixXd NuanceModel::raw_weights() const {
  return weights.array().rowwise() / feature_scales.transpose().array();
}

Eigen::VectorXd NuanceModel::raw_intercept() const { return intercept - raw_weights() * feature_means; }

Prediction NuanceModel::predict(const Eigen::VectorXd& x) const {
  if (x.size() != feature_means.size()) {
    fail(ErrorCode::invalid_argument, "feature dimension mismatch: model expects " + std::to_string(feature_means.size()) +
                                          ", got " + std::to_string(x.size()));
  }
  const Eigen::VectorXd z = (x - feature_means).cwiseQuotient(feature_scales);
  const Eigen::VectorXd r = intercept + weights * z;
  Prediction p;
  p.raw = {r[0], r[1], r[2]};
  p.value = clipped(p.raw);
  if (!(p.value == p.raw)) {
    spdlog::debug("nuance prediction clipped: raw ({}, {}, {})", r[0], r[1], r[2]);
  }
  return p;
}

Prediction NuanceModel::predict(const features::FeatureVector& fv) const {
  if (!channels.empty() && layout(fv) != channels) {
    fail(ErrorCode::invalid_argument, "feature dimension mismatch: channel layout differs from the trained model");
  }
  const auto flat = fv.flatten();
  return predict(Eigen::Map<const Eigen::VectorXd>(flat.data(), static_cast<Eigen::Index>(flat.size())));
}

void NuanceModel::validate() const {
  const auto d = feature_means.size();
  require(d > 0, "nuance model has no features");
  require(weights.rows() == static_cast<Eigen::Index>(Nuance::kSize) && weights.cols() == d,
          "nuance model weights have inconsistent dimensions");
  require(intercept.size() == static_cast<Eigen::Index>(Nuance::kSize), "nuance model intercept must have 3 entries");
  require(feature_scales.size() == d, "nuance model scales have inconsistent dimensions");
  require((feature_scales.array() > 0.0).all(), "nuance model scales must be positive");
  require(weights.allFinite() && intercept.allFinite() && feature_means.allFinite() && feature_scales.allFinite(),
          "nuance model contains non-finite values");
  require(ridge_lambda >= 0.0 && requested_lambda >= 0.0, "ridge lambda must be non-negative");
  require(channels.empty() || features::FeatureVector::flat_size(channels.size()) == static_cast<std::size_t>(d),
          "nuance model channel layout does not match its feature dimension");
}

void to_json(nlohmann::json& j, const NuanceModel& m) {
  auto w = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.weights.rows(); ++r) {
    w.push_back(vector_json(m.weights.row(r).transpose()));
  }
  auto chans = nlohmann::json::array();
  for (const auto& k : m.channels) chans.push_back({{"kind", signals::to_string(k.kind)}, {"channel_id", k.channel_id}});
  j = nlohmann::json{{"weights", w},
                     {"intercept", vector_json(m.intercept)},
                     {"feature_means", vector_json(m.feature_means)},
                     {"feature_scales", vector_json(m.feature_scales)},
                     {"trained_on", m.trained_on},
                     {"channels", chans},
                     {"requested_lambda", m.requested_lambda},
                     {"ridge_lambda", m.ridge_lambda},
                     {"row_count", m.row_count}};
  if (m.calibration) j["calibration"] = *m.calibration;
}

void from_json(const nlohmann::json& j, NuanceModel& m) {
  const auto rows = j.at("weights");
  const auto d = static_cast<Eigen::Index>(j.at("feature_means").size());
  m.weights.resize(static_cast<Eigen::Index>(rows.size()), d);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto v = vector_from(rows[r]);
    require(v.size() == d, "nuance model weight row has the wrong length");
    m.weights.row(static_cast<Eigen::Index>(r)) = v.transpose();
  }
  m.intercept = vector_from(j.at("intercept"));
  m.feature_means = vector_from(j.at("feature_means"));
  m.feature_scales = vector_from(j.at("feature_scales"));
  m.trained_on = j.value("trained_on", std::vector<std::string>{});
  m.channels.clear();
  for (const auto& c : j.value("channels", nlohmann::json::array())) {
    m.channels.push_back({signals::kind_from_string(c.at("kind").get<std::string>()), c.at("channel_id").get<int>()});
  }
  m.requested_lambda = j.value("requested_lambda", 0.0);
  m.ridge_lambda = j.at("ridge_lambda").get<double>();
  m.row_count = j.value("row_count", std::size_t{0});
  m.calibration.reset();
  if (j.contains("calibration")) m.calibration = j.at("calibration").get<features::Calibration>();
  m.validate();
}

void save_model(const NuanceModel& model, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  write_text_atomic(path, nlohmann::json(model).dump(2) + "\n");
}

NuanceModel load_model(const fs::path& path) {
  const auto text = read_text(path);
  try {
    return nlohmann::json::parse(text).get<NuanceModel>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::format, std::string("bad nuance model: ") + e.what(), path);
  } catch (const Error& e) {
    fail(e.code(), e.what(), path);
  }
}

NuanceModel fit(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, double lambda) {
  require(lambda >= 0.0 && std::isfinite(lambda), "ridge lambda must be a finite non-negative number");
  require(x.rows() >= 1, "training needs at least one feature row");
  require(y.rows() == x.rows() && y.cols() == static_cast<Eigen::Index>(Nuance::kSize),
          "training labels must have one row of 3 values per feature row");
  require(x.allFinite() && y.allFinite(), "training data contains non-finite values");

  const auto n = x.rows();
  const auto d = x.cols();
  NuanceModel m;
  m.requested_lambda = lambda;
  m.row_count = static_cast<std::size_t>(n);
  m.feature_means = x.colwise().mean().transpose();
  m.feature_scales = Eigen::VectorXd::Ones(d);

  std::vector<Eigen::Index> active;
  for (Eigen::Index c = 0; c < d; ++c) {
    const double mean = m.feature_means[c];
    const double sd = std::sqrt((x.col(c).array() - mean).square().mean());
    if (sd > 1e-12 * std::max(1.0, std::abs(mean))) {
      m.feature_scales[c] = sd;
      active.push_back(c);
    }
  }
  if (active.empty()) {
    fail(ErrorCode::degenerate,
         "all feature columns are constant across the demonstrations; record more varied demonstrations");
  }

  const auto a = static_cast<Eigen::Index>(active.size());
  Eigen::MatrixXd z(n, a);
  for (Eigen::Index k = 0; k < a; ++k) {
    const auto c = active[static_cast<std::size_t>(k)];
    z.col(k) = (x.col(c).array() - m.feature_means[c]) / m.feature_scales[c];
  }
  m.intercept = y.colwise().mean().transpose();
  const Eigen::MatrixXd yc = y.rowwise() - m.intercept.transpose();

  Eigen::MatrixXd w;
  double used = lambda;
  if (lambda == 0.0) {
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(z);
    qr.setThreshold(1e-10);
    if (qr.rank() == a) {
      w = qr.solve(yc);
    } else {
      spdlog::warn("nuance training: design is rank deficient (rank {} of {}), using ridge lambda {}", qr.rank(), a,
                   kFallbackLambda);
      used = kFallbackLambda;
    }
  }
  if (used > 0.0) {
    Eigen::MatrixXd aug = Eigen::MatrixXd::Zero(n + a, a);
    aug.topRows(n) = z;
    aug.bottomRows(a).diagonal().setConstant(std::sqrt(used));
    Eigen::MatrixXd rhs = Eigen::MatrixXd::Zero(n + a, yc.cols());
    rhs.topRows(n) = yc;
    w = aug.householderQr().solve(rhs);
  }
  m.ridge_lambda = used;

  m.weights = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(Nuance::kSize), d);
  for (Eigen::Index k = 0; k < a; ++k) m.weights.col(active[static_cast<std::size_t>(k)]) = w.row(k).transpose();
  return m;
}

NuanceModel train(const std::vector<Demonstration>& demos, double lambda) {
  require(!demos.empty(), "training needs at least one demonstration");
  const auto keys = layout(demos.front().rows.front());
  std::size_t total = 0;
  for (const auto& demo : demos) {
    demo.validate();
    for (const auto& row : demo.rows) {
      if (layout(row) != keys) {
        fail(ErrorCode::invalid_argument, "demonstration '" + demo.id + "' has a different channel layout");
      }
    }
    total += demo.rows.size();
  }
  const auto d = static_cast<Eigen::Index>(features::FeatureVector::flat_size(keys.size()));
  Eigen::MatrixXd x(static_cast<Eigen::Index>(total), d);
  Eigen::MatrixXd y(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(Nuance::kSize));
  Eigen::Index r = 0;
  for (const auto& demo : demos) {
    const auto label = demo.label.values();
    for (const auto& row : demo.rows) {
      const auto flat = row.flatten();
      x.row(r) = Eigen::Map<const Eigen::RowVectorXd>(flat.data(), d);
      y.row(r) = Eigen::Map<const Eigen::RowVectorXd>(label.data(), static_cast<Eigen::Index>(label.size()));
      ++r;
    }
  }
  auto m = fit(x, y, lambda);
  m.channels = keys;
  for (const auto& demo : demos) m.trained_on.push_back(demo.id);
  return m;
}

NuanceModel train(const DemonstrationStore& store, double lambda) { return train(store.all(), lambda); }

void to_json(nlohmann::json& j, const MappingConfig& c) {
  j = nlohmann::json{{"volume_ceiling", c.volume_ceiling},
                     {"gliss_semitones", c.gliss_semitones},
                     {"max_gliss_rate", c.max_gliss_rate},
                     {"min_gliss_rate", c.min_gliss_rate},
                     {"max_phase_scatter", c.max_phase_scatter}};
}

void from_json(const nlohmann::json& j, MappingConfig& c) {
  MappingConfig d;
  c.volume_ceiling = j.value("volume_ceiling", d.volume_ceiling);
  c.gliss_semitones = j.value("gliss_semitones", d.gliss_semitones);
  c.max_gliss_rate = j.value("max_gliss_rate", d.max_gliss_rate);
  c.min_gliss_rate = j.value("min_gliss_rate", d.min_gliss_rate);
  c.max_phase_scatter = j.value("max_phase_scatter", d.max_phase_scatter);
  require(in_unit(c.volume_ceiling), "mapping: volume_ceiling must lie in [0, 1]");
  require(c.gliss_semitones >= 0.0 && c.min_gliss_rate >= 0.0 && c.max_gliss_rate >= c.min_gliss_rate &&
              c.max_phase_scatter >= 0.0,
          "mapping: glissando and scatter settings must be non-negative and ordered");
}

oscnet::ControlAction map_to_actions(const Nuance& nuance, std::uint64_t seed,
                                     const std::array<double, oscnet::kOscillatorCount>& base_freqs,
                                     const MappingConfig& config) {
  constexpr auto count = oscnet::kOscillatorCount;
  const auto n = clipped(nuance);

  Rng rng(seed);
  std::array<std::size_t, count> order{};
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(std::span<std::size_t>(order));
  std::array<double, count> direction{};
  std::array<double, count> scatter{};
  for (std::size_t i = 0; i < count; ++i) {
    direction[i] = rng.uniform(-1.0, 1.0);
    scatter[i] = rng.uniform(-1.0, 1.0);
  }

  const auto active = static_cast<std::size_t>(std::llround(n.tension * static_cast<double>(count)));
  oscnet::ControlAction a;
  for (std::size_t k = 0; k < count; ++k) {
    const auto i = order[k];
    if (k < active) {
      a.activate.push_back(i);
      a.volume_targets[i] = config.volume_ceiling * n.tension;
    } else {
      a.mute.push_back(i);
    }
  }
  std::sort(a.activate.begin(), a.activate.end());
  std::sort(a.mute.begin(), a.mute.end());

  const double rate = config.min_gliss_rate + n.abruptness * (config.max_gliss_rate - config.min_gliss_rate);
  for (std::size_t i = 0; i < count; ++i) {
    const double semitones = n.abruptness * config.gliss_semitones * direction[i];
    a.glissandi[i] = {base_freqs[i] * std::exp2(semitones / 12.0), rate};
    a.phase_offsets[i] = n.abruptness * config.max_phase_scatter * scatter[i];
  }
  a.feedback_scale = 1.0 - n.relaxation;
  return a;
}

Nuance gate(const Nuance& nuance, int active_channels) {
  if (active_channels > 0) return nuance;
  return {0.0, nuance.abruptness, nuance.relaxation};
}

}  // namespace bodyloop::nuance
