// Command-line front end. Results go to stdout as one JSON line; failures go
// to stderr as one JSON line with exit status 1; usage errors exit with 2.

#include <filesystem>
#include <iostream>
#include <numbers>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "bodyloop/bridge.hpp"
#include "bodyloop/config.hpp"
#include "bodyloop/error.hpp"
#include "bodyloop/features.hpp"
#include "bodyloop/fileio.hpp"
#include "bodyloop/nuance.hpp"
#include "bodyloop/session.hpp"
#include "bodyloop/signals.hpp"
#include "bodyloop/wav.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bodyloop;

namespace {

void emit(const json& j) {
  std::cout << j.dump() << std::endl;
}

struct ConfigOptions {
  std::string path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output;
  std::optional<std::string> model;

  session::SessionConfig load() const {
    json overrides = json::object();
    if (seed) overrides["seed"] = *seed;
    if (output) overrides["output_dir"] = fs::absolute(*output).string();
    if (model) overrides["nuance"]["model"] = fs::absolute(*model).string();
    return session::load_config(path, overrides);
  }
};

void add_config_options(CLI::App* cmd, ConfigOptions& o, bool required = true) {
  auto* opt = cmd->add_option("--config", o.path, "Session config (JSON)");
  if (required) opt->required();
  cmd->add_option("--seed", o.seed, "Override the master seed");
  cmd->add_option("--output", o.output, "Override the output directory");
  cmd->add_option("--model", o.model, "Override the nuance model");
}

json run_result(const session::RunResult& r) {
  return {{"status", r.status}, {"output_dir", r.output_dir.string()}, {"artifacts", r.artifacts}};
}

struct SynthArgs {
  std::string kind = "emg";
  std::optional<std::string> profile;
  double duration = 10.0;
  double rate = 0.0;
  std::uint64_t seed = 0;
  double zeta = 0.3;
  double frequency = 8.0;
  std::string out;
};

void synth(const SynthArgs& a) {
  const auto kind = signals::kind_from_string(a.kind);
  const auto profile = a.profile ? signals::load_profile(*a.profile) : session::default_profile(a.duration);
  const double rate = a.rate > 0.0 ? a.rate
                                   : (kind == signals::SignalKind::emg ? signals::kDefaultEmgRate
                                                                       : signals::kDefaultMmgRate);
  const auto frames = kind == signals::SignalKind::emg
                          ? signals::synth_emg(profile, a.duration, rate, a.seed)
                          : signals::synth_mmg(a.zeta, 2.0 * std::numbers::pi * a.frequency, profile, a.duration,
                                               rate, a.seed);
  const auto signal = signals::assemble(frames, 0);
  std::vector<std::vector<float>> channels(1);
  channels[0].assign(signal.samples.begin(), signal.samples.end());
  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_wav_float32(out, rate, channels);
  emit({{"status", "complete"}, {"output", out.string()}, {"samples", signal.samples.size()}, {"sample_rate", rate}});
}

struct AnalyzeArgs {
  std::vector<std::string> emg;
  std::vector<std::string> mmg;
  std::optional<std::string> calibration;
  std::string out;
  ConfigOptions config;
};

void analyze(const AnalyzeArgs& a) {
  signals::FrameStream emg;
  signals::FrameStream mmg;
  features::FeatureParams params;
  regime::RegimeParams regime_params;
  if (!a.config.path.empty()) {
    const auto config = a.config.load();
    auto set = session::load_sources(config);
    emg = std::move(set.emg);
    mmg = std::move(set.mmg);
    params = config.features;
    regime_params = config.regime;
  }
  const auto append = [](signals::FrameStream& into, const std::vector<std::string>& files, signals::SignalKind kind) {
    for (const auto& file : files) {
      const int offset = into.empty() ? 0 : signals::channel_ids(into).back() + 1;
      for (auto f : signals::load_recording(file, kind)) {
        f.channel_id += offset;
        into.push_back(std::move(f));
      }
    }
  };
  append(emg, a.emg, signals::SignalKind::emg);
  append(mmg, a.mmg, signals::SignalKind::mmg);
  require(!emg.empty() || !mmg.empty(), "nothing to analyze: give --emg/--mmg recordings or --config");

  std::optional<features::Calibration> calibration;
  if (a.calibration) {
    try {
      calibration = json::parse(read_text(*a.calibration)).get<features::Calibration>();
    } catch (const json::exception& e) {
      fail(ErrorCode::format, std::string("calibration: ") + e.what(), *a.calibration);
    }
  }
  const auto result = features::analyze(emg, mmg, params, regime_params, calibration);
  const fs::path out(a.out);
  fs::create_directories(out);
  write_text_atomic(out / "features.jsonl", features::to_jsonl(result.rows));
  std::string regime;
  for (const auto& e : result.regime) regime += json(e).dump() + "\n";
  write_text_atomic(out / "regime.jsonl", regime);
  write_text_atomic(out / "calibration.json", json(result.calibration).dump(2) + "\n");
  emit({{"status", "complete"},
        {"output_dir", out.string()},
        {"rows", result.rows.size()},
        {"regime_estimates", result.regime.size()}});
}

struct DemoArgs {
  std::string demos;
  std::string id;
  std::string features;
  double tension = 0.0;
  double abruptness = 0.0;
  double relaxation = 0.0;
};

void add_demo(const DemoArgs& a) {
  nuance::Demonstration demo;
  demo.id = a.id;
  demo.rows = features::parse_jsonl(read_text(a.features), a.features);
  demo.label = {a.tension, a.abruptness, a.relaxation};
  demo.created_at = session::utc_timestamp();
  nuance::DemonstrationStore store(a.demos);
  store.add(demo);
  emit({{"status", "complete"}, {"id", demo.id}, {"rows", demo.rows.size()}, {"demos", store.list().size()}});
}

struct TrainArgs {
  std::string demos;
  double lambda = 0.0;
  std::optional<std::string> calibration;
  std::string out;
};

void train_nuance(const TrainArgs& a) {
  if (!fs::is_directory(a.demos)) fail(ErrorCode::not_found, "demonstration directory not found", a.demos);
  auto model = nuance::train(nuance::DemonstrationStore(a.demos), a.lambda);
  if (a.calibration) model.calibration = json::parse(read_text(*a.calibration)).get<features::Calibration>();
  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  nuance::save_model(model, out);
  emit({{"status", "complete"},
        {"output", out.string()},
        {"row_count", model.row_count},
        {"lambda", model.ridge_lambda},
        {"requested_lambda", model.requested_lambda},
        {"trained_on", model.trained_on}});
}

struct ServeArgs {
  ConfigOptions config;
  std::string address = "127.0.0.1";
  unsigned short port = 8765;
  bool start = false;
};

void serve(const ServeArgs& a) {
  bridge::ServerOptions options;
  options.address = a.address;
  options.port = a.port;
  options.start_running = a.start;
  options.handle_signals = true;
  bridge::Server server(a.config.load(), options);
  emit({{"status", "listening"}, {"address", a.address}, {"port", server.port()}});
  server.run();
  emit({{"status", "stopped"}});
}

}  // namespace

int main(int argc, char** argv) {
  auto logger = spdlog::stderr_color_mt("bodyloop");
  spdlog::set_default_logger(logger);

  CLI::App app{"Body-signal instrument and learning ritual"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string log_level = "info";
  app.add_option("--log-level", log_level, "trace, debug, info, warn, error, off")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}));

  SynthArgs synth_args;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic EMG or MMG recording");
  synth_cmd->add_option("--kind", synth_args.kind, "emg or mmg")->check(CLI::IsMember({"emg", "mmg"}));
  synth_cmd->add_option("--profile", synth_args.profile, "Contraction profile (JSON)");
  synth_cmd->add_option("--duration", synth_args.duration, "Seconds")->check(CLI::PositiveNumber);
  synth_cmd->add_option("--rate", synth_args.rate, "Sample rate in Hz (default by kind)");
  synth_cmd->add_option("--seed", synth_args.seed);
  synth_cmd->add_option("--zeta", synth_args.zeta, "MMG damping ratio");
  synth_cmd->add_option("--frequency", synth_args.frequency, "MMG natural frequency in Hz");
  synth_cmd->add_option("--out", synth_args.out, "Output WAV")->required();

  AnalyzeArgs analyze_args;
  auto* analyze_cmd = app.add_subcommand("analyze", "Feature, regime and calibration logs for recordings");
  analyze_cmd->add_option("--emg", analyze_args.emg, "EMG recordings (WAV)");
  analyze_cmd->add_option("--mmg", analyze_args.mmg, "MMG recordings (WAV)");
  analyze_cmd->add_option("--calibration", analyze_args.calibration, "Use this calibration instead of capturing one");
  analyze_cmd->add_option("--out", analyze_args.out, "Output directory")->required();
  add_config_options(analyze_cmd, analyze_args.config, false);

  DemoArgs demo_args;
  auto* demo_cmd = app.add_subcommand("add-demo", "Store a labelled demonstration");
  demo_cmd->add_option("--demos", demo_args.demos, "Demonstration directory")->required();
  demo_cmd->add_option("--id", demo_args.id, "Demonstration id")->required();
  demo_cmd->add_option("--features", demo_args.features, "Feature rows (JSONL)")->required();
  demo_cmd->add_option("--tension", demo_args.tension)->required()->check(CLI::Range(0.0, 1.0));
  demo_cmd->add_option("--abruptness", demo_args.abruptness)->required()->check(CLI::Range(0.0, 1.0));
  demo_cmd->add_option("--relaxation", demo_args.relaxation)->required()->check(CLI::Range(0.0, 1.0));

  TrainArgs train_args;
  auto* train_cmd = app.add_subcommand("train-nuance", "Fit the nuance model to stored demonstrations");
  train_cmd->add_option("--demos", train_args.demos, "Demonstration directory")->required();
  train_cmd->add_option("--lambda", train_args.lambda, "Ridge penalty")->check(CLI::NonNegativeNumber);
  train_cmd->add_option("--calibration", train_args.calibration, "Calibration to embed in the model");
  train_cmd->add_option("--out", train_args.out, "Model file")->required();

  ConfigOptions corpus_args;
  auto* corpus_cmd = app.add_subcommand("run-corpus", "Offline instrument run");
  add_config_options(corpus_cmd, corpus_args);

  ConfigOptions ritual_args;
  auto* ritual_cmd = app.add_subcommand("run-ritual", "Learning ritual run");
  add_config_options(ritual_cmd, ritual_args);

  ServeArgs serve_args;
  auto* serve_cmd = app.add_subcommand("serve", "Live engine with the WebSocket control service");
  add_config_options(serve_cmd, serve_args.config);
  serve_cmd->add_option("--address", serve_args.address, "Listen address");
  serve_cmd->add_option("--port", serve_args.port, "Listen port (0 picks a free one)");
  serve_cmd->add_flag("--start", serve_args.start, "Start the engine immediately");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << json{{"error", "usage"}, {"message", e.what()}}.dump() << "\n" << app.help();
    return 2;
  }
  spdlog::set_level(spdlog::level::from_str(log_level));

  try {
    if (*synth_cmd) synth(synth_args);
    if (*analyze_cmd) analyze(analyze_args);
    if (*demo_cmd) add_demo(demo_args);
    if (*train_cmd) train_nuance(train_args);
    if (*corpus_cmd) emit(run_result(session::run_corpus(corpus_args.load())));
    if (*ritual_cmd) emit(run_result(session::run_ritual(ritual_args.load())));
    if (*serve_cmd) serve(serve_args);
  } catch (const Error& e) {
    std::cerr << e.to_json_line() << std::endl;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "internal"}, {"message", e.what()}}.dump() << std::endl;
    return 1;
  }
  return 0;
}
