#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "bodyloop/config.hpp"
#include "bodyloop/engine.hpp"

namespace bodyloop::bridge {

inline constexpr int kProtocolVersion = 1;

// Control messages handled by the service itself rather than the engine.
inline constexpr std::string_view kTakeover = "takeover";
inline constexpr std::string_view kRelease = "release";
inline constexpr std::string_view kSnapshot = "snapshot";

nlohmann::json make_envelope(std::int64_t seq, double t, std::string_view type, nlohmann::json payload);

// One client message. A message with a usable seq but some other defect
// keeps its place in the sequence and is answered with err when its turn
// comes; problem holds the reason.
struct Inbound {
  std::int64_t seq = 0;
  double t = 0.0;
  std::string type;
  nlohmann::json payload = nlohmann::json::object();
  std::string problem;
};

struct ParseResult {
  std::optional<Inbound> message;
  std::string error;  // set when no seq could be recovered
};

ParseResult parse_inbound(std::string_view text);

// Exactly-once, in-order delivery of one connection's commands. Seqs start
// at 1. Early arrivals wait for the gap to fill; a gap older than the
// timeout is skipped. Replies are cached so a retried seq is answered again
// without being re-applied.
class Sequencer {
 public:
  explicit Sequencer(std::size_t max_pending = 256, std::size_t reply_cache = 256);

  struct Reply {
    std::string type;
    nlohmann::json payload;
  };

  struct Outcome {
    std::vector<Inbound> ready;
    std::optional<Reply> replay;
    std::optional<std::string> error;
  };

  Outcome accept(Inbound message, double now);
  std::vector<Inbound> expire(double now, double timeout);
  void remember(std::int64_t seq, Reply reply);

  std::int64_t next() const { return next_; }
  std::size_t pending() const { return pending_.size(); }

 private:
  std::vector<Inbound> drain();

  std::size_t max_pending_;
  std::size_t reply_cache_;
  std::int64_t next_ = 1;
  std::map<std::int64_t, std::pair<Inbound, double>> pending_;
  std::map<std::int64_t, Reply> replies_;
};

struct ServerOptions {
  std::string address = "127.0.0.1";
  unsigned short port = 0;  // 0 picks a free port
  double tick = 0.025;       // engine period, seconds
  double gap_timeout = 1.0;  // seconds before a missing seq is skipped
  bool start_running = false;
  bool handle_signals = false;  // stop on SIGINT/SIGTERM
};

class Connection;

// WebSocket service around one live engine. All networking and the engine
// loop share a single I/O thread.
class Server {
 public:
  Server(session::SessionConfig config, ServerOptions options);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  unsigned short port() const;
  // Blocks until stop().
  void run();
  // run() on a background thread.
  void start();
  // Safe from any thread.
  void stop();

 private:
  class Impl;
  friend class Connection;
  std::unique_ptr<Impl> impl_;
};

}  // namespace bodyloop::bridge
