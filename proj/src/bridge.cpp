#include "bodyloop/bridge.hpp"

#include <chrono>
#include <cmath>
#include <deque>
#include <set>
#include <thread>

#include <boost/asio.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>
#include <spdlog/spdlog.h>

#include "bodyloop/error.hpp"

namespace bodyloop::bridge {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;
using nlohmann::json;

json make_envelope(std::int64_t seq, double t, std::string_view type, json payload) {
  return {{"v", kProtocolVersion}, {"seq", seq}, {"t", t}, {"type", type}, {"payload", std::move(payload)}};
}

ParseResult parse_inbound(std::string_view text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    return {std::nullopt, std::string("malformed JSON: ") + e.what()};
  }
  if (!j.is_object()) return {std::nullopt, "message must be a JSON object"};
  if (!j.contains("seq") || !j.at("seq").is_number_integer() || j.at("seq").get<std::int64_t>() < 1) {
    return {std::nullopt, "message needs an integer seq >= 1"};
  }
  Inbound in;
  in.seq = j.at("seq").get<std::int64_t>();
  if (!j.contains("v") || j.at("v") != kProtocolVersion) {
    in.problem = "unsupported protocol version (expected v:1)";
  } else if (!j.contains("type") || !j.at("type").is_string()) {
    in.problem = "message needs a string type";
  } else {
    in.type = j.at("type").get<std::string>();
  }
  if (j.contains("t") && j.at("t").is_number()) in.t = j.at("t").get<double>();
  if (j.contains("payload")) {
    if (j.at("payload").is_object()) {
      in.payload = j.at("payload");
    } else if (!j.at("payload").is_null() && in.problem.empty()) {
      in.problem = "payload must be a JSON object";
    }
  }
  return {std::move(in), {}};
}

Sequencer::Sequencer(std::size_t max_pending, std::size_t reply_cache)
    : max_pending_(max_pending), reply_cache_(reply_cache) {}

Sequencer::Outcome Sequencer::accept(Inbound message, double now) {
  Outcome out;
  const auto seq = message.seq;
  if (seq < next_) {
    const auto it = replies_.find(seq);
    if (it != replies_.end()) {
      out.replay = it->second;
    } else {
      out.error = "seq " + std::to_string(seq) + " was already processed";
    }
    return out;
  }
  if (pending_.contains(seq)) return out;  // answered once its turn comes
  if (seq > next_ && pending_.size() >= max_pending_) {
    out.error = "too many commands waiting for seq " + std::to_string(next_);
    return out;
  }
  pending_.emplace(seq, std::pair{std::move(message), now});
  out.ready = drain();
  return out;
}

std::vector<Inbound> Sequencer::expire(double now, double timeout) {
  if (pending_.empty()) return {};
  double oldest = now;
  for (const auto& [seq, entry] : pending_) oldest = std::min(oldest, entry.second);
  if (now - oldest < timeout) return {};
  const auto first = pending_.begin()->first;
  spdlog::warn("skipping missing seq {}..{}", next_, first - 1);
  next_ = first;
  return drain();
}

void Sequencer::remember(std::int64_t seq, Reply reply) {
  replies_[seq] = std::move(reply);
  while (replies_.size() > reply_cache_) replies_.erase(replies_.begin());
}

std::vector<Inbound> Sequencer::drain() {
  std::vector<Inbound> ready;
  for (auto it = pending_.find(next_); it != pending_.end(); it = pending_.find(next_)) {
    ready.push_back(std::move(it->second.first));
    pending_.erase(it);
    ++next_;
  }
  return ready;
}

namespace {

bool is_event(std::string_view type) { return type == "ritual_episode"; }

}  // namespace

class Connection;

class Server::Impl {
 public:
  Impl(session::SessionConfig config, ServerOptions options);

  void run();
  void stop();
  double now() const { return std::chrono::duration<double>(Clock::now() - started_).count(); }

  void attach(const std::shared_ptr<Connection>& c);
  void detach(const std::shared_ptr<Connection>& c);
  void on_message(const std::shared_ptr<Connection>& c, std::string_view text);

  asio::io_context io_;
  tcp::acceptor acceptor_;
  std::thread thread_;

 private:
  using Clock = std::chrono::steady_clock;

  void accept();
  void schedule_tick();
  void tick();
  void apply(const std::shared_ptr<Connection>& c, const Inbound& in);
  void broadcast(const live::Frame& frame);

  ServerOptions options_;
  live::Engine engine_;
  asio::steady_timer timer_;
  asio::signal_set signals_;
  Clock::time_point started_ = Clock::now();
  Clock::time_point last_tick_ = Clock::now();
  std::set<std::shared_ptr<Connection>> connections_;
  std::weak_ptr<Connection> operator_;
  bool stopping_ = false;
};

class Connection : public std::enable_shared_from_this<Connection> {
 public:
  Connection(tcp::socket socket, Server::Impl& server) : ws_(std::move(socket)), server_(server) {}

  void start() {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept([self = shared_from_this()](beast::error_code ec) {
      if (ec) return;
      self->server_.attach(self);
      self->read();
    });
  }

  // Acks, errs, snapshots and events: kept in order, never dropped.
  void push_control(std::string type, json payload) {
    control_.push_back({std::move(type), std::move(payload)});
    write();
  }

  // State frames: only the newest per stream is kept while the socket is busy.
  void push_state(const std::string& type, const json& payload) {
    latest_[type] = payload;
    write();
  }

  void close() {
    closed_ = true;
    beast::error_code ec;
    beast::get_lowest_layer(ws_).socket().shutdown(tcp::socket::shutdown_both, ec);
    beast::get_lowest_layer(ws_).close();
  }

  Sequencer& sequencer() { return sequencer_; }
  std::string name() const { return name_; }

 private:
  struct Outgoing {
    std::string type;
    json payload;
  };

  void read() {
    ws_.async_read(buffer_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
      if (ec) {
        self->closed_ = true;
        self->server_.detach(self);
        return;
      }
      const auto text = beast::buffers_to_string(self->buffer_.data());
      self->buffer_.consume(self->buffer_.size());
      self->server_.on_message(self, text);
      if (!self->closed_) self->read();
    });
  }

  void write() {
    if (writing_ || closed_) return;
    Outgoing next;
    if (!control_.empty()) {
      next = std::move(control_.front());
      control_.pop_front();
    } else if (!latest_.empty()) {
      auto it = latest_.begin();
      next = {it->first, std::move(it->second)};
      latest_.erase(it);
    } else {
      return;
    }
    out_ = make_envelope(++seq_, server_.now(), next.type, std::move(next.payload)).dump();
    writing_ = true;
    ws_.text(true);
    ws_.async_write(asio::buffer(out_), [self = shared_from_this()](beast::error_code ec, std::size_t) {
      self->writing_ = false;
      if (ec) {
        self->closed_ = true;
        return;
      }
      self->write();
    });
  }

  websocket::stream<beast::tcp_stream> ws_;
  Server::Impl& server_;
  beast::flat_buffer buffer_;
  Sequencer sequencer_;
  std::deque<Outgoing> control_;
  std::map<std::string, json> latest_;
  std::string out_;
  std::int64_t seq_ = 0;
  bool writing_ = false;
  bool closed_ = false;
  std::string name_ = beast::get_lowest_layer(ws_).socket().remote_endpoint().address().to_string() + ":" +
                      std::to_string(beast::get_lowest_layer(ws_).socket().remote_endpoint().port());
};

Server::Impl::Impl(session::SessionConfig config, ServerOptions options)
    : acceptor_(io_), options_(std::move(options)), engine_(std::move(config)), timer_(io_), signals_(io_) {
  beast::error_code ec;
  const tcp::endpoint endpoint(asio::ip::make_address(options_.address, ec), options_.port);
  if (ec) fail(ErrorCode::invalid_argument, "invalid listen address '" + options_.address + "'");
  acceptor_.open(endpoint.protocol(), ec);
  if (!ec) acceptor_.set_option(asio::socket_base::reuse_address(true), ec);
  if (!ec) acceptor_.bind(endpoint, ec);
  if (!ec) acceptor_.listen(asio::socket_base::max_listen_connections, ec);
  if (ec) {
    fail(ErrorCode::io, "cannot listen on " + options_.address + ":" + std::to_string(options_.port) + ": " + ec.message());
  }
  if (options_.start_running) engine_.execute("start", json::object());
}

void Server::Impl::run() {
  accept();
  schedule_tick();
  if (options_.handle_signals) {
    signals_.add(SIGINT);
    signals_.add(SIGTERM);
    signals_.async_wait([this](beast::error_code ec, int) {
      if (!ec) stop();
    });
  }
  spdlog::info("bridge listening on {}:{}", options_.address, acceptor_.local_endpoint().port());
  io_.run();
}

void Server::Impl::stop() {
  if (stopping_) return;
  stopping_ = true;
  beast::error_code ec;
  acceptor_.close(ec);
  timer_.cancel();
  signals_.cancel(ec);
  for (const auto& c : connections_) c->close();
  connections_.clear();
  io_.stop();
}

void Server::Impl::accept() {
  acceptor_.async_accept([this](beast::error_code ec, tcp::socket socket) {
    if (ec) return;  // acceptor closed
    try {
      std::make_shared<Connection>(std::move(socket), *this)->start();
    } catch (const std::exception& e) {
      spdlog::warn("dropping connection: {}", e.what());
    }
    accept();
  });
}

void Server::Impl::schedule_tick() {
  timer_.expires_after(std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(options_.tick)));
  timer_.async_wait([this](beast::error_code ec) {
    if (ec) return;
    tick();
    schedule_tick();
  });
}

void Server::Impl::tick() {
  const auto t = Clock::now();
  // A stalled host must not make the engine leap ahead by seconds.
  const double dt = std::min(std::chrono::duration<double>(t - last_tick_).count(), 0.25);
  last_tick_ = t;
  try {
    for (const auto& frame : engine_.tick(dt)) broadcast(frame);
  } catch (const std::exception& e) {
    spdlog::error("engine tick failed: {}", e.what());
  }
  const double clock = now();
  for (const auto& c : std::vector(connections_.begin(), connections_.end())) {
    for (const auto& in : c->sequencer().expire(clock, options_.gap_timeout)) apply(c, in);
  }
}

void Server::Impl::broadcast(const live::Frame& frame) {
  for (const auto& c : connections_) {
    if (is_event(frame.type)) {
      c->push_control(frame.type, frame.payload);
    } else {
      c->push_state(frame.type, frame.payload);
    }
  }
}

void Server::Impl::attach(const std::shared_ptr<Connection>& c) {
  if (stopping_) {
    c->close();
    return;
  }
  c->push_control(std::string(kSnapshot), engine_.snapshot());
  connections_.insert(c);
  spdlog::info("client {} connected ({} total)", c->name(), connections_.size());
}

void Server::Impl::detach(const std::shared_ptr<Connection>& c) {
  if (connections_.erase(c) == 0) return;
  if (operator_.lock() == c) operator_.reset();
  spdlog::info("client {} disconnected", c->name());
}

void Server::Impl::on_message(const std::shared_ptr<Connection>& c, std::string_view text) {
  auto parsed = parse_inbound(text);
  if (!parsed.message) {
    spdlog::warn("client {}: {}", c->name(), parsed.error);
    c->push_control("err", {{"seq", nullptr}, {"reason", parsed.error}});
    return;
  }
  const auto seq = parsed.message->seq;
  auto outcome = c->sequencer().accept(std::move(*parsed.message), now());
  if (outcome.replay) c->push_control(outcome.replay->type, outcome.replay->payload);
  if (outcome.error) c->push_control("err", {{"seq", seq}, {"reason", *outcome.error}});
  for (const auto& in : outcome.ready) apply(c, in);
}

void Server::Impl::apply(const std::shared_ptr<Connection>& c, const Inbound& in) {
  json reply{{"seq", in.seq}};
  bool ok = true;
  const auto reject = [&](std::string reason) {
    ok = false;
    reply["reason"] = std::move(reason);
  };
  const auto holder = operator_.lock();

  if (!in.problem.empty()) {
    reject(in.problem);
  } else if (in.type == kTakeover) {
    if (holder && holder != c) holder->push_control("operator", {{"operator", false}, {"by", c->name()}});
    operator_ = c;
    reply["operator"] = true;
  } else if (in.type == kRelease) {
    if (holder == c) operator_.reset();
    reply["operator"] = false;
  } else if (in.type == kSnapshot) {
    c->push_control(std::string(kSnapshot), engine_.snapshot());
  } else if (live::Engine::is_command(in.type)) {
    if (holder && holder != c) {
      reject("another client holds the operator lock; send takeover first");
    } else {
      if (!holder) operator_ = c;
      const auto result = engine_.execute(in.type, in.payload);
      if (result.ok) {
        if (result.detail.is_object()) reply.update(result.detail);
      } else {
        reject(result.reason);
      }
    }
  } else {
    spdlog::warn("client {}: ignoring unknown message type '{}'", c->name(), in.type);
    reject("unknown message type '" + in.type + "'");
  }
  const std::string type = ok ? "ack" : "err";
  c->sequencer().remember(in.seq, {type, reply});
  c->push_control(type, std::move(reply));
}

Server::Server(session::SessionConfig config, ServerOptions options)
    : impl_(std::make_unique<Impl>(std::move(config), std::move(options))) {}

Server::~Server() {
  stop();
  if (impl_->thread_.joinable()) impl_->thread_.join();
}

unsigned short Server::port() const { return impl_->acceptor_.local_endpoint().port(); }

void Server::run() { impl_->run(); }

void Server::start() {
  impl_->thread_ = std::thread([this] { impl_->run(); });
}

void Server::stop() {
  asio::post(impl_->io_, [impl = impl_.get()] { impl->stop(); });
}

}  // namespace bodyloop::bridge
