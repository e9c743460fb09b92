#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "dmpc/comm.hpp"

namespace dmpc {

/// TCP transport with the same send/recv contract as the in-process bus.
/// Frames use encode/decode; each established connection starts with a
/// transport hello (reserved tag 12) carrying the sender's endpoint id, so
/// both sides can route by id regardless of who dialed.
class TcpEndpoint : public Channel {
public:
  /// Binds and listens on the given port (0 picks an ephemeral port).
  TcpEndpoint(uint32_t self_id, uint16_t listen_port);
  ~TcpEndpoint() override;

  TcpEndpoint(const TcpEndpoint&) = delete;
  TcpEndpoint& operator=(const TcpEndpoint&) = delete;

  uint32_t self() const override { return self_id_; }
  uint16_t port() const { return port_; }

  /// Dials a peer and blocks until the hello exchange names it.
  /// Returns the peer's endpoint id.
  uint32_t connect_to(const std::string& host, uint16_t port);

  void send(uint32_t to, Message m) override;
  bool recv(Message& out, int timeout_ms) override;

  bool has_route(uint32_t id) const;
  /// Waits until a route to `id` exists (an inbound connection completed
  /// its hello). Returns false on timeout.
  bool wait_route(uint32_t id, int timeout_ms);

  /// Peers whose connections closed since the last call.
  std::vector<uint32_t> take_dropped();
  /// Decode/read errors since the last call ("truncated frame from 3", ...).
  std::vector<std::string> take_errors();

  void close();

private:
  struct Conn {
    int fd = -1;
    uint32_t peer = 0;
    bool named = false;  // hello received, peer id valid
    std::thread reader;
    std::mutex write_mtx;
    std::atomic<bool> open{true};
  };

  void accept_loop();
  void reader_loop(std::shared_ptr<Conn> c);
  void send_hello(int fd);
  void note_error(std::string what);
  void note_dropped(uint32_t id);
  void add_route(uint32_t id, const std::shared_ptr<Conn>& c);

  uint32_t self_id_;
  uint16_t port_ = 0;
  int listen_fd_ = -1;
  std::thread acceptor_;
  std::atomic<bool> closing_{false};

  mutable std::mutex mtx_;
  std::condition_variable route_cv_;
  std::map<uint32_t, std::shared_ptr<Conn>> routes_;
  std::vector<std::shared_ptr<Conn>> conns_;
  std::vector<uint32_t> dropped_;
  std::vector<std::string> errors_;

  std::mutex inbox_mtx_;
  std::condition_variable inbox_cv_;
  std::deque<Message> inbox_;
};

}  // namespace dmpc
