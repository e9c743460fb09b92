#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "dmpc/trajectory.hpp"

namespace dmpc {

enum class MsgKind : uint8_t {
  register_agent = 1,
  deregister_agent = 2,
  trigger_step = 3,
  ack = 4,
  local_copies = 5,
  coupling_vars = 6,
  multiplier_vals = 7,
  convergence_flag = 8,
  shutdown = 9,
  // reserved tag space for extensions
  state_update = 10,
  result = 11,
};

/// One wire unit. Which fields are meaningful depends on kind; unused ones
/// stay default so equality and round-trip checks are exact.
struct Message {
  MsgKind kind = MsgKind::shutdown;

  uint32_t id = 0;      // register/deregister/ack/convergence_flag
  uint32_t from = 0;    // trajectory payloads, result
  uint32_t to = 0;
  uint32_t epoch = 0;   // trigger_step/ack
  uint32_t q = 0;       // iteration counter
  uint32_t step = 0;    // 1..7
  bool flag = false;    // convergence_flag, result (converged)

  std::string summary;  // register: model/coupling description

  bool has_v = false;   // trajectory payloads carry the optional third block
  Trajectory x, u, v;

  double t = 0.0;                                   // state_update
  std::vector<std::pair<uint32_t, Eigen::VectorXd>> states;

  uint32_t q_used = 0;  // result
  double cost = 0.0;
  double solve_ms = 0.0;

  bool operator==(const Message& o) const;
  bool operator!=(const Message& o) const { return !(*this == o); }
};

Message make_ack(uint32_t id, uint32_t epoch, uint32_t q, uint32_t step);
Message make_trigger(uint32_t epoch, uint32_t q, uint32_t step);

/// Serializes into `out`: u32 frame length (tag + payload), u8 tag, payload.
/// Everything little-endian; trajectory blocks are (f64 T, u32 N, u32 dim,
/// row-major f64 values).
void encode(const Message& m, std::vector<uint8_t>& out);
std::vector<uint8_t> encode(const Message& m);

enum class DecodeStatus {
  ok,
  need_more,   // buffer ends before the frame does; benign, wait for bytes
  unknown_tag,
  length_mismatch,  // payload size disagrees with the frame length
  truncated,        // inner structure runs past the payload end
};

struct DecodeResult {
  DecodeStatus status = DecodeStatus::need_more;
  Message message;
  size_t consumed = 0;  // bytes to drop from the buffer (whole frame on error)
};

/// Decodes the first frame of [data, data+len); never reads past len.
DecodeResult decode(const uint8_t* data, size_t len);

/// Message endpoint: everything the coordinator and agents use to talk.
class Channel {
public:
  virtual ~Channel() = default;
  virtual uint32_t self() const = 0;
  virtual void send(uint32_t to, Message m) = 0;
  /// Blocks up to timeout_ms for the next inbound message. Returns false on
  /// timeout. timeout_ms < 0 waits forever.
  virtual bool recv(Message& out, int timeout_ms) = 0;
  virtual bool try_recv(Message& out) { return recv(out, 0); }
};

/// Single-process exchange: per-endpoint FIFO queues, messages handed over
/// as value snapshots without serialization.
class InProcessBus {
public:
  class Endpoint : public Channel {
  public:
    uint32_t self() const override { return id_; }
    void send(uint32_t to, Message m) override;
    bool recv(Message& out, int timeout_ms) override;
    size_t pending() const;

  private:
    friend class InProcessBus;
    Endpoint(InProcessBus* bus, uint32_t id) : bus_(bus), id_(id) {}
    InProcessBus* bus_;
    uint32_t id_;
  };

  std::shared_ptr<Endpoint> join(uint32_t id);
  void leave(uint32_t id);
  bool connected(uint32_t id) const;

private:
  struct Inbox {
    std::mutex mtx;
    std::deque<Message> queue;
    std::condition_variable cv;
  };
  std::shared_ptr<Inbox> find(uint32_t id) const;
  void push(uint32_t from, uint32_t to, Message m);
  bool pop(uint32_t id, Message& out, int timeout_ms);
  size_t depth(uint32_t id) const;

  mutable std::mutex mtx_;
  std::map<uint32_t, std::shared_ptr<Inbox>> inboxes_;
};

}  // namespace dmpc
