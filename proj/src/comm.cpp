#include "dmpc/comm.hpp"

#include <chrono>
#include <cstring>
#include <stdexcept>

namespace dmpc {

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  out.push_back(static_cast<uint8_t>(v));
  out.push_back(static_cast<uint8_t>(v >> 8));
  out.push_back(static_cast<uint8_t>(v >> 16));
  out.push_back(static_cast<uint8_t>(v >> 24));
}

void put_u8(std::vector<uint8_t>& out, uint8_t v) { out.push_back(v); }

void put_f64(std::vector<uint8_t>& out, double d) {
  uint64_t v;
  static_assert(sizeof(v) == sizeof(d));
  std::memcpy(&v, &d, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

void put_traj(std::vector<uint8_t>& out, const Trajectory& tr) {
  put_f64(out, tr.horizon());
  put_u32(out, static_cast<uint32_t>(tr.size()));
  put_u32(out, static_cast<uint32_t>(tr.dim()));
  for (int k = 0; k < tr.size(); ++k)
    for (int c = 0; c < tr.dim(); ++c) put_f64(out, tr(k, c));
}

// bounded reader; `ok` latches false on any attempt to run past the end
struct Reader {
  const uint8_t* p;
  size_t left;
  bool ok = true;

  bool take(size_t n) {
    if (!ok || left < n) {
      ok = false;
      return false;
    }
    return true;
  }
  uint32_t u32() {
    if (!take(4)) return 0;
    uint32_t v = static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
                 (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
    p += 4;
    left -= 4;
    return v;
  }
  uint8_t u8() {
    if (!take(1)) return 0;
    uint8_t v = *p;
    ++p;
    --left;
    return v;
  }
  double f64() {
    if (!take(8)) return 0.0;
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    p += 8;
    left -= 8;
    double d;
    std::memcpy(&d, &v, 8);
    return d;
  }
  std::string str(size_t n) {
    if (!take(n)) return {};
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    left -= n;
    return s;
  }
  Trajectory traj() {
    const double T = f64();
    const uint32_t N = u32();
    const uint32_t dim = u32();
    if (!ok || !take(static_cast<size_t>(N) * dim * 8)) {
      ok = false;
      return Trajectory();
    }
    if (N == 0 && dim == 0) return Trajectory();  // empty slot, e.g. result requests
    if (N < 2 || T <= 0.0) {
      ok = false;
      return Trajectory();
    }
    Eigen::MatrixXd vals(N, dim);
    for (uint32_t k = 0; k < N; ++k)
      for (uint32_t c = 0; c < dim; ++c) vals(k, c) = f64();
    return Trajectory(T, std::move(vals));
  }
};

bool traj_eq(const Trajectory& a, const Trajectory& b) {
  if (a.size() != b.size() || a.dim() != b.dim()) return false;
  if (a.size() == 0) return true;
  const double ta = a.horizon(), tb = b.horizon();
  if (std::memcmp(&ta, &tb, 8) != 0) return false;
  return std::memcmp(a.values().data(), b.values().data(),
                     sizeof(double) * a.size() * a.dim()) == 0;
}

}  // namespace

bool Message::operator==(const Message& o) const {
  if (kind != o.kind) return false;
  if (id != o.id || from != o.from || to != o.to || epoch != o.epoch || q != o.q ||
      step != o.step || flag != o.flag || has_v != o.has_v || q_used != o.q_used)
    return false;
  if (summary != o.summary) return false;
  if (std::memcmp(&t, &o.t, 8) != 0 || std::memcmp(&cost, &o.cost, 8) != 0 ||
      std::memcmp(&solve_ms, &o.solve_ms, 8) != 0)
    return false;
  if (!traj_eq(x, o.x) || !traj_eq(u, o.u) || !traj_eq(v, o.v)) return false;
  if (states.size() != o.states.size()) return false;
  for (size_t i = 0; i < states.size(); ++i) {
    if (states[i].first != o.states[i].first) return false;
    if (states[i].second.size() != o.states[i].second.size()) return false;
    if (std::memcmp(states[i].second.data(), o.states[i].second.data(),
                    sizeof(double) * states[i].second.size()) != 0)
      return false;
  }
  return true;
}

Message make_ack(uint32_t id, uint32_t epoch, uint32_t q, uint32_t step) {
  Message m;
  m.kind = MsgKind::ack;
  m.id = id;
  m.epoch = epoch;
  m.q = q;
  m.step = step;
  return m;
}

Message make_trigger(uint32_t epoch, uint32_t q, uint32_t step) {
  Message m;
  m.kind = MsgKind::trigger_step;
  m.epoch = epoch;
  m.q = q;
  m.step = step;
  return m;
}

void encode(const Message& m, std::vector<uint8_t>& out) {
  const size_t frame_at = out.size();
  put_u32(out, 0);  // patched below
  put_u8(out, static_cast<uint8_t>(m.kind));
  switch (m.kind) {
    case MsgKind::register_agent:
      put_u32(out, m.id);
      put_u32(out, static_cast<uint32_t>(m.summary.size()));
      out.insert(out.end(), m.summary.begin(), m.summary.end());
      break;
    case MsgKind::deregister_agent:
      put_u32(out, m.id);
      break;
    case MsgKind::trigger_step:
      put_u32(out, m.epoch);
      put_u32(out, m.q);
      put_u32(out, m.step);
      break;
    case MsgKind::ack:
      put_u32(out, m.id);
      put_u32(out, m.epoch);
      put_u32(out, m.q);
      put_u32(out, m.step);
      break;
    case MsgKind::local_copies:
    case MsgKind::coupling_vars:
    case MsgKind::multiplier_vals:
      put_u32(out, m.from);
      put_u32(out, m.to);
      put_u32(out, m.q);
      put_u8(out, m.has_v ? 1 : 0);
      put_traj(out, m.x);
      put_traj(out, m.u);
      if (m.has_v) put_traj(out, m.v);
      break;
    case MsgKind::convergence_flag:
      put_u32(out, m.id);
      put_u32(out, m.epoch);
      put_u32(out, m.q);
      put_u8(out, m.flag ? 1 : 0);
      break;
    case MsgKind::shutdown:
      break;
    case MsgKind::state_update:
      put_f64(out, m.t);
      put_u32(out, static_cast<uint32_t>(m.states.size()));
      for (const auto& [id, x0] : m.states) {
        put_u32(out, id);
        put_u32(out, static_cast<uint32_t>(x0.size()));
        for (int i = 0; i < x0.size(); ++i) put_f64(out, x0(i));
      }
      break;
    case MsgKind::result:
      put_u32(out, m.from);
      put_u32(out, m.q_used);
      put_u8(out, m.flag ? 1 : 0);
      put_f64(out, m.cost);
      put_f64(out, m.solve_ms);
      put_traj(out, m.x);
      put_traj(out, m.u);
      break;
  }
  const size_t frame_len = out.size() - frame_at - 4;  // tag + payload
  if (frame_len > 0xffffffffu) throw std::length_error("message exceeds frame limit");
  out[frame_at + 0] = static_cast<uint8_t>(frame_len);
  out[frame_at + 1] = static_cast<uint8_t>(frame_len >> 8);
  out[frame_at + 2] = static_cast<uint8_t>(frame_len >> 16);
  out[frame_at + 3] = static_cast<uint8_t>(frame_len >> 24);
}

std::vector<uint8_t> encode(const Message& m) {
  std::vector<uint8_t> out;
  encode(m, out);
  return out;
}

DecodeResult decode(const uint8_t* data, size_t len) {
  DecodeResult res;
  if (len < 4) return res;  // need_more
  const uint32_t frame_len = static_cast<uint32_t>(data[0]) |
                             (static_cast<uint32_t>(data[1]) << 8) |
                             (static_cast<uint32_t>(data[2]) << 16) |
                             (static_cast<uint32_t>(data[3]) << 24);
  if (frame_len < 1) {
    res.status = DecodeStatus::length_mismatch;
    res.consumed = 4;
    return res;
  }
  if (len < 4 + static_cast<size_t>(frame_len)) return res;  // need_more
  res.consumed = 4 + static_cast<size_t>(frame_len);

  const uint8_t tag = data[4];
  Reader r{data + 5, frame_len - 1};
  Message& m = res.message;
  switch (tag) {
    case 1:
      m.kind = MsgKind::register_agent;
      m.id = r.u32();
      m.summary = r.str(r.u32());
      break;
    case 2:
      m.kind = MsgKind::deregister_agent;
      m.id = r.u32();
      break;
    case 3:
      m.kind = MsgKind::trigger_step;
      m.epoch = r.u32();
      m.q = r.u32();
      m.step = r.u32();
      break;
    case 4:
      m.kind = MsgKind::ack;
      m.id = r.u32();
      m.epoch = r.u32();
      m.q = r.u32();
      m.step = r.u32();
      break;
    case 5:
    case 6:
    case 7:
      m.kind = static_cast<MsgKind>(tag);
      m.from = r.u32();
      m.to = r.u32();
      m.q = r.u32();
      m.has_v = r.u8() != 0;
      m.x = r.traj();
      m.u = r.traj();
      if (m.has_v) m.v = r.traj();
      break;
    case 8:
      m.kind = MsgKind::convergence_flag;
      m.id = r.u32();
      m.epoch = r.u32();
      m.q = r.u32();
      m.flag = r.u8() != 0;
      break;
    case 9:
      m.kind = MsgKind::shutdown;
      break;
    case 10: {
      m.kind = MsgKind::state_update;
      m.t = r.f64();
      const uint32_t n = r.u32();
      for (uint32_t i = 0; i < n && r.ok; ++i) {
        const uint32_t id = r.u32();
        const uint32_t nx = r.u32();
        if (!r.take(static_cast<size_t>(nx) * 8)) break;
        Eigen::VectorXd x0(nx);
        for (uint32_t c = 0; c < nx; ++c) x0(c) = r.f64();
        m.states.emplace_back(id, std::move(x0));
      }
      break;
    }
    case 11:
      m.kind = MsgKind::result;
      m.from = r.u32();
      m.q_used = r.u32();
      m.flag = r.u8() != 0;
      m.cost = r.f64();
      m.solve_ms = r.f64();
      m.x = r.traj();
      m.u = r.traj();
      break;
    default:
      res.status = DecodeStatus::unknown_tag;
      return res;
  }
  if (!r.ok) {
    res.status = DecodeStatus::truncated;
    return res;
  }
  if (r.left != 0) {
    res.status = DecodeStatus::length_mismatch;
    return res;
  }
  res.status = DecodeStatus::ok;
  return res;
}

std::shared_ptr<InProcessBus::Endpoint> InProcessBus::join(uint32_t id) {
  std::lock_guard<std::mutex> lk(mtx_);
  if (inboxes_.count(id)) throw std::invalid_argument("endpoint id already joined");
  inboxes_[id] = std::make_shared<Inbox>();
  return std::shared_ptr<Endpoint>(new Endpoint(this, id));
}

void InProcessBus::leave(uint32_t id) {
  std::lock_guard<std::mutex> lk(mtx_);
  inboxes_.erase(id);
}

bool InProcessBus::connected(uint32_t id) const {
  std::lock_guard<std::mutex> lk(mtx_);
  return inboxes_.count(id) != 0;
}

std::shared_ptr<InProcessBus::Inbox> InProcessBus::find(uint32_t id) const {
  std::lock_guard<std::mutex> lk(mtx_);
  auto it = inboxes_.find(id);
  return it == inboxes_.end() ? nullptr : it->second;
}

void InProcessBus::push(uint32_t, uint32_t to, Message m) {
  auto box = find(to);
  if (!box) throw std::runtime_error("send to unknown endpoint");
  {
    std::lock_guard<std::mutex> lk(box->mtx);
    box->queue.push_back(std::move(m));
  }
  box->cv.notify_one();
}

bool InProcessBus::pop(uint32_t id, Message& out, int timeout_ms) {
  auto box = find(id);
  if (!box) return false;
  std::unique_lock<std::mutex> lk(box->mtx);
  auto ready = [&] { return !box->queue.empty(); };
  if (timeout_ms < 0) {
    box->cv.wait(lk, ready);
  } else if (!box->cv.wait_for(lk, std::chrono::milliseconds(timeout_ms), ready)) {
    return false;
  }
  out = std::move(box->queue.front());
  box->queue.pop_front();
  return true;
}

size_t InProcessBus::depth(uint32_t id) const {
  auto box = find(id);
  if (!box) return 0;
  std::lock_guard<std::mutex> lk(box->mtx);
  return box->queue.size();
}

void InProcessBus::Endpoint::send(uint32_t to, Message m) { bus_->push(id_, to, std::move(m)); }

bool InProcessBus::Endpoint::recv(Message& out, int timeout_ms) {
  return bus_->pop(id_, out, timeout_ms);
}

size_t InProcessBus::Endpoint::pending() const { return bus_->depth(id_); }

}  // namespace dmpc
