#include "dmpc/tcp.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <cstring>
#include <stdexcept>

namespace dmpc {

namespace {

constexpr uint8_t kHelloTag = 12;

void write_all(int fd, const uint8_t* data, size_t len, std::mutex& mtx) {
  std::lock_guard<std::mutex> lk(mtx);
  size_t off = 0;
  while (off < len) {
    const ssize_t n = ::send(fd, data + off, len - off, MSG_NOSIGNAL);
    if (n <= 0) throw std::runtime_error("tcp write failed");
    off += static_cast<size_t>(n);
  }
}

std::vector<uint8_t> hello_frame(uint32_t id) {
  std::vector<uint8_t> f;
  f.reserve(9);
  const uint32_t len = 5;  // tag + u32 id
  for (int i = 0; i < 4; ++i) f.push_back(static_cast<uint8_t>(len >> (8 * i)));
  f.push_back(kHelloTag);
  for (int i = 0; i < 4; ++i) f.push_back(static_cast<uint8_t>(id >> (8 * i)));
  return f;
}

}  // namespace

TcpEndpoint::TcpEndpoint(uint32_t self_id, uint16_t listen_port) : self_id_(self_id) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw std::runtime_error("socket() failed");
  int yes = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_ANY);
  addr.sin_port = htons(listen_port);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(listen_fd_);
    throw std::runtime_error("bind() failed");
  }
  if (::listen(listen_fd_, 64) != 0) {
    ::close(listen_fd_);
    throw std::runtime_error("listen() failed");
  }
  socklen_t alen = sizeof(addr);
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &alen);
  port_ = ntohs(addr.sin_port);
  acceptor_ = std::thread([this] { accept_loop(); });
}

TcpEndpoint::~TcpEndpoint() { close(); }

void TcpEndpoint::accept_loop() {
  while (!closing_) {
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (closing_) break;
      continue;
    }
    int yes = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &yes, sizeof(yes));
    auto conn = std::make_shared<Conn>();
    conn->fd = fd;
    send_hello(fd);
    {
      std::lock_guard<std::mutex> lk(mtx_);
      conns_.push_back(conn);
    }
    conn->reader = std::thread([this, conn] { reader_loop(conn); });
  }
}

uint32_t TcpEndpoint::connect_to(const std::string& host, uint16_t port) {
  const int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw std::runtime_error("socket() failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd);
    throw std::runtime_error("bad address: " + host);
  }
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd);
    throw std::runtime_error("connect to " + host + " refused");
  }
  int yes = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &yes, sizeof(yes));
  auto conn = std::make_shared<Conn>();
  conn->fd = fd;
  send_hello(fd);
  {
    std::lock_guard<std::mutex> lk(mtx_);
    conns_.push_back(conn);
  }
  conn->reader = std::thread([this, conn] { reader_loop(conn); });

  // the peer's hello names it; wait for the route to appear
  std::unique_lock<std::mutex> lk(mtx_);
  if (!route_cv_.wait_for(lk, std::chrono::seconds(10),
                          [&] { return conn->named || !conn->open; }))
    throw std::runtime_error("hello timeout");
  if (!conn->open) throw std::runtime_error("connection closed during hello");
  return conn->peer;
}

void TcpEndpoint::send_hello(int fd) {
  auto f = hello_frame(self_id_);
  std::mutex tmp;
  write_all(fd, f.data(), f.size(), tmp);
}

void TcpEndpoint::add_route(uint32_t id, const std::shared_ptr<Conn>& c) {
  std::lock_guard<std::mutex> lk(mtx_);
  c->peer = id;
  c->named = true;
  routes_[id] = c;
  route_cv_.notify_all();
}

void TcpEndpoint::reader_loop(std::shared_ptr<Conn> c) {
  std::vector<uint8_t> buf;
  uint8_t chunk[16384];
  while (true) {
    const ssize_t n = ::recv(c->fd, chunk, sizeof(chunk), 0);
    if (n <= 0) break;
    buf.insert(buf.end(), chunk, chunk + n);
    size_t off = 0;
    while (true) {
      // transport hello handled before message decode
      if (buf.size() - off >= 9 && buf[off + 4] == kHelloTag) {
        uint32_t peer = 0;
        for (int i = 0; i < 4; ++i) peer |= static_cast<uint32_t>(buf[off + 5 + i]) << (8 * i);
        add_route(peer, c);
        off += 9;
        continue;
      }
      auto res = decode(buf.data() + off, buf.size() - off);
      if (res.status == DecodeStatus::need_more) break;
      off += res.consumed;
      if (res.status == DecodeStatus::ok) {
        {
          std::lock_guard<std::mutex> lk(inbox_mtx_);
          inbox_.push_back(std::move(res.message));
        }
        inbox_cv_.notify_one();
      } else {
        const char* what = res.status == DecodeStatus::unknown_tag ? "unknown tag"
                           : res.status == DecodeStatus::truncated ? "truncated payload"
                                                                   : "length mismatch";
        note_error(std::string(what) + " from peer " + std::to_string(c->peer));
        if (res.consumed == 0) {  // cannot resync without a frame boundary
          buf.clear();
          off = 0;
          break;
        }
      }
    }
    buf.erase(buf.begin(), buf.begin() + static_cast<long>(off));
  }
  // mid-frame disconnect: leftover bytes are an incomplete frame
  if (!buf.empty() && !closing_)
    note_error("truncated frame from peer " + std::to_string(c->peer));
  c->open = false;
  {
    std::lock_guard<std::mutex> lk(mtx_);
    route_cv_.notify_all();
  }
  if (c->named) {
    bool was_routed = false;
    {
      std::lock_guard<std::mutex> lk(mtx_);
      auto it = routes_.find(c->peer);
      if (it != routes_.end() && it->second == c) {
        routes_.erase(it);
        was_routed = true;
      }
    }
    if (was_routed && !closing_) note_dropped(c->peer);
  }
}

void TcpEndpoint::send(uint32_t to, Message m) {
  std::shared_ptr<Conn> c;
  {
    std::lock_guard<std::mutex> lk(mtx_);
    auto it = routes_.find(to);
    if (it != routes_.end()) c = it->second;
  }
  if (!c || !c->open) throw std::runtime_error("no route to " + std::to_string(to));
  auto bytes = encode(m);
  write_all(c->fd, bytes.data(), bytes.size(), c->write_mtx);
}

bool TcpEndpoint::recv(Message& out, int timeout_ms) {
  std::unique_lock<std::mutex> lk(inbox_mtx_);
  auto ready = [&] { return !inbox_.empty(); };
  if (timeout_ms < 0) {
    inbox_cv_.wait(lk, ready);
  } else if (!inbox_cv_.wait_for(lk, std::chrono::milliseconds(timeout_ms), ready)) {
    return false;
  }
  out = std::move(inbox_.front());
  inbox_.pop_front();
  return true;
}

bool TcpEndpoint::has_route(uint32_t id) const {
  std::lock_guard<std::mutex> lk(mtx_);
  return routes_.count(id) != 0;
}

bool TcpEndpoint::wait_route(uint32_t id, int timeout_ms) {
  std::unique_lock<std::mutex> lk(mtx_);
  return route_cv_.wait_for(lk, std::chrono::milliseconds(timeout_ms),
                            [&] { return routes_.count(id) != 0; });
}

std::vector<uint32_t> TcpEndpoint::take_dropped() {
  std::lock_guard<std::mutex> lk(mtx_);
  auto out = std::move(dropped_);
  dropped_.clear();
  return out;
}

std::vector<std::string> TcpEndpoint::take_errors() {
  std::lock_guard<std::mutex> lk(mtx_);
  auto out = std::move(errors_);
  errors_.clear();
  return out;
}

void TcpEndpoint::note_error(std::string what) {
  std::lock_guard<std::mutex> lk(mtx_);
  errors_.push_back(std::move(what));
}

void TcpEndpoint::note_dropped(uint32_t id) {
  std::lock_guard<std::mutex> lk(mtx_);
  dropped_.push_back(id);
}

void TcpEndpoint::close() {
  if (closing_.exchange(true)) return;
  ::shutdown(listen_fd_, SHUT_RDWR);
  ::close(listen_fd_);
  if (acceptor_.joinable()) acceptor_.join();
  std::vector<std::shared_ptr<Conn>> conns;
  {
    std::lock_guard<std::mutex> lk(mtx_);
    conns = conns_;
  }
  for (auto& c : conns) {
    ::shutdown(c->fd, SHUT_RDWR);
    if (c->reader.joinable()) c->reader.join();
    ::close(c->fd);
  }
  {
    std::lock_guard<std::mutex> lk(mtx_);
    conns_.clear();
    routes_.clear();
  }
}

}  // namespace dmpc
