#pragma once

// Datagram transports. Both implementations keep datagram boundaries and
// make no delivery guarantees beyond what the medium gives.

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "nirsfb/error.hpp"

namespace nirsfb {

using Datagram = std::vector<std::uint8_t>;

class Transport {
 public:
  virtual ~Transport() = default;
  virtual void send(std::span<const std::uint8_t> datagram) = 0;
  /// Waits up to `timeout` for one datagram; zero timeout polls.
  virtual std::optional<Datagram> receive(std::chrono::milliseconds timeout) = 0;
};

/// In-process datagram fabric keyed by port number.
class LoopbackBus {
 public:
  void deliver(std::uint16_t port, Datagram d) {
    {
      std::lock_guard lock(mutex_);
      queues_[port].push_back(std::move(d));
    }
    cv_.notify_all();
  }

  std::optional<Datagram> take(std::uint16_t port, std::chrono::milliseconds timeout) {
    std::unique_lock lock(mutex_);
    auto ready = [&] { return !queues_[port].empty(); };
    if (timeout.count() > 0) {
      cv_.wait_for(lock, timeout, ready);
    }
    auto& q = queues_[port];
    if (q.empty()) return std::nullopt;
    Datagram d = std::move(q.front());
    q.pop_front();
    return d;
  }

 private:
  std::mutex mutex_;
  std::condition_variable cv_;
  std::map<std::uint16_t, std::deque<Datagram>> queues_;
};

class LoopbackTransport final : public Transport {
 public:
  LoopbackTransport(std::shared_ptr<LoopbackBus> bus, std::uint16_t local_port, std::uint16_t remote_port)
      : bus_(std::move(bus)), local_(local_port), remote_(remote_port) {}

  void send(std::span<const std::uint8_t> datagram) override {
    bus_->deliver(remote_, Datagram(datagram.begin(), datagram.end()));
  }

  std::optional<Datagram> receive(std::chrono::milliseconds timeout) override { return bus_->take(local_, timeout); }

 private:
  std::shared_ptr<LoopbackBus> bus_;
  std::uint16_t local_;
  std::uint16_t remote_;
};

/// Drops outgoing datagrams i.i.d. with a fixed probability.
class LossyTransport final : public Transport {
 public:
  LossyTransport(Transport& inner, double loss, std::uint64_t seed) : inner_(inner), loss_(loss), rng_(seed) {}

  void send(std::span<const std::uint8_t> datagram) override {
    if (uniform_(rng_) < loss_) {
      ++dropped_;
      return;
    }
    inner_.send(datagram);
  }

  std::optional<Datagram> receive(std::chrono::milliseconds timeout) override { return inner_.receive(timeout); }

  [[nodiscard]] std::uint64_t dropped() const noexcept { return dropped_; }

 private:
  Transport& inner_;
  double loss_;
  std::mt19937_64 rng_;
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
  std::uint64_t dropped_ = 0;
};

/// UDP socket bound to `local_port` (0 = ephemeral) that sends to a fixed
/// remote endpoint.
class UdpTransport final : public Transport {
 public:
  static constexpr std::size_t kMaxDatagram = 1500;

  UdpTransport(std::uint16_t local_port, const std::string& remote_host, std::uint16_t remote_port) {
    fd_ = ::socket(AF_INET, SOCK_DGRAM, 0);
    if (fd_ < 0) throw Error(ErrorCode::TransportFailure, std::string("socket: ") + std::strerror(errno));

    sockaddr_in local{};
    local.sin_family = AF_INET;
    local.sin_addr.s_addr = htonl(INADDR_ANY);
    local.sin_port = htons(local_port);
    if (::bind(fd_, reinterpret_cast<const sockaddr*>(&local), sizeof(local)) != 0) {
      const std::string msg = std::strerror(errno);
      ::close(fd_);
      throw Error(ErrorCode::TransportFailure, "bind port " + std::to_string(local_port) + ": " + msg);
    }

    remote_.sin_family = AF_INET;
    remote_.sin_port = htons(remote_port);
    if (::inet_pton(AF_INET, remote_host.c_str(), &remote_.sin_addr) != 1) {
      addrinfo hints{};
      hints.ai_family = AF_INET;
      hints.ai_socktype = SOCK_DGRAM;
      addrinfo* res = nullptr;
      if (::getaddrinfo(remote_host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) {
        ::close(fd_);
        throw Error(ErrorCode::TransportFailure, "cannot resolve " + remote_host);
      }
      remote_.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
      ::freeaddrinfo(res);
    }
  }

  UdpTransport(const UdpTransport&) = delete;
  UdpTransport& operator=(const UdpTransport&) = delete;

  ~UdpTransport() override {
    if (fd_ >= 0) ::close(fd_);
  }

  void send(std::span<const std::uint8_t> datagram) override {
    const auto n = ::sendto(fd_, datagram.data(), datagram.size(), 0, reinterpret_cast<const sockaddr*>(&remote_),
                            sizeof(remote_));
    if (n < 0) throw Error(ErrorCode::TransportFailure, std::string("sendto: ") + std::strerror(errno));
  }

  std::optional<Datagram> receive(std::chrono::milliseconds timeout) override {
    pollfd pfd{fd_, POLLIN, 0};
    const int ready = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
    if (ready < 0) {
      if (errno == EINTR) return std::nullopt;
      throw Error(ErrorCode::TransportFailure, std::string("poll: ") + std::strerror(errno));
    }
    if (ready == 0) return std::nullopt;
    Datagram buf(kMaxDatagram);
    const auto n = ::recvfrom(fd_, buf.data(), buf.size(), 0, nullptr, nullptr);
    if (n < 0) throw Error(ErrorCode::TransportFailure, std::string("recvfrom: ") + std::strerror(errno));
    buf.resize(static_cast<std::size_t>(n));
    return buf;
  }

  /// Port actually bound (useful with local_port = 0).
  [[nodiscard]] std::uint16_t local_port() const {
    sockaddr_in addr{};
    socklen_t len = sizeof(addr);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    return ntohs(addr.sin_port);
  }

 private:
  int fd_ = -1;
  sockaddr_in remote_{};
};

}  // namespace nirsfb
