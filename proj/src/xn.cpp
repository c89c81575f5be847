// SPDX-License-Identifier: Apache-2.0
#include "ilcp/xn.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

namespace ilcp::xn {

namespace {

template <class T>
void put_le(std::vector<std::uint8_t> &out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i)
    out.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <class T>
T get_le(std::span<const std::uint8_t> bytes, std::size_t at) {
  std::uint64_t v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    v |= static_cast<std::uint64_t>(bytes[at + i]) << (8 * i);
  return static_cast<T>(v);
}

constexpr std::size_t kHeaderBytes = 4 + 1 + 4 + 4 + 4 + 8 + 1;

[[noreturn]] void sys_fail(const char *what) { throw Error(std::string("loopback ") + what + ": " + std::strerror(errno)); }

void send_all(int fd, const std::uint8_t *data, std::size_t n) {
  while (n > 0) {
    const auto k = ::send(fd, data, n, MSG_NOSIGNAL);
    if (k <= 0)
      sys_fail("send");
    data += k;
    n -= static_cast<std::size_t>(k);
  }
}

void recv_all(int fd, std::uint8_t *data, std::size_t n) {
  while (n > 0) {
    const auto k = ::recv(fd, data, n, 0);
    if (k <= 0)
      sys_fail("recv");
    data += k;
    n -= static_cast<std::size_t>(k);
  }
}

void send_frame(int fd, std::span<const std::uint8_t> frame) {
  std::vector<std::uint8_t> buf;
  put_le<std::uint32_t>(buf, static_cast<std::uint32_t>(frame.size()));
  buf.insert(buf.end(), frame.begin(), frame.end());
  send_all(fd, buf.data(), buf.size());
}

std::vector<std::uint8_t> recv_frame(int fd) {
  std::array<std::uint8_t, 4> len{};
  recv_all(fd, len.data(), len.size());
  std::vector<std::uint8_t> out(get_le<std::uint32_t>(len, 0));
  recv_all(fd, out.data(), out.size());
  return out;
}

} // namespace

Payload serialize_latent(const Latent &z) {
  Payload out{};
  for (std::size_t i = 0; i < kLatentDim; ++i) {
    if (!std::isfinite(z[i]))
      throw PayloadError("latent component " + std::to_string(i) + " is not finite", static_cast<int>(i));
    const auto bits = std::bit_cast<std::uint32_t>(z[i]);
    for (std::size_t b = 0; b < 4; ++b)
      out[4 * i + b] = static_cast<std::uint8_t>((bits >> (8 * b)) & 0xff);
  }
  return out;
}

Latent deserialize_latent(std::span<const std::uint8_t> bytes) {
  if (bytes.size() != kPayloadBytes)
    throw PayloadError("latent payload must be " + std::to_string(kPayloadBytes) + " bytes, got " +
                       std::to_string(bytes.size()));
  Latent z{};
  for (std::size_t i = 0; i < kLatentDim; ++i) {
    z[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, 4 * i));
    if (!std::isfinite(z[i]))
      throw PayloadError("corrupt payload: slot " + std::to_string(i) + " is not finite", static_cast<int>(i));
  }
  return z;
}

std::vector<std::uint8_t> encode_request(const XnHandoverRequest &r) {
  std::vector<std::uint8_t> out{'X', 'N', 'H', 'O', kEnvelopeVersion};
  out.reserve(kHeaderBytes + kPayloadBytes);
  put_le<std::uint32_t>(out, r.ue.value);
  put_le<std::uint32_t>(out, r.source.value);
  put_le<std::uint32_t>(out, r.target.value);
  put_le<std::uint64_t>(out, static_cast<std::uint64_t>(r.t_star));
  out.push_back(r.latent ? 1 : 0);
  if (r.latent)
    out.insert(out.end(), r.latent->begin(), r.latent->end());
  return out;
}

XnHandoverRequest decode_request(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderBytes)
    throw PayloadError("envelope truncated: " + std::to_string(bytes.size()) + " bytes");
  if (std::memcmp(bytes.data(), "XNHO", 4) != 0)
    throw PayloadError("envelope has bad magic");
  if (bytes[4] != kEnvelopeVersion)
    throw PayloadError("unsupported envelope version " + std::to_string(bytes[4]));
  XnHandoverRequest r;
  r.ue = UeId(get_le<std::uint32_t>(bytes, 5));
  r.source = CellId(get_le<std::uint32_t>(bytes, 9));
  r.target = CellId(get_le<std::uint32_t>(bytes, 13));
  r.t_star = static_cast<Step>(get_le<std::uint64_t>(bytes, 17));
  const auto has_latent = bytes[25];
  if (has_latent > 1)
    throw PayloadError("envelope has_latent flag must be 0 or 1");
  const std::size_t expected = kHeaderBytes + (has_latent ? kPayloadBytes : 0);
  if (bytes.size() != expected)
    throw PayloadError("envelope length " + std::to_string(bytes.size()) + ", expected " + std::to_string(expected));
  if (has_latent) {
    Payload p{};
    std::copy(bytes.begin() + kHeaderBytes, bytes.end(), p.begin());
    deserialize_latent(p); // validates
    r.latent = p;
  }
  return r;
}

LoopbackChannel::LoopbackChannel(std::uint16_t port) {
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0)
    sys_fail("socket");
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::bind(listen_fd_, reinterpret_cast<sockaddr *>(&addr), sizeof(addr)) < 0 || ::listen(listen_fd_, 1) < 0) {
    ::close(listen_fd_);
    sys_fail("bind/listen");
  }
  socklen_t len = sizeof(addr);
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr *>(&addr), &len);
  port_ = ntohs(addr.sin_port);

  client_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (client_fd_ < 0 || ::connect(client_fd_, reinterpret_cast<sockaddr *>(&addr), sizeof(addr)) < 0) {
    ::close(listen_fd_);
    sys_fail("connect");
  }
  server_fd_ = ::accept(listen_fd_, nullptr, nullptr);
  if (server_fd_ < 0) {
    ::close(client_fd_);
    ::close(listen_fd_);
    sys_fail("accept");
  }
  ::setsockopt(client_fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  ::setsockopt(server_fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

LoopbackChannel::~LoopbackChannel() {
  for (int fd : {server_fd_, client_fd_, listen_fd_})
    if (fd >= 0)
      ::close(fd);
}

std::vector<std::uint8_t> LoopbackChannel::round_trip(std::span<const std::uint8_t> frame) {
  send_frame(client_fd_, frame);
  return recv_frame(server_fd_);
}

TransferResult transfer(const XnHandoverRequest &request, double budget_ms, LoopbackChannel *channel) {
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  auto wire = encode_request(request);
  if (channel != nullptr)
    wire = channel->round_trip(wire);
  TransferResult out;
  out.delivered = decode_request(wire);
  out.latency_ms = std::chrono::duration<double, std::milli>(clock::now() - start).count();
  out.over_budget = out.latency_ms > budget_ms;
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty())
    throw Error("percentile of an empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

LatencyStats summarize_latency(const std::vector<double> &samples) {
  LatencyStats s;
  s.n = samples.size();
  if (samples.empty())
    return s;
  s.mean_ms = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(samples.size());
  s.p50_ms = percentile(samples, 50.0);
  s.p95_ms = percentile(samples, 95.0);
  s.p99_ms = percentile(samples, 99.0);
  s.max_ms = *std::max_element(samples.begin(), samples.end());
  return s;
}

} // namespace ilcp::xn
