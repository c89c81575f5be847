// SPDX-License-Identifier: Apache-2.0
//
// Latent payload codec and the Xn HANDOVER REQUEST envelope.
//
// Envelope: "XNHO", u8 version, u32 ue, u32 source, u32 target, u64 t_star,
// u8 has_latent, then the 128-byte payload when has_latent = 1. All integers
// little-endian.
#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "ilcp/common.hpp"

namespace ilcp::xn {

inline constexpr std::size_t kLatentDim = 32;
inline constexpr std::size_t kPayloadBytes = kLatentDim * sizeof(float);
inline constexpr std::uint8_t kEnvelopeVersion = 1;

using Latent = std::array<float, kLatentDim>;
using Payload = std::array<std::uint8_t, kPayloadBytes>;

class PayloadError : public Error {
public:
  PayloadError(const std::string &what, int slot = -1) : Error(what), slot_(slot) {}
  /// Offending component, or -1 for framing errors.
  int slot() const { return slot_; }

private:
  int slot_;
};

Payload serialize_latent(const Latent &z);
Latent deserialize_latent(std::span<const std::uint8_t> bytes);

struct XnHandoverRequest {
  UeId ue;
  CellId source;
  CellId target;
  Step t_star = 0;
  std::optional<Payload> latent;

  bool operator==(const XnHandoverRequest &) const = default;
};

std::vector<std::uint8_t> encode_request(const XnHandoverRequest &request);
XnHandoverRequest decode_request(std::span<const std::uint8_t> bytes);

/// Length-prefixed frames over a connected pair of TCP sockets on 127.0.0.1.
class LoopbackChannel {
public:
  /// Port 0 picks an ephemeral port.
  explicit LoopbackChannel(std::uint16_t port = 0);
  ~LoopbackChannel();
  LoopbackChannel(const LoopbackChannel &) = delete;
  LoopbackChannel &operator=(const LoopbackChannel &) = delete;

  std::uint16_t port() const { return port_; }
  std::vector<std::uint8_t> round_trip(std::span<const std::uint8_t> frame);

private:
  int listen_fd_ = -1;
  int client_fd_ = -1;
  int server_fd_ = -1;
  std::uint16_t port_ = 0;
};

struct TransferResult {
  XnHandoverRequest delivered;
  double latency_ms = 0.0;
  bool over_budget = false;
};

/// Encodes, delivers (in-process when `channel` is null) and decodes.
TransferResult transfer(const XnHandoverRequest &request, double budget_ms, LoopbackChannel *channel = nullptr);

struct LatencyStats {
  std::size_t n = 0;
  double mean_ms = 0.0;
  double p50_ms = 0.0;
  double p95_ms = 0.0;
  double p99_ms = 0.0;
  double max_ms = 0.0;
};

/// Linear-interpolated percentile, q in [0, 100].
double percentile(std::vector<double> values, double q);
LatencyStats summarize_latency(const std::vector<double> &samples_ms);

} // namespace ilcp::xn
