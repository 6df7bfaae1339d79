#pragma once

// Datagram protocol between recorder, processing server and actuator.
//
// Every datagram is a 4-byte header followed by a fixed little-endian
// payload for its type:
//
//   off  size  field
//   0    1     magic 0x46 ('F')
//   1    1     magic 0x4E ('N')
//   2    1     version (1)
//   3    1     type
//
//   type 1 Init         u8 channel_count, f64 calib_duration_s          (9)
//   type 2 Command      u8 command: 1 run, 2 pause, 3 stop              (1)
//   type 3 CalibReport  f64 i0[c][w] x4, f64 ambient[c][w] x4           (64)
//                       order: (deep,w1) (deep,w2) (sup,w1) (sup,w2)
//   type 4 DataFrame    u64 t_index, u8 channel, f64 w1, f64 w2         (25)
//   type 5 Stress       u64 t_index, u8 level                           (9)
//
// A datagram must be exactly header + payload long.

#include <array>
#include <bit>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <variant>
#include <vector>

#include "nirsfb/error.hpp"
#include "nirsfb/hemodynamics.hpp"

namespace nirsfb::wire {

inline constexpr std::uint8_t kMagic0 = 0x46;
inline constexpr std::uint8_t kMagic1 = 0x4E;
inline constexpr std::uint8_t kVersion = 1;
inline constexpr std::size_t kHeaderSize = 4;

enum class PacketType : std::uint8_t { Init = 1, Command = 2, CalibReport = 3, DataFrame = 4, Stress = 5 };

enum class CommandKind : std::uint8_t { Run = 1, Pause = 2, Stop = 3 };

constexpr std::string_view to_string(CommandKind c) noexcept {
  switch (c) {
    case CommandKind::Run: return "run";
    case CommandKind::Pause: return "pause";
    case CommandKind::Stop: return "stop";
  }
  return "unknown";
}

struct InitPacket {
  std::uint8_t channel_count = 2;
  double calib_duration_s = 5.0;
  friend bool operator==(const InitPacket&, const InitPacket&) = default;
};

struct CommandPacket {
  CommandKind command = CommandKind::Run;
  friend bool operator==(const CommandPacket&, const CommandPacket&) = default;
};

struct CalibReportPacket {
  CalibrationBaseline baseline;
  friend bool operator==(const CalibReportPacket&, const CalibReportPacket&) = default;
};

struct DataFramePacket {
  std::uint64_t t_index = 0;
  Channel channel = Channel::Deep;
  std::array<double, kWavelengthCount> intensity{};
  friend bool operator==(const DataFramePacket&, const DataFramePacket&) = default;
};

struct StressPacket {
  std::uint64_t t_index = 0;
  std::uint8_t level = 0;
  friend bool operator==(const StressPacket&, const StressPacket&) = default;
};

using Packet = std::variant<InitPacket, CommandPacket, CalibReportPacket, DataFramePacket, StressPacket>;

constexpr std::size_t payload_size(PacketType t) noexcept {
  switch (t) {
    case PacketType::Init: return 9;
    case PacketType::Command: return 1;
    case PacketType::CalibReport: return 64;
    case PacketType::DataFrame: return 25;
    case PacketType::Stress: return 9;
  }
  return 0;
}

constexpr PacketType type_of(const Packet& p) noexcept { return static_cast<PacketType>(p.index() + 1); }

namespace detail {

class Writer {
 public:
  explicit Writer(std::vector<std::uint8_t>& out) : out_(out) {}
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

 private:
  std::vector<std::uint8_t>& out_;
};

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> in) : in_(in) {}
  std::uint8_t u8() { return in_[pos_++]; }
  std::uint64_t u64() {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(in_[pos_++]) << (8 * i);
    return v;
  }
  double f64() { return std::bit_cast<double>(u64()); }

 private:
  std::span<const std::uint8_t> in_;
  std::size_t pos_ = 0;
};

inline Channel checked_channel(std::uint8_t v) {
  if (v >= kChannelCount) throw Error(ErrorCode::InvalidField, "channel id out of range");
  return static_cast<Channel>(v);
}

inline CommandKind checked_command(std::uint8_t v) {
  if (v < 1 || v > 3) throw Error(ErrorCode::InvalidField, "unknown command");
  return static_cast<CommandKind>(v);
}

inline std::uint8_t checked_level(std::uint8_t v) {
  if (v > 1) throw Error(ErrorCode::InvalidField, "stress level must be 0 or 1");
  return v;
}

inline std::uint8_t checked_channel_count(std::uint8_t v) {
  if (v < 1 || v > kChannelCount) throw Error(ErrorCode::InvalidField, "channel count must be 1 or 2");
  return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode(const Packet& p) {
  std::vector<std::uint8_t> out;
  const auto type = type_of(p);
  out.reserve(kHeaderSize + payload_size(type));
  detail::Writer w(out);
  w.u8(kMagic0);
  w.u8(kMagic1);
  w.u8(kVersion);
  w.u8(static_cast<std::uint8_t>(type));

  std::visit(
      [&](const auto& pkt) {
        using T = std::decay_t<decltype(pkt)>;
        if constexpr (std::is_same_v<T, InitPacket>) {
          w.u8(detail::checked_channel_count(pkt.channel_count));
          w.f64(pkt.calib_duration_s);
        } else if constexpr (std::is_same_v<T, CommandPacket>) {
          w.u8(static_cast<std::uint8_t>(detail::checked_command(static_cast<std::uint8_t>(pkt.command))));
        } else if constexpr (std::is_same_v<T, CalibReportPacket>) {
          for (const auto& row : pkt.baseline.i0)
            for (double v : row) w.f64(v);
          for (const auto& row : pkt.baseline.ambient)
            for (double v : row) w.f64(v);
        } else if constexpr (std::is_same_v<T, DataFramePacket>) {
          w.u64(pkt.t_index);
          w.u8(static_cast<std::uint8_t>(detail::checked_channel(static_cast<std::uint8_t>(pkt.channel))));
          w.f64(pkt.intensity[0]);
          w.f64(pkt.intensity[1]);
        } else {
          w.u64(pkt.t_index);
          w.u8(detail::checked_level(pkt.level));
        }
      },
      p);
  return out;
}

inline Packet decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < kHeaderSize) throw Error(ErrorCode::TruncatedPayload, "datagram shorter than header");
  if (bytes[0] != kMagic0 || bytes[1] != kMagic1) throw Error(ErrorCode::BadMagic, "bad magic");
  if (bytes[2] != kVersion) throw Error(ErrorCode::BadVersion, "unsupported protocol version");
  const auto raw_type = bytes[3];
  if (raw_type < 1 || raw_type > 5) throw Error(ErrorCode::UnknownType, "unknown packet type " + std::to_string(raw_type));
  const auto type = static_cast<PacketType>(raw_type);
  const auto need = kHeaderSize + payload_size(type);
  if (bytes.size() < need) throw Error(ErrorCode::TruncatedPayload, "payload too short");
  if (bytes.size() > need) throw Error(ErrorCode::OversizedPayload, "trailing bytes after payload");

  detail::Reader r(bytes.subspan(kHeaderSize));
  switch (type) {
    case PacketType::Init: {
      InitPacket p;
      p.channel_count = detail::checked_channel_count(r.u8());
      p.calib_duration_s = r.f64();
      return p;
    }
    case PacketType::Command:
      return CommandPacket{detail::checked_command(r.u8())};
    case PacketType::CalibReport: {
      CalibReportPacket p;
      for (auto& row : p.baseline.i0)
        for (double& v : row) v = r.f64();
      for (auto& row : p.baseline.ambient)
        for (double& v : row) v = r.f64();
      return p;
    }
    case PacketType::DataFrame: {
      DataFramePacket p;
      p.t_index = r.u64();
      p.channel = detail::checked_channel(r.u8());
      p.intensity[0] = r.f64();
      p.intensity[1] = r.f64();
      return p;
    }
    case PacketType::Stress: {
      StressPacket p;
      p.t_index = r.u64();
      p.level = detail::checked_level(r.u8());
      return p;
    }
  }
  throw Error(ErrorCode::UnknownType, "unreachable packet type");
}

/// Vibration device state. The motor follows the last received level, but
/// only after `debounce_m` consecutive packets disagree with the current
/// state, which swallows isolated classification spikes. Packets whose
/// t_index is not newer than the last accepted one are ignored.
struct ActuatorState {
  bool vibration_on = false;
  std::uint32_t debounce_m = 3;
  std::uint32_t opposite_run = 0;
  std::optional<std::uint64_t> last_packet_t_index;
};

/// Returns the vibration state after applying `p`.
inline bool actuator_apply(ActuatorState& state, const StressPacket& p) {
  if (state.last_packet_t_index && p.t_index <= *state.last_packet_t_index) return state.vibration_on;
  state.last_packet_t_index = p.t_index;
  const bool wants_on = p.level == 1;
  if (wants_on == state.vibration_on) {
    state.opposite_run = 0;
    return state.vibration_on;
  }
  if (++state.opposite_run >= std::max<std::uint32_t>(1, state.debounce_m)) {
    state.vibration_on = wants_on;
    state.opposite_run = 0;
  }
  return state.vibration_on;
}

}  // namespace nirsfb::wire
