#pragma once

#include <array>
#include <cstdint>
#include <span>

namespace flowsim::protocol {

inline constexpr int kPacketBits = 40;
inline constexpr int kPacketBytes = kPacketBits / 8;
inline constexpr int kBeaconBits = 8;
inline constexpr std::uint32_t kMaxDeviceId = 127;
inline constexpr std::uint32_t kMaxElapsedMs = 0xFFFFFFFFu;

/// device_id:7 | elapsed_ms:32 | event:1, most significant bit first.
using Payload = std::array<std::uint8_t, kPacketBytes>;

struct ReportPacket {
    std::uint32_t device_id = 0;
    std::uint32_t elapsed_ms = 0;
    bool event_bit = false;

    bool operator==(const ReportPacket&) const = default;
};

struct CirculationState {
    double elapsed_since_reset = 0.0;  // s
    bool event_bit = false;
    bool last_exchange_ok = false;
};

struct EncodedReport {
    ReportPacket packet;
    Payload payload{};
    double tx_energy_pj = 0.0;
};

struct DecodedReport {
    std::uint32_t device_id = 0;
    double elapsed_s = 0.0;
    bool event_bit = false;
};

/// Elapsed seconds to whole milliseconds, saturating at the field width.
std::uint32_t elapsed_to_ms(double elapsed_s);

Payload pack(const ReportPacket& packet);
ReportPacket unpack(const Payload& payload);

EncodedReport encode_report(std::uint32_t device_id, const CirculationState& circulation,
                            double e_tx_pulse_pj = 1.0);
DecodedReport decode_report(std::span<const std::uint8_t> payload);
DecodedReport decode_report(const ReportPacket& packet);

CirculationState exchange_outcome(bool beacon_received, bool response_accepted,
                                  const CirculationState& circulation);

}  // namespace flowsim::protocol
