#include "flowsim/protocol.hpp"

#include <cmath>
#include <string>

#include "flowsim/error.hpp"

namespace flowsim::protocol {

std::uint32_t elapsed_to_ms(double elapsed_s) {
    if (!(elapsed_s >= 0.0)) throw ValidationError("elapsed time must be non-negative");
    const double ms = std::round(elapsed_s * 1000.0);
    if (ms >= static_cast<double>(kMaxElapsedMs)) return kMaxElapsedMs;
    return static_cast<std::uint32_t>(ms);
}

Payload pack(const ReportPacket& packet) {
    if (packet.device_id > kMaxDeviceId) {
        throw ValidationError("device id " + std::to_string(packet.device_id) + " does not fit in 7 bits");
    }
    const std::uint64_t word = (static_cast<std::uint64_t>(packet.device_id) << 33) |
                               (static_cast<std::uint64_t>(packet.elapsed_ms) << 1) |
                               (packet.event_bit ? 1u : 0u);
    Payload out{};
    for (int i = 0; i < kPacketBytes; ++i) {
        out[i] = static_cast<std::uint8_t>(word >> (8 * (kPacketBytes - 1 - i)));
    }
    return out;
}

ReportPacket unpack(const Payload& payload) {
    std::uint64_t word = 0;
    for (auto byte : payload) word = (word << 8) | byte;
    ReportPacket p;
    p.device_id = static_cast<std::uint32_t>(word >> 33);
    p.elapsed_ms = static_cast<std::uint32_t>((word >> 1) & 0xFFFFFFFFu);
    p.event_bit = (word & 1u) != 0;
    return p;
}

EncodedReport encode_report(std::uint32_t device_id, const CirculationState& circulation,
                            double e_tx_pulse_pj) {
    EncodedReport r;
    r.packet = {device_id, elapsed_to_ms(circulation.elapsed_since_reset), circulation.event_bit};
    r.payload = pack(r.packet);
    r.tx_energy_pj = kPacketBits * e_tx_pulse_pj;
    return r;
}

DecodedReport decode_report(const ReportPacket& packet) {
    return {packet.device_id, packet.elapsed_ms / 1000.0, packet.event_bit};
}

DecodedReport decode_report(std::span<const std::uint8_t> payload) {
    if (payload.size() != kPacketBytes) {
        throw ParseError("report payload must be " + std::to_string(kPacketBits) + " bits, got " +
                         std::to_string(payload.size() * 8));
    }
    Payload p{};
    std::copy(payload.begin(), payload.end(), p.begin());
    return decode_report(unpack(p));
}

CirculationState exchange_outcome(bool beacon_received, bool response_accepted,
                                  const CirculationState& circulation) {
    if (beacon_received && response_accepted) return {0.0, false, true};
    CirculationState next = circulation;
    next.last_exchange_ok = false;
    return next;
}

}  // namespace flowsim::protocol
