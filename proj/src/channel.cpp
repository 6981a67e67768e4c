#include "flowsim/channel.hpp"

#include <cmath>
#include <numbers>

#include "flowsim/error.hpp"

namespace flowsim::channel {

void ChannelParams::validate() const {
    if (!(frequency_hz > 0.0)) throw ConfigError("channel: frequency must be positive");
    if (!(bandwidth_hz > 0.0)) throw ConfigError("channel: bandwidth must be positive");
    if (!(sensitivity_dbm < tx_power_dbm)) throw ConfigError("channel: sensitivity must be below tx power");
    if (layers.empty()) {
        if (!(attenuation_db_per_mm > 0.0)) throw ConfigError("channel: attenuation must be positive");
    } else {
        for (const auto& l : layers) {
            if (!(l.attenuation_db_per_mm > 0.0) || !(l.thickness_mm >= 0.0)) {
                throw ConfigError("channel: layer '" + l.name + "' needs positive attenuation and non-negative thickness");
            }
        }
    }
}

std::string_view to_string(Reason reason) {
    switch (reason) {
        case Reason::accepted: return "accepted";
        case Reason::below_sensitivity: return "below_sensitivity";
        case Reason::collision: return "collision";
        case Reason::doppler: return "doppler";
    }
    return "unknown";
}

double dbm_to_mw(double dbm) { return std::pow(10.0, dbm / 10.0); }
double mw_to_dbm(double mw) { return 10.0 * std::log10(mw); }

LinkBudget path_loss_db(double distance_m, const ChannelParams& params) {
    if (!(distance_m > 0.0)) throw ConfigError("path_loss_db: distance must be positive");
    LinkBudget b;
    b.distance_m = distance_m;
    b.spreading_loss_db =
        20.0 * std::log10(4.0 * std::numbers::pi * distance_m * params.frequency_hz / kSpeedOfLight);
    const double mm = distance_m * 1000.0;
    if (params.layers.empty()) {
        b.medium_loss_db = params.attenuation_db_per_mm * mm;
    } else {
        double remaining = mm;
        for (const auto& layer : params.layers) {
            const double crossed = std::min(layer.thickness_mm, remaining);
            b.medium_loss_db += layer.attenuation_db_per_mm * crossed;
            remaining -= crossed;
            if (remaining <= 0.0) break;
        }
        if (remaining > 0.0) b.medium_loss_db += params.layers.back().attenuation_db_per_mm * remaining;
    }
    b.received_power_dbm = params.tx_power_dbm - b.spreading_loss_db - b.medium_loss_db;
    return b;
}

double doppler_shift_hz(double relative_speed_m_s, const ChannelParams& params) {
    return params.frequency_hz * relative_speed_m_s / kSpeedOfLight;
}

Decision receive_decision(const LinkBudget& candidate, std::span<const LinkBudget> interferers,
                          const ChannelParams& params) {
    Decision d;
    double denom = dbm_to_mw(params.noise_floor_dbm);
    for (const auto& i : interferers) denom += dbm_to_mw(i.received_power_dbm);
    d.sinr_db = candidate.received_power_dbm - mw_to_dbm(denom);

    if (candidate.received_power_dbm < params.sensitivity_dbm) {
        d.reason = Reason::below_sensitivity;
    } else if (d.sinr_db < params.sinr_threshold_db) {
        d.reason = Reason::collision;
    } else if (std::abs(candidate.doppler_shift_hz) > params.bandwidth_hz / 2.0) {
        d.reason = Reason::doppler;
    } else {
        d.accepted = true;
        d.reason = Reason::accepted;
    }
    return d;
}

double communication_range_m(const ChannelParams& params) {
    auto margin = [&](double d) {
        return path_loss_db(d, params).received_power_dbm - params.sensitivity_dbm;
    };
    double lo = 1e-9;
    double hi = 1e-3;
    if (margin(lo) < 0.0) return 0.0;
    while (margin(hi) >= 0.0) {
        lo = hi;
        hi *= 2.0;
        if (hi > 1e6) throw NumericError("communication_range_m: link budget never closes");
    }
    for (int i = 0; i < 200 && hi - lo > 1e-15; ++i) {
        const double mid = 0.5 * (lo + hi);
        (margin(mid) >= 0.0 ? lo : hi) = mid;
    }
    return lo;
}

}  // namespace flowsim::channel
