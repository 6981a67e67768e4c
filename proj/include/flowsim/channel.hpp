#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace flowsim::channel {

inline constexpr double kSpeedOfLight = 299792458.0;  // m/s

struct MediumLayer {
    std::string name;
    double attenuation_db_per_mm = 0.0;
    double thickness_mm = 0.0;
};

/// Radio parameters. When `layers` is empty the bulk attenuation applies to
/// the whole path; otherwise layers are crossed in order and any remaining
/// distance uses the last layer's attenuation.
struct ChannelParams {
    double frequency_hz = 1e12;
    double bandwidth_hz = 10e9;
    double tx_power_dbm = -20.0;
    double sensitivity_dbm = -110.0;
    double sinr_threshold_db = 10.0;
    // Noise sits one SINR threshold below the sensitivity, so a lone
    // signal at the sensitivity level is exactly decodable.
    double noise_floor_dbm = -120.0;
    double attenuation_db_per_mm = 1.5;
    std::vector<MediumLayer> layers;

    void validate() const;
};

struct LinkBudget {
    double distance_m = 0.0;
    double spreading_loss_db = 0.0;
    double medium_loss_db = 0.0;
    double received_power_dbm = 0.0;
    double doppler_shift_hz = 0.0;
};

enum class Reason { accepted, below_sensitivity, collision, doppler };

std::string_view to_string(Reason reason);

struct Decision {
    bool accepted = false;
    Reason reason = Reason::accepted;
    double sinr_db = 0.0;
};

LinkBudget path_loss_db(double distance_m, const ChannelParams& params);

/// Signed frequency offset, positive when the ends approach each other.
double doppler_shift_hz(double relative_speed_m_s, const ChannelParams& params);

Decision receive_decision(const LinkBudget& candidate, std::span<const LinkBudget> interferers,
                          const ChannelParams& params);

/// Largest distance (m) at which received power still meets the
/// sensitivity, found by bisection on path_loss_db.
double communication_range_m(const ChannelParams& params);

double dbm_to_mw(double dbm);
double mw_to_dbm(double mw);

}  // namespace flowsim::channel
