#pragma once

#include <cmath>
#include <cstdint>
#include <utility>

namespace flowsim::power {

/// Stored energy, kept as an integer count of attojoules so that ledgers
/// of harvested and consumed energy balance exactly.
class Energy {
public:
    static constexpr double kAttojoulesPerPicojoule = 1e6;

    constexpr Energy() = default;
    static constexpr Energy from_attojoules(std::int64_t aj) { return Energy(aj); }
    static Energy from_pj(double pj) {
        return Energy(static_cast<std::int64_t>(std::llround(pj * kAttojoulesPerPicojoule)));
    }

    constexpr std::int64_t attojoules() const { return aj_; }
    constexpr double pj() const { return static_cast<double>(aj_) / kAttojoulesPerPicojoule; }

    constexpr Energy operator+(Energy o) const { return Energy(aj_ + o.aj_); }
    constexpr Energy operator-(Energy o) const { return Energy(aj_ - o.aj_); }
    constexpr Energy& operator+=(Energy o) { aj_ += o.aj_; return *this; }
    constexpr Energy& operator-=(Energy o) { aj_ -= o.aj_; return *this; }
    constexpr auto operator<=>(const Energy&) const = default;

private:
    constexpr explicit Energy(std::int64_t aj) : aj_(aj) {}
    std::int64_t aj_ = 0;
};

/// Capacitor and harvester parameters. Defaults are the reference values.
struct PowerParams {
    double generator_voltage_v = 0.42;
    double e_rx_pulse_pj = 0.0;
    double e_tx_pulse_pj = 1.0;
    double e_max_pj = 800.0;
    double turn_on_pj = 10.0;
    double turn_off_pj = 0.0;
    double cycle_s = 0.02;
    double charge_per_cycle_pc = 6.0;
    double e_sense_pj = 1.0;

    /// Charging time constant: the exponential's initial slope equals one
    /// cycle's charge times the generator voltage.
    double tau_s() const {
        return e_max_pj * cycle_s / (charge_per_cycle_pc * generator_voltage_v);
    }
    /// Fraction of the remaining headroom gained per cycle.
    double cycle_gain() const { return -std::expm1(-cycle_s / tau_s()); }

    void validate() const;
};

struct EnergyState {
    Energy energy;
    bool powered = false;

    bool operator==(const EnergyState&) const = default;
};

/// Applies the turn-ON/turn-OFF hysteresis. Idempotent.
EnergyState refresh_power_state(const EnergyState& state, const PowerParams& params);

/// One harvesting cycle of exponential charging towards e_max.
EnergyState harvest_step(const EnergyState& state, const PowerParams& params);

/// Spends `cost` if the device is powered and can cover it entirely.
/// Returns the new state and whether the task was performed.
std::pair<EnergyState, bool> consume(const EnergyState& state, Energy cost,
                                     const PowerParams& params);
std::pair<EnergyState, bool> consume(const EnergyState& state, double cost_pj,
                                     const PowerParams& params);

}  // namespace flowsim::power
