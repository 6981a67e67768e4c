#include "flowsim/power.hpp"

#include <algorithm>

#include "flowsim/error.hpp"

namespace flowsim::power {

void PowerParams::validate() const {
    if (!(generator_voltage_v > 0.0)) throw ConfigError("power: generator voltage must be positive");
    if (!(e_max_pj > 0.0)) throw ConfigError("power: e_max must be positive");
    if (!(cycle_s > 0.0)) throw ConfigError("power: cycle must be positive");
    if (!(charge_per_cycle_pc > 0.0)) throw ConfigError("power: charge per cycle must be positive");
    if (e_tx_pulse_pj < 0.0 || e_rx_pulse_pj < 0.0 || e_sense_pj < 0.0) {
        throw ConfigError("power: energy costs must be non-negative");
    }
    if (turn_off_pj < 0.0 || turn_on_pj < turn_off_pj || turn_on_pj > e_max_pj) {
        throw ConfigError("power: thresholds must satisfy 0 <= turn_off <= turn_on <= e_max");
    }
}

EnergyState refresh_power_state(const EnergyState& state, const PowerParams& params) {
    EnergyState next = state;
    if (!state.powered && state.energy >= Energy::from_pj(params.turn_on_pj)) next.powered = true;
    if (state.powered && state.energy <= Energy::from_pj(params.turn_off_pj)) next.powered = false;
    return next;
}

EnergyState harvest_step(const EnergyState& state, const PowerParams& params) {
    const Energy cap = Energy::from_pj(params.e_max_pj);
    EnergyState next = state;
    if (next.energy < cap) {
        const double headroom = static_cast<double>((cap - next.energy).attojoules());
        const auto gain = static_cast<std::int64_t>(std::llround(headroom * params.cycle_gain()));
        next.energy = std::min(cap, next.energy + Energy::from_attojoules(gain));
    }
    return refresh_power_state(next, params);
}

std::pair<EnergyState, bool> consume(const EnergyState& state, Energy cost, const PowerParams& params) {
    if (cost < Energy{}) throw ConfigError("consume: negative cost");
    EnergyState next = state;
    bool performed = false;
    if (state.powered && state.energy >= cost) {
        next.energy -= cost;
        performed = true;
    }
    return {refresh_power_state(next, params), performed};
}

std::pair<EnergyState, bool> consume(const EnergyState& state, double cost_pj, const PowerParams& params) {
    if (cost_pj < 0.0) throw ConfigError("consume: negative cost");
    return consume(state, Energy::from_pj(cost_pj), params);
}

}  // namespace flowsim::power
