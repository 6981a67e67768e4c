#include "flowsim/mobility.hpp"

#include <algorithm>

#include "flowsim/error.hpp"

namespace flowsim::mobility {

namespace {

std::size_t pick_from_cdf(std::span<const double> cdf, double u) {
    auto it = std::upper_bound(cdf.begin(), cdf.end(), u);
    if (it == cdf.end()) --it;
    return static_cast<std::size_t>(it - cdf.begin());
}

}  // namespace

DevicePosition make_position(const topology::VascularTopology& topology, std::size_t segment,
                             double offset) {
    const double len = topology.geometry(segment).length;
    offset = std::clamp(offset, 0.0, len);
    return {segment, offset, topology.point_at(segment, offset)};
}

std::size_t choose_branch(std::span<const double> weights, RandomStream& rng) {
    if (weights.empty()) throw ValidationError("choose_branch: empty successor list");
    std::vector<double> cdf(weights.size());
    double total = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
        if (!(weights[i] >= 0.0)) throw ValidationError("choose_branch: negative weight");
        total += weights[i];
        cdf[i] = total;
    }
    if (!(total > 0.0)) throw ValidationError("choose_branch: weights sum to zero");
    for (auto& c : cdf) c /= total;
    cdf.back() = 1.0;
    return pick_from_cdf(cdf, rng.uniform());
}

const std::string& choose_branch(std::span<const topology::Successor> successors,
                                 RandomStream& rng) {
    std::vector<double> w;
    w.reserve(successors.size());
    for (const auto& s : successors) w.push_back(s.weight);
    return successors[choose_branch(w, rng)].segment;
}

AdvanceResult advance_device(const DevicePosition& position, double dt,
                             const topology::VascularTopology& topology, RandomStream& rng,
                             std::vector<Leg>* legs) {
    using topology::VesselKind;
    if (!(dt > 0.0)) throw ConfigError("advance_device: dt must be positive");

    AdvanceResult result;
    std::size_t seg = position.segment;
    double offset = position.offset;
    double remaining = dt;
    result.crossed_heart = topology.segment(seg).kind == VesselKind::heart;

    while (remaining > 0.0) {
        const auto& geo = topology.geometry(seg);
        const double speed = topology.segment(seg).speed;
        const double to_end = geo.length - offset;
        const double time_to_end = to_end / speed;
        if (time_to_end > remaining) {
            const double d = speed * remaining;
            offset += d;
            if (legs) legs->push_back({seg, d, remaining});
            remaining = 0.0;
            break;
        }
        if (legs) legs->push_back({seg, to_end, time_to_end});
        remaining -= time_to_end;
        if (geo.successor_index.empty()) {
            throw ValidationError("advance_device: dead-end segment '" + topology.segment(seg).id + "'");
        }
        seg = geo.successor_index[pick_from_cdf(geo.successor_cdf, rng.uniform())];
        offset = 0.0;
        if (topology.segment(seg).kind == VesselKind::heart) {
            result.crossed_heart = true;
            result.entered_heart = true;
        }
    }
    result.position = {seg, offset, topology.point_at(seg, offset)};
    return result;
}

}  // namespace flowsim::mobility
