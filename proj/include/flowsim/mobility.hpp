#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "flowsim/geometry.hpp"
#include "flowsim/rng.hpp"
#include "flowsim/topology.hpp"

namespace flowsim::mobility {

/// Where a nanodevice sits on the vascular graph.
struct DevicePosition {
    std::size_t segment = 0;
    double offset = 0.0;  // cm from segment start, 0 <= offset <= length
    Vec3 coords;          // cached polyline point at `offset`
};

DevicePosition make_position(const topology::VascularTopology& topology, std::size_t segment,
                             double offset);

/// One piece of a step spent inside a single segment.
struct Leg {
    std::size_t segment = 0;
    double distance = 0.0;  // cm
    double time = 0.0;      // s
};

struct AdvanceResult {
    DevicePosition position;
    bool crossed_heart = false;  // some traversed segment is of kind heart
    bool entered_heart = false;  // moved onto a heart segment during this step
};

/// Moves a device `dt` seconds downstream. Each segment is traversed at its
/// own speed; at a segment end the successor is drawn with choose_branch.
/// When `legs` is non-null the per-segment breakdown is appended to it.
AdvanceResult advance_device(const DevicePosition& position, double dt,
                             const topology::VascularTopology& topology, RandomStream& rng,
                             std::vector<Leg>* legs = nullptr);

/// Index i with probability weights[i] / sum(weights).
std::size_t choose_branch(std::span<const double> weights, RandomStream& rng);

/// Successor id drawn by weight.
const std::string& choose_branch(std::span<const topology::Successor> successors,
                                 RandomStream& rng);

}  // namespace flowsim::mobility
