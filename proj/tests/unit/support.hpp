#pragma once

#include <string>
#include <vector>

#include "flowsim/topology.hpp"

namespace flowsim::testing {

inline std::string data_path(const std::string& name) {
    return std::string(FLOWSIM_DATA_DIR) + "/" + name;
}

inline const topology::VascularTopology& default_topology() {
    static const auto t = topology::load_and_validate(data_path("default_body.json"));
    return t;
}

inline topology::VesselSegment seg(std::string id, topology::VesselKind kind, double speed,
                                   std::vector<Vec3> polyline, std::string region,
                                   std::vector<std::string> next) {
    topology::VesselSegment s;
    s.id = std::move(id);
    s.kind = kind;
    s.speed = speed;
    s.polyline = std::move(polyline);
    s.region = std::move(region);
    for (auto& n : next) s.successors.push_back({std::move(n), 1.0});
    return s;
}

/// One heart segment feeding a single loop: aorta 10 cm @20, artery 30 cm
/// @10, transition 4 cm @1, vein 30 cm @2 (22.5 s outside the heart), then
/// an 11 cm heart @5 back to the start. Every coordinate is multiplied by
/// `scale`.
inline topology::VascularTopology single_loop(double scale = 1.0) {
    using topology::VesselKind;
    auto pts = [scale](std::vector<Vec3> v) {
        for (auto& p : v) p = p * scale;
        return v;
    };
    std::vector<topology::VesselSegment> segs = {
        seg("heart", VesselKind::heart, 5, pts({{0, 10, -0.5}, {0, 10, 0.5}, {0, 0, 0.5}}), "heart",
            {"aorta"}),
        seg("aorta", VesselKind::aorta, 20, pts({{0, 0, 0.5}, {0, 10, 0.5}}), "limb", {"artery"}),
        seg("artery", VesselKind::artery, 10,
            pts({{0, 10, 0.5}, {0, 25, 0.5}, {3, 25, 0.5}, {3, 13, 0.5}}), "limb", {"transition"}),
        seg("transition", VesselKind::transition, 1,
            pts({{3, 13, 0.5}, {3, 11.5, 0.5}, {3, 11.5, -0.5}, {3, 13, -0.5}}), "limb", {"vein"}),
        seg("vein", VesselKind::vein, 2,
            pts({{3, 13, -0.5}, {3, 25, -0.5}, {0, 25, -0.5}, {0, 10, -0.5}}), "limb", {"heart"}),
    };
    return topology::VascularTopology(
        std::move(segs), {{"heart", {"heart"}}, {"limb", {"aorta", "artery", "transition", "vein"}}},
        "heart", {}, {0, 0, 2});
}

}  // namespace flowsim::testing
