#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "flowsim/geometry.hpp"

namespace flowsim::topology {

enum class VesselKind { aorta, artery, vein, transition, heart };

std::string_view to_string(VesselKind kind);
VesselKind kind_from_string(std::string_view text);

struct Successor {
    std::string segment;
    double weight = 1.0;

    bool operator==(const Successor&) const = default;
};

/// One directed vessel piece. Blood flows from polyline.front() to
/// polyline.back().
struct VesselSegment {
    std::string id;
    std::vector<Vec3> polyline;
    double speed = 0.0;  // cm/s
    VesselKind kind = VesselKind::artery;
    std::string region;
    std::vector<Successor> successors;

    bool operator==(const VesselSegment&) const = default;
};

struct Region {
    std::string id;
    std::vector<std::string> segments;

    bool operator==(const Region&) const = default;
};

/// Segment with precomputed arc-length tables and resolved successor
/// indices. Built once by VascularTopology; read-only afterwards.
struct SegmentGeometry {
    std::vector<double> cumulative;  // cumulative[i] = arc length at vertex i
    double length = 0.0;
    std::vector<std::size_t> successor_index;
    std::vector<double> successor_cdf;  // normalised cumulative weights
    std::size_t region_index = 0;
};

/// Vascular graph: segments grouped into named body regions forming closed
/// loops through the heart. Immutable once constructed.
class VascularTopology {
public:
    VascularTopology() = default;
    VascularTopology(std::vector<VesselSegment> segments, std::vector<Region> regions,
                     std::string heart_region,
                     std::vector<std::pair<std::string, std::string>> mirrored_pairs,
                     Vec3 anchor_position, bool relax_speeds = false);

    const std::vector<VesselSegment>& segments() const { return segments_; }
    const std::vector<Region>& regions() const { return regions_; }
    const std::string& heart_region() const { return heart_region_; }
    const std::vector<std::pair<std::string, std::string>>& mirrored_pairs() const {
        return mirrored_pairs_;
    }
    const Vec3& anchor_position() const { return anchor_; }
    bool relax_speeds() const { return relax_speeds_; }
    int schema_version() const { return 1; }

    std::size_t segment_index(std::string_view id) const;
    std::optional<std::size_t> find_segment(std::string_view id) const;
    std::size_t region_index(std::string_view id) const;
    std::optional<std::size_t> find_region(std::string_view id) const;
    std::size_t heart_region_index() const { return region_index(heart_region_); }

    const VesselSegment& segment(std::size_t i) const { return segments_[i]; }
    const SegmentGeometry& geometry(std::size_t i) const { return geometry_[i]; }

    /// Point at arc length `offset` from the segment start (clamped).
    Vec3 point_at(std::size_t segment, double offset) const;
    /// Unit flow direction at arc length `offset`.
    Vec3 tangent_at(std::size_t segment, double offset) const;

    bool operator==(const VascularTopology& o) const {
        return segments_ == o.segments_ && regions_ == o.regions_ &&
               heart_region_ == o.heart_region_ && mirrored_pairs_ == o.mirrored_pairs_ &&
               anchor_ == o.anchor_ && relax_speeds_ == o.relax_speeds_;
    }

private:
    std::vector<VesselSegment> segments_;
    std::vector<Region> regions_;
    std::string heart_region_;
    std::vector<std::pair<std::string, std::string>> mirrored_pairs_;
    Vec3 anchor_;
    bool relax_speeds_ = false;

    std::vector<SegmentGeometry> geometry_;
    std::unordered_map<std::string, std::size_t> segment_lookup_;
    std::unordered_map<std::string, std::size_t> region_lookup_;
};

struct ValidationOptions {
    std::size_t expected_regions = 25;
};

/// Throws ValidationError naming the violated invariant and the offending
/// segment or region.
void validate(const VascularTopology& topology, const ValidationOptions& options = {});

/// Parses the topology schema. Throws ParseError on structural problems;
/// performs no invariant checks.
VascularTopology from_json(const nlohmann::json& doc);
nlohmann::json to_json(const VascularTopology& topology);

VascularTopology load_and_validate(const std::filesystem::path& path,
                                   const ValidationOptions& options = {});
void save(const VascularTopology& topology, const std::filesystem::path& path);

double segment_length(const VesselSegment& segment);

/// Length-weighted centroid of all polylines belonging to `region`.
Vec3 region_centroid(const VascularTopology& topology, std::string_view region);

/// A heart-to-heart cycle: the heart segment it starts from followed by the
/// non-heart segments traversed until blood re-enters a heart segment.
struct Loop {
    std::vector<std::size_t> segments;
    double time_s = 0.0;
};

/// Every heart-to-heart cycle that passes through `region`. Enumeration
/// stops after `limit` loops.
std::vector<Loop> loops_through(const VascularTopology& topology, std::string_view region,
                                std::size_t limit = 64);

/// Traversal time of the single canonical loop through `region`. Throws
/// ValidationError for the heart region or for regions on several loops
/// (the message lists every loop time found).
double loop_time(const VascularTopology& topology, std::string_view region);

}  // namespace flowsim::topology
