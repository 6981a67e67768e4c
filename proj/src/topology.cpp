#include "flowsim/topology.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <sstream>

#include "flowsim/error.hpp"

namespace flowsim::topology {

namespace {

constexpr double kContinuityTolerance = 1e-6;
constexpr double kZLimit = 2.0;
constexpr std::size_t kSearchBudget = 2'000'000;

std::string fmt_double(double v) {
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
}

bool is_arterial(VesselKind kind) { return kind == VesselKind::aorta || kind == VesselKind::artery; }

}  // namespace

std::string_view to_string(VesselKind kind) {
    switch (kind) {
        case VesselKind::aorta: return "aorta";
        case VesselKind::artery: return "artery";
        case VesselKind::vein: return "vein";
        case VesselKind::transition: return "transition";
        case VesselKind::heart: return "heart";
    }
    return "unknown";
}

VesselKind kind_from_string(std::string_view text) {
    if (text == "aorta") return VesselKind::aorta;
    if (text == "artery") return VesselKind::artery;
    if (text == "vein") return VesselKind::vein;
    if (text == "transition") return VesselKind::transition;
    if (text == "heart") return VesselKind::heart;
    throw ParseError("unknown vessel kind '" + std::string(text) + "'");
}

double segment_length(const VesselSegment& segment) {
    double total = 0.0;
    for (std::size_t i = 1; i < segment.polyline.size(); ++i) {
        total += distance(segment.polyline[i - 1], segment.polyline[i]);
    }
    return total;
}

VascularTopology::VascularTopology(std::vector<VesselSegment> segments, std::vector<Region> regions,
                                   std::string heart_region,
                                   std::vector<std::pair<std::string, std::string>> mirrored_pairs,
                                   Vec3 anchor_position, bool relax_speeds)
    : segments_(std::move(segments)),
      regions_(std::move(regions)),
      heart_region_(std::move(heart_region)),
      mirrored_pairs_(std::move(mirrored_pairs)),
      anchor_(anchor_position),
      relax_speeds_(relax_speeds) {
    for (std::size_t i = 0; i < segments_.size(); ++i) {
        if (!segment_lookup_.emplace(segments_[i].id, i).second) {
            throw ValidationError("duplicate segment id '" + segments_[i].id + "'");
        }
    }
    for (std::size_t i = 0; i < regions_.size(); ++i) {
        if (!region_lookup_.emplace(regions_[i].id, i).second) {
            throw ValidationError("duplicate region id '" + regions_[i].id + "'");
        }
    }

    geometry_.resize(segments_.size());
    for (std::size_t i = 0; i < segments_.size(); ++i) {
        const auto& seg = segments_[i];
        auto& geo = geometry_[i];
        geo.cumulative.assign(seg.polyline.size(), 0.0);
        for (std::size_t k = 1; k < seg.polyline.size(); ++k) {
            geo.cumulative[k] = geo.cumulative[k - 1] + distance(seg.polyline[k - 1], seg.polyline[k]);
        }
        geo.length = geo.cumulative.empty() ? 0.0 : geo.cumulative.back();

        auto region = find_region(seg.region);
        if (!region) {
            throw ValidationError("segment '" + seg.id + "' references unknown region '" +
                                  seg.region + "'");
        }
        geo.region_index = *region;

        double total = 0.0;
        for (const auto& s : seg.successors) {
            auto idx = find_segment(s.segment);
            if (!idx) {
                throw ValidationError("segment '" + seg.id + "' has unknown successor '" +
                                      s.segment + "'");
            }
            geo.successor_index.push_back(*idx);
            total += s.weight;
        }
        double running = 0.0;
        for (const auto& s : seg.successors) {
            running += s.weight;
            geo.successor_cdf.push_back(total > 0.0 ? running / total : 0.0);
        }
        if (!geo.successor_cdf.empty() && total > 0.0) geo.successor_cdf.back() = 1.0;
    }
}

std::optional<std::size_t> VascularTopology::find_segment(std::string_view id) const {
    auto it = segment_lookup_.find(std::string(id));
    if (it == segment_lookup_.end()) return std::nullopt;
    return it->second;
}

std::size_t VascularTopology::segment_index(std::string_view id) const {
    if (auto idx = find_segment(id)) return *idx;
    throw ValidationError("unknown segment '" + std::string(id) + "'");
}

std::optional<std::size_t> VascularTopology::find_region(std::string_view id) const {
    auto it = region_lookup_.find(std::string(id));
    if (it == region_lookup_.end()) return std::nullopt;
    return it->second;
}

std::size_t VascularTopology::region_index(std::string_view id) const {
    if (auto idx = find_region(id)) return *idx;
    throw ValidationError("unknown region '" + std::string(id) + "'");
}

Vec3 VascularTopology::point_at(std::size_t segment, double offset) const {
    const auto& poly = segments_[segment].polyline;
    const auto& cum = geometry_[segment].cumulative;
    if (offset <= 0.0) return poly.front();
    if (offset >= cum.back()) return poly.back();
    auto it = std::upper_bound(cum.begin(), cum.end(), offset);
    const std::size_t k = static_cast<std::size_t>(it - cum.begin());  // cum[k-1] <= offset < cum[k]
    const double piece = cum[k] - cum[k - 1];
    const double t = piece > 0.0 ? (offset - cum[k - 1]) / piece : 0.0;
    return lerp(poly[k - 1], poly[k], t);
}

Vec3 VascularTopology::tangent_at(std::size_t segment, double offset) const {
    const auto& poly = segments_[segment].polyline;
    const auto& cum = geometry_[segment].cumulative;
    auto it = std::upper_bound(cum.begin(), cum.end(), offset);
    std::size_t k = static_cast<std::size_t>(it - cum.begin());
    k = std::clamp<std::size_t>(k, 1, poly.size() - 1);
    const Vec3 d = poly[k] - poly[k - 1];
    const double n = norm(d);
    return n > 0.0 ? d * (1.0 / n) : Vec3{};
}

// ---------------------------------------------------------------------------
// Validation

void validate(const VascularTopology& topology, const ValidationOptions& options) {
    const auto& segments = topology.segments();
    const auto& regions = topology.regions();

    if (regions.size() != options.expected_regions) {
        throw ValidationError("expected " + std::to_string(options.expected_regions) +
                              " regions, found " + std::to_string(regions.size()));
    }
    const auto heart = topology.find_region(topology.heart_region());
    if (!heart) {
        throw ValidationError("heart region '" + topology.heart_region() + "' is not a region");
    }

    for (std::size_t i = 0; i < segments.size(); ++i) {
        const auto& seg = segments[i];
        const std::string where = "segment '" + seg.id + "': ";
        if (seg.polyline.size() < 2) throw ValidationError(where + "polyline needs at least 2 vertices");
        if (!(topology.geometry(i).length > 0.0)) {
            throw ValidationError(where + "polyline has zero length");
        }
        if (!(seg.speed > 0.0)) throw ValidationError(where + "speed must be positive");
        if (!topology.relax_speeds()) {
            switch (seg.kind) {
                case VesselKind::aorta:
                    if (seg.speed != 20.0) throw ValidationError(where + "aorta speed must be 20 cm/s");
                    break;
                case VesselKind::artery:
                    if (seg.speed != 10.0) throw ValidationError(where + "artery speed must be 10 cm/s");
                    break;
                case VesselKind::vein:
                    if (seg.speed < 2.0 || seg.speed > 4.0) {
                        throw ValidationError(where + "vein speed must lie in [2, 4] cm/s");
                    }
                    break;
                case VesselKind::transition:
                    if (seg.speed != 1.0) {
                        throw ValidationError(where + "transition speed must be 1 cm/s");
                    }
                    break;
                case VesselKind::heart: break;
            }
        }
        for (const auto& p : seg.polyline) {
            if (!std::isfinite(p.x) || !std::isfinite(p.y) || !std::isfinite(p.z)) {
                throw ValidationError(where + "non-finite vertex");
            }
            if (p.z < -kZLimit || p.z > kZLimit) {
                throw ValidationError(where + "vertex z outside [-2, 2] cm");
            }
            if (is_arterial(seg.kind) && !(p.z > 0.0)) {
                throw ValidationError(where + "artery must be anterior (z > 0)");
            }
            if (seg.kind == VesselKind::vein && !(p.z < 0.0)) {
                throw ValidationError(where + "vein must be posterior (z < 0)");
            }
        }
        if (seg.successors.empty()) throw ValidationError(where + "dead end (no successors)");
        double total = 0.0;
        for (const auto& s : seg.successors) {
            if (!(s.weight >= 0.0)) throw ValidationError(where + "negative branch weight");
            total += s.weight;
        }
        if (!(total > 0.0)) throw ValidationError(where + "branch weights sum to zero");
        if (seg.kind == VesselKind::heart && seg.region != topology.heart_region()) {
            throw ValidationError(where + "heart segment outside the heart region");
        }
    }
    for (std::size_t i = 0; i < segments.size(); ++i) {
        for (std::size_t s : topology.geometry(i).successor_index) {
            if (distance(segments[i].polyline.back(), segments[s].polyline.front()) > kContinuityTolerance) {
                throw ValidationError("segment '" + segments[i].id + "': successor '" + segments[s].id +
                                      "' does not start where this segment ends");
            }
        }
    }

    std::vector<int> listed(segments.size(), 0);
    for (const auto& region : regions) {
        for (const auto& id : region.segments) {
            auto idx = topology.find_segment(id);
            if (!idx) {
                throw ValidationError("region '" + region.id + "' lists unknown segment '" + id + "'");
            }
            if (segments[*idx].region != region.id) {
                throw ValidationError("region '" + region.id + "' lists segment '" + id +
                                      "' that belongs to region '" + segments[*idx].region + "'");
            }
            ++listed[*idx];
        }
    }
    for (std::size_t i = 0; i < segments.size(); ++i) {
        if (listed[i] != 1) {
            throw ValidationError("segment '" + segments[i].id +
                                  "' must be listed by exactly one region");
        }
    }

    bool has_heart_segment = false;
    for (const auto& seg : segments) has_heart_segment |= seg.kind == VesselKind::heart;
    if (!has_heart_segment) throw ValidationError("no segment of kind heart");

    // Every segment must be reachable from the heart and reach it again.
    const std::size_t n = segments.size();
    std::vector<std::vector<std::size_t>> reverse(n);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t s : topology.geometry(i).successor_index) reverse[s].push_back(i);
    }
    auto sweep = [&](bool forward) {
        std::vector<char> seen(n, 0);
        std::deque<std::size_t> queue;
        for (std::size_t i = 0; i < n; ++i) {
            if (segments[i].kind == VesselKind::heart) {
                seen[i] = 1;
                queue.push_back(i);
            }
        }
        while (!queue.empty()) {
            const std::size_t cur = queue.front();
            queue.pop_front();
            const auto& next = forward ? topology.geometry(cur).successor_index : reverse[cur];
            for (std::size_t s : next) {
                if (!seen[s]) {
                    seen[s] = 1;
                    queue.push_back(s);
                }
            }
        }
        return seen;
    };
    const auto from_heart = sweep(true);
    const auto to_heart = sweep(false);
    for (std::size_t i = 0; i < n; ++i) {
        if (!from_heart[i] || !to_heart[i]) {
            throw ValidationError("segment '" + segments[i].id +
                                  "' is not on a heart-to-heart cycle");
        }
    }
    for (const auto& region : regions) {
        if (region.id != topology.heart_region() && region.segments.empty()) {
            throw ValidationError("region '" + region.id + "' has no segments and lies on no loop");
        }
    }

    for (const auto& [a, b] : topology.mirrored_pairs()) {
        if (!topology.find_region(a) || !topology.find_region(b)) {
            throw ValidationError("mirrored pair (" + a + ", " + b + ") names an unknown region");
        }
        if (a == b || a == topology.heart_region() || b == topology.heart_region()) {
            throw ValidationError("mirrored pair (" + a + ", " + b + ") is not a pair of peripheral regions");
        }
        auto times = [&](const std::string& r) {
            std::vector<double> t;
            for (const auto& loop : loops_through(topology, r)) t.push_back(loop.time_s);
            std::sort(t.begin(), t.end());
            return t;
        };
        const auto ta = times(a);
        const auto tb = times(b);
        bool same = ta.size() == tb.size();
        for (std::size_t i = 0; same && i < ta.size(); ++i) {
            same = std::abs(ta[i] - tb[i]) <= 1e-9 * std::max(1.0, std::abs(ta[i]));
        }
        if (!same) {
            throw ValidationError("mirrored pair (" + a + ", " + b + ") has different loop times");
        }
    }
}

// ---------------------------------------------------------------------------
// JSON

namespace {

Vec3 vec_from_json(const nlohmann::json& j, const std::string& what) {
    if (!j.is_array() || j.size() != 3) throw ParseError(what + ": expected [x, y, z]");
    for (const auto& c : j) {
        if (!c.is_number()) throw ParseError(what + ": coordinates must be numbers");
    }
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

const nlohmann::json& require(const nlohmann::json& j, const char* key, const std::string& what) {
    auto it = j.find(key);
    if (it == j.end()) throw ParseError(what + ": missing key '" + key + "'");
    return *it;
}

}  // namespace

VascularTopology from_json(const nlohmann::json& doc) {
    try {
        if (!doc.is_object()) throw ParseError("topology: top level must be an object");
        const int version = require(doc, "schema_version", "topology").get<int>();
        if (version != 1) throw ParseError("topology: unsupported schema_version " + std::to_string(version));

        std::vector<VesselSegment> segments;
        for (const auto& js : require(doc, "segments", "topology")) {
            VesselSegment seg;
            seg.id = require(js, "id", "segment").get<std::string>();
            const std::string where = "segment '" + seg.id + "'";
            seg.kind = kind_from_string(require(js, "kind", where).get<std::string>());
            seg.region = require(js, "region", where).get<std::string>();
            seg.speed = require(js, "speed_cm_s", where).get<double>();
            for (const auto& p : require(js, "polyline_cm", where)) {
                seg.polyline.push_back(vec_from_json(p, where));
            }
            for (const auto& s : require(js, "successors", where)) {
                seg.successors.push_back({require(s, "segment", where).get<std::string>(),
                                          s.value("weight", 1.0)});
            }
            segments.push_back(std::move(seg));
        }
        std::vector<Region> regions;
        for (const auto& jr : require(doc, "regions", "topology")) {
            Region r;
            r.id = require(jr, "id", "region").get<std::string>();
            r.segments = require(jr, "segments", "region '" + r.id + "'").get<std::vector<std::string>>();
            regions.push_back(std::move(r));
        }
        std::vector<std::pair<std::string, std::string>> pairs;
        for (const auto& jp : require(doc, "mirrored_pairs", "topology")) {
            if (!jp.is_array() || jp.size() != 2) throw ParseError("mirrored_pairs: expected [a, b]");
            pairs.emplace_back(jp[0].get<std::string>(), jp[1].get<std::string>());
        }
        return VascularTopology(std::move(segments), std::move(regions),
                                require(doc, "heart_region", "topology").get<std::string>(),
                                std::move(pairs),
                                vec_from_json(require(doc, "anchor_position_cm", "topology"),
                                              "anchor_position_cm"),
                                doc.value("relax_speeds", false));
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("topology: ") + e.what());
    }
}

nlohmann::json to_json(const VascularTopology& topology) {
    nlohmann::json doc;
    doc["schema_version"] = topology.schema_version();
    doc["heart_region"] = topology.heart_region();
    const auto& a = topology.anchor_position();
    doc["anchor_position_cm"] = {a.x, a.y, a.z};
    doc["mirrored_pairs"] = nlohmann::json::array();
    for (const auto& [l, r] : topology.mirrored_pairs()) doc["mirrored_pairs"].push_back({l, r});
    if (topology.relax_speeds()) doc["relax_speeds"] = true;
    doc["regions"] = nlohmann::json::array();
    for (const auto& r : topology.regions()) {
        doc["regions"].push_back({{"id", r.id}, {"segments", r.segments}});
    }
    doc["segments"] = nlohmann::json::array();
    for (const auto& s : topology.segments()) {
        nlohmann::json js;
        js["id"] = s.id;
        js["kind"] = std::string(to_string(s.kind));
        js["region"] = s.region;
        js["speed_cm_s"] = s.speed;
        js["polyline_cm"] = nlohmann::json::array();
        for (const auto& p : s.polyline) js["polyline_cm"].push_back({p.x, p.y, p.z});
        js["successors"] = nlohmann::json::array();
        for (const auto& succ : s.successors) {
            js["successors"].push_back({{"segment", succ.segment}, {"weight", succ.weight}});
        }
        doc["segments"].push_back(std::move(js));
    }
    return doc;
}

VascularTopology load_and_validate(const std::filesystem::path& path, const ValidationOptions& options) {
    std::ifstream in(path);
    if (!in) throw ParseError("cannot open topology file " + path.string());
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw ParseError("topology " + path.string() + ": " + e.what());
    }
    auto topology = from_json(doc);
    validate(topology, options);
    return topology;
}

void save(const VascularTopology& topology, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write topology file " + path.string());
    out << to_json(topology).dump(1) << '\n';
}

// ---------------------------------------------------------------------------
// Geometric queries

Vec3 region_centroid(const VascularTopology& topology, std::string_view region) {
    const auto& r = topology.regions()[topology.region_index(region)];
    Vec3 acc;
    double total = 0.0;
    for (const auto& id : r.segments) {
        const auto& poly = topology.segment(topology.segment_index(id)).polyline;
        for (std::size_t k = 1; k < poly.size(); ++k) {
            const double len = distance(poly[k - 1], poly[k]);
            acc = acc + (poly[k - 1] + poly[k]) * (0.5 * len);
            total += len;
        }
    }
    if (!(total > 0.0)) throw ValidationError("region '" + std::string(region) + "' has zero length");
    return acc * (1.0 / total);
}

std::vector<Loop> loops_through(const VascularTopology& topology, std::string_view region,
                                std::size_t limit) {
    const std::size_t target = topology.region_index(region);
    const auto& segments = topology.segments();
    const bool heart_target = target == topology.heart_region_index();

    auto transit = [&](std::size_t i) { return topology.geometry(i).length / segments[i].speed; };

    std::vector<Loop> loops;
    std::size_t budget = kSearchBudget;
    std::vector<char> on_path(segments.size(), 0);
    std::vector<std::size_t> path;

    // Depth-first over non-heart segments; a loop closes on the next heart
    // segment.
    auto dfs = [&](auto&& self, std::size_t cur, double time, int hits) -> void {
        if (loops.size() >= limit) return;
        if (budget-- == 0) {
            throw ValidationError("loop enumeration budget exhausted for region '" +
                                  std::string(region) + "'");
        }
        for (std::size_t next : topology.geometry(cur).successor_index) {
            if (segments[next].kind == VesselKind::heart) {
                if (hits > 0 || heart_target) loops.push_back({path, time});
                if (loops.size() >= limit) return;
                continue;
            }
            if (on_path[next]) continue;
            on_path[next] = 1;
            path.push_back(next);
            const int h = hits + (topology.geometry(next).region_index == target ? 1 : 0);
            self(self, next, time + transit(next), h);
            path.pop_back();
            on_path[next] = 0;
        }
    };

    for (std::size_t h = 0; h < segments.size(); ++h) {
        if (segments[h].kind != VesselKind::heart) continue;
        path.assign(1, h);
        on_path[h] = 1;
        dfs(dfs, h, transit(h), topology.geometry(h).region_index == target && !heart_target ? 1 : 0);
        on_path[h] = 0;
    }
    return loops;
}

double loop_time(const VascularTopology& topology, std::string_view region) {
    if (topology.region_index(region) == topology.heart_region_index()) {
        throw ValidationError("heart region has no single loop");
    }
    const auto loops = loops_through(topology, region);
    if (loops.empty()) throw ValidationError("region '" + std::string(region) + "' lies on no loop");
    if (loops.size() > 1) {
        std::string msg = "region '" + std::string(region) + "' lies on " +
                          std::to_string(loops.size()) + " loops with times";
        for (const auto& l : loops) msg += " " + fmt_double(l.time_s);
        throw ValidationError(msg);
    }
    return loops.front().time_s;
}

}  // namespace flowsim::topology
