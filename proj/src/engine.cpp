#include "flowsim/engine.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <deque>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>

#include "flowsim/error.hpp"
#include "flowsim/mobility.hpp"
#include "flowsim/protocol.hpp"

namespace flowsim::engine {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

namespace {

/// Reads keys from one JSON object and rejects the ones nobody asked for.
class ObjectReader {
public:
    ObjectReader(const json& j, std::string context) : j_(j), context_(std::move(context)) {
        if (!j_.is_object()) throw ConfigError(context_ + ": expected an object");
    }

    template <typename T>
    bool get(const std::string& key, T& out) {
        auto it = j_.find(key);
        if (it == j_.end()) return false;
        used_.insert(key);
        try {
            out = it->template get<T>();
        } catch (const json::exception&) {
            throw ConfigError(context_ + ": key '" + key + "' has the wrong type");
        }
        return true;
    }

    const json* child(const std::string& key) {
        auto it = j_.find(key);
        if (it == j_.end()) return nullptr;
        used_.insert(key);
        return &*it;
    }

    void finish() const {
        for (const auto& item : j_.items()) {
            if (!used_.count(item.key())) throw ConfigError(context_ + ": unknown key '" + item.key() + "'");
        }
    }

private:
    const json& j_;
    std::string context_;
    std::set<std::string> used_;
};

Vec3 vec_from_json(const json& j, const std::string& what) {
    if (!j.is_array() || j.size() != 3) throw ConfigError(what + ": expected [x, y, z]");
    for (const auto& c : j) {
        if (!c.is_number()) throw ConfigError(what + ": coordinates must be numbers");
    }
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

}  // namespace

void ScenarioConfig::validate() const {
    if (n_devices < 1 || n_devices > protocol::kMaxDeviceId + 1) {
        throw ConfigError("n_devices must lie in [1, " + std::to_string(protocol::kMaxDeviceId + 1) + "]");
    }
    if (!(sampling_rate_hz > 0.0)) throw ConfigError("sampling_rate_hz must be positive");
    if (!(detection_threshold_cm > 0.0)) throw ConfigError("detection_threshold_cm must be positive");
    if (!(sim_time_s > 0.0)) throw ConfigError("sim_time_s must be positive");
    if (!(mobility_step_s > 0.0)) throw ConfigError("mobility_step_ms must be positive");
    if (!(protocol.beacon_interval_s > 0.0)) throw ConfigError("beacon_interval_ms must be positive");
    if (!(protocol.response_jitter_s >= 0.0)) throw ConfigError("response_jitter_ms must be non-negative");
    if (!(protocol.bit_duration_s > 0.0)) throw ConfigError("bit_duration_us must be positive");
    if (protocol.beacon_bits < 1) throw ConfigError("beacon_bits must be positive");
    if (!(overrides.forced_collision_probability >= 0.0 && overrides.forced_collision_probability <= 1.0)) {
        throw ConfigError("forced_collision_probability must lie in [0, 1]");
    }
    power.validate();
    channel.validate();
    if (!(initial_energy_pj >= 0.0 && initial_energy_pj <= power.e_max_pj)) {
        throw ConfigError("initial_energy_pj must lie in [0, max_energy_storage_pj]");
    }
    if (event.kind != EventLocation::Kind::point && event.region.empty()) {
        throw ConfigError("event: region placement needs a region");
    }
}

ScenarioConfig config_from_json(const json& doc, const std::filesystem::path& base_dir) {
    ScenarioConfig c;
    ObjectReader top(doc, "scenario");

    std::string topo;
    if (top.get("topology", topo)) {
        std::filesystem::path p(topo);
        c.topology_path = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    }
    top.get("n_devices", c.n_devices);
    top.get("sampling_rate_hz", c.sampling_rate_hz);
    top.get("detection_threshold_cm", c.detection_threshold_cm);
    top.get("sim_time_s", c.sim_time_s);
    top.get("seed", c.seed);
    double step_ms = c.mobility_step_s * 1e3;
    if (top.get("mobility_step_ms", step_ms)) c.mobility_step_s = step_ms / 1e3;
    int anchors = 1;
    if (top.get("number_of_anchors", anchors) && anchors != 1) {
        throw ConfigError("number_of_anchors: only a single anchor is supported");
    }

    if (const json* e = top.child("event")) {
        ObjectReader r(*e, "event");
        if (const json* p = r.child("point_cm")) {
            c.event = EventLocation::at(vec_from_json(*p, "event.point_cm"));
        } else {
            std::string region, placement = "centroid";
            if (!r.get("region", region)) throw ConfigError("event: needs point_cm or region");
            r.get("placement", placement);
            if (placement == "centroid") {
                c.event = EventLocation::centroid_of(region);
            } else if (placement == "random") {
                c.event = EventLocation::random_in(region);
            } else {
                throw ConfigError("event.placement must be 'centroid' or 'random'");
            }
        }
        r.finish();
    }

    if (const json* p = top.child("power")) {
        ObjectReader r(*p, "power");
        auto& pp = c.power;
        r.get("generator_voltage_v", pp.generator_voltage_v);
        r.get("e_rx_pulse_pj", pp.e_rx_pulse_pj);
        r.get("e_tx_pulse_pj", pp.e_tx_pulse_pj);
        r.get("max_energy_storage_pj", pp.e_max_pj);
        r.get("turn_on_threshold_pj", pp.turn_on_pj);
        r.get("turn_off_threshold_pj", pp.turn_off_pj);
        double cycle_ms = pp.cycle_s * 1e3;
        if (r.get("harvesting_cycle_ms", cycle_ms)) pp.cycle_s = cycle_ms / 1e3;
        r.get("harvested_charge_per_cycle_pc", pp.charge_per_cycle_pc);
        r.get("sensing_energy_pj", pp.e_sense_pj);
        r.get("initial_energy_pj", c.initial_energy_pj);
        r.get("always_on", c.always_on);
        r.finish();
    }

    if (const json* p = top.child("channel")) {
        ObjectReader r(*p, "channel");
        auto& ch = c.channel;
        r.get("transmit_power_dbm", ch.tx_power_dbm);
        double ghz = ch.bandwidth_hz / 1e9;
        if (r.get("bandwidth_ghz", ghz)) ch.bandwidth_hz = ghz * 1e9;
        r.get("receiver_sensitivity_dbm", ch.sensitivity_dbm);
        double thz = ch.frequency_hz / 1e12;
        if (r.get("frequency_thz", thz)) ch.frequency_hz = thz * 1e12;
        r.get("noise_floor_dbm", ch.noise_floor_dbm);
        r.get("sinr_threshold_db", ch.sinr_threshold_db);
        r.get("attenuation_db_per_mm", ch.attenuation_db_per_mm);
        if (const json* layers = r.child("medium_layers")) {
            if (!layers->is_array()) throw ConfigError("channel.medium_layers: expected an array");
            for (const auto& l : *layers) {
                ObjectReader lr(l, "channel.medium_layers");
                channel::MediumLayer layer;
                lr.get("name", layer.name);
                lr.get("attenuation_db_per_mm", layer.attenuation_db_per_mm);
                lr.get("thickness_mm", layer.thickness_mm);
                lr.finish();
                ch.layers.push_back(layer);
            }
        }
        r.get("lossless", c.overrides.lossless);
        r.get("forced_collision_probability", c.overrides.forced_collision_probability);
        r.finish();
    }

    if (const json* p = top.child("protocol")) {
        ObjectReader r(*p, "protocol");
        auto& pr = c.protocol;
        double v = pr.beacon_interval_s * 1e3;
        if (r.get("beacon_interval_ms", v)) pr.beacon_interval_s = v / 1e3;
        v = pr.response_jitter_s * 1e3;
        if (r.get("response_jitter_ms", v)) pr.response_jitter_s = v / 1e3;
        v = pr.bit_duration_s * 1e6;
        if (r.get("bit_duration_us", v)) pr.bit_duration_s = v / 1e6;
        r.get("beacon_bits", pr.beacon_bits);
        r.finish();
    }
    top.finish();
    c.validate();
    return c;
}

json to_json(const ScenarioConfig& c) {
    json doc;
    doc["topology"] = c.topology_path.string();
    doc["n_devices"] = c.n_devices;
    doc["sampling_rate_hz"] = c.sampling_rate_hz;
    doc["detection_threshold_cm"] = c.detection_threshold_cm;
    doc["sim_time_s"] = c.sim_time_s;
    doc["seed"] = c.seed;
    doc["mobility_step_ms"] = c.mobility_step_s * 1e3;
    doc["number_of_anchors"] = 1;
    switch (c.event.kind) {
        case EventLocation::Kind::point:
            doc["event"] = {{"point_cm", {c.event.point.x, c.event.point.y, c.event.point.z}}};
            break;
        case EventLocation::Kind::centroid:
            doc["event"] = {{"region", c.event.region}, {"placement", "centroid"}};
            break;
        case EventLocation::Kind::random:
            doc["event"] = {{"region", c.event.region}, {"placement", "random"}};
            break;
    }
    const auto& pp = c.power;
    doc["power"] = {{"generator_voltage_v", pp.generator_voltage_v},
                    {"e_rx_pulse_pj", pp.e_rx_pulse_pj},
                    {"e_tx_pulse_pj", pp.e_tx_pulse_pj},
                    {"max_energy_storage_pj", pp.e_max_pj},
                    {"turn_on_threshold_pj", pp.turn_on_pj},
                    {"turn_off_threshold_pj", pp.turn_off_pj},
                    {"harvesting_cycle_ms", pp.cycle_s * 1e3},
                    {"harvested_charge_per_cycle_pc", pp.charge_per_cycle_pc},
                    {"sensing_energy_pj", pp.e_sense_pj},
                    {"initial_energy_pj", c.initial_energy_pj},
                    {"always_on", c.always_on}};
    const auto& ch = c.channel;
    doc["channel"] = {{"transmit_power_dbm", ch.tx_power_dbm},
                      {"bandwidth_ghz", ch.bandwidth_hz / 1e9},
                      {"receiver_sensitivity_dbm", ch.sensitivity_dbm},
                      {"frequency_thz", ch.frequency_hz / 1e12},
                      {"noise_floor_dbm", ch.noise_floor_dbm},
                      {"sinr_threshold_db", ch.sinr_threshold_db},
                      {"attenuation_db_per_mm", ch.attenuation_db_per_mm},
                      {"lossless", c.overrides.lossless},
                      {"forced_collision_probability", c.overrides.forced_collision_probability}};
    if (!ch.layers.empty()) {
        json layers = json::array();
        for (const auto& l : ch.layers) {
            layers.push_back({{"name", l.name},
                              {"attenuation_db_per_mm", l.attenuation_db_per_mm},
                              {"thickness_mm", l.thickness_mm}});
        }
        doc["channel"]["medium_layers"] = layers;
    }
    doc["protocol"] = {{"beacon_interval_ms", c.protocol.beacon_interval_s * 1e3},
                       {"response_jitter_ms", c.protocol.response_jitter_s * 1e3},
                       {"bit_duration_us", c.protocol.bit_duration_s * 1e6},
                       {"beacon_bits", c.protocol.beacon_bits}};
    return doc;
}

ScenarioConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open scenario config " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ParseError("scenario config " + path.string() + ": " + e.what());
    }
    return config_from_json(doc, path.parent_path());
}

// ---------------------------------------------------------------------------
// Event placement

bool event_detect(const Vec3& device, const Vec3& event, double threshold_cm, bool powered) {
    return powered && distance(device, event) < threshold_cm;
}

Vec3 random_point_in_region(const topology::VascularTopology& topology, std::string_view region,
                            RandomStream& rng) {
    const auto& r = topology.regions()[topology.region_index(region)];
    double total = 0.0;
    for (const auto& id : r.segments) total += topology.geometry(topology.segment_index(id)).length;
    double target = rng.uniform() * total;
    for (const auto& id : r.segments) {
        const auto i = topology.segment_index(id);
        const double len = topology.geometry(i).length;
        if (target < len || &id == &r.segments.back()) return topology.point_at(i, std::min(target, len));
        target -= len;
    }
    throw ValidationError("region '" + std::string(region) + "' has no segments");
}

Vec3 resolve_event(const ScenarioConfig& config, const topology::VascularTopology& topology) {
    switch (config.event.kind) {
        case EventLocation::Kind::point: return config.event.point;
        case EventLocation::Kind::centroid: return topology::region_centroid(topology, config.event.region);
        case EventLocation::Kind::random: {
            RandomStream rng(config.seed, "event_placement");
            return random_point_in_region(topology, config.event.region, rng);
        }
    }
    return config.event.point;
}

// ---------------------------------------------------------------------------
// Simulation

namespace {

using Ps = std::int64_t;  // simulation time in picoseconds

Ps to_ps(double seconds) { return static_cast<Ps>(std::llround(seconds * 1e12)); }
double to_seconds(Ps t) { return static_cast<double>(t) / 1e12; }

/// Whole microseconds, ties to even.
double to_microsecond_grid(Ps t) {
    Ps q = t / 1'000'000;
    const Ps r = t % 1'000'000;
    if (r > 500'000 || (r == 500'000 && (q & 1))) ++q;
    return static_cast<double>(q) / 1e6;
}

// Ties at the same instant resolve in this order.
enum class Kind : std::uint8_t { mobility, harvest, sensing, reception_end, response, beacon };

struct Event {
    Ps t;
    Kind kind;
    std::uint64_t seq;
    std::uint32_t device;
    std::uint64_t tx;
};

struct EventAfter {
    bool operator()(const Event& a, const Event& b) const {
        if (a.t != b.t) return a.t > b.t;
        if (a.kind != b.kind) return a.kind > b.kind;
        return a.seq > b.seq;
    }
};

struct Device {
    mobility::DevicePosition pos;
    power::EnergyState energy;
    protocol::CirculationState circ;
    Ps reset_time = 0;
    bool reported_this_passage = false;
    bool jammed = false;
    bool busy = false;  // a response is scheduled or on air
    RandomStream branching;
    RandomStream jitter;
    RandomStream channel;
};

struct Transmission {
    std::uint32_t device;
    Ps t_tx;
    Ps start;  // at the anchor
    Ps end;
    channel::LinkBudget budget;
    double elapsed;
    protocol::Payload payload;
    bool event_bit;
};

/// Minimum distance from `p` to the polyline piece a-b.
double point_segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
    const Vec3 ab = b - a;
    const double len2 = dot(ab, ab);
    double t = len2 > 0.0 ? dot(p - a, ab) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return distance(p, a + ab * t);
}

class Simulation {
public:
    Simulation(const ScenarioConfig& config, const topology::VascularTopology& topology,
               const RunOptions& options)
        : cfg_(config), topo_(topology), opts_(options) {}

    RunResult run() {
        setup();
        while (!queue_.empty()) {
            const Event ev = queue_.top();
            if (ev.t > end_) break;
            queue_.pop();
            switch (ev.kind) {
                case Kind::mobility: on_mobility(ev.t); break;
                case Kind::harvest: on_harvest(ev.t); break;
                case Kind::sensing: on_sensing(ev.t, ev.device); break;
                case Kind::reception_end: on_reception_end(ev.t, ev.tx); break;
                case Kind::response: on_response(ev.t, ev.device); break;
                case Kind::beacon: on_beacon(ev.t); break;
            }
        }
        if (opts_.audit) {
            for (std::size_t d = 0; d < devices_.size(); ++d) {
                result_.audit[d].final_aj = devices_[d].energy.energy.attojoules();
            }
        }
        return std::move(result_);
    }

private:
    void schedule(Ps t, Kind kind, std::uint32_t device = 0, std::uint64_t tx = 0) {
        queue_.push({t, kind, seq_++, device, tx});
    }

    void setup() {
        cfg_.validate();
        end_ = to_ps(cfg_.sim_time_s);
        step_ = to_ps(cfg_.mobility_step_s);
        cycle_ = to_ps(cfg_.power.cycle_s);
        beacon_ = to_ps(cfg_.protocol.beacon_interval_s);
        sensing_period_ = to_ps(1.0 / cfg_.sampling_rate_hz);
        beacon_duration_ = to_ps(cfg_.protocol.beacon_bits * cfg_.protocol.bit_duration_s);
        packet_duration_ = to_ps(protocol::kPacketBits * cfg_.protocol.bit_duration_s);
        if (step_ <= 0 || cycle_ <= 0 || beacon_ <= 0 || sensing_period_ <= 0) {
            throw ConfigError("scenario periods must be at least one picosecond");
        }
        anchor_ = topo_.anchor_position();
        event_ = resolve_event(cfg_, topo_);
        result_.event_point = event_;

        tx_cost_ = power::Energy::from_pj(protocol::kPacketBits * cfg_.power.e_tx_pulse_pj);
        rx_cost_ = power::Energy::from_pj(cfg_.protocol.beacon_bits * cfg_.power.e_rx_pulse_pj);
        sense_cost_ = power::Energy::from_pj(cfg_.power.e_sense_pj);

        // Segments that ever come within radio range of the anchor.
        const double range_cm = channel::communication_range_m(cfg_.channel) * 100.0;
        near_.assign(topo_.segments().size(), 0);
        for (std::size_t i = 0; i < topo_.segments().size(); ++i) {
            const auto& poly = topo_.segment(i).polyline;
            for (std::size_t k = 1; k < poly.size(); ++k) {
                if (point_segment_distance(anchor_, poly[k - 1], poly[k]) <= range_cm + 1e-6) near_[i] = 1;
            }
        }

        std::vector<std::size_t> hearts;
        double heart_total = 0.0;
        for (std::size_t i = 0; i < topo_.segments().size(); ++i) {
            if (topo_.segment(i).kind == topology::VesselKind::heart) {
                hearts.push_back(i);
                heart_total += topo_.geometry(i).length;
            }
        }
        if (hearts.empty()) throw ValidationError("topology has no heart segment");

        RandomStream placement(cfg_.seed, "mobility");
        const power::Energy initial = power::Energy::from_pj(cfg_.initial_energy_pj);
        devices_.resize(cfg_.n_devices);
        if (opts_.audit) result_.audit.resize(cfg_.n_devices);
        for (std::uint32_t d = 0; d < cfg_.n_devices; ++d) {
            Device& dev = devices_[d];
            const std::string id = std::to_string(d);
            dev.branching = RandomStream(cfg_.seed, "branching:" + id);
            dev.jitter = RandomStream(cfg_.seed, "jitter:" + id);
            dev.channel = RandomStream(cfg_.seed, "channel:" + id);

            double along = placement.uniform() * heart_total;
            std::size_t seg = hearts.back();
            for (std::size_t h : hearts) {
                if (along < topo_.geometry(h).length) {
                    seg = h;
                    break;
                }
                along -= topo_.geometry(h).length;
            }
            dev.pos = mobility::make_position(topo_, seg, along);
            dev.energy = power::refresh_power_state({initial, false}, cfg_.power);
            draw_jam(dev);

            const Ps phase = static_cast<Ps>(placement.uniform() * static_cast<double>(sensing_period_));
            schedule(phase, Kind::sensing, d);

            if (opts_.audit) {
                auto& a = result_.audit[d];
                a.initial_aj = a.min_aj = a.max_aj = initial.attojoules();
                a.sensing_cost_aj = sense_cost_.attojoules();
                a.rx_cost_aj = rx_cost_.attojoules();
                a.tx_cost_aj = tx_cost_.attojoules();
            }
        }
        schedule(step_, Kind::mobility);
        schedule(cycle_, Kind::harvest);
        schedule(0, Kind::beacon);
    }

    void draw_jam(Device& dev) {
        const double p = cfg_.overrides.forced_collision_probability;
        dev.jammed = p > 0.0 && dev.channel.uniform() < p;
    }

    bool powered(const Device& dev) const { return cfg_.always_on || dev.energy.powered; }

    /// Spends `cost` unless the device runs on unlimited energy.
    bool spend(std::uint32_t d, power::Energy cost) {
        if (cfg_.always_on) return true;
        Device& dev = devices_[d];
        auto [next, ok] = power::consume(dev.energy, cost, cfg_.power);
        dev.energy = next;
        if (ok && opts_.audit) {
            auto& a = result_.audit[d];
            a.consumed_aj += cost.attojoules();
            a.min_aj = std::min(a.min_aj, dev.energy.energy.attojoules());
        }
        return ok;
    }

    void on_mobility(Ps t) {
        const double dt = to_seconds(step_);
        for (auto& dev : devices_) {
            const auto r = mobility::advance_device(dev.pos, dt, topo_, dev.branching);
            dev.pos = r.position;
            if (r.entered_heart) {
                dev.reported_this_passage = false;
                draw_jam(dev);
            }
        }
        schedule(t + step_, Kind::mobility);
    }

    void on_harvest(Ps t) {
        if (!cfg_.always_on) {
            for (std::size_t d = 0; d < devices_.size(); ++d) {
                auto& dev = devices_[d];
                const auto before = dev.energy.energy;
                dev.energy = power::harvest_step(dev.energy, cfg_.power);
                if (opts_.audit) {
                    auto& a = result_.audit[d];
                    a.harvested_aj += (dev.energy.energy - before).attojoules();
                    a.max_aj = std::max(a.max_aj, dev.energy.energy.attojoules());
                }
            }
        }
        schedule(t + cycle_, Kind::harvest);
    }

    void on_sensing(Ps t, std::uint32_t d) {
        Device& dev = devices_[d];
        if (powered(dev)) {
            const bool performed = spend(d, sense_cost_);
            if (performed && opts_.audit) ++result_.audit[d].sensing_tasks;
            if (event_detect(dev.pos.coords, event_, cfg_.detection_threshold_cm, performed)) {
                dev.circ.event_bit = true;
                ++result_.stats.detections;
            }
        }
        schedule(t + sensing_period_, Kind::sensing, d);
    }

    channel::LinkBudget budget_to_anchor(const Device& dev) const {
        const double d_m = std::max(distance(dev.pos.coords, anchor_) / 100.0, 1e-9);
        auto b = channel::path_loss_db(d_m, cfg_.channel);
        const Vec3 velocity = topo_.tangent_at(dev.pos.segment, dev.pos.offset) *
                              (topo_.segment(dev.pos.segment).speed / 100.0);
        const Vec3 los = (anchor_ - dev.pos.coords) * (1.0 / (d_m * 100.0));
        b.doppler_shift_hz = channel::doppler_shift_hz(dot(velocity, los), cfg_.channel);
        return b;
    }

    /// Transmissions overlapping [start, end] at the anchor, except `skip`.
    std::vector<channel::LinkBudget> interferers(Ps start, Ps end, std::uint64_t skip) const {
        std::vector<channel::LinkBudget> out;
        for (std::size_t k = 0; k < active_.size(); ++k) {
            const auto& tx = active_[k];
            if (first_tx_ + k == skip) continue;
            if (tx.start < end && tx.end > start) out.push_back(tx.budget);
        }
        return out;
    }

    void on_beacon(Ps t) {
        ++result_.stats.beacons;
        for (std::uint32_t d = 0; d < devices_.size(); ++d) {
            Device& dev = devices_[d];
            if (!near_[dev.pos.segment] || dev.reported_this_passage || dev.busy || !powered(dev)) continue;
            const auto b = budget_to_anchor(dev);
            if (b.received_power_dbm < cfg_.channel.sensitivity_dbm) continue;
            const Ps prop = to_ps(b.distance_m / channel::kSpeedOfLight);
            if (!cfg_.overrides.lossless) {
                // Device-side reception: other devices' responses on air
                // during the beacon act as interference.
                std::vector<channel::LinkBudget> noise;
                for (const auto& tx : active_) {
                    if (tx.device == d || !(tx.start < t + prop + beacon_duration_ && tx.end > t + prop)) continue;
                    const double dd = std::max(distance(devices_[tx.device].pos.coords, dev.pos.coords) / 100.0, 1e-9);
                    noise.push_back(channel::path_loss_db(dd, cfg_.channel));
                }
                if (!channel::receive_decision(b, noise, cfg_.channel).accepted) continue;
            }
            if (rx_cost_ > power::Energy{}) {
                if (!spend(d, rx_cost_)) continue;
                if (opts_.audit) ++result_.audit[d].beacon_receptions;
            }
            const Ps jitter = static_cast<Ps>(dev.jitter.uniform() * static_cast<double>(to_ps(cfg_.protocol.response_jitter_s)));
            dev.busy = true;
            schedule(t + prop + beacon_duration_ + jitter, Kind::response, d);
        }
        schedule(t + beacon_, Kind::beacon);
    }

    void on_response(Ps t, std::uint32_t d) {
        Device& dev = devices_[d];
        if (!powered(dev) || !spend(d, tx_cost_)) {
            dev.busy = false;
            return;
        }
        if (opts_.audit) ++result_.audit[d].transmissions;
        ++result_.stats.responses;

        dev.circ.elapsed_since_reset = to_seconds(t - dev.reset_time);
        const auto report = protocol::encode_report(d, dev.circ, cfg_.power.e_tx_pulse_pj);
        const auto b = budget_to_anchor(dev);
        result_.stats.max_abs_doppler_hz = std::max(result_.stats.max_abs_doppler_hz, std::abs(b.doppler_shift_hz));
        const Ps start = t + to_ps(b.distance_m / channel::kSpeedOfLight);
        active_.push_back({d, t, start, start + packet_duration_, b, dev.circ.elapsed_since_reset,
                           report.payload, dev.circ.event_bit});
        schedule(start + packet_duration_, Kind::reception_end, d, first_tx_ + active_.size() - 1);
    }

    void on_reception_end(Ps t, std::uint64_t tx_id) {
        const Transmission tx = active_[tx_id - first_tx_];
        Device& dev = devices_[tx.device];
        dev.busy = false;

        channel::Decision decision;
        if (dev.jammed) {
            decision.accepted = false;
            decision.reason = channel::Reason::collision;
        } else if (cfg_.overrides.lossless) {
            decision = channel::receive_decision(tx.budget, {}, cfg_.channel);
        } else {
            decision = channel::receive_decision(tx.budget, interferers(tx.start, tx.end, tx_id), cfg_.channel);
        }

        auto& stats = result_.stats;
        switch (decision.reason) {
            case channel::Reason::accepted:
                ++stats.accepted;
                stats.max_accepted_distance_m = std::max(stats.max_accepted_distance_m, tx.budget.distance_m);
                break;
            case channel::Reason::collision: ++stats.collisions; break;
            case channel::Reason::below_sensitivity: ++stats.below_sensitivity; break;
            case channel::Reason::doppler: ++stats.doppler_rejections; break;
        }

        if (decision.accepted) {
            const auto decoded = protocol::decode_report(tx.payload);
            result_.records.push_back({to_microsecond_grid(t), decoded.device_id, decoded.elapsed_s, decoded.event_bit});
            dev.reset_time = t;
            dev.reported_this_passage = true;
        }
        dev.circ = protocol::exchange_outcome(true, decision.accepted, dev.circ);

        if (opts_.capture_tx) {
            result_.tx_log.push_back({to_seconds(tx.t_tx), tx.device, tx.elapsed, tx.event_bit,
                                      tx.budget.distance_m, tx.budget.doppler_shift_hz, decision.accepted,
                                      decision.reason});
        }

        // Nothing adjudicated from now on can overlap a transmission that
        // ended a full packet duration ago.
        while (!active_.empty() && active_.front().end <= t - packet_duration_) {
            active_.pop_front();
            ++first_tx_;
        }
    }

    ScenarioConfig cfg_;
    const topology::VascularTopology& topo_;
    RunOptions opts_;

    Ps end_ = 0, step_ = 0, cycle_ = 0, beacon_ = 0, sensing_period_ = 0;
    Ps beacon_duration_ = 0, packet_duration_ = 0;
    power::Energy tx_cost_, rx_cost_, sense_cost_;
    Vec3 anchor_, event_;
    std::vector<char> near_;

    std::vector<Device> devices_;
    std::priority_queue<Event, std::vector<Event>, EventAfter> queue_;
    std::uint64_t seq_ = 0;
    std::deque<Transmission> active_;
    std::uint64_t first_tx_ = 0;
    RunResult result_;
};

}  // namespace

RunResult run_scenario(const ScenarioConfig& config, const topology::VascularTopology& topology,
                       const RunOptions& options) {
    return Simulation(config, topology, options).run();
}

std::vector<ReportRecord> run_scenario(const ScenarioConfig& config) {
    const auto topo = topology::load_and_validate(config.topology_path);
    return run_scenario(config, topo).records;
}

// ---------------------------------------------------------------------------
// Raw record files

namespace {
constexpr const char* kRawHeader = "t_sim_s,device_id,elapsed_s,event_bit";
}

std::string format_fixed6(double value) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, value, std::chars_format::fixed, 6);
    return std::string(buf, r.ptr);
}

void persist_raw(const std::vector<ReportRecord>& records, const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write raw records to " + path.string());
    out << kRawHeader << '\n';
    for (const auto& r : records) {
        out << format_fixed6(r.t_sim) << ',' << r.device_id << ',' << format_fixed6(r.elapsed) << ','
            << (r.event_bit ? 1 : 0) << '\n';
    }
    if (!out) throw Error("write failed for " + path.string());
}

std::vector<ReportRecord> load_raw(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open raw records " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != kRawHeader) {
        throw ParseError(path.string() + ": expected header '" + kRawHeader + "'");
    }
    std::vector<ReportRecord> out;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const auto fail = [&] { return ParseError(path.string() + ":" + std::to_string(lineno) + ": malformed record"); };
        std::string_view rest(line);
        std::string_view fields[4];
        for (int i = 0; i < 4; ++i) {
            const auto comma = rest.find(',');
            if ((comma == std::string_view::npos) != (i == 3)) throw fail();
            fields[i] = rest.substr(0, comma);
            if (i < 3) rest.remove_prefix(comma + 1);
        }
        ReportRecord r;
        int bit = 0;
        auto parse = [&](std::string_view f, auto& v) {
            const auto res = std::from_chars(f.data(), f.data() + f.size(), v);
            if (res.ec != std::errc{} || res.ptr != f.data() + f.size()) throw fail();
        };
        parse(fields[0], r.t_sim);
        parse(fields[1], r.device_id);
        parse(fields[2], r.elapsed);
        parse(fields[3], bit);
        if (bit != 0 && bit != 1) throw fail();
        r.event_bit = bit == 1;
        out.push_back(r);
    }
    return out;
}

}  // namespace flowsim::engine
