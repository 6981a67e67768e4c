#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowsim/channel.hpp"
#include "flowsim/geometry.hpp"
#include "flowsim/power.hpp"
#include "flowsim/rng.hpp"
#include "flowsim/topology.hpp"

namespace flowsim::engine {

/// Where the sensed event sits: an explicit point, the centroid of a region,
/// or a point drawn uniformly by arc length along a region's vessels.
struct EventLocation {
    enum class Kind { point, centroid, random };
    Kind kind = Kind::point;
    Vec3 point{1000.0, 1000.0, 0.0};
    std::string region;

    static EventLocation at(Vec3 p) { return {Kind::point, p, {}}; }
    static EventLocation centroid_of(std::string region) { return {Kind::centroid, {}, std::move(region)}; }
    static EventLocation random_in(std::string region) { return {Kind::random, {}, std::move(region)}; }
};

struct ProtocolParams {
    double beacon_interval_s = 0.010;
    double response_jitter_s = 0.005;  // responses start U[0, jitter] after the beacon ends
    double bit_duration_s = 25e-6;
    int beacon_bits = 8;
};

/// Test hooks that replace parts of the channel model.
struct ChannelOverrides {
    bool lossless = false;  // ignore interference; only the link budget can reject
    double forced_collision_probability = 0.0;  // per device and heart passage
};

struct ScenarioConfig {
    std::filesystem::path topology_path;
    std::uint32_t n_devices = 64;
    double sampling_rate_hz = 3.0;
    double detection_threshold_cm = 1.0;
    double sim_time_s = 1100.0;
    EventLocation event;
    std::uint64_t seed = 0;

    power::PowerParams power;
    double initial_energy_pj = 0.0;
    bool always_on = false;  // unlimited energy: every task is performed

    channel::ChannelParams channel;
    ChannelOverrides overrides;
    ProtocolParams protocol;
    double mobility_step_s = 0.010;

    void validate() const;
};

/// Parses a scenario document. A relative topology path is resolved against
/// `base_dir`. Unknown keys are rejected.
ScenarioConfig config_from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
nlohmann::json to_json(const ScenarioConfig& config);
ScenarioConfig load_config(const std::filesystem::path& path);

struct ReportRecord {
    double t_sim = 0.0;  // s, anchor reception time, whole microseconds
    std::uint32_t device_id = 0;
    double elapsed = 0.0;  // s, as carried by the packet (whole milliseconds)
    bool event_bit = false;

    bool operator==(const ReportRecord&) const = default;
};

/// One response transmission and its fate at the anchor.
struct TxLogEntry {
    double t_tx = 0.0;
    std::uint32_t device_id = 0;
    double elapsed = 0.0;  // exact device-side elapsed time at transmission
    bool event_bit = false;
    double distance_m = 0.0;
    double doppler_hz = 0.0;
    bool accepted = false;
    channel::Reason reason = channel::Reason::accepted;
};

/// Per-device energy ledger kept in audit mode.
struct DeviceAudit {
    std::int64_t initial_aj = 0;
    std::int64_t harvested_aj = 0;
    std::int64_t consumed_aj = 0;
    std::int64_t final_aj = 0;
    std::int64_t min_aj = 0;
    std::int64_t max_aj = 0;
    std::uint64_t sensing_tasks = 0;
    std::uint64_t beacon_receptions = 0;
    std::uint64_t transmissions = 0;
    std::int64_t sensing_cost_aj = 0;
    std::int64_t rx_cost_aj = 0;
    std::int64_t tx_cost_aj = 0;

    /// Final energy equals initial plus harvested minus consumed, and every
    /// consumed attojoule belongs to a counted task.
    bool balanced() const {
        return final_aj == initial_aj + harvested_aj - consumed_aj &&
               consumed_aj == static_cast<std::int64_t>(sensing_tasks) * sensing_cost_aj +
                                  static_cast<std::int64_t>(beacon_receptions) * rx_cost_aj +
                                  static_cast<std::int64_t>(transmissions) * tx_cost_aj;
    }
};

struct RunStats {
    std::uint64_t beacons = 0;
    std::uint64_t responses = 0;
    std::uint64_t accepted = 0;
    std::uint64_t collisions = 0;
    std::uint64_t below_sensitivity = 0;
    std::uint64_t doppler_rejections = 0;
    std::uint64_t detections = 0;
    double max_abs_doppler_hz = 0.0;
    double max_accepted_distance_m = 0.0;
};

struct RunOptions {
    bool audit = false;
    bool capture_tx = false;
};

struct RunResult {
    std::vector<ReportRecord> records;
    std::vector<TxLogEntry> tx_log;
    std::vector<DeviceAudit> audit;
    RunStats stats;
    Vec3 event_point;
};

/// True iff the device is powered and strictly closer than `threshold_cm`.
bool event_detect(const Vec3& device, const Vec3& event, double threshold_cm, bool powered);

/// Point drawn uniformly by arc length over the polylines of `region`.
Vec3 random_point_in_region(const topology::VascularTopology& topology, std::string_view region,
                            RandomStream& rng);

/// Concrete event point for a config (random placement uses the
/// `event_placement` stream of the config seed).
Vec3 resolve_event(const ScenarioConfig& config, const topology::VascularTopology& topology);

RunResult run_scenario(const ScenarioConfig& config, const topology::VascularTopology& topology,
                       const RunOptions& options = {});
std::vector<ReportRecord> run_scenario(const ScenarioConfig& config);

/// CSV `t_sim_s,device_id,elapsed_s,event_bit` with six-decimal times.
void persist_raw(const std::vector<ReportRecord>& records, const std::filesystem::path& path);
std::vector<ReportRecord> load_raw(const std::filesystem::path& path);
std::string format_fixed6(double value);

}  // namespace flowsim::engine
