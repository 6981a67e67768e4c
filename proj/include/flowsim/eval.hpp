#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowsim/engine.hpp"
#include "flowsim/localization.hpp"
#include "flowsim/topology.hpp"

namespace flowsim::eval {

/// One scenario family of a sweep: the baseline or one axis moved to one value.
struct SweepPoint {
    std::string axis;   // "baseline", "n_devices", "sampling_rate_hz" or "detection_threshold_cm"
    std::string value;  // "NA" for the baseline
    std::uint32_t n_devices = 64;
    double sampling_rate_hz = 3.0;
    double detection_threshold_cm = 1.0;

    /// Directory-safe identifier, e.g. "baseline" or "n_devices_32".
    std::string id() const;
};

struct DesignSpace {
    std::uint32_t base_devices = 64;
    double base_sampling_rate_hz = 3.0;
    double base_threshold_cm = 1.0;

    // An empty list leaves that axis out of the sweep.
    std::vector<std::uint32_t> devices{32, 64, 128};
    std::vector<double> sampling_rates_hz{2, 3, 5, 10};
    std::vector<double> thresholds_cm{0.5, 1, 2, 3};

    std::vector<double> checkpoints_s{120, 240, 360, 480, 600, 720, 840, 960};
    double eval_sim_time_s = 1100.0;
    double train_sim_time_s = 5000.0;

    std::filesystem::path base_config;  // scenario file, relative to the space file
    localization::TrainingOptions training;

    /// Baseline first, then each axis in the order above with its baseline
    /// value skipped.
    std::vector<SweepPoint> points() const;
    void validate() const;
};

DesignSpace space_from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir = {});
nlohmann::json to_json(const DesignSpace& space);
DesignSpace load_space(const std::filesystem::path& path);

/// Shortest decimal that round-trips, e.g. "0.5", "32".
std::string format_number(double value);

struct TestEvent {
    std::string region;
    Vec3 point;
};

/// One uniformly placed event per region, drawn from the `event_placement`
/// stream of the master seed in region order.
std::vector<TestEvent> make_test_events(const topology::VascularTopology& topology, std::uint64_t master_seed);

struct MetricsRow {
    std::string sweep_axis;
    std::string sweep_value;
    int solution = 1;
    double checkpoint_s = 0.0;
    std::string event_region;
    std::optional<std::string> predicted_region;
    bool available = false;
    std::optional<double> point_error_cm;

    bool operator==(const MetricsRow&) const = default;
};

inline constexpr const char* kMetricsHeader =
    "sweep_axis,sweep_value,solution,checkpoint_s,event_region,predicted_region,available,point_error_cm";

void write_metrics_csv(const std::vector<MetricsRow>& rows, const std::filesystem::path& path);
std::string metrics_csv(const std::vector<MetricsRow>& rows);
std::vector<MetricsRow> read_metrics_csv(const std::filesystem::path& path);

/// min, q1, median, q3, max with linear interpolation between order
/// statistics: position p * (n - 1) in the sorted sample.
struct Quartiles {
    double min = 0.0, q1 = 0.0, median = 0.0, q3 = 0.0, max = 0.0;
    double iqr() const { return q3 - q1; }
};
Quartiles quartiles(std::vector<double> values);

struct CheckpointMetrics {
    double checkpoint_s = 0.0;
    std::size_t events = 0;
    double region_accuracy = 0.0;  // correct / events, unavailable counted wrong
    double reliability = 0.0;      // available / events
    std::vector<double> errors;    // available estimates only
    std::optional<Quartiles> error_quartiles;
};

/// Per-checkpoint metrics of one (sweep point, solution). Every checkpoint
/// must cover the same set of events.
std::vector<CheckpointMetrics> compute_metrics(const std::vector<MetricsRow>& rows);

/// Rows of `all` matching one sweep point and solution.
std::vector<MetricsRow> select(const std::vector<MetricsRow>& all, const std::string& axis,
                               const std::string& value, int solution);

/// Worker count from FLOWSIM_THREADS, else the hardware concurrency.
std::size_t default_threads();

/// Runs task(i) for i in [0, n) on `threads` workers. The first failure (by
/// index) is rethrown after all workers stop.
void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& task);

struct TrainedModels {
    localization::Localizer s1, s2;
    localization::TrainingSummary summary1, summary2;

    void save(const std::filesystem::path& dir) const;
    static TrainedModels load(const std::filesystem::path& dir);
};

/// Scenario for a training run: baseline parameters, event at the region
/// centroid, seed from the `train:<region>` stream.
engine::ScenarioConfig training_scenario(const engine::ScenarioConfig& base, const DesignSpace& space,
                                         const std::string& region, std::uint64_t master_seed);

std::vector<localization::RegionRun> run_training_scenarios(const engine::ScenarioConfig& base,
                                                            const DesignSpace& space,
                                                            const topology::VascularTopology& topology,
                                                            std::uint64_t master_seed, std::size_t threads);

TrainedModels train_models(const std::vector<localization::RegionRun>& runs,
                           const topology::VascularTopology& topology, const DesignSpace& space,
                           std::uint64_t master_seed);

/// Scenario for one test event at one sweep point; the seed comes from the
/// `test:<region>` stream so trajectories are shared across sweep points.
engine::ScenarioConfig test_scenario(const engine::ScenarioConfig& base, const DesignSpace& space,
                                     const SweepPoint& point, const TestEvent& event, std::uint64_t master_seed);

/// Metrics rows for one scenario's records.
std::vector<MetricsRow> evaluate_records(const std::vector<engine::ReportRecord>& records, const SweepPoint& point,
                                         const TestEvent& event, const TrainedModels& models,
                                         const std::vector<double>& checkpoints,
                                         const topology::VascularTopology& topology);

struct SweepOptions {
    std::size_t threads = 1;
    std::optional<std::filesystem::path> out_dir;  // metrics.csv and raw/<point>/<region>.csv
};

/// Every sweep point x test event, evaluated for both solutions. Rows are
/// ordered by (sweep point, solution, checkpoint, event).
std::vector<MetricsRow> run_sweep(const DesignSpace& space, const engine::ScenarioConfig& base,
                                  const topology::VascularTopology& topology, const TrainedModels& models,
                                  std::uint64_t master_seed, const SweepOptions& options);

}  // namespace flowsim::eval
