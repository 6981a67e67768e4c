#include "flowsim/eval.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "flowsim/error.hpp"

namespace flowsim::eval {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

template <typename T>
void read_key(const json& obj, const char* key, T& out, const std::string& context) {
    auto it = obj.find(key);
    if (it == obj.end()) return;
    try {
        out = it->template get<T>();
    } catch (const json::exception&) {
        throw ConfigError(context + ": key '" + key + "' has the wrong type");
    }
}

void reject_unknown(const json& obj, std::initializer_list<const char*> known, const std::string& context) {
    for (const auto& item : obj.items()) {
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return item.key() == k; })) {
            throw ConfigError(context + ": unknown key '" + item.key() + "'");
        }
    }
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    std::istringstream ss(line);
    while (std::getline(ss, field, ',')) out.push_back(field);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_double(const std::string& text, const std::string& where) {
    double v = 0.0;
    const auto r = std::from_chars(text.data(), text.data() + text.size(), v);
    if (r.ec != std::errc() || r.ptr != text.data() + text.size()) {
        throw ParseError(where + ": not a number: '" + text + "'");
    }
    return v;
}

}  // namespace

std::string format_number(double value) {
    char buf[64];
    const auto r = std::to_chars(buf, buf + sizeof buf, value);
    return std::string(buf, r.ptr);
}

std::string SweepPoint::id() const { return axis == "baseline" ? axis : axis + "_" + value; }

std::vector<SweepPoint> DesignSpace::points() const {
    std::vector<SweepPoint> out;
    const SweepPoint base{"baseline", "NA", base_devices, base_sampling_rate_hz, base_threshold_cm};
    out.push_back(base);
    for (auto d : devices) {
        if (d == base_devices) continue;
        SweepPoint p = base;
        p.axis = "n_devices";
        p.value = std::to_string(d);
        p.n_devices = d;
        out.push_back(p);
    }
    for (double s : sampling_rates_hz) {
        if (s == base_sampling_rate_hz) continue;
        SweepPoint p = base;
        p.axis = "sampling_rate_hz";
        p.value = format_number(s);
        p.sampling_rate_hz = s;
        out.push_back(p);
    }
    for (double t : thresholds_cm) {
        if (t == base_threshold_cm) continue;
        SweepPoint p = base;
        p.axis = "detection_threshold_cm";
        p.value = format_number(t);
        p.detection_threshold_cm = t;
        out.push_back(p);
    }
    return out;
}

void DesignSpace::validate() const {
    if (base_devices == 0 || base_devices > 128) throw ConfigError("design space: baseline device count outside 1..128");
    for (auto d : devices) {
        if (d == 0 || d > 128) throw ConfigError("design space: device count " + std::to_string(d) + " outside 1..128");
    }
    for (double s : sampling_rates_hz) {
        if (!(s > 0.0)) throw ConfigError("design space: sampling rates must be positive");
    }
    for (double t : thresholds_cm) {
        if (!(t > 0.0)) throw ConfigError("design space: thresholds must be positive");
    }
    if (checkpoints_s.empty()) throw ConfigError("design space: no checkpoints");
    for (std::size_t i = 0; i < checkpoints_s.size(); ++i) {
        if (!(checkpoints_s[i] > 0.0) || (i > 0 && checkpoints_s[i] <= checkpoints_s[i - 1])) {
            throw ConfigError("design space: checkpoints must be positive and increasing");
        }
    }
    if (checkpoints_s.back() > eval_sim_time_s) {
        throw ConfigError("design space: last checkpoint beyond the evaluation run length");
    }
    if (!(train_sim_time_s > 0.0)) throw ConfigError("design space: training run length must be positive");
}

DesignSpace space_from_json(const json& doc, const fs::path& base_dir) {
    if (!doc.is_object()) throw ConfigError("design space: expected an object");
    reject_unknown(doc, {"baseline", "axes", "checkpoints_s", "eval_sim_time_s", "train_sim_time_s", "base_config",
                         "training"},
                   "design space");
    DesignSpace s;
    if (auto it = doc.find("baseline"); it != doc.end()) {
        reject_unknown(*it, {"n_devices", "sampling_rate_hz", "detection_threshold_cm"}, "design space baseline");
        read_key(*it, "n_devices", s.base_devices, "baseline");
        read_key(*it, "sampling_rate_hz", s.base_sampling_rate_hz, "baseline");
        read_key(*it, "detection_threshold_cm", s.base_threshold_cm, "baseline");
    }
    if (auto it = doc.find("axes"); it != doc.end()) {
        reject_unknown(*it, {"n_devices", "sampling_rate_hz", "detection_threshold_cm"}, "design space axes");
        s.devices.clear();
        s.sampling_rates_hz.clear();
        s.thresholds_cm.clear();
        read_key(*it, "n_devices", s.devices, "axes");
        read_key(*it, "sampling_rate_hz", s.sampling_rates_hz, "axes");
        read_key(*it, "detection_threshold_cm", s.thresholds_cm, "axes");
    }
    read_key(doc, "checkpoints_s", s.checkpoints_s, "design space");
    read_key(doc, "eval_sim_time_s", s.eval_sim_time_s, "design space");
    read_key(doc, "train_sim_time_s", s.train_sim_time_s, "design space");
    std::string base;
    read_key(doc, "base_config", base, "design space");
    if (!base.empty()) {
        const fs::path p(base);
        s.base_config = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
    }
    if (auto it = doc.find("training"); it != doc.end()) s.training = localization::TrainingOptions::from_json(*it);
    s.validate();
    return s;
}

json to_json(const DesignSpace& s) {
    json doc = {{"baseline",
                 {{"n_devices", s.base_devices},
                  {"sampling_rate_hz", s.base_sampling_rate_hz},
                  {"detection_threshold_cm", s.base_threshold_cm}}},
                {"axes",
                 {{"n_devices", s.devices},
                  {"sampling_rate_hz", s.sampling_rates_hz},
                  {"detection_threshold_cm", s.thresholds_cm}}},
                {"checkpoints_s", s.checkpoints_s},
                {"eval_sim_time_s", s.eval_sim_time_s},
                {"train_sim_time_s", s.train_sim_time_s},
                {"training", s.training.to_json()}};
    if (!s.base_config.empty()) doc["base_config"] = s.base_config.string();
    return doc;
}

DesignSpace load_space(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open design space " + path.string());
    json doc;
    try {
        doc = json::parse(in);
    } catch (const json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    return space_from_json(doc, path.parent_path());
}

std::vector<TestEvent> make_test_events(const topology::VascularTopology& topology, std::uint64_t master_seed) {
    RandomStream rng(master_seed, "event_placement");
    std::vector<TestEvent> out;
    for (const auto& r : topology.regions()) out.push_back({r.id, engine::random_point_in_region(topology, r.id, rng)});
    return out;
}

// ---------------------------------------------------------------------------
// Metrics

std::string metrics_csv(const std::vector<MetricsRow>& rows) {
    std::string out = kMetricsHeader;
    out += '\n';
    for (const auto& r : rows) {
        out += r.sweep_axis + ',' + r.sweep_value + ',' + std::to_string(r.solution) + ',' +
               format_number(r.checkpoint_s) + ',' + r.event_region + ',' + r.predicted_region.value_or("NA") + ',' +
               (r.available ? "1" : "0") + ',' +
               (r.point_error_cm ? engine::format_fixed6(*r.point_error_cm) : std::string("NA")) + '\n';
    }
    return out;
}

void write_metrics_csv(const std::vector<MetricsRow>& rows, const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << metrics_csv(rows);
    if (!out) throw Error("write failed for " + path.string());
}

std::vector<MetricsRow> read_metrics_csv(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ParseError("cannot open metrics file " + path.string());
    std::string line;
    if (!std::getline(in, line) || line != kMetricsHeader) {
        throw ParseError(path.string() + ": expected header '" + std::string(kMetricsHeader) + "'");
    }
    std::vector<MetricsRow> rows;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        const std::string where = path.string() + ":" + std::to_string(lineno);
        const auto f = split_csv(line);
        if (f.size() != 8) throw ParseError(where + ": expected 8 fields, got " + std::to_string(f.size()));
        MetricsRow r;
        r.sweep_axis = f[0];
        r.sweep_value = f[1];
        if (f[2] != "1" && f[2] != "2") throw ParseError(where + ": solution must be 1 or 2");
        r.solution = f[2] == "1" ? 1 : 2;
        r.checkpoint_s = parse_double(f[3], where);
        r.event_region = f[4];
        if (f[5] != "NA") r.predicted_region = f[5];
        if (f[6] != "0" && f[6] != "1") throw ParseError(where + ": available must be 0 or 1");
        r.available = f[6] == "1";
        if (f[7] != "NA") r.point_error_cm = parse_double(f[7], where);
        if (r.available != r.point_error_cm.has_value() || r.available != r.predicted_region.has_value()) {
            throw ParseError(where + ": availability disagrees with the prediction fields");
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

Quartiles quartiles(std::vector<double> v) {
    if (v.empty()) throw ValidationError("quartiles of an empty sample");
    std::sort(v.begin(), v.end());
    const auto at = [&](double p) {
        const double pos = p * static_cast<double>(v.size() - 1);
        const auto lo = static_cast<std::size_t>(pos);
        const double frac = pos - static_cast<double>(lo);
        if (lo + 1 >= v.size()) return v.back();
        return v[lo] + frac * (v[lo + 1] - v[lo]);
    };
    return {v.front(), at(0.25), at(0.5), at(0.75), v.back()};
}

std::vector<CheckpointMetrics> compute_metrics(const std::vector<MetricsRow>& rows) {
    std::map<double, std::vector<const MetricsRow*>> by_checkpoint;
    for (const auto& r : rows) by_checkpoint[r.checkpoint_s].push_back(&r);
    std::optional<std::multiset<std::string>> events;
    std::vector<CheckpointMetrics> out;
    for (const auto& [cp, group] : by_checkpoint) {
        std::multiset<std::string> these;
        for (const auto* r : group) these.insert(r->event_region);
        if (events && these != *events) {
            throw ValidationError("missing checkpoint data: checkpoint " + format_number(cp) +
                                  " covers a different set of events");
        }
        events = these;
        CheckpointMetrics m;
        m.checkpoint_s = cp;
        m.events = group.size();
        std::size_t correct = 0, available = 0;
        for (const auto* r : group) {
            if (!r->available) continue;
            ++available;
            if (r->predicted_region == r->event_region) ++correct;
            if (r->point_error_cm) m.errors.push_back(*r->point_error_cm);
        }
        m.region_accuracy = static_cast<double>(correct) / static_cast<double>(m.events);
        m.reliability = static_cast<double>(available) / static_cast<double>(m.events);
        if (!m.errors.empty()) m.error_quartiles = quartiles(m.errors);
        out.push_back(std::move(m));
    }
    return out;
}

std::vector<MetricsRow> select(const std::vector<MetricsRow>& all, const std::string& axis, const std::string& value,
                               int solution) {
    std::vector<MetricsRow> out;
    for (const auto& r : all) {
        if (r.sweep_axis == axis && r.sweep_value == value && r.solution == solution) out.push_back(r);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Execution

std::size_t default_threads() {
    if (const char* env = std::getenv("FLOWSIM_THREADS")) {
        std::size_t n = 0;
        const std::string_view s(env);
        const auto r = std::from_chars(s.data(), s.data() + s.size(), n);
        if (r.ec != std::errc() || r.ptr != s.data() + s.size() || n == 0) {
            throw ConfigError("FLOWSIM_THREADS must be a positive integer, got '" + std::string(env) + "'");
        }
        return n;
    }
    return std::max(1u, std::thread::hardware_concurrency());
}

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& task) {
    if (n == 0) return;
    std::vector<std::exception_ptr> errors(n);
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    auto worker = [&] {
        for (std::size_t i = next++; i < n && !failed; i = next++) {
            try {
                task(i);
            } catch (...) {
                errors[i] = std::current_exception();
                failed = true;
            }
        }
    };
    const std::size_t count = std::clamp<std::size_t>(threads, 1, n);
    if (count == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < count; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

void TrainedModels::save(const fs::path& dir) const {
    fs::create_directories(dir);
    s1.save(dir / "solution1.json");
    s2.save(dir / "solution2.json");
    std::ofstream out(dir / "training_summary.json", std::ios::binary);
    if (!out) throw Error("cannot write " + (dir / "training_summary.json").string());
    out << json{{"solution1", summary1.to_json()}, {"solution2", summary2.to_json()}}.dump(2) << '\n';
}

TrainedModels TrainedModels::load(const fs::path& dir) {
    TrainedModels m;
    m.s1 = localization::Localizer::load(dir / "solution1.json");
    m.s2 = localization::Localizer::load(dir / "solution2.json");
    if (m.s1.solution != localization::Solution::one || m.s2.solution != localization::Solution::two) {
        throw ParseError(dir.string() + ": solution files are swapped or mislabelled");
    }
    return m;
}

engine::ScenarioConfig training_scenario(const engine::ScenarioConfig& base, const DesignSpace& space,
                                         const std::string& region, std::uint64_t master_seed) {
    engine::ScenarioConfig c = base;
    c.n_devices = space.base_devices;
    c.sampling_rate_hz = space.base_sampling_rate_hz;
    c.detection_threshold_cm = space.base_threshold_cm;
    c.sim_time_s = space.train_sim_time_s;
    c.event = engine::EventLocation::centroid_of(region);
    c.seed = stream_seed(master_seed, "train:" + region);
    return c;
}

std::vector<localization::RegionRun> run_training_scenarios(const engine::ScenarioConfig& base,
                                                            const DesignSpace& space,
                                                            const topology::VascularTopology& topology,
                                                            std::uint64_t master_seed, std::size_t threads) {
    const auto& regions = topology.regions();
    std::vector<localization::RegionRun> runs(regions.size());
    parallel_for(regions.size(), threads, [&](std::size_t i) {
        const auto config = training_scenario(base, space, regions[i].id, master_seed);
        try {
            runs[i] = {regions[i].id, engine::run_scenario(config, topology).records};
        } catch (const Error& e) {
            throw Error("training scenario '" + regions[i].id + "': " + e.what());
        }
    });
    return runs;
}

TrainedModels train_models(const std::vector<localization::RegionRun>& runs,
                           const topology::VascularTopology& topology, const DesignSpace& space,
                           std::uint64_t master_seed) {
    using localization::Solution;
    TrainedModels m;
    const auto set1 = localization::build_training_set(runs, Solution::one, topology);
    m.s1 = localization::train(set1, space.training, stream_seed(master_seed, "train_solution1"), &m.summary1);
    const auto set2 = localization::build_training_set(runs, Solution::two, topology);
    m.s2 = localization::train(set2, space.training, stream_seed(master_seed, "train_solution2"), &m.summary2);
    return m;
}

engine::ScenarioConfig test_scenario(const engine::ScenarioConfig& base, const DesignSpace& space,
                                     const SweepPoint& point, const TestEvent& event, std::uint64_t master_seed) {
    engine::ScenarioConfig c = base;
    c.n_devices = point.n_devices;
    c.sampling_rate_hz = point.sampling_rate_hz;
    c.detection_threshold_cm = point.detection_threshold_cm;
    c.sim_time_s = space.eval_sim_time_s;
    c.event = engine::EventLocation::at(event.point);
    c.seed = stream_seed(master_seed, "test:" + event.region);
    return c;
}

std::vector<MetricsRow> evaluate_records(const std::vector<engine::ReportRecord>& records, const SweepPoint& point,
                                         const TestEvent& event, const TrainedModels& models,
                                         const std::vector<double>& checkpoints,
                                         const topology::VascularTopology& topology) {
    std::vector<MetricsRow> rows;
    for (int solution : {1, 2}) {
        const auto& model = solution == 1 ? models.s1 : models.s2;
        const auto estimates = localization::infer_checkpoints(model, records, checkpoints, topology);
        for (std::size_t c = 0; c < checkpoints.size(); ++c) {
            const auto& e = estimates[c];
            MetricsRow r{point.axis, point.value, solution, checkpoints[c], event.region, e.region, e.available, {}};
            if (e.available) r.point_error_cm = distance(*e.point, event.point);
            rows.push_back(std::move(r));
        }
    }
    return rows;
}

std::vector<MetricsRow> run_sweep(const DesignSpace& space, const engine::ScenarioConfig& base,
                                  const topology::VascularTopology& topology, const TrainedModels& models,
                                  std::uint64_t master_seed, const SweepOptions& options) {
    space.validate();
    const auto points = space.points();
    const auto events = make_test_events(topology, master_seed);
    const std::size_t n_events = events.size();
    std::vector<std::vector<MetricsRow>> per_scenario(points.size() * n_events);

    if (options.out_dir) {
        for (const auto& p : points) fs::create_directories(*options.out_dir / "raw" / p.id());
    }
    parallel_for(per_scenario.size(), options.threads, [&](std::size_t i) {
        const auto& point = points[i / n_events];
        const auto& event = events[i % n_events];
        const std::string id = point.id() + "/" + event.region;
        try {
            const auto config = test_scenario(base, space, point, event, master_seed);
            const auto records = engine::run_scenario(config, topology).records;
            if (options.out_dir) engine::persist_raw(records, *options.out_dir / "raw" / point.id() / (event.region + ".csv"));
            per_scenario[i] = evaluate_records(records, point, event, models, space.checkpoints_s, topology);
        } catch (const Error& e) {
            throw Error("scenario " + id + ": " + e.what());
        }
    });

    // Scenario rows come solution-major then checkpoint; reorder to
    // (point, solution, checkpoint, event).
    const std::size_t n_cp = space.checkpoints_s.size();
    std::vector<MetricsRow> rows;
    rows.reserve(per_scenario.size() * 2 * n_cp);
    for (std::size_t p = 0; p < points.size(); ++p) {
        for (std::size_t s = 0; s < 2; ++s) {
            for (std::size_t c = 0; c < n_cp; ++c) {
                for (std::size_t e = 0; e < n_events; ++e) {
                    rows.push_back(per_scenario[p * n_events + e][s * n_cp + c]);
                }
            }
        }
    }
    if (options.out_dir) write_metrics_csv(rows, *options.out_dir / "metrics.csv");
    return rows;
}

}  // namespace flowsim::eval
