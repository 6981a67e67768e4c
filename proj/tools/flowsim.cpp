// flowsim command line: topology checks, single scenarios, training, sweeps
// and metric summaries.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "flowsim/engine.hpp"
#include "flowsim/error.hpp"
#include "flowsim/eval.hpp"
#include "flowsim/localization.hpp"
#include "flowsim/topology.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace flowsim;

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
    if (!out) throw Error("write failed for " + path.string());
}

struct SpaceAndBase {
    eval::DesignSpace space;
    engine::ScenarioConfig base;
};

SpaceAndBase load_space_and_base(const fs::path& space_path) {
    SpaceAndBase out{eval::load_space(space_path), {}};
    if (out.space.base_config.empty()) throw ConfigError(space_path.string() + ": base_config is required");
    out.base = engine::load_config(out.space.base_config);
    return out;
}

std::size_t threads_or_default(int requested) {
    return requested > 0 ? static_cast<std::size_t>(requested) : eval::default_threads();
}

eval::TrainedModels train_all(const SpaceAndBase& sb, const topology::VascularTopology& topo, std::uint64_t seed,
                              std::size_t threads) {
    auto t0 = std::chrono::steady_clock::now();
    const auto runs = eval::run_training_scenarios(sb.base, sb.space, topo, seed, threads);
    std::fprintf(stderr, "training runs: %zu regions in %.1f s\n", runs.size(), seconds_since(t0));
    t0 = std::chrono::steady_clock::now();
    auto models = eval::train_models(runs, topo, sb.space, seed);
    std::fprintf(stderr, "solution 1: accuracy %.4f (%s); solution 2: accuracy %.4f; %.1f s\n",
                 models.summary1.train_accuracy, models.summary1.stop_reason.c_str(),
                 models.summary2.train_accuracy, seconds_since(t0));
    return models;
}

int cmd_topology_validate(const fs::path& path) {
    const auto topo = topology::load_and_validate(path);
    json loops = json::object();
    for (const auto& r : topo.regions()) {
        if (r.id == topo.heart_region()) continue;
        loops[r.id] = topology::loop_time(topo, r.id);
    }
    std::cout << json{{"valid", true},
                      {"regions", topo.regions().size()},
                      {"segments", topo.segments().size()},
                      {"loop_times_s", loops}}
                     .dump(2)
              << '\n';
    return 0;
}

struct SimulateArgs {
    fs::path config;
    std::optional<std::uint64_t> seed;
    fs::path out;
    bool audit = false;
};

int cmd_simulate(const SimulateArgs& a) {
    auto config = engine::load_config(a.config);
    if (a.seed) config.seed = *a.seed;
    const auto topo = topology::load_and_validate(config.topology_path);
    const auto t0 = std::chrono::steady_clock::now();
    const auto result = engine::run_scenario(config, topo, {a.audit, false});
    const double wall = seconds_since(t0);
    if (!a.out.empty()) engine::persist_raw(result.records, a.out);
    const auto& s = result.stats;
    json summary = {{"records", result.records.size()},
                    {"event_point_cm", {result.event_point.x, result.event_point.y, result.event_point.z}},
                    {"beacons", s.beacons},
                    {"responses", s.responses},
                    {"accepted", s.accepted},
                    {"collisions", s.collisions},
                    {"below_sensitivity", s.below_sensitivity},
                    {"detections", s.detections},
                    {"wall_time_s", wall}};
    if (a.audit) {
        bool balanced = true;
        std::int64_t min_aj = 0, max_aj = 0;
        for (std::size_t i = 0; i < result.audit.size(); ++i) {
            const auto& d = result.audit[i];
            balanced = balanced && d.balanced();
            if (i == 0 || d.min_aj < min_aj) min_aj = d.min_aj;
            if (i == 0 || d.max_aj > max_aj) max_aj = d.max_aj;
        }
        summary["audit"] = {{"balanced", balanced}, {"min_energy_pj", min_aj * 1e-6}, {"max_energy_pj", max_aj * 1e-6}};
    }
    std::cout << summary.dump(2) << '\n';
    return 0;
}

int cmd_train(const fs::path& space_path, std::uint64_t seed, const fs::path& out, int threads) {
    const auto sb = load_space_and_base(space_path);
    const auto topo = topology::load_and_validate(sb.base.topology_path);
    const auto models = train_all(sb, topo, seed, threads_or_default(threads));
    models.save(out);
    std::cout << json{{"solution1", models.summary1.to_json()}, {"solution2", models.summary2.to_json()}}.dump(2)
              << '\n';
    return 0;
}

struct EvaluateArgs {
    fs::path models;
    fs::path raw;
    fs::path topology;
    std::vector<double> checkpoints{120, 240, 360, 480, 600, 720, 840, 960};
    std::optional<std::vector<double>> event_point;
};

int cmd_evaluate(const EvaluateArgs& a) {
    const auto models = eval::TrainedModels::load(a.models);
    const auto topo = topology::load_and_validate(a.topology);
    const auto records = engine::load_raw(a.raw);
    std::optional<Vec3> truth;
    if (a.event_point) {
        if (a.event_point->size() != 3) throw ConfigError("--event-point needs three coordinates");
        truth = Vec3{(*a.event_point)[0], (*a.event_point)[1], (*a.event_point)[2]};
    }
    json out = json::array();
    for (int s : {1, 2}) {
        const auto& m = s == 1 ? models.s1 : models.s2;
        const auto est = localization::infer_checkpoints(m, records, a.checkpoints, topo);
        for (std::size_t i = 0; i < est.size(); ++i) {
            json row = {{"solution", s},
                        {"checkpoint_s", a.checkpoints[i]},
                        {"available", est[i].available},
                        {"reports_used", est[i].n_reports_used}};
            row["predicted_region"] = est[i].region ? json(*est[i].region) : json(nullptr);
            if (est[i].point) row["point_cm"] = {est[i].point->x, est[i].point->y, est[i].point->z};
            if (est[i].point && truth) row["point_error_cm"] = distance(*est[i].point, *truth);
            out.push_back(row);
        }
    }
    std::cout << out.dump(2) << '\n';
    return 0;
}

struct SweepArgs {
    fs::path space;
    fs::path out;
    std::optional<fs::path> models;
    std::uint64_t seed = 1;
    int threads = 0;
};

int cmd_sweep(const SweepArgs& a) {
    const auto sb = load_space_and_base(a.space);
    const auto topo = topology::load_and_validate(sb.base.topology_path);
    const std::size_t threads = threads_or_default(a.threads);
    eval::TrainedModels models;
    if (a.models && fs::exists(*a.models / "solution1.json")) {
        models = eval::TrainedModels::load(*a.models);
    } else {
        models = train_all(sb, topo, a.seed, threads);
        models.save(a.models.value_or(a.out / "models"));
    }
    const auto t0 = std::chrono::steady_clock::now();
    const auto rows = eval::run_sweep(sb.space, sb.base, topo, models, a.seed, {threads, a.out});
    std::fprintf(stderr, "sweep: %zu rows in %.1f s -> %s\n", rows.size(), seconds_since(t0),
                 (a.out / "metrics.csv").string().c_str());
    return 0;
}

int cmd_metrics(const fs::path& csv, const fs::path& out) {
    const auto rows = eval::read_metrics_csv(csv);
    // Group in file order of first appearance.
    std::vector<std::tuple<std::string, std::string, int>> keys;
    std::map<std::tuple<std::string, std::string, int>, std::vector<eval::MetricsRow>> groups;
    for (const auto& r : rows) {
        const auto k = std::make_tuple(r.sweep_axis, r.sweep_value, r.solution);
        auto [it, fresh] = groups.try_emplace(k);
        if (fresh) keys.push_back(k);
        it->second.push_back(r);
    }
    std::string text =
        "sweep_axis,sweep_value,solution,checkpoint_s,events,region_accuracy,reliability,"
        "error_min,error_q1,error_median,error_q3,error_max\n";
    for (const auto& k : keys) {
        for (const auto& m : eval::compute_metrics(groups[k])) {
            text += std::get<0>(k) + ',' + std::get<1>(k) + ',' + std::to_string(std::get<2>(k)) + ',' +
                    eval::format_number(m.checkpoint_s) + ',' + std::to_string(m.events) + ',' +
                    engine::format_fixed6(m.region_accuracy) + ',' + engine::format_fixed6(m.reliability);
            if (const auto& q = m.error_quartiles) {
                for (double v : {q->min, q->q1, q->median, q->q3, q->max}) text += ',' + engine::format_fixed6(v);
            } else {
                text += ",NA,NA,NA,NA,NA";
            }
            text += '\n';
        }
    }
    if (out.empty()) {
        std::cout << text;
    } else {
        write_text(out, text);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Flow-guided nanoscale localization simulator"};
    app.require_subcommand(1);

    fs::path topo_path;
    auto* topo_cmd = app.add_subcommand("topology-validate", "Check a topology file and print its loop times");
    topo_cmd->add_option("--topology", topo_path, "Topology JSON")->required();

    SimulateArgs sim;
    auto* sim_cmd = app.add_subcommand("simulate", "Run one scenario and write its raw report CSV");
    sim_cmd->add_option("--config", sim.config, "Scenario JSON")->required();
    sim_cmd->add_option("--seed", sim.seed, "Override the scenario seed");
    sim_cmd->add_option("--out", sim.out, "Raw report CSV");
    sim_cmd->add_flag("--audit", sim.audit, "Check the per-device energy ledger");

    fs::path train_space, train_out;
    std::uint64_t train_seed = 1;
    int train_threads = 0;
    auto* train_cmd = app.add_subcommand("train", "Run the training scenarios and fit both solutions");
    train_cmd->add_option("--space", train_space, "Design space JSON")->required();
    train_cmd->add_option("--seed", train_seed, "Master seed");
    train_cmd->add_option("--out", train_out, "Model directory")->required();
    train_cmd->add_option("--threads", train_threads, "Worker threads (default: FLOWSIM_THREADS or all cores)");

    EvaluateArgs ev;
    auto* ev_cmd = app.add_subcommand("evaluate", "Localize one raw report stream with trained models");
    ev_cmd->add_option("--models", ev.models, "Model directory")->required();
    ev_cmd->add_option("--raw", ev.raw, "Raw report CSV")->required();
    ev_cmd->add_option("--topology", ev.topology, "Topology JSON")->required();
    ev_cmd->add_option("--checkpoints", ev.checkpoints, "Checkpoint times in seconds");
    ev_cmd->add_option("--event-point", ev.event_point, "True event position x y z (cm)")->expected(3);

    SweepArgs sw;
    auto* sw_cmd = app.add_subcommand("sweep", "Evaluate every design-space point and write metrics.csv");
    sw_cmd->add_option("--space", sw.space, "Design space JSON")->required();
    sw_cmd->add_option("--out", sw.out, "Output directory")->required();
    sw_cmd->add_option("--models", sw.models, "Model directory; trained and saved there if absent");
    sw_cmd->add_option("--seed", sw.seed, "Master seed");
    sw_cmd->add_option("--threads", sw.threads, "Worker threads (default: FLOWSIM_THREADS or all cores)");

    fs::path metrics_csv, metrics_out;
    auto* met_cmd = app.add_subcommand("metrics", "Summarize metrics.csv per sweep point, solution and checkpoint");
    met_cmd->add_option("--csv", metrics_csv, "metrics.csv")->required();
    met_cmd->add_option("--out", metrics_out, "Summary CSV (default: stdout)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (*topo_cmd) return cmd_topology_validate(topo_path);
        if (*sim_cmd) return cmd_simulate(sim);
        if (*train_cmd) return cmd_train(train_space, train_seed, train_out, train_threads);
        if (*ev_cmd) return cmd_evaluate(ev);
        if (*sw_cmd) return cmd_sweep(sw);
        if (*met_cmd) return cmd_metrics(metrics_csv, metrics_out);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 2;
}
