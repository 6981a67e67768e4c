// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits non-zero if any fails. The full pipeline trains both solutions at
// their default sizes, so a run takes several minutes on one core.
//
// Usage: flowsim_acceptance <data dir> <work dir>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "flowsim/channel.hpp"
#include "flowsim/engine.hpp"
#include "flowsim/error.hpp"
#include "flowsim/eval.hpp"
#include "flowsim/localization.hpp"
#include "flowsim/nn.hpp"
#include "flowsim/rng.hpp"
#include "flowsim/topology.hpp"

namespace fs = std::filesystem;
using namespace flowsim;

namespace {

constexpr std::uint64_t kSeed = 1;

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void report(const std::string& name, const Outcome& o) {
    std::printf("%s %s: %s\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str());
    std::fflush(stdout);
    if (!o.pass) ++failures;
}

void run(const std::string& name, const std::function<Outcome()>& check) {
    try {
        report(name, check());
    } catch (const std::exception& e) {
        report(name, {false, std::string("exception: ") + e.what()});
    }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string sci(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2e", v);
    return buf;
}

std::string fmt(double v, int digits = 3) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string read_file(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

struct Context {
    Context(fs::path data, fs::path work, topology::VascularTopology t)
        : data_dir(std::move(data)), work_dir(std::move(work)), topo(std::move(t)) {}

    fs::path data_dir, work_dir;
    topology::VascularTopology topo;
    engine::ScenarioConfig base;
    eval::DesignSpace space;
    std::size_t threads = 1;

    // Filled by the pipeline stage.
    std::vector<localization::RegionRun> runs;
    eval::TrainedModels models;
    std::vector<eval::MetricsRow> rows;
    bool pipeline_ok = false;
    std::string pipeline_error;
};

engine::ScenarioConfig baseline_config(const Context& c) {
    engine::ScenarioConfig cfg = c.base;
    cfg.event = engine::EventLocation::random_in("liver");
    cfg.seed = kSeed;
    return cfg;
}

// ---------------------------------------------------------------------------
// Property suites

Outcome energy_invariants(const Context& c) {
    engine::RunOptions o;
    o.audit = true;
    const auto r = engine::run_scenario(baseline_config(c), c.topo, o);
    const std::int64_t cap = static_cast<std::int64_t>(std::llround(c.base.power.e_max_pj * 1e6));
    std::int64_t lo = 0, hi = 0;
    std::size_t unbalanced = 0;
    for (std::size_t i = 0; i < r.audit.size(); ++i) {
        const auto& a = r.audit[i];
        lo = i == 0 ? a.min_aj : std::min(lo, a.min_aj);
        hi = i == 0 ? a.max_aj : std::max(hi, a.max_aj);
        unbalanced += !a.balanced();
    }
    const bool ok = !r.audit.empty() && lo >= 0 && hi <= cap && unbalanced == 0;
    return {ok, std::to_string(r.audit.size()) + " devices, energy range [" + fmt(lo * 1e-6) + ", " +
                    fmt(hi * 1e-6) + "] pJ, cap " + fmt(c.base.power.e_max_pj, 0) + " pJ, " +
                    std::to_string(unbalanced) + " unbalanced ledgers"};
}

Outcome channel_oracle() {
    const channel::ChannelParams p;
    const double range_mm = channel::communication_range_m(p) * 1e3;
    const bool range_ok = std::abs(range_mm - 20.8) <= 0.1;

    RandomStream rng(kSeed, "acceptance:channel");
    std::size_t disagree = 0;
    for (int i = 0; i < 1000; ++i) {
        const double d = rng.uniform(1e-4, 0.05);
        const double closed = p.tx_power_dbm - 20.0 * std::log10(4.0 * std::numbers::pi * d * p.frequency_hz / channel::kSpeedOfLight) -
                              p.attenuation_db_per_mm * d * 1e3;
        const auto lb = channel::path_loss_db(d, p);
        const bool expect = closed >= p.sensitivity_dbm;
        const auto dec = channel::receive_decision(lb, {}, p);
        disagree += dec.accepted != expect || std::abs(lb.received_power_dbm - closed) > 1e-9;
    }

    const auto a = channel::path_loss_db(0.010, p);
    const channel::LinkBudget others[] = {a};
    const bool collide = !channel::receive_decision(a, others, p).accepted;

    return {range_ok && disagree == 0 && collide,
            "range " + fmt(range_mm, 3) + " mm, " + std::to_string(disagree) +
                "/1000 closed-form disagreements, equal-power pair " + (collide ? "rejected" : "ACCEPTED")};
}

Outcome gradient_correctness() {
    RandomStream rng(kSeed, "acceptance:grad");
    nn::Matrix x(24, 1);
    for (Eigen::Index i = 0; i < x.rows(); ++i) x(i, 0) = rng.uniform(-2.0, 2.0);
    std::vector<int> y24, y25;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        y24.push_back(static_cast<int>(rng.below(24)));
        y25.push_back(static_cast<int>(rng.below(25)));
    }

    nn::MlpModel s1 = nn::make_two_layer(1, 12, 24, rng);
    nn::LossOptions o1;
    o1.l2 = 1e-2;
    const double e1 = nn::gradient_check(s1, x, y24, nn::Loss::cross_entropy, o1);

    nn::MlpModel s2 = nn::make_three_layer(1, 10, 25, 0.2, rng);
    for (auto& layer : s2.layers) {
        if (auto* b = std::get_if<nn::BatchNorm>(&layer)) {
            for (Eigen::Index i = 0; i < b->gamma.size(); ++i) {
                b->gamma[i] = rng.uniform(0.5, 1.5);
                b->beta[i] = rng.uniform(-0.5, 0.5);
            }
        }
    }
    s2.mode = nn::Mode::train;
    nn::LossOptions o2;
    o2.dropout_seed = 7;
    o2.class_weights = nn::Vector::LinSpaced(25, 0.5, 2.0);
    const double e2 = nn::gradient_check(s2, x, y25, nn::Loss::nll, o2);

    return {e1 < 1e-4 && e2 < 1e-4,
            "max relative error: solution 1 (hidden 12) " + sci(e1) + ", solution 2 (hidden 10) " + sci(e2)};
}

/// One run per region with every record positive at 20 + 1.5 k seconds
/// (k the region index) plus +-0.02 s of uniform jitter.
std::vector<localization::RegionRun> idealized_runs(const topology::VascularTopology& topo, std::size_t per_class) {
    RandomStream rng(kSeed, "acceptance:idealized");
    std::vector<localization::RegionRun> runs;
    for (std::size_t k = 0; k < topo.regions().size(); ++k) {
        localization::RegionRun run{topo.regions()[k].id, {}};
        for (std::size_t i = 0; i < per_class; ++i) {
            const double e = 20.0 + 1.5 * static_cast<double>(k) + rng.uniform(-0.02, 0.02);
            run.records.push_back({static_cast<double>(i), static_cast<std::uint32_t>(i % 64), e, true});
        }
        runs.push_back(std::move(run));
    }
    return runs;
}

double train_accuracy(const localization::Localizer& m, const localization::TrainingSet& set) {
    const auto p = m.probabilities(set.elapsed);
    std::size_t ok = 0;
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        ok += static_cast<int>(localization::argmax_lowest(p.row(r).transpose())) ==
              set.labels[static_cast<std::size_t>(r)];
    }
    return static_cast<double>(ok) / static_cast<double>(set.labels.size());
}

Outcome optimizer_sanity(const Context& c) {
    // Quadratic 0.5 (x - m)' A (x - m) with a fixed SPD A.
    const int n = 6;
    nn::Matrix B(n, n);
    RandomStream rng(kSeed, "acceptance:quadratic");
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) B(i, j) = rng.uniform(-1.0, 1.0);
    }
    const nn::Matrix A = B * B.transpose() + nn::Matrix::Identity(n, n);
    nn::Vector m(n);
    for (int i = 0; i < n; ++i) m[i] = rng.uniform(-3.0, 3.0);
    const auto rep = nn::lbfgs_minimize(
        [&](const nn::Vector& x, nn::Vector& g) {
            const nn::Vector d = x - m;
            g = A * d;
            return 0.5 * d.dot(A * d);
        },
        nn::Vector::Zero(n), {10, 200, 1e-12});
    const double qerr = (rep.x - m).cwiseAbs().maxCoeff();

    const auto runs = idealized_runs(c.topo, 40);
    const auto set1 = localization::build_training_set(runs, localization::Solution::one, c.topo);
    const auto set2 = localization::build_training_set(runs, localization::Solution::two, c.topo);
    const auto& opts = c.space.training;
    const auto m1 = localization::train(set1, opts, kSeed);
    const auto m2 = localization::train(set2, opts, kSeed);
    const double a1 = train_accuracy(m1, set1), a2 = train_accuracy(m2, set2);
    return {qerr <= 1e-8 && a1 >= 0.95 && a2 >= 0.95,
            "quadratic max |x - x*| = " + sci(qerr) + " after " + std::to_string(rep.iterations) +
                " iterations; idealized training accuracy at default sizes: solution 1 " + fmt(a1) +
                ", solution 2 " + fmt(a2)};
}

Outcome compounding(const Context& c) {
    auto cfg = baseline_config(c);
    cfg.overrides.forced_collision_probability = 0.5;
    cfg.always_on = true;
    const auto r = engine::run_scenario(cfg, c.topo);
    const double tol = cfg.protocol.beacon_interval_s;
    std::vector<double> loops;
    for (const auto& reg : c.topo.regions()) {
        if (reg.id != c.topo.heart_region()) loops.push_back(topology::loop_time(c.topo, reg.id));
    }
    std::map<int, std::size_t> multiples;
    for (const auto& rec : r.records) {
        for (double L : loops) {
            const double k = std::round(rec.elapsed / L);
            if (k >= 1.0 && k <= 5.0 && std::abs(rec.elapsed - k * L) <= tol) {
                ++multiples[static_cast<int>(k)];
                break;
            }
        }
    }

    auto full = baseline_config(c);
    full.overrides.forced_collision_probability = 1.0;
    engine::RunOptions o;
    o.capture_tx = true;
    const auto blocked = engine::run_scenario(full, c.topo, o);
    std::map<std::uint32_t, double> last;
    bool grows = !blocked.tx_log.empty();
    for (const auto& tx : blocked.tx_log) {
        auto it = last.find(tx.device_id);
        if (it != last.end() && !(tx.elapsed > it->second)) grows = false;
        last[tx.device_id] = tx.elapsed;
    }
    const bool ok = multiples[1] > 0 && multiples[2] > 0 && blocked.records.empty() && grows;
    return {ok, "p=0.5: reports at 1x/2x/3x a loop time: " + std::to_string(multiples[1]) + "/" +
                    std::to_string(multiples[2]) + "/" + std::to_string(multiples[3]) + " of " +
                    std::to_string(r.records.size()) + "; p=1: " + std::to_string(blocked.records.size()) +
                    " reports, elapsed " + (grows ? "never resets" : "RESET")};
}

// ---------------------------------------------------------------------------
// Full pipeline

void run_pipeline(Context& c) {
    auto t0 = std::chrono::steady_clock::now();
    c.runs = eval::run_training_scenarios(c.base, c.space, c.topo, kSeed, c.threads);
    std::printf("# training runs: %.1f s\n", seconds_since(t0));
    t0 = std::chrono::steady_clock::now();
    c.models = eval::train_models(c.runs, c.topo, c.space, kSeed);
    std::printf("# training: %.1f s; solution 1 train accuracy %.3f (%s), solution 2 %.3f\n", seconds_since(t0),
                c.models.summary1.train_accuracy, c.models.summary1.stop_reason.c_str(),
                c.models.summary2.train_accuracy);
    c.models.save(c.work_dir / "models");
    t0 = std::chrono::steady_clock::now();
    c.rows = eval::run_sweep(c.space, c.base, c.topo, c.models, kSeed, {c.threads, c.work_dir / "sweep_a"});
    std::printf("# sweep: %.1f s\n", seconds_since(t0));
    std::fflush(stdout);
    c.pipeline_ok = true;
}

Outcome determinism(const Context& c) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = engine::run_scenario(baseline_config(c), c.topo);
    const double runtime = seconds_since(t0);
    const auto again = engine::run_scenario(baseline_config(c), c.topo);

    // Second sweep from the saved models, with a different worker count.
    const auto models = eval::TrainedModels::load(c.work_dir / "models");
    eval::run_sweep(c.space, c.base, c.topo, models, kSeed, {c.threads == 1 ? std::size_t{2} : std::size_t{1}, c.work_dir / "sweep_b"});
    const bool same_csv =
        read_file(c.work_dir / "sweep_a" / "metrics.csv") == read_file(c.work_dir / "sweep_b" / "metrics.csv");

    // Retraining solution 1 from fresh training runs gives the same weights.
    const auto runs = eval::run_training_scenarios(c.base, c.space, c.topo, kSeed, c.threads);
    const auto set1 = localization::build_training_set(runs, localization::Solution::one, c.topo);
    const auto s1 = localization::train(set1, c.space.training, stream_seed(kSeed, "train_solution1"));
    const bool same_model = s1.to_json() == c.models.s1.to_json();

    const bool ok = r.records == again.records && same_csv && same_model && runtime <= 300.0;
    return {ok, std::string("metrics.csv ") + (same_csv ? "byte-identical" : "DIFFERS") + " across sweeps, " +
                    "retrained solution 1 " + (same_model ? "identical" : "DIFFERS") + ", baseline scenario " +
                    fmt(runtime, 2) + " s"};
}

const eval::CheckpointMetrics& at_checkpoint(const std::vector<eval::CheckpointMetrics>& m, double t) {
    for (const auto& x : m) {
        if (x.checkpoint_s == t) return x;
    }
    throw ValidationError("no metrics at checkpoint " + eval::format_number(t));
}

std::vector<eval::CheckpointMetrics> metrics_for(const Context& c, const std::string& axis, const std::string& value,
                                                 int solution) {
    return eval::compute_metrics(eval::select(c.rows, axis, value, solution));
}

constexpr double kFinal = 960.0;

Outcome accuracy_hierarchy(const Context& c) {
    const double a1 = at_checkpoint(metrics_for(c, "baseline", "NA", 1), kFinal).region_accuracy;
    const double a2 = at_checkpoint(metrics_for(c, "baseline", "NA", 2), kFinal).region_accuracy;
    const double floor = 3.0 * 0.04;
    return {a2 >= a1 && a1 > floor && a2 > floor,
            "region accuracy at 960 s: solution 1 " + fmt(a1) + ", solution 2 " + fmt(a2) + " (floor " +
                fmt(floor, 2) + ")"};
}

double q3_at(const Context& c, const std::string& axis, const std::string& value, int solution) {
    const auto& m = at_checkpoint(metrics_for(c, axis, value, solution), kFinal);
    if (!m.error_quartiles) throw ValidationError("no estimates at 960 s for " + axis + "=" + value);
    return m.error_quartiles->q3;
}

double iqr_at(const Context& c, const std::string& axis, const std::string& value, int solution) {
    const auto& m = at_checkpoint(metrics_for(c, axis, value, solution), kFinal);
    if (!m.error_quartiles) throw ValidationError("no estimates at 960 s for " + axis + "=" + value);
    return m.error_quartiles->iqr();
}

Outcome device_scaling(const Context& c) {
    std::string detail;
    bool ok = true;
    for (int s : {1, 2}) {
        const double q32 = q3_at(c, "n_devices", "32", s);
        const double q64 = q3_at(c, "baseline", "NA", s);
        const double q128 = q3_at(c, "n_devices", "128", s);
        ok = ok && q32 >= q64 && q64 >= q128 && q32 > q128;
        detail += (s == 1 ? "" : "; ") + std::string("solution ") + std::to_string(s) + " Q3 at 960 s for 32/64/128 devices: " +
                  fmt(q32) + " / " + fmt(q64) + " / " + fmt(q128) + " cm";
    }
    return {ok, detail};
}

Outcome reliability(const Context& c) {
    // Per scenario: availability never drops once reached.
    std::map<std::tuple<std::string, std::string, int, std::string>, std::vector<std::pair<double, bool>>> series;
    for (const auto& r : c.rows) series[{r.sweep_axis, r.sweep_value, r.solution, r.event_region}].push_back({r.checkpoint_s, r.available});
    std::size_t non_monotone = 0;
    for (auto& [key, s] : series) {
        std::sort(s.begin(), s.end());
        for (std::size_t i = 1; i < s.size(); ++i) non_monotone += s[i - 1].second && !s[i].second;
    }
    auto first_full = [&](const std::string& axis, const std::string& value, int solution) {
        for (const auto& m : metrics_for(c, axis, value, solution)) {
            if (m.reliability == 1.0) return m.checkpoint_s;
        }
        return std::numeric_limits<double>::infinity();
    };
    bool ok = non_monotone == 0;
    std::string detail = std::to_string(non_monotone) + " availability drops";
    for (int s : {1, 2}) {
        const double base = first_full("baseline", "NA", s);
        const double d32 = first_full("n_devices", "32", s);
        const double d128 = first_full("n_devices", "128", s);
        ok = ok && base <= kFinal && d128 <= d32;
        detail += "; solution " + std::to_string(s) + " first full reliability at baseline/32/128 devices: " +
                  eval::format_number(base) + " / " + eval::format_number(d32) + " / " + eval::format_number(d128) +
                  " s";
    }
    return {ok, detail};
}

Outcome detection_threshold(const Context& c) {
    std::string detail;
    bool ok = true;
    for (int s : {1, 2}) {
        const double i1 = iqr_at(c, "baseline", "NA", s);
        const double i2 = iqr_at(c, "detection_threshold_cm", "2", s);
        const double i3 = iqr_at(c, "detection_threshold_cm", "3", s);
        ok = ok && i2 > i1 && i3 > i1;
        detail += (s == 1 ? "" : "; ") + std::string("solution ") + std::to_string(s) +
                  " IQR at 960 s for 1/2/3 cm: " + fmt(i1) + " / " + fmt(i2) + " / " + fmt(i3) + " cm";
    }
    return {ok, detail};
}

Outcome left_right(const Context& c) {
    bool equal = !c.topo.mirrored_pairs().empty();
    std::map<std::string, std::string> mirror;
    for (const auto& [a, b] : c.topo.mirrored_pairs()) {
        equal = equal && topology::loop_time(c.topo, a) == topology::loop_time(c.topo, b);
        mirror[a] = b;
        mirror[b] = a;
    }
    // Classify every positive record of the mirrored regions' training runs.
    bool ok = equal;
    std::string detail = std::string("mirrored loop times ") + (equal ? "equal" : "DIFFER");
    for (int s : {1, 2}) {
        const auto& model = s == 1 ? c.models.s1 : c.models.s2;
        std::size_t n = 0, exact = 0, merged = 0;
        for (const auto& run : c.runs) {
            if (!mirror.count(run.region)) continue;
            std::vector<double> elapsed;
            for (const auto& r : run.records) {
                if (r.event_bit) elapsed.push_back(r.elapsed);
            }
            const auto p = model.probabilities(elapsed);
            for (Eigen::Index i = 0; i < p.rows(); ++i) {
                const auto& pred = model.class_regions[localization::argmax_lowest(p.row(i).transpose())];
                ++n;
                exact += pred == run.region;
                merged += pred == run.region || pred == mirror[run.region];
            }
        }
        const double pe = static_cast<double>(exact) / static_cast<double>(n);
        const double pm = static_cast<double>(merged) / static_cast<double>(n);
        ok = ok && n > 0 && pm > pe;
        detail += "; solution " + std::to_string(s) + " per-region " + fmt(pe) + " vs merged " + fmt(pm) + " over " +
                  std::to_string(n) + " reports";
    }
    return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
    if (argc != 3) {
        std::fprintf(stderr, "usage: %s <data dir> <work dir>\n", argv[0]);
        return 2;
    }
    Context c{argv[1], argv[2], topology::load_and_validate(fs::path(argv[1]) / "default_body.json")};
    fs::create_directories(c.work_dir);
    c.base.topology_path = c.data_dir / "default_body.json";
    c.threads = eval::default_threads();
    const auto start = std::chrono::steady_clock::now();

    run("Energy invariants", [&] { return energy_invariants(c); });
    run("Channel oracle", [] { return channel_oracle(); });
    run("Gradient correctness", [] { return gradient_correctness(); });
    run("Optimizer sanity", [&] { return optimizer_sanity(c); });
    run("Compounding property", [&] { return compounding(c); });

    try {
        run_pipeline(c);
    } catch (const std::exception& e) {
        c.pipeline_error = e.what();
    }
    auto staged = [&](const std::string& name, const std::function<Outcome()>& check) {
        if (!c.pipeline_ok) {
            report(name, {false, "pipeline failed: " + c.pipeline_error});
            return;
        }
        run(name, check);
    };
    staged("Determinism", [&] { return determinism(c); });
    staged("Trend: accuracy hierarchy", [&] { return accuracy_hierarchy(c); });
    staged("Trend: device scaling", [&] { return device_scaling(c); });
    staged("Trend: reliability", [&] { return reliability(c); });
    staged("Trend: detection threshold", [&] { return detection_threshold(c); });
    staged("Left/right property", [&] { return left_right(c); });

    std::printf("# %d failing criteria, %.0f s total\n", failures, seconds_since(start));
    return failures == 0 ? 0 : 1;
}
