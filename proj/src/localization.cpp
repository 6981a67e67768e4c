#include "flowsim/localization.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "flowsim/error.hpp"

namespace flowsim::localization {

namespace {

nn::Matrix column(std::span<const double> values) {
    nn::Matrix x(static_cast<Eigen::Index>(values.size()), 1);
    for (std::size_t i = 0; i < values.size(); ++i) x(static_cast<Eigen::Index>(i), 0) = values[i];
    return x;
}

double accuracy(const nn::Matrix& probs, std::span<const int> labels) {
    if (labels.empty()) return 0.0;
    std::size_t correct = 0;
    for (Eigen::Index r = 0; r < probs.rows(); ++r) {
        if (static_cast<int>(argmax_lowest(probs.row(r).transpose())) == labels[static_cast<std::size_t>(r)]) {
            ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(labels.size());
}

}  // namespace

Solution solution_from_int(int value) {
    if (value == 1) return Solution::one;
    if (value == 2) return Solution::two;
    throw ConfigError("solution must be 1 or 2, got " + std::to_string(value));
}

int class_count(Solution solution) { return solution == Solution::one ? 24 : 25; }

TrainingSet build_training_set(const std::vector<RegionRun>& runs, Solution solution,
                               const topology::VascularTopology& topology, bool allow_missing) {
    TrainingSet set;
    set.solution = solution;
    std::set<std::string> seen;
    // Classes follow the topology's region order.
    std::vector<const RegionRun*> by_region(topology.regions().size(), nullptr);
    for (const auto& run : runs) {
        const auto idx = topology.find_region(run.region);
        if (!idx) throw ValidationError("training run for unknown region '" + run.region + "'");
        if (by_region[*idx]) throw ValidationError("two training runs for region '" + run.region + "'");
        by_region[*idx] = &run;
    }
    for (std::size_t r = 0; r < by_region.size(); ++r) {
        const std::string& region = topology.regions()[r].id;
        const bool heart = region == topology.heart_region();
        if (solution == Solution::one && heart) continue;
        const RegionRun* run = by_region[r];
        if (!run) throw ValidationError("no training run for region '" + region + "'");
        const int label = static_cast<int>(set.class_regions.size());
        std::size_t positives = 0;
        for (const auto& rec : run->records) {
            if (!rec.event_bit) continue;
            set.elapsed.push_back(rec.elapsed);
            set.labels.push_back(label);
            ++positives;
        }
        if (positives == 0) {
            const std::string msg = "region '" + region + "' produced no event-positive records";
            if (!allow_missing) throw ValidationError(msg);
            set.warnings.push_back(msg);
            continue;
        }
        set.class_regions.push_back(region);
    }
    if (set.elapsed.empty()) throw ValidationError("training set is empty");

    const double n = static_cast<double>(set.elapsed.size());
    double sum = 0.0;
    for (double v : set.elapsed) sum += v;
    set.mean = sum / n;
    double ss = 0.0;
    for (double v : set.elapsed) ss += (v - set.mean) * (v - set.mean);
    set.std = std::sqrt(ss / n);
    if (!(set.std > 0.0)) set.std = 1.0;
    return set;
}

nlohmann::json TrainingOptions::to_json() const {
    return {{"s1_hidden", s1_hidden},     {"s1_max_iter", s1_max_iter}, {"s1_alpha", s1_alpha},
            {"s2_hidden", s2_hidden},     {"s2_dropout", s2_dropout},   {"s2_epochs", s2_epochs},
            {"s2_batch", s2_batch},       {"s2_lr", s2_lr},             {"s2_balanced_weights", s2_balanced_weights},
            {"s2_population_stats", s2_population_stats}};
}

TrainingOptions TrainingOptions::from_json(const nlohmann::json& doc) {
    TrainingOptions o;
    if (!doc.is_object()) throw ConfigError("training options must be an object");
    try {
        for (const auto& [key, value] : doc.items()) {
            if (key == "s1_hidden") o.s1_hidden = value.get<std::size_t>();
            else if (key == "s1_max_iter") o.s1_max_iter = value.get<int>();
            else if (key == "s1_alpha") o.s1_alpha = value.get<double>();
            else if (key == "s2_hidden") o.s2_hidden = value.get<std::size_t>();
            else if (key == "s2_dropout") o.s2_dropout = value.get<double>();
            else if (key == "s2_epochs") o.s2_epochs = value.get<int>();
            else if (key == "s2_batch") o.s2_batch = value.get<std::size_t>();
            else if (key == "s2_lr") o.s2_lr = value.get<double>();
            else if (key == "s2_balanced_weights") o.s2_balanced_weights = value.get<bool>();
            else if (key == "s2_population_stats") o.s2_population_stats = value.get<bool>();
            else throw ConfigError("training options: unknown key '" + key + "'");
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("training options: ") + e.what());
    }
    if (o.s1_hidden == 0 || o.s2_hidden == 0 || o.s2_batch == 0) throw ConfigError("training options: zero size");
    if (o.s1_max_iter < 0 || o.s2_epochs < 0) throw ConfigError("training options: negative iteration count");
    if (!(o.s2_dropout >= 0.0 && o.s2_dropout < 1.0)) throw ConfigError("training options: dropout outside [0, 1)");
    if (!(o.s2_lr > 0.0) || !(o.s1_alpha >= 0.0)) throw ConfigError("training options: bad learning rate or alpha");
    return o;
}

nlohmann::json TrainingSummary::to_json() const {
    return {{"solution", static_cast<int>(solution)},
            {"samples", samples},
            {"classes", classes},
            {"final_loss", final_loss},
            {"train_accuracy", train_accuracy},
            {"iterations", iterations},
            {"stop_reason", stop_reason},
            {"warnings", warnings}};
}

nn::Matrix Localizer::probabilities(std::span<const double> elapsed) const {
    std::vector<double> z(elapsed.size());
    for (std::size_t i = 0; i < elapsed.size(); ++i) z[i] = (elapsed[i] - mean) / std;
    return probabilities_normalized(z);
}

nn::Matrix Localizer::probabilities_normalized(std::span<const double> z) const {
    if (z.empty()) return nn::Matrix(0, static_cast<Eigen::Index>(class_regions.size()));
    return nn::predict_proba(net, column(z));
}

nlohmann::json Localizer::to_json() const {
    return {{"format", "flowsim-localizer"},
            {"version", 1},
            {"solution", static_cast<int>(solution)},
            {"class_regions", class_regions},
            {"normalization", {{"mean", mean}, {"std", std}}},
            {"network", nn::to_json(net)}};
}

Localizer Localizer::from_json(const nlohmann::json& doc) {
    Localizer m;
    try {
        if (doc.at("format") != "flowsim-localizer") throw ParseError("not a localizer model file");
        if (doc.at("version") != 1) throw ParseError("unsupported localizer model version");
        m.solution = solution_from_int(doc.at("solution").get<int>());
        m.class_regions = doc.at("class_regions").get<std::vector<std::string>>();
        m.mean = doc.at("normalization").at("mean").get<double>();
        m.std = doc.at("normalization").at("std").get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("localizer model: ") + e.what());
    } catch (const ConfigError& e) {
        throw ParseError(std::string("localizer model: ") + e.what());
    }
    m.net = nn::model_from_json(doc.at("network"));
    if (m.net.input_dim() != 1 || m.net.output_dim() != m.class_regions.size()) {
        throw ParseError("localizer model: network shape does not match the class list");
    }
    if (!(m.std > 0.0)) throw ParseError("localizer model: normalization std must be positive");
    return m;
}

void Localizer::save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out << to_json().dump(1) << '\n';
    if (!out) throw Error("failed writing " + path.string());
}

Localizer Localizer::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open " + path.string());
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
    return from_json(doc);
}

Localizer train(const TrainingSet& set, const TrainingOptions& options, std::uint64_t seed,
                TrainingSummary* summary) {
    if (set.elapsed.empty() || set.elapsed.size() != set.labels.size()) {
        throw ValidationError("training set is empty or inconsistent");
    }
    Localizer model;
    model.solution = set.solution;
    model.class_regions = set.class_regions;
    model.mean = set.mean;
    model.std = set.std;
    const std::size_t classes = set.class_regions.size();

    std::vector<double> z(set.elapsed.size());
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = (set.elapsed[i] - set.mean) / set.std;
    const nn::Matrix x = column(z);

    RandomStream init(seed, "ml_init");
    TrainingSummary s;
    s.solution = set.solution;
    s.samples = set.elapsed.size();
    s.classes = classes;
    s.warnings = set.warnings;
    if (set.solution == Solution::one) {
        model.net = nn::make_two_layer(1, options.s1_hidden, classes, init);
        nn::LbfgsOptions lo;
        lo.max_iter = options.s1_max_iter;
        nn::LossOptions loss;
        loss.l2 = options.s1_alpha / static_cast<double>(set.elapsed.size());
        const auto rep = nn::lbfgs_fit(model.net, x, set.labels, nn::Loss::cross_entropy, lo, loss);
        s.final_loss = rep.f;
        s.iterations = rep.iterations;
        s.stop_reason = nn::to_string(rep.reason);
    } else {
        model.net = nn::make_three_layer(1, options.s2_hidden, classes, options.s2_dropout, init);
        nn::AdamFitOptions fo;
        fo.epochs = options.s2_epochs;
        fo.batch_size = options.s2_batch;
        fo.adam.lr = options.s2_lr;
        fo.seed = stream_seed(seed, "ml_shuffle");
        nn::LossOptions loss;
        if (options.s2_balanced_weights) {
            std::vector<double> counts(classes, 0.0);
            for (int y : set.labels) counts[static_cast<std::size_t>(y)] += 1.0;
            nn::Vector w(static_cast<Eigen::Index>(classes));
            const double n = static_cast<double>(set.labels.size());
            for (std::size_t c = 0; c < classes; ++c) {
                w[static_cast<Eigen::Index>(c)] = counts[c] > 0.0 ? n / (static_cast<double>(classes) * counts[c]) : 0.0;
            }
            loss.class_weights = w;
        }
        const auto rep = nn::adam_fit(model.net, x, set.labels, nn::Loss::nll, fo, loss);
        if (options.s2_population_stats) nn::set_population_stats(model.net, x);
        s.final_loss = rep.epoch_loss.empty() ? std::nan("") : rep.epoch_loss.back();
        s.iterations = options.s2_epochs;
        s.stop_reason = "epochs";
    }
    s.train_accuracy = accuracy(model.probabilities_normalized(z), set.labels);
    if (summary) *summary = std::move(s);
    return model;
}

std::size_t argmax_lowest(const nn::Vector& v) {
    if (v.size() == 0) throw ValidationError("argmax of an empty vector");
    std::size_t best = 0;
    for (Eigen::Index i = 1; i < v.size(); ++i) {
        if (v[i] > v[static_cast<Eigen::Index>(best)]) best = static_cast<std::size_t>(i);
    }
    return best;
}

Vec3 point_estimate(std::string_view region, const topology::VascularTopology& topology) {
    return topology::region_centroid(topology, region);
}

std::vector<Estimate> infer_checkpoints(const Localizer& model, std::span<const engine::ReportRecord> records,
                                        std::span<const double> checkpoints,
                                        const topology::VascularTopology& topology) {
    std::vector<double> times, elapsed;
    for (const auto& r : records) {
        if (!r.event_bit) continue;
        times.push_back(r.t_sim);
        elapsed.push_back(r.elapsed);
    }
    const nn::Matrix probs = model.probabilities(elapsed);
    std::vector<Estimate> out;
    out.reserve(checkpoints.size());
    for (double t : checkpoints) {
        Estimate e;
        nn::Vector sum = nn::Vector::Zero(static_cast<Eigen::Index>(model.class_regions.size()));
        for (std::size_t i = 0; i < times.size(); ++i) {
            if (times[i] > t) continue;
            sum += probs.row(static_cast<Eigen::Index>(i)).transpose();
            ++e.n_reports_used;
        }
        e.available = e.n_reports_used > 0;
        if (e.available) {
            e.region = model.class_regions[argmax_lowest(sum)];
            e.point = point_estimate(*e.region, topology);
        }
        out.push_back(std::move(e));
    }
    return out;
}

Estimate infer_stream(const Localizer& model, std::span<const engine::ReportRecord> records, double t,
                      const topology::VascularTopology& topology) {
    const double cp[] = {t};
    return infer_checkpoints(model, records, cp, topology).front();
}

}  // namespace flowsim::localization
