#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowsim/engine.hpp"
#include "flowsim/geometry.hpp"
#include "flowsim/nn.hpp"
#include "flowsim/topology.hpp"

namespace flowsim::localization {

/// Solution 1: two-layer MLP over the 24 non-heart regions (L-BFGS).
/// Solution 2: three-layer MLP over all 25 regions (Adam).
enum class Solution { one = 1, two = 2 };

Solution solution_from_int(int value);
int class_count(Solution solution);

/// Records of one training run whose event sat at `region`'s centroid.
struct RegionRun {
    std::string region;
    std::vector<engine::ReportRecord> records;
};

struct TrainingSet {
    Solution solution = Solution::one;
    std::vector<std::string> class_regions;  // class index -> region id
    std::vector<double> elapsed;
    std::vector<int> labels;
    double mean = 0.0;
    double std = 1.0;
    std::vector<std::string> warnings;
};

/// Collects (elapsed, region) from the event-bit records of each run. Solution
/// 1 drops the heart run. A region without positive records raises
/// ValidationError unless `allow_missing` is set, in which case the class is
/// dropped and a warning naming the region is kept.
TrainingSet build_training_set(const std::vector<RegionRun>& runs, Solution solution,
                               const topology::VascularTopology& topology, bool allow_missing = false);

struct TrainingOptions {
    std::size_t s1_hidden = 128;
    int s1_max_iter = 500;
    double s1_alpha = 1e-4;  // L2 strength, divided by the sample count

    std::size_t s2_hidden = 512;
    double s2_dropout = 0.2;
    int s2_epochs = 200;
    std::size_t s2_batch = 256;
    double s2_lr = 1e-3;
    bool s2_balanced_weights = true;
    // After training, batchnorm uses statistics of the whole training set
    // (dropout off) instead of the moving averages.
    bool s2_population_stats = true;

    nlohmann::json to_json() const;
    static TrainingOptions from_json(const nlohmann::json& doc);
};

struct TrainingSummary {
    Solution solution = Solution::one;
    std::size_t samples = 0;
    std::size_t classes = 0;
    double final_loss = 0.0;
    double train_accuracy = 0.0;
    int iterations = 0;  // L-BFGS steps or Adam epochs
    std::string stop_reason;
    std::vector<std::string> warnings;

    nlohmann::json to_json() const;
};

/// Trained classifier with its input normalisation and class-to-region map.
class Localizer {
public:
    Solution solution = Solution::one;
    std::vector<std::string> class_regions;
    double mean = 0.0;
    double std = 1.0;
    nn::MlpModel net;

    /// Class probabilities (rows) for raw elapsed times in seconds.
    nn::Matrix probabilities(std::span<const double> elapsed) const;
    /// Same map for inputs that are already z-scored.
    nn::Matrix probabilities_normalized(std::span<const double> z) const;

    nlohmann::json to_json() const;
    static Localizer from_json(const nlohmann::json& doc);
    void save(const std::filesystem::path& path) const;
    static Localizer load(const std::filesystem::path& path);
};

/// Trains the solution named in `set`. Weights come from the `ml_init` stream
/// of `seed`, batch order and dropout from its `ml_shuffle` stream.
Localizer train(const TrainingSet& set, const TrainingOptions& options, std::uint64_t seed,
                TrainingSummary* summary = nullptr);

struct Estimate {
    std::optional<std::string> region;
    std::optional<Vec3> point;
    std::size_t n_reports_used = 0;
    bool available = false;
};

/// Index of the largest entry, ties to the lowest index.
std::size_t argmax_lowest(const nn::Vector& v);

/// Sums the probability vectors of the event-bit records with t_sim <= t and
/// takes the region of the largest sum.
Estimate infer_stream(const Localizer& model, std::span<const engine::ReportRecord> records, double t,
                      const topology::VascularTopology& topology);

/// infer_stream at every checkpoint, forwarding each record once.
std::vector<Estimate> infer_checkpoints(const Localizer& model, std::span<const engine::ReportRecord> records,
                                        std::span<const double> checkpoints,
                                        const topology::VascularTopology& topology);

/// Centroid of the estimated region.
Vec3 point_estimate(std::string_view region, const topology::VascularTopology& topology);

}  // namespace flowsim::localization
