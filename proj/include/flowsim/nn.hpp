#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "flowsim/rng.hpp"

namespace flowsim::nn {

using Matrix = Eigen::MatrixXd;  // rows are samples
using Vector = Eigen::VectorXd;

struct Dense {
    Matrix weight;  // out x in
    Vector bias;    // out
};
struct ReLU {};
struct PReLU {
    double slope = 0.25;  // one slope shared by all features
};
struct Dropout {
    double p = 0.5;
};
struct BatchNorm {
    Vector gamma, beta;
    Vector running_mean, running_var;
    double momentum = 0.1;
    double eps = 1e-5;
};
struct Softmax {};
struct LogSoftmax {};

using Layer = std::variant<Dense, ReLU, PReLU, Dropout, BatchNorm, Softmax, LogSoftmax>;

enum class Mode { train, eval };
enum class Loss { cross_entropy, nll };

class MlpModel {
public:
    std::vector<Layer> layers;
    Mode mode = Mode::eval;

    std::size_t input_dim() const;
    std::size_t output_dim() const;
    std::size_t parameter_count() const;
    /// Throws ValidationError when consecutive layer widths disagree.
    void check() const;
};

enum class Init {
    glorot_uniform,  // U(+-sqrt(6 / (fan_in + fan_out))), zero bias
    fan_in_uniform,  // U(+-1/sqrt(fan_in)) for weights and bias
};

/// Dense layer with freshly drawn parameters.
Dense make_dense(std::size_t in, std::size_t out, Init init, RandomStream& rng);
BatchNorm make_batchnorm(std::size_t width);

/// in -> hidden -> ReLU -> classes -> softmax.
MlpModel make_two_layer(std::size_t in, std::size_t hidden, std::size_t classes, RandomStream& rng);

/// in -> [hidden -> batchnorm -> PReLU -> dropout] x 2 -> classes -> log-softmax.
MlpModel make_three_layer(std::size_t in, std::size_t hidden, std::size_t classes, double dropout,
                          RandomStream& rng);

/// Intermediate values kept by a train-mode forward pass.
struct ForwardTrace {
    std::vector<Matrix> inputs;  // input of every layer
    std::vector<Matrix> aux;     // dropout mask or batchnorm x-hat
    std::vector<Vector> batch_mean, batch_var;
};

/// Runs the model in its current mode. Dropout masks in train mode are drawn
/// from a stream seeded with `dropout_seed`.
Matrix forward(const MlpModel& model, const Matrix& batch, ForwardTrace* trace = nullptr,
               std::uint64_t dropout_seed = 0);

/// Class probabilities in eval mode regardless of the final layer type.
Matrix predict_proba(const MlpModel& model, const Matrix& batch);

/// Moves batchnorm running statistics towards the batch statistics in
/// `trace` (unbiased variance, as in the common frameworks).
void update_running_stats(MlpModel& model, const ForwardTrace& trace);

/// Replaces every batchnorm layer's running statistics with the mean and
/// unbiased variance of its input over `inputs`, computed in eval mode (no
/// dropout) and layer by layer so later layers see the updated earlier ones.
void set_population_stats(MlpModel& model, const Matrix& inputs);

struct LossOptions {
    std::optional<Vector> class_weights;  // weighted mean over samples
    double l2 = 0.0;                      // 0.5 * l2 * sum of squared dense weights
    std::uint64_t dropout_seed = 0;
};

struct LossResult {
    double value = 0.0;
    Vector gradient;  // same layout as get_parameters
    ForwardTrace trace;
};

/// Loss of `model` in its current mode and the gradient of every parameter.
/// Cross-entropy expects a final softmax, NLL a final log-softmax.
LossResult loss_and_grad(const MlpModel& model, const Matrix& batch, std::span<const int> labels, Loss loss,
                         const LossOptions& options = {});

Vector get_parameters(const MlpModel& model);
void set_parameters(MlpModel& model, const Vector& params);

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    Vector m, v;
    std::int64_t t = 0;
};

void adam_step(Vector& params, const Vector& grads, AdamState& state, const AdamOptions& options = {});

struct LbfgsOptions {
    int history = 10;
    int max_iter = 500;
    double grad_tol = 1e-6;
    double c1 = 1e-4;
    double c2 = 0.9;
    int max_line_search = 25;
};

enum class StopReason { gradient, max_iter, line_search_failure };

std::string to_string(StopReason reason);

struct LbfgsReport {
    Vector x;
    double f = 0.0;
    double grad_norm = 0.0;
    int iterations = 0;  // accepted steps
    int evaluations = 0;
    StopReason reason = StopReason::max_iter;
    std::vector<double> history;  // objective after each accepted step, starting with f(x0)
};

/// Objective: returns f(x) and writes the gradient into its second argument.
using Objective = std::function<double(const Vector&, Vector&)>;

/// Limited-memory BFGS with a strong-Wolfe line search. Throws NumericError
/// when the objective stops being finite.
LbfgsReport lbfgs_minimize(const Objective& objective, const Vector& x0, const LbfgsOptions& options = {});

/// Full-batch L-BFGS on the model parameters.
LbfgsReport lbfgs_fit(MlpModel& model, const Matrix& inputs, std::span<const int> labels, Loss loss,
                      const LbfgsOptions& options = {}, const LossOptions& loss_options = {});

struct AdamFitOptions {
    int epochs = 200;
    std::size_t batch_size = 256;
    AdamOptions adam;
    std::uint64_t seed = 0;  // shuffling and dropout
};

struct FitReport {
    std::vector<double> epoch_loss;
};

/// Mini-batch Adam over shuffled epochs.
FitReport adam_fit(MlpModel& model, const Matrix& inputs, std::span<const int> labels, Loss loss,
                   const AdamFitOptions& options, const LossOptions& loss_options = {});

/// Largest |analytic - numeric| / max(|analytic|, |numeric|, 1e-6) over all
/// parameters, numeric gradients by central differences with step h. Dropout
/// masks are held fixed.
double gradient_check(const MlpModel& model, const Matrix& batch, std::span<const int> labels, Loss loss,
                      const LossOptions& options = {}, double h = 1e-5);

nlohmann::json to_json(const MlpModel& model);
MlpModel model_from_json(const nlohmann::json& doc);

}  // namespace flowsim::nn
