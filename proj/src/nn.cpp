#include "flowsim/nn.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numeric>

#include "flowsim/error.hpp"

namespace flowsim::nn {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

/// Calls f(data, size) for every parameter block in a fixed order.
template <class Model, class F>
void for_each_block(Model& model, F&& f) {
    for (auto& layer : model.layers) {
        std::visit(
            [&](auto& l) {
                using T = std::decay_t<decltype(l)>;
                if constexpr (std::is_same_v<T, Dense>) {
                    f(l.weight.data(), l.weight.size());
                    f(l.bias.data(), l.bias.size());
                } else if constexpr (std::is_same_v<T, PReLU>) {
                    f(&l.slope, Eigen::Index{1});
                } else if constexpr (std::is_same_v<T, BatchNorm>) {
                    f(l.gamma.data(), l.gamma.size());
                    f(l.beta.data(), l.beta.size());
                }
            },
            layer);
    }
}

bool is_train(const MlpModel& m) { return m.mode == Mode::train; }

Matrix row_softmax(const Matrix& z) {
    const Vector mx = z.rowwise().maxCoeff();
    Matrix e = (z.colwise() - mx).array().exp().matrix();
    const Vector sum = e.rowwise().sum();
    return e.array().colwise() / sum.array();
}

Matrix row_log_softmax(const Matrix& z) {
    const Vector mx = z.rowwise().maxCoeff();
    const Matrix shifted = z.colwise() - mx;
    const Vector lse = shifted.array().exp().rowwise().sum().log().matrix();
    return shifted.colwise() - lse;
}

/// Keep-mask with P(drop) = p, two 32-bit draws per random word.
Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, RandomStream& rng) {
    Matrix mask(rows, cols);
    const auto threshold = static_cast<std::uint64_t>(std::llround(p * 4294967296.0));
    std::uint64_t word = 0;
    int left = 0;
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
            if (left == 0) {
                word = rng.next_u64();
                left = 2;
            }
            const std::uint64_t u = word & 0xFFFFFFFFu;
            word >>= 32;
            --left;
            mask(r, c) = u < threshold ? 0.0 : 1.0;
        }
    }
    return mask;
}

std::vector<double> to_vec(const Vector& v) { return {v.data(), v.data() + v.size()}; }

Vector vec_from(const nlohmann::json& j, const char* what) {
    if (!j.is_array()) throw ParseError(std::string("model: ") + what + " must be an array");
    Vector v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
    return v;
}

}  // namespace

// ---------------------------------------------------------------------------
// Model structure

std::size_t MlpModel::input_dim() const {
    for (const auto& l : layers) {
        if (const auto* d = std::get_if<Dense>(&l)) return static_cast<std::size_t>(d->weight.cols());
        if (const auto* b = std::get_if<BatchNorm>(&l)) return static_cast<std::size_t>(b->gamma.size());
    }
    throw ValidationError("model has no dense layer");
}

std::size_t MlpModel::output_dim() const {
    for (auto it = layers.rbegin(); it != layers.rend(); ++it) {
        if (const auto* d = std::get_if<Dense>(&*it)) return static_cast<std::size_t>(d->weight.rows());
        if (const auto* b = std::get_if<BatchNorm>(&*it)) return static_cast<std::size_t>(b->gamma.size());
    }
    throw ValidationError("model has no dense layer");
}

std::size_t MlpModel::parameter_count() const {
    std::size_t n = 0;
    for_each_block(*this, [&](const double*, Eigen::Index size) { n += static_cast<std::size_t>(size); });
    return n;
}

void MlpModel::check() const {
    std::optional<Eigen::Index> width;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::string where = "layer " + std::to_string(i) + ": ";
        std::visit(overloaded{
                       [&](const Dense& d) {
                           if (d.bias.size() != d.weight.rows()) throw ValidationError(where + "bias size mismatch");
                           if (width && *width != d.weight.cols()) {
                               throw ValidationError(where + "expects width " + std::to_string(d.weight.cols()) +
                                                     ", previous layer gives " + std::to_string(*width));
                           }
                           width = d.weight.rows();
                       },
                       [&](const BatchNorm& b) {
                           if (b.beta.size() != b.gamma.size() || b.running_mean.size() != b.gamma.size() ||
                               b.running_var.size() != b.gamma.size()) {
                               throw ValidationError(where + "batchnorm vectors disagree");
                           }
                           if (width && *width != b.gamma.size()) throw ValidationError(where + "batchnorm width mismatch");
                           width = b.gamma.size();
                       },
                       [&](const Dropout& d) {
                           if (!(d.p >= 0.0 && d.p < 1.0)) throw ValidationError(where + "dropout p must lie in [0, 1)");
                       },
                       [&](const auto&) {},
                   },
                   layers[i]);
    }
    if (!width) throw ValidationError("model has no dense layer");
}

Dense make_dense(std::size_t in, std::size_t out, Init init, RandomStream& rng) {
    Dense d;
    d.weight.resize(static_cast<Eigen::Index>(out), static_cast<Eigen::Index>(in));
    d.bias = Vector::Zero(static_cast<Eigen::Index>(out));
    const double bound = init == Init::glorot_uniform ? std::sqrt(6.0 / static_cast<double>(in + out))
                                                      : 1.0 / std::sqrt(static_cast<double>(in));
    for (Eigen::Index r = 0; r < d.weight.rows(); ++r) {
        for (Eigen::Index c = 0; c < d.weight.cols(); ++c) d.weight(r, c) = rng.uniform(-bound, bound);
    }
    if (init == Init::fan_in_uniform) {
        for (Eigen::Index r = 0; r < d.bias.size(); ++r) d.bias[r] = rng.uniform(-bound, bound);
    }
    return d;
}

BatchNorm make_batchnorm(std::size_t width) {
    const auto w = static_cast<Eigen::Index>(width);
    return {Vector::Ones(w), Vector::Zero(w), Vector::Zero(w), Vector::Ones(w), 0.1, 1e-5};
}

MlpModel make_two_layer(std::size_t in, std::size_t hidden, std::size_t classes, RandomStream& rng) {
    MlpModel m;
    m.layers.push_back(make_dense(in, hidden, Init::glorot_uniform, rng));
    m.layers.push_back(ReLU{});
    m.layers.push_back(make_dense(hidden, classes, Init::glorot_uniform, rng));
    m.layers.push_back(Softmax{});
    return m;
}

MlpModel make_three_layer(std::size_t in, std::size_t hidden, std::size_t classes, double dropout,
                          RandomStream& rng) {
    MlpModel m;
    std::size_t width = in;
    for (int block = 0; block < 2; ++block) {
        m.layers.push_back(make_dense(width, hidden, Init::fan_in_uniform, rng));
        m.layers.push_back(make_batchnorm(hidden));
        m.layers.push_back(PReLU{0.25});
        m.layers.push_back(Dropout{dropout});
        width = hidden;
    }
    m.layers.push_back(make_dense(hidden, classes, Init::fan_in_uniform, rng));
    m.layers.push_back(LogSoftmax{});
    return m;
}

// ---------------------------------------------------------------------------
// Forward and backward

Matrix forward(const MlpModel& model, const Matrix& batch, ForwardTrace* trace, std::uint64_t dropout_seed) {
    if (static_cast<std::size_t>(batch.cols()) != model.input_dim()) {
        throw ValidationError("forward: batch width " + std::to_string(batch.cols()) + " but model expects " +
                              std::to_string(model.input_dim()));
    }
    const bool train = is_train(model);
    RandomStream rng(dropout_seed);
    if (trace) {
        const auto n = model.layers.size();
        trace->inputs.assign(n, Matrix());
        trace->aux.assign(n, Matrix());
        trace->batch_mean.assign(n, Vector());
        trace->batch_var.assign(n, Vector());
    }
    Matrix x = batch;
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        if (trace) trace->inputs[i] = x;
        std::visit(overloaded{
                       [&](const Dense& d) { x = (x * d.weight.transpose()).rowwise() + d.bias.transpose(); },
                       [&](const ReLU&) { x = x.cwiseMax(0.0); },
                       [&](const PReLU& p) {
                           const double a = p.slope;
                           x = x.unaryExpr([a](double v) { return v > 0.0 ? v : a * v; });
                       },
                       [&](const Dropout& d) {
                           if (!train || d.p == 0.0) return;
                           Matrix mask = dropout_mask(x.rows(), x.cols(), d.p, rng);
                           x = x.cwiseProduct(mask) * (1.0 / (1.0 - d.p));
                           if (trace) trace->aux[i] = std::move(mask);
                       },
                       [&](const BatchNorm& b) {
                           Vector mean, var;
                           if (train) {
                               mean = x.colwise().mean().transpose();
                               var = (x.rowwise() - mean.transpose()).array().square().colwise().mean().transpose();
                           } else {
                               mean = b.running_mean;
                               var = b.running_var;
                           }
                           const Vector inv = (var.array() + b.eps).rsqrt().matrix();
                           Matrix xhat = (x.rowwise() - mean.transpose()) * inv.asDiagonal();
                           x = (xhat * b.gamma.asDiagonal()).rowwise() + b.beta.transpose();
                           if (trace) {
                               trace->aux[i] = std::move(xhat);
                               trace->batch_mean[i] = mean;
                               trace->batch_var[i] = var;
                           }
                       },
                       [&](const Softmax&) { x = row_softmax(x); },
                       [&](const LogSoftmax&) { x = row_log_softmax(x); },
                   },
                   model.layers[i]);
    }
    return x;
}

Matrix predict_proba(const MlpModel& model, const Matrix& batch) {
    MlpModel eval = model;
    eval.mode = Mode::eval;
    Matrix out = forward(eval, batch);
    if (std::holds_alternative<LogSoftmax>(model.layers.back())) out = out.array().exp().matrix();
    return out;
}

void update_running_stats(MlpModel& model, const ForwardTrace& trace) {
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        auto* b = std::get_if<BatchNorm>(&model.layers[i]);
        if (!b || i >= trace.batch_mean.size() || trace.batch_mean[i].size() == 0) continue;
        const double n = static_cast<double>(trace.inputs[i].rows());
        const double correction = n > 1.0 ? n / (n - 1.0) : 1.0;
        b->running_mean = (1.0 - b->momentum) * b->running_mean + b->momentum * trace.batch_mean[i];
        b->running_var = (1.0 - b->momentum) * b->running_var + (b->momentum * correction) * trace.batch_var[i];
    }
}

void set_population_stats(MlpModel& model, const Matrix& inputs) {
    if (inputs.rows() < 2) throw ValidationError("population statistics need at least two samples");
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
        auto* b = std::get_if<BatchNorm>(&model.layers[i]);
        if (!b) continue;
        MlpModel prefix;
        prefix.layers.assign(model.layers.begin(), model.layers.begin() + static_cast<std::ptrdiff_t>(i));
        prefix.mode = Mode::eval;
        const Matrix x = i == 0 ? inputs : forward(prefix, inputs);
        const Vector mean = x.colwise().mean().transpose();
        const double n = static_cast<double>(x.rows());
        b->running_mean = mean;
        b->running_var = ((x.rowwise() - mean.transpose()).array().square().colwise().sum() / (n - 1.0)).transpose();
    }
}

namespace {

struct Prepared {
    Vector weights;  // per sample
    double total = 0.0;
};

Prepared check_labels(const MlpModel& model, const Matrix& batch, std::span<const int> labels, Loss loss,
                      const LossOptions& options) {
    if (static_cast<Eigen::Index>(labels.size()) != batch.rows()) {
        throw ValidationError("loss: " + std::to_string(labels.size()) + " labels for " +
                              std::to_string(batch.rows()) + " samples");
    }
    if (model.layers.empty()) throw ValidationError("loss: empty model");
    const bool softmax_end = std::holds_alternative<Softmax>(model.layers.back());
    const bool logsoftmax_end = std::holds_alternative<LogSoftmax>(model.layers.back());
    if (loss == Loss::cross_entropy && !softmax_end) throw ValidationError("cross-entropy needs a final softmax");
    if (loss == Loss::nll && !logsoftmax_end) throw ValidationError("NLL needs a final log-softmax");
    const auto classes = static_cast<int>(model.output_dim());
    if (options.class_weights && options.class_weights->size() != classes) {
        throw ValidationError("loss: class weight vector has the wrong size");
    }
    Prepared p;
    p.weights.resize(batch.rows());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || labels[i] >= classes) {
            throw ValidationError("invalid label " + std::to_string(labels[i]) + " (classes: " +
                                  std::to_string(classes) + ")");
        }
        p.weights[static_cast<Eigen::Index>(i)] = options.class_weights ? (*options.class_weights)[labels[i]] : 1.0;
    }
    p.total = p.weights.sum();
    if (!(p.total > 0.0)) throw ValidationError("loss: sample weights sum to zero");
    return p;
}

double l2_penalty(const MlpModel& model, double l2) {
    if (l2 == 0.0) return 0.0;
    double s = 0.0;
    for (const auto& l : model.layers) {
        if (const auto* d = std::get_if<Dense>(&l)) s += d->weight.squaredNorm();
    }
    return 0.5 * l2 * s;
}

/// Weighted mean negative log-likelihood from the logits feeding the final
/// (log-)softmax.
double data_loss(const Matrix& logits, std::span<const int> labels, const Prepared& p) {
    const Matrix logp = row_log_softmax(logits);
    double s = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        s -= p.weights[static_cast<Eigen::Index>(i)] * logp(static_cast<Eigen::Index>(i), labels[i]);
    }
    return s / p.total;
}

double loss_only(const MlpModel& model, const Matrix& batch, std::span<const int> labels, const Prepared& p,
                 const LossOptions& options) {
    ForwardTrace trace;
    forward(model, batch, &trace, options.dropout_seed);
    return data_loss(trace.inputs.back(), labels, p) + l2_penalty(model, options.l2);
}

}  // namespace

LossResult loss_and_grad(const MlpModel& model, const Matrix& batch, std::span<const int> labels, Loss loss,
                         const LossOptions& options) {
    const Prepared prep = check_labels(model, batch, labels, loss, options);
    LossResult result;
    forward(model, batch, &result.trace, options.dropout_seed);
    const auto& trace = result.trace;
    const Matrix& logits = trace.inputs.back();
    result.value = data_loss(logits, labels, prep) + l2_penalty(model, options.l2);
    if (!std::isfinite(result.value)) throw NumericError("loss is not finite");

    // Gradient at the logits: weighted (softmax - one-hot).
    Matrix grad = row_softmax(logits);
    for (std::size_t i = 0; i < labels.size(); ++i) grad(static_cast<Eigen::Index>(i), labels[i]) -= 1.0;
    grad = (prep.weights / prep.total).asDiagonal() * grad;

    const bool train = is_train(model);
    std::vector<std::vector<Vector>> blocks(model.layers.size());
    for (std::size_t k = model.layers.size() - 1; k-- > 0;) {
        const Matrix& x = trace.inputs[k];
        std::visit(overloaded{
                       [&](const Dense& d) {
                           Matrix dw = grad.transpose() * x;
                           if (options.l2 != 0.0) dw += options.l2 * d.weight;
                           const Vector db = grad.colwise().sum().transpose();
                           blocks[k] = {Eigen::Map<const Vector>(dw.data(), dw.size()), db};
                           if (k > 0) grad = grad * d.weight;
                       },
                       [&](const ReLU&) { grad = grad.cwiseProduct((x.array() > 0.0).cast<double>().matrix()); },
                       [&](const PReLU& p) {
                           const auto neg = (x.array() <= 0.0).cast<double>();
                           Vector ds(1);
                           ds[0] = (grad.array() * x.array() * neg).sum();
                           blocks[k] = {ds};
                           grad = (grad.array() * (1.0 - neg + p.slope * neg)).matrix();
                       },
                       [&](const Dropout& d) {
                           if (!train || d.p == 0.0) return;
                           grad = grad.cwiseProduct(trace.aux[k]) * (1.0 / (1.0 - d.p));
                       },
                       [&](const BatchNorm& b) {
                           const Matrix& xhat = trace.aux[k];
                           const Vector dgamma = grad.cwiseProduct(xhat).colwise().sum().transpose();
                           const Vector dbeta = grad.colwise().sum().transpose();
                           blocks[k] = {dgamma, dbeta};
                           const Vector inv = (trace.batch_var[k].array() + b.eps).rsqrt().matrix();
                           const Matrix dxhat = grad * b.gamma.asDiagonal();
                           if (train) {
                               const double n = static_cast<double>(x.rows());
                               const Vector sum_dxhat = dxhat.colwise().sum().transpose();
                               const Vector sum_dxhat_xhat = dxhat.cwiseProduct(xhat).colwise().sum().transpose();
                               Matrix t = (n * dxhat).rowwise() - sum_dxhat.transpose();
                               t -= xhat * sum_dxhat_xhat.asDiagonal();
                               grad = t * (inv / n).asDiagonal();
                           } else {
                               grad = dxhat * inv.asDiagonal();
                           }
                       },
                       [&](const Softmax&) { throw ValidationError("softmax is only supported as the final layer"); },
                       [&](const LogSoftmax&) {
                           throw ValidationError("log-softmax is only supported as the final layer");
                       },
                   },
                   model.layers[k]);
    }

    result.gradient.resize(static_cast<Eigen::Index>(model.parameter_count()));
    Eigen::Index pos = 0;
    for (const auto& layer_blocks : blocks) {
        for (const auto& b : layer_blocks) {
            result.gradient.segment(pos, b.size()) = b;
            pos += b.size();
        }
    }
    return result;
}

Vector get_parameters(const MlpModel& model) {
    Vector out(static_cast<Eigen::Index>(model.parameter_count()));
    Eigen::Index pos = 0;
    for_each_block(model, [&](const double* data, Eigen::Index size) {
        out.segment(pos, size) = Eigen::Map<const Vector>(data, size);
        pos += size;
    });
    return out;
}

void set_parameters(MlpModel& model, const Vector& params) {
    if (static_cast<std::size_t>(params.size()) != model.parameter_count()) {
        throw ValidationError("set_parameters: expected " + std::to_string(model.parameter_count()) +
                              " values, got " + std::to_string(params.size()));
    }
    Eigen::Index pos = 0;
    for_each_block(model, [&](double* data, Eigen::Index size) {
        Eigen::Map<Vector>(data, size) = params.segment(pos, size);
        pos += size;
    });
}

// ---------------------------------------------------------------------------
// Optimisers

void adam_step(Vector& params, const Vector& grads, AdamState& state, const AdamOptions& o) {
    if (grads.size() != params.size()) throw ValidationError("adam_step: gradient and parameter sizes differ");
    if (state.m.size() == 0 && state.t == 0) {
        state.m = Vector::Zero(params.size());
        state.v = Vector::Zero(params.size());
    }
    if (state.m.size() != params.size() || state.v.size() != params.size()) {
        throw ValidationError("adam_step: optimiser state does not match the parameters");
    }
    ++state.t;
    state.m = o.beta1 * state.m + (1.0 - o.beta1) * grads;
    state.v = o.beta2 * state.v + (1.0 - o.beta2) * grads.cwiseProduct(grads);
    const double c1 = 1.0 - std::pow(o.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(o.beta2, static_cast<double>(state.t));
    params.array() -= o.lr * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + o.eps);
}

std::string to_string(StopReason reason) {
    switch (reason) {
        case StopReason::gradient: return "gradient";
        case StopReason::max_iter: return "max_iter";
        case StopReason::line_search_failure: return "line_search_failure";
    }
    return "unknown";
}

namespace {

struct Probe {
    double a = 0.0;
    double f = 0.0;
    double d = 0.0;  // directional derivative
    Vector g;
};

/// Minimiser of the cubic through (a, fa, da) and (b, fb, db), or the
/// midpoint when the cubic has no usable minimum.
double cubic_step(const Probe& lo, const Probe& hi) {
    const double d1 = lo.d + hi.d - 3.0 * (lo.f - hi.f) / (lo.a - hi.a);
    const double disc = d1 * d1 - lo.d * hi.d;
    if (disc >= 0.0) {
        const double d2 = std::copysign(std::sqrt(disc), hi.a - lo.a);
        const double denom = hi.d - lo.d + 2.0 * d2;
        if (denom != 0.0) {
            const double t = hi.a - (hi.a - lo.a) * (hi.d + d2 - d1) / denom;
            if (std::isfinite(t)) return t;
        }
    }
    return 0.5 * (lo.a + hi.a);
}

}  // namespace

LbfgsReport lbfgs_minimize(const Objective& objective, const Vector& x0, const LbfgsOptions& opt) {
    LbfgsReport rep;
    Vector x = x0;
    Vector g(x.size());
    double f = objective(x, g);
    rep.evaluations = 1;
    if (!std::isfinite(f) || !g.allFinite()) throw NumericError("L-BFGS: objective not finite at the start point");
    rep.history.push_back(f);

    std::deque<Vector> s_hist, y_hist;
    std::deque<double> rho_hist;

    auto evaluate = [&](const Vector& dir, double a) {
        Probe p;
        p.a = a;
        p.g.resize(x.size());
        p.f = objective(x + a * dir, p.g);
        ++rep.evaluations;
        if (!std::isfinite(p.f) || !p.g.allFinite()) {
            throw NumericError("L-BFGS: objective not finite at step " + std::to_string(a) + " after " +
                               std::to_string(rep.iterations) + " iterations");
        }
        p.d = p.g.dot(dir);
        return p;
    };

    rep.reason = StopReason::max_iter;
    if (g.norm() < opt.grad_tol) {
        rep.reason = StopReason::gradient;
    } else {
        for (int iter = 0; iter < opt.max_iter; ++iter) {
            // Two-loop recursion.
            Vector q = g;
            std::vector<double> alpha(s_hist.size());
            for (std::size_t i = s_hist.size(); i-- > 0;) {
                alpha[i] = rho_hist[i] * s_hist[i].dot(q);
                q -= alpha[i] * y_hist[i];
            }
            if (!s_hist.empty()) q *= s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
            for (std::size_t i = 0; i < s_hist.size(); ++i) {
                const double beta = rho_hist[i] * y_hist[i].dot(q);
                q += (alpha[i] - beta) * s_hist[i];
            }
            Vector dir = -q;
            double slope = g.dot(dir);
            if (!(slope < 0.0)) {
                s_hist.clear();
                y_hist.clear();
                rho_hist.clear();
                dir = -g;
                slope = g.dot(dir);
            }
            const double a0 = s_hist.empty() ? std::min(1.0, 1.0 / g.norm()) : 1.0;

            // Strong-Wolfe line search with cubic zoom.
            const Probe start{0.0, f, slope, g};
            std::optional<Probe> accepted;
            std::optional<Probe> armijo;  // best point with sufficient decrease
            auto sufficient = [&](const Probe& p) { return p.f <= f + opt.c1 * p.a * slope; };
            auto curvature = [&](const Probe& p) { return std::abs(p.d) <= -opt.c2 * slope; };
            auto note = [&](const Probe& p) {
                if (sufficient(p) && (!armijo || p.f < armijo->f)) armijo = p;
            };
            auto zoom = [&](Probe lo, Probe hi) {
                for (int j = 0; j < opt.max_line_search; ++j) {
                    const double lo_a = std::min(lo.a, hi.a), hi_a = std::max(lo.a, hi.a);
                    const double width = hi_a - lo_a;
                    if (width <= 1e-16 * std::max(1.0, hi_a)) return;
                    double a = cubic_step(lo, hi);
                    a = std::clamp(a, lo_a + 0.1 * width, hi_a - 0.1 * width);
                    const Probe p = evaluate(dir, a);
                    note(p);
                    if (!sufficient(p) || p.f >= lo.f) {
                        hi = p;
                    } else {
                        if (curvature(p)) {
                            accepted = p;
                            return;
                        }
                        if (p.d * (hi.a - lo.a) >= 0.0) hi = lo;
                        lo = p;
                    }
                }
            };
            Probe prev = start;
            double a = a0;
            for (int i = 0; i < opt.max_line_search && !accepted; ++i) {
                const Probe p = evaluate(dir, a);
                note(p);
                if (!sufficient(p) || (i > 0 && p.f >= prev.f)) {
                    zoom(prev, p);
                    break;
                }
                if (curvature(p)) {
                    accepted = p;
                    break;
                }
                if (p.d >= 0.0) {
                    zoom(p, prev);
                    break;
                }
                prev = p;
                a *= 2.0;
            }
            if (!accepted) accepted = armijo;
            if (!accepted) {
                rep.reason = StopReason::line_search_failure;
                break;
            }

            const Vector s = accepted->a * dir;
            const Vector y = accepted->g - g;
            x += s;
            f = accepted->f;
            g = accepted->g;
            ++rep.iterations;
            rep.history.push_back(f);
            const double sy = s.dot(y);
            if (sy > 1e-12 * s.norm() * y.norm()) {
                s_hist.push_back(s);
                y_hist.push_back(y);
                rho_hist.push_back(1.0 / sy);
                if (static_cast<int>(s_hist.size()) > opt.history) {
                    s_hist.pop_front();
                    y_hist.pop_front();
                    rho_hist.pop_front();
                }
            }
            if (g.norm() < opt.grad_tol) {
                rep.reason = StopReason::gradient;
                break;
            }
        }
    }
    rep.x = x;
    rep.f = f;
    rep.grad_norm = g.norm();
    return rep;
}

LbfgsReport lbfgs_fit(MlpModel& model, const Matrix& inputs, std::span<const int> labels, Loss loss,
                      const LbfgsOptions& options, const LossOptions& loss_options) {
    if (inputs.rows() == 0) throw ValidationError("lbfgs_fit: empty dataset");
    MlpModel work = model;
    work.mode = Mode::train;
    const Objective objective = [&](const Vector& params, Vector& grad) {
        set_parameters(work, params);
        auto r = loss_and_grad(work, inputs, labels, loss, loss_options);
        grad = std::move(r.gradient);
        return r.value;
    };
    LbfgsReport rep = lbfgs_minimize(objective, get_parameters(model), options);
    set_parameters(model, rep.x);
    model.mode = Mode::eval;
    return rep;
}

FitReport adam_fit(MlpModel& model, const Matrix& inputs, std::span<const int> labels, Loss loss,
                   const AdamFitOptions& options, const LossOptions& loss_options) {
    const auto n = static_cast<std::size_t>(inputs.rows());
    if (n == 0) throw ValidationError("adam_fit: empty dataset");
    if (options.batch_size == 0) throw ValidationError("adam_fit: batch size must be positive");
    RandomStream rng(options.seed);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    AdamState state;
    Vector params = get_parameters(model);
    model.mode = Mode::train;
    FitReport report;
    Matrix batch;
    std::vector<int> batch_labels;
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
        double total = 0.0;
        for (std::size_t begin = 0; begin < n; begin += options.batch_size) {
            std::size_t end = std::min(n, begin + options.batch_size);
            // A lone trailing sample has no batch statistics; fold it in.
            if (n - end == 1) end = n;
            const auto rows = static_cast<Eigen::Index>(end - begin);
            batch.resize(rows, inputs.cols());
            batch_labels.resize(end - begin);
            for (std::size_t k = begin; k < end; ++k) {
                batch.row(static_cast<Eigen::Index>(k - begin)) = inputs.row(static_cast<Eigen::Index>(order[k]));
                batch_labels[k - begin] = labels[order[k]];
            }
            LossOptions lo = loss_options;
            lo.dropout_seed = rng.next_u64();
            auto r = loss_and_grad(model, batch, batch_labels, loss, lo);
            update_running_stats(model, r.trace);
            adam_step(params, r.gradient, state, options.adam);
            set_parameters(model, params);
            total += r.value * static_cast<double>(rows);
            if (end == n) break;
        }
        report.epoch_loss.push_back(total / static_cast<double>(n));
    }
    model.mode = Mode::eval;
    return report;
}

double gradient_check(const MlpModel& model, const Matrix& batch, std::span<const int> labels, Loss loss,
                      const LossOptions& options, double h) {
    const Prepared prep = check_labels(model, batch, labels, loss, options);
    const Vector analytic = loss_and_grad(model, batch, labels, loss, options).gradient;
    MlpModel work = model;
    const Vector base = get_parameters(model);
    double worst = 0.0;
    for (Eigen::Index i = 0; i < base.size(); ++i) {
        Vector p = base;
        p[i] = base[i] + h;
        set_parameters(work, p);
        const double up = loss_only(work, batch, labels, prep, options);
        p[i] = base[i] - h;
        set_parameters(work, p);
        const double down = loss_only(work, batch, labels, prep, options);
        const double numeric = (up - down) / (2.0 * h);
        const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-6});
        worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
    }
    return worst;
}

// ---------------------------------------------------------------------------
// Serialisation

nlohmann::json to_json(const MlpModel& model) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& layer : model.layers) {
        std::visit(overloaded{
                       [&](const Dense& d) {
                           nlohmann::json rows = nlohmann::json::array();
                           for (Eigen::Index r = 0; r < d.weight.rows(); ++r) {
                               rows.push_back(to_vec(d.weight.row(r).transpose()));
                           }
                           layers.push_back({{"type", "dense"},
                                             {"in", d.weight.cols()},
                                             {"out", d.weight.rows()},
                                             {"weight", rows},
                                             {"bias", to_vec(d.bias)}});
                       },
                       [&](const ReLU&) { layers.push_back({{"type", "relu"}}); },
                       [&](const PReLU& p) { layers.push_back({{"type", "prelu"}, {"slope", p.slope}}); },
                       [&](const Dropout& d) { layers.push_back({{"type", "dropout"}, {"p", d.p}}); },
                       [&](const BatchNorm& b) {
                           layers.push_back({{"type", "batchnorm"},
                                             {"width", b.gamma.size()},
                                             {"gamma", to_vec(b.gamma)},
                                             {"beta", to_vec(b.beta)},
                                             {"running_mean", to_vec(b.running_mean)},
                                             {"running_var", to_vec(b.running_var)},
                                             {"momentum", b.momentum},
                                             {"eps", b.eps}});
                       },
                       [&](const Softmax&) { layers.push_back({{"type", "softmax"}}); },
                       [&](const LogSoftmax&) { layers.push_back({{"type", "log_softmax"}}); },
                   },
                   layer);
    }
    return {{"mode", model.mode == Mode::train ? "train" : "eval"}, {"layers", layers}};
}

MlpModel model_from_json(const nlohmann::json& doc) {
    MlpModel m;
    try {
        const std::string mode = doc.at("mode").get<std::string>();
        if (mode != "train" && mode != "eval") throw ParseError("model: unknown mode '" + mode + "'");
        m.mode = mode == "train" ? Mode::train : Mode::eval;
        for (const auto& l : doc.at("layers")) {
            const std::string type = l.at("type").get<std::string>();
            if (type == "dense") {
                Dense d;
                const auto in = l.at("in").get<Eigen::Index>();
                const auto out = l.at("out").get<Eigen::Index>();
                const auto& rows = l.at("weight");
                if (static_cast<Eigen::Index>(rows.size()) != out) throw ParseError("model: dense weight rows mismatch");
                d.weight.resize(out, in);
                for (Eigen::Index r = 0; r < out; ++r) {
                    const Vector row = vec_from(rows[static_cast<std::size_t>(r)], "weight row");
                    if (row.size() != in) throw ParseError("model: dense weight columns mismatch");
                    d.weight.row(r) = row.transpose();
                }
                d.bias = vec_from(l.at("bias"), "bias");
                m.layers.push_back(std::move(d));
            } else if (type == "relu") {
                m.layers.push_back(ReLU{});
            } else if (type == "prelu") {
                m.layers.push_back(PReLU{l.at("slope").get<double>()});
            } else if (type == "dropout") {
                m.layers.push_back(Dropout{l.at("p").get<double>()});
            } else if (type == "batchnorm") {
                BatchNorm b;
                b.gamma = vec_from(l.at("gamma"), "gamma");
                b.beta = vec_from(l.at("beta"), "beta");
                b.running_mean = vec_from(l.at("running_mean"), "running_mean");
                b.running_var = vec_from(l.at("running_var"), "running_var");
                b.momentum = l.at("momentum").get<double>();
                b.eps = l.at("eps").get<double>();
                m.layers.push_back(std::move(b));
            } else if (type == "softmax") {
                m.layers.push_back(Softmax{});
            } else if (type == "log_softmax") {
                m.layers.push_back(LogSoftmax{});
            } else {
                throw ParseError("model: unknown layer type '" + type + "'");
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw ParseError(std::string("model: ") + e.what());
    }
    try {
        m.check();
    } catch (const ValidationError& e) {
        throw ParseError(std::string("model: ") + e.what());
    }
    return m;
}

}  // namespace flowsim::nn
