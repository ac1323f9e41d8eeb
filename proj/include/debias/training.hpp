// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "debias/checkpoint.hpp"
#include "debias/data.hpp"
#include "debias/error.hpp"
#include "debias/nn.hpp"
#include "debias/schedule.hpp"
#include "debias/types.hpp"
#include "debias/weighting.hpp"

namespace debias {

enum class PredictionTarget { Epsilon, X0, V };

inline std::string_view to_string(PredictionTarget p) {
    switch (p) {
        case PredictionTarget::Epsilon: return "epsilon";
        case PredictionTarget::X0: return "x0";
        case PredictionTarget::V: return "v";
    }
    return "unknown";
}

inline PredictionTarget parse_prediction_target(std::string_view s) {
    if (s == "epsilon" || s == "eps") return PredictionTarget::Epsilon;
    if (s == "x0") return PredictionTarget::X0;
    if (s == "v") return PredictionTarget::V;
    throw ConfigError("train.target: unknown prediction target '" + std::string(s) + "'");
}

namespace detail {

inline void require_steps(std::span<const int> t, Eigen::Index n, const char* what) {
    if (static_cast<Eigen::Index>(t.size()) != n) {
        throw ShapeError(std::string(what) + ": " + std::to_string(n) + " examples but " +
                         std::to_string(t.size()) + " step indices");
    }
}

}  // namespace detail

// --- closed-form relations at a given cumulative alpha ----------------------

inline Batch q_sample_at(double alpha_bar, const Batch& x0, const Batch& eps) {
    require_same_shape(x0, eps, "q_sample");
    return std::sqrt(alpha_bar) * x0 + std::sqrt(1.0 - alpha_bar) * eps;
}

inline Batch make_target_at(PredictionTarget target, double alpha_bar, const Batch& x0,
                            const Batch& eps) {
    require_same_shape(x0, eps, "make_target");
    switch (target) {
        case PredictionTarget::Epsilon: return eps;
        case PredictionTarget::X0: return x0;
        case PredictionTarget::V:
            return std::sqrt(alpha_bar) * eps - std::sqrt(1.0 - alpha_bar) * x0;
    }
    return eps;
}

/// Converts a network output in `target` space into a noise prediction.
inline Batch to_eps_hat_at(PredictionTarget target, double alpha_bar, const Batch& x_t,
                           const Batch& net_out) {
    require_same_shape(x_t, net_out, "to_eps_hat");
    switch (target) {
        case PredictionTarget::Epsilon: return net_out;
        case PredictionTarget::X0:
            if (!(alpha_bar < 1.0)) {
                throw NumericError("to_eps_hat: x0 target undefined where alpha_bar == 1");
            }
            return (x_t - std::sqrt(alpha_bar) * net_out) / std::sqrt(1.0 - alpha_bar);
        case PredictionTarget::V:
            return std::sqrt(1.0 - alpha_bar) * x_t + std::sqrt(alpha_bar) * net_out;
    }
    return net_out;
}

/// d(eps_hat)/d(net_out) for each target: eps-space error = factor * target-space error.
inline double eps_space_factor(PredictionTarget target, double alpha_bar) {
    switch (target) {
        case PredictionTarget::Epsilon: return 1.0;
        case PredictionTarget::X0: return -std::sqrt(alpha_bar / (1.0 - alpha_bar));
        case PredictionTarget::V: return std::sqrt(alpha_bar);
    }
    return 1.0;
}

// --- batched versions with one step index per example -----------------------

inline Batch q_sample(const NoiseSchedule& s, const Batch& x0, std::span<const int> t,
                      const Batch& eps) {
    require_same_shape(x0, eps, "q_sample");
    detail::require_steps(t, x0.cols(), "q_sample");
    Batch out(x0.rows(), x0.cols());
    for (Eigen::Index j = 0; j < x0.cols(); ++j) {
        s.check_step(t[static_cast<std::size_t>(j)]);
        const double a = s.alpha_bar(t[static_cast<std::size_t>(j)]);
        out.col(j) = std::sqrt(a) * x0.col(j) + std::sqrt(1.0 - a) * eps.col(j);
    }
    return out;
}

inline Batch make_target(PredictionTarget target, const NoiseSchedule& s, std::span<const int> t,
                         const Batch& x0, const Batch& eps) {
    require_same_shape(x0, eps, "make_target");
    detail::require_steps(t, x0.cols(), "make_target");
    Batch out(x0.rows(), x0.cols());
    for (Eigen::Index j = 0; j < x0.cols(); ++j) {
        s.check_step(t[static_cast<std::size_t>(j)]);
        const double a = s.alpha_bar(t[static_cast<std::size_t>(j)]);
        out.col(j) = make_target_at(target, a, x0.col(j), eps.col(j));
    }
    return out;
}

inline Batch to_eps_hat(PredictionTarget target, const NoiseSchedule& s, std::span<const int> t,
                        const Batch& x_t, const Batch& net_out) {
    require_same_shape(x_t, net_out, "to_eps_hat");
    detail::require_steps(t, x_t.cols(), "to_eps_hat");
    if (target == PredictionTarget::Epsilon) {
        for (int ti : t) s.check_step(ti);
        return net_out;
    }
    Batch out(x_t.rows(), x_t.cols());
    for (Eigen::Index j = 0; j < x_t.cols(); ++j) {
        s.check_step(t[static_cast<std::size_t>(j)]);
        const double a = s.alpha_bar(t[static_cast<std::size_t>(j)]);
        out.col(j) = to_eps_hat_at(target, a, x_t.col(j), net_out.col(j));
    }
    return out;
}

// --- loss --------------------------------------------------------------------

struct LossOptions {
    /// For x0/v targets, weight the equivalent eps-space error instead of the
    /// error in the network's own output space.
    bool weight_in_eps_space = false;
};

/// Per-example loss coefficient w(t) * (eps-space factor)^2 when requested.
inline double loss_coefficient(const WeightStrategy& w, PredictionTarget target,
                               const NoiseSchedule& s, int t, const LossOptions& opt) {
    double c = weight(w, s, t);
    if (opt.weight_in_eps_space && target != PredictionTarget::Epsilon) {
        const double f = eps_space_factor(target, s.alpha_bar(t));
        c *= f * f;
    }
    return c;
}

struct LossResult {
    double value = 0.0;
    /// dLoss / dNetworkOutput, shape d x n.
    Batch output_grad;
};

/// Mean over the batch of coeff_j * ||target_j - pred_j||^2, plus its gradient
/// with respect to `pred`.
inline LossResult weighted_squared_error(const Batch& pred, const Batch& target,
                                         std::span<const double> coeff) {
    require_same_shape(pred, target, "loss");
    if (static_cast<Eigen::Index>(coeff.size()) != pred.cols()) {
        throw ShapeError("loss: " + std::to_string(coeff.size()) + " weights for " +
                         std::to_string(pred.cols()) + " examples");
    }
    const Eigen::Index n = pred.cols();
    LossResult r;
    r.output_grad.resize(pred.rows(), n);
    if (n == 0) return r;
    const double inv_n = 1.0 / static_cast<double>(n);
    double total = 0.0;
    for (Eigen::Index j = 0; j < n; ++j) {
        const double c = coeff[static_cast<std::size_t>(j)];
        const auto diff = (pred.col(j) - target.col(j)).eval();
        const double term = c * diff.squaredNorm();
        if (!std::isfinite(term)) {
            throw NumericError("loss: non-finite term at batch index " + std::to_string(j));
        }
        total += term;
        r.output_grad.col(j) = (2.0 * c * inv_n) * diff;
    }
    r.value = total * inv_n;
    return r;
}

inline std::vector<double> loss_coefficients(const WeightStrategy& w, PredictionTarget target,
                                             const NoiseSchedule& s, std::span<const int> t,
                                             const LossOptions& opt = {}) {
    std::vector<double> c(t.size());
    for (std::size_t j = 0; j < t.size(); ++j) c[j] = loss_coefficient(w, target, s, t[j], opt);
    return c;
}

inline double loss(const WeightStrategy& w, PredictionTarget target, const NoiseSchedule& s,
                   const Denoiser& m, const Batch& x0, std::span<const int> t, const Batch& eps,
                   const LossOptions& opt = {}) {
    const Batch x_t = q_sample(s, x0, t, eps);
    const Batch tgt = make_target(target, s, t, x0, eps);
    const Batch pred = m.forward(x_t, t, s);
    const auto coeff = loss_coefficients(w, target, s, t, opt);
    return weighted_squared_error(pred, tgt, coeff).value;
}

/// Loss and parameter gradient on one batch.
inline std::pair<double, Gradients> loss_and_grad(const WeightStrategy& w, PredictionTarget target,
                                                  const NoiseSchedule& s, const Denoiser& m,
                                                  const Batch& x0, std::span<const int> t,
                                                  const Batch& eps, const LossOptions& opt = {}) {
    const Batch x_t = q_sample(s, x0, t, eps);
    const Batch tgt = make_target(target, s, t, x0, eps);
    Tape tape;
    const Batch pred = m.forward(x_t, t, s, &tape);
    const auto coeff = loss_coefficients(w, target, s, t, opt);
    LossResult lr = weighted_squared_error(pred, tgt, coeff);
    return {lr.value, m.backward(tape, lr.output_grad)};
}

// --- predictor wrapper ---------------------------------------------------------

/// Turns a trained denoiser (raw or EMA parameters) into a noise predictor.
class ModelPredictor {
public:
    ModelPredictor(const Denoiser& m, const Vector& params, PredictionTarget target,
                   const NoiseSchedule& s)
        : model_(&m), params_(&params), target_(target), schedule_(&s) {}

    Eigen::Index dim() const { return model_->arch().input_dim; }

    Batch operator()(const Batch& x_t, std::span<const int> t) const {
        const Batch out = model_->forward_with(*params_, x_t, t, *schedule_);
        return to_eps_hat(target_, *schedule_, t, x_t, out);
    }

private:
    const Denoiser* model_;
    const Vector* params_;
    PredictionTarget target_;
    const NoiseSchedule* schedule_;
};

// --- training loop -----------------------------------------------------------

struct TrainConfig {
    int T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    WeightStrategy weight;
    PredictionTarget target = PredictionTarget::Epsilon;
    LossOptions loss;
    ToyDataset data;
    Architecture arch;
    int batch_size = 256;
    std::int64_t total_steps = 20000;
    double lr = 2e-4;
    double ema_decay = 0.9999;
    std::uint64_t seed = 0;
    int log_every = 100;

    NoiseSchedule schedule() const { return build_linear(T, beta_start, beta_end); }

    void validate() const {
        schedule();
        weight.validate();
        data.validate();
        arch.validate();
        if (arch.input_dim != 2) throw ConfigError("model.input_dim: toy datasets are 2-D");
        if (batch_size < 1) throw ConfigError("train.batch_size: must be >= 1");
        if (total_steps < 0) throw ConfigError("train.total_steps: must be >= 0");
        if (!(lr > 0.0)) throw ConfigError("train.lr: must be > 0");
        if (!(ema_decay >= 0.0 && ema_decay <= 1.0)) {
            throw ConfigError("train.ema_decay: must lie in [0, 1]");
        }
        if (log_every < 1) throw ConfigError("train.log_every: must be >= 1");
    }
};

/// Loss trace. wall_ms is the only non-deterministic column.
struct RunLog {
    struct Row {
        std::int64_t step = 0;
        double wall_ms = 0.0;
        double loss = 0.0;
        double ema_loss = 0.0;
    };
    std::vector<Row> rows;

    void write_csv(std::ostream& os) const {
        os << "step,wall_ms,loss,ema_loss\n";
        char buf[160];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof buf, "%lld,%.3f,%.17g,%.17g\n",
                          static_cast<long long>(r.step), r.wall_ms, r.loss, r.ema_loss);
            os << buf;
        }
    }

    /// The deterministic columns only (step, loss, ema_loss).
    void write_loss_csv(std::ostream& os) const {
        os << "step,loss,ema_loss\n";
        char buf[128];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof buf, "%lld,%.17g,%.17g\n", static_cast<long long>(r.step),
                          r.loss, r.ema_loss);
            os << buf;
        }
    }

    /// The wall-clock column keyed by step.
    void write_timing(std::ostream& os) const {
        os << "step,wall_ms\n";
        char buf[64];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof buf, "%lld,%.3f\n", static_cast<long long>(r.step), r.wall_ms);
            os << buf;
        }
    }
};

struct TrainResult {
    Denoiser model;
    EmaState ema;
    AdamState optimizer;
    RunLog log;
    std::string rng_state;
    std::int64_t steps_done = 0;
};

/// Raised when the loss or gradient goes non-finite. Carries the last state
/// whose parameters were all finite.
class TrainingDiverged : public NumericError {
public:
    TrainingDiverged(const std::string& msg, std::int64_t step, Checkpoint last_finite)
        : NumericError(msg), step_(step), last_finite_(std::move(last_finite)) {}

    std::int64_t step() const { return step_; }
    const Checkpoint& last_finite() const { return last_finite_; }

private:
    std::int64_t step_;
    Checkpoint last_finite_;
};

/// Training-time generator for step indices and noise. Its state is saved in
/// checkpoints so that resumed runs continue the same stream.
struct TrainRng {
    std::mt19937_64 engine;
    std::normal_distribution<double> normal{0.0, 1.0};

    explicit TrainRng(std::uint64_t seed) {
        std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                          0x7a17u};
        engine.seed(seq);
    }

    std::string serialize() const {
        std::ostringstream os;
        os << engine << ' ' << normal;
        return os.str();
    }

    void restore(const std::string& state) {
        std::istringstream is(state);
        is >> engine >> normal;
        if (!is) throw LoadError("rng_state: malformed generator state");
    }
};

inline Checkpoint make_checkpoint(const TrainConfig& cfg, const TrainResult& r) {
    Checkpoint ck{r.model, r.ema, CheckpointMeta{}, r.optimizer, r.rng_state};
    ck.meta.schedule_T = cfg.T;
    ck.meta.beta_start = cfg.beta_start;
    ck.meta.beta_end = cfg.beta_end;
    ck.meta.schedule_fingerprint = cfg.schedule().fingerprint();
    ck.meta.seed = cfg.seed;
    ck.meta.prediction_target = std::string(to_string(cfg.target));
    ck.meta.weight_kind = std::string(to_string(cfg.weight.kind));
    ck.meta.train_step = r.steps_done;
    return ck;
}

/// Runs the optimisation loop: stream a batch, draw t ~ U{1..T} and eps,
/// weighted loss, backward, Adam, EMA. Passing `resume` continues a run from
/// a checkpoint holding optimiser and generator state.
inline TrainResult train(const TrainConfig& cfg, const Checkpoint* resume = nullptr) {
    cfg.validate();
    const NoiseSchedule s = cfg.schedule();

    TrainResult r{Denoiser::initialized(cfg.arch, cfg.seed), EmaState{}, AdamState{}, RunLog{}, {},
                  0};
    TrainRng rng(cfg.seed);
    r.optimizer = AdamState::for_params(r.model.param_count());
    r.ema.decay = cfg.ema_decay;
    r.ema.shadow = r.model.params();

    if (resume) {
        if (resume->meta.schedule_fingerprint != s.fingerprint()) {
            throw ConfigError("resume: checkpoint schedule fingerprint differs from config");
        }
        if (!(resume->model.arch() == cfg.arch)) {
            throw ConfigError("resume: checkpoint architecture differs from config");
        }
        if (!resume->optimizer || resume->rng_state.empty()) {
            throw ConfigError("resume: checkpoint lacks optimizer or generator state");
        }
        r.model = resume->model;
        r.ema = resume->ema;
        r.ema.decay = cfg.ema_decay;
        r.optimizer = *resume->optimizer;
        rng.restore(resume->rng_state);
        r.steps_done = resume->meta.train_step;
    }

    const auto coeff_table = [&] {
        std::vector<double> c(static_cast<std::size_t>(s.T()));
        for (int t = 1; t <= s.T(); ++t) {
            c[static_cast<std::size_t>(t - 1)] = loss_coefficient(cfg.weight, cfg.target, s, t, cfg.loss);
        }
        return c;
    }();

    const auto B = static_cast<Eigen::Index>(cfg.batch_size);
    std::uniform_int_distribution<int> pick_t(1, s.T());
    std::vector<int> t(static_cast<std::size_t>(B));
    std::vector<double> coeff(static_cast<std::size_t>(B));
    Batch eps(2, B);
    Tape tape;
    const auto start = std::chrono::steady_clock::now();

    for (std::int64_t step = r.steps_done; step < cfg.total_steps; ++step) {
        const Batch x0 = generate(cfg.data, B, static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(B));
        const TrainRng rng_before = rng;
        for (Eigen::Index j = 0; j < B; ++j) {
            t[static_cast<std::size_t>(j)] = pick_t(rng.engine);
            coeff[static_cast<std::size_t>(j)] = coeff_table[static_cast<std::size_t>(t[static_cast<std::size_t>(j)] - 1)];
        }
        for (Eigen::Index j = 0; j < B; ++j) {
            for (Eigen::Index i = 0; i < eps.rows(); ++i) eps(i, j) = rng.normal(rng.engine);
        }

        const Batch x_t = q_sample(s, x0, t, eps);
        const Batch tgt = make_target(cfg.target, s, t, x0, eps);
        const Batch pred = r.model.forward(x_t, t, s, &tape);
        LossResult lr;
        try {
            lr = weighted_squared_error(pred, tgt, coeff);
            Gradients g = r.model.backward(tape, lr.output_grad);
            adam_step(r.model.params(), g, r.optimizer, cfg.lr);
        } catch (const NumericError& e) {
            TrainResult last = r;
            last.rng_state = rng_before.serialize();
            throw TrainingDiverged("train: diverged at step " + std::to_string(step + 1) + " (" +
                                       e.what() + ")",
                                   step + 1, make_checkpoint(cfg, last));
        }
        ema_update(r.ema, r.model.params());
        r.steps_done = step + 1;

        if (r.steps_done % cfg.log_every == 0 || r.steps_done == cfg.total_steps) {
            const Batch ema_pred = r.model.forward_with(r.ema.shadow, x_t, t, s);
            const double ema_loss = weighted_squared_error(ema_pred, tgt, coeff).value;
            const double ms =
                std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start)
                    .count();
            r.log.rows.push_back({r.steps_done, ms, lr.value, ema_loss});
        }
    }
    r.rng_state = rng.serialize();
    return r;
}

}  // namespace debias
