// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "debias/data.hpp"
#include "debias/error.hpp"
#include "debias/schedule.hpp"
#include "debias/training.hpp"
#include "debias/types.hpp"

namespace debias {

inline constexpr double kAlphaBarFloor = 1e-300;

/// x0 estimate implied by a noise prediction at cumulative alpha `alpha_bar`:
/// x_t / sqrt(a) - sqrt(1-a)/sqrt(a) * eps_hat.
inline Batch estimate_x0_at(double alpha_bar, const Batch& x_t, const Batch& eps_hat) {
    require_same_shape(x_t, eps_hat, "estimate_x0");
    if (!(alpha_bar >= kAlphaBarFloor)) {
        throw NumericError("estimate_x0: alpha_bar below underflow guard");
    }
    const double inv_sqrt_a = 1.0 / std::sqrt(alpha_bar);
    const double amp = std::sqrt((1.0 - alpha_bar) / alpha_bar);
    return inv_sqrt_a * x_t - amp * eps_hat;
}

inline Batch estimate_x0(const NoiseSchedule& s, int t, const Batch& x_t, const Batch& eps_hat) {
    s.check_step(t);
    return estimate_x0_at(s.alpha_bar(t), x_t, eps_hat);
}

/// x0 = x0_hat + amplified_error, where amplified_error = amp_coeff * (eps_hat - eps).
struct BiasDecomposition {
    Batch x0_hat;
    Batch amplified_error;
    int t = 0;
    double amp_coeff = 0.0;
};

inline BiasDecomposition decompose(const NoiseSchedule& s, int t, const Batch& x0,
                                   const Batch& eps, const Batch& eps_hat) {
    require_same_shape(x0, eps, "decompose");
    require_same_shape(x0, eps_hat, "decompose");
    s.check_step(t);
    const double a = s.alpha_bar(t);
    BiasDecomposition d;
    d.t = t;
    d.amp_coeff = amplification_coeff(s, t);
    const Batch x_t = q_sample_at(a, x0, eps);
    d.x0_hat = estimate_x0_at(a, x_t, eps_hat);
    d.amplified_error = d.amp_coeff * (eps_hat - eps);
    return d;
}

/// Bayes-optimal noise prediction E[eps | x_t] when x0 ~ N(mu, sigma2 * I).
inline Batch analytic_gaussian_denoiser_at(const Vector& mu, double sigma2, double alpha_bar,
                                           const Batch& x_t) {
    if (!(sigma2 > 0.0)) throw ConfigError("analytic denoiser: sigma2 must be > 0");
    if (mu.size() != x_t.rows()) {
        throw ShapeError("analytic denoiser: mu has " + std::to_string(mu.size()) +
                         " entries, data has " + std::to_string(x_t.rows()) + " rows");
    }
    const double denom = alpha_bar * sigma2 + 1.0 - alpha_bar;
    const Batch centered = x_t.colwise() - std::sqrt(alpha_bar) * mu;
    return (std::sqrt(1.0 - alpha_bar) / denom) * centered;
}

inline Batch analytic_gaussian_denoiser(const Vector& mu, double sigma2, const NoiseSchedule& s,
                                        int t, const Batch& x_t) {
    s.check_step(t);
    return analytic_gaussian_denoiser_at(mu, sigma2, s.alpha_bar(t), x_t);
}

/// Predictor adaptor around the analytic denoiser, usable wherever a trained
/// model is (samplers, sweeps, MSE curves).
class GaussianOraclePredictor {
public:
    GaussianOraclePredictor(Vector mu, double sigma2, const NoiseSchedule& s)
        : mu_(std::move(mu)), sigma2_(sigma2), schedule_(&s) {
        if (!(sigma2_ > 0.0)) throw ConfigError("analytic denoiser: sigma2 must be > 0");
    }

    Eigen::Index dim() const { return mu_.size(); }

    Batch operator()(const Batch& x_t, std::span<const int> t) const {
        detail::require_steps(t, x_t.cols(), "analytic denoiser");
        Batch out(x_t.rows(), x_t.cols());
        for (Eigen::Index j = 0; j < x_t.cols(); ++j) {
            const int tj = t[static_cast<std::size_t>(j)];
            schedule_->check_step(tj);
            out.col(j) = analytic_gaussian_denoiser_at(mu_, sigma2_, schedule_->alpha_bar(tj),
                                                       x_t.col(j));
        }
        return out;
    }

private:
    Vector mu_;
    double sigma2_;
    const NoiseSchedule* schedule_;
};

/// Evaluation protocol shared by the sweep and MSE-curve routines. The noise
/// for (t, example i) depends only on (noise_seed, t, i), so every mode sees
/// the same draws.
struct EvalSet {
    ToyDataset data;
    Eigen::Index n = 4096;
    std::uint64_t noise_seed = 0;

    void validate() const {
        if (n < 1) throw ConfigError("diag.n_eval: evaluation set must be non-empty");
        data.validate();
    }

    Batch x0() const { return generate(data, n); }

    Batch noise(int t) const {
        Batch eps(2, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            StreamRng rng(noise_seed, static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(i));
            std::normal_distribution<double> normal(0.0, 1.0);
            eps(0, i) = normal(rng);
            eps(1, i) = normal(rng);
        }
        return eps;
    }
};

/// t = stride, 2*stride, ..., plus T itself when it is not a multiple.
inline std::vector<int> strided_grid(int T, int stride) {
    if (stride < 1) throw ConfigError("diag.t_stride: must be >= 1");
    std::vector<int> g;
    for (int t = stride; t <= T; t += stride) g.push_back(t);
    if (g.empty() || g.back() != T) g.push_back(T);
    return g;
}

struct SweepRow {
    int t = 0;
    double x0_sq_error = 0.0;          // mean ||x0_hat - x0||^2
    double amplified_error_sq = 0.0;   // mean ||amplified_error||^2
};

/// One-step estimation: diffuse clean examples to x_t, query the predictor
/// once, decompose, and average.
template <class Predictor>
std::vector<SweepRow> one_step_sweep(const Predictor& predict, const NoiseSchedule& s,
                                     const EvalSet& eval, std::span<const int> t_list) {
    eval.validate();
    const Batch x0 = eval.x0();
    std::vector<SweepRow> rows;
    rows.reserve(t_list.size());
    std::vector<int> tv(static_cast<std::size_t>(eval.n));
    for (int t : t_list) {
        s.check_step(t);
        std::fill(tv.begin(), tv.end(), t);
        const Batch eps = eval.noise(t);
        const Batch x_t = q_sample_at(s.alpha_bar(t), x0, eps);
        const Batch eps_hat = predict(x_t, tv);
        const BiasDecomposition d = decompose(s, t, x0, eps, eps_hat);
        SweepRow r;
        r.t = t;
        r.x0_sq_error = (d.x0_hat - x0).colwise().squaredNorm().mean();
        r.amplified_error_sq = d.amplified_error.colwise().squaredNorm().mean();
        rows.push_back(r);
    }
    return rows;
}

/// Per-timestep MSE for one evaluation mode.
struct MseCurve {
    std::string mode;
    std::vector<int> t;
    std::vector<double> mse;
};

/// "Initial" mode: MSE between the network input x_t and the target noise.
inline MseCurve mse_curve_initial(const NoiseSchedule& s, const EvalSet& eval,
                                  std::span<const int> t_grid) {
    eval.validate();
    const Batch x0 = eval.x0();
    MseCurve c{"initial", {}, {}};
    for (int t : t_grid) {
        s.check_step(t);
        const Batch eps = eval.noise(t);
        const Batch x_t = q_sample_at(s.alpha_bar(t), x0, eps);
        c.t.push_back(t);
        c.mse.push_back((x_t - eps).colwise().squaredNorm().mean());
    }
    return c;
}

/// Model mode: MSE between the predicted noise and the target noise.
template <class Predictor>
MseCurve mse_curve(std::string mode, const Predictor& predict, const NoiseSchedule& s,
                   const EvalSet& eval, std::span<const int> t_grid) {
    eval.validate();
    const Batch x0 = eval.x0();
    MseCurve c{std::move(mode), {}, {}};
    std::vector<int> tv(static_cast<std::size_t>(eval.n));
    for (int t : t_grid) {
        s.check_step(t);
        std::fill(tv.begin(), tv.end(), t);
        const Batch eps = eval.noise(t);
        const Batch x_t = q_sample_at(s.alpha_bar(t), x0, eps);
        c.t.push_back(t);
        c.mse.push_back((predict(x_t, tv) - eps).colwise().squaredNorm().mean());
    }
    return c;
}

/// Mean of the curve over entries with t >= t_min.
inline double curve_mean_from(const MseCurve& c, int t_min) {
    double sum = 0.0;
    int count = 0;
    for (std::size_t i = 0; i < c.t.size(); ++i) {
        if (c.t[i] >= t_min) {
            sum += c.mse[i];
            ++count;
        }
    }
    if (count == 0) throw ConfigError("curve_mean_from: no probed step >= " + std::to_string(t_min));
    return sum / count;
}

}  // namespace debias
