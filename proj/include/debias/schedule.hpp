// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "debias/error.hpp"
#include "debias/types.hpp"

namespace debias {

/// Discrete forward-noising schedule over steps t = 1..T.
///
/// `alpha_bar(t)` is the cumulative product of (1 - beta_s) for s <= t, with
/// alpha_bar(0) = 1. Values are precomputed at construction and the object is
/// immutable afterwards.
class NoiseSchedule {
public:
    NoiseSchedule() = default;

    /// Builds a schedule from explicit betas (index 0 holds beta_1).
    explicit NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
        if (betas_.empty()) {
            throw ConfigError("schedule.T: must be >= 1");
        }
        alpha_bars_.resize(betas_.size() + 1);
        alpha_bars_[0] = 1.0;
        for (std::size_t i = 0; i < betas_.size(); ++i) {
            const double b = betas_[i];
            if (!(b > 0.0 && b < 1.0)) {
                throw ConfigError("schedule.betas: beta_" + std::to_string(i + 1) +
                                  " must lie in (0, 1)");
            }
            alpha_bars_[i + 1] = alpha_bars_[i] * (1.0 - b);
            if (!(alpha_bars_[i + 1] < alpha_bars_[i] && alpha_bars_[i + 1] > 0.0)) {
                throw ConfigError("schedule.betas: cumulative product stalls or underflows at t=" +
                                  std::to_string(i + 1));
            }
        }
    }

    int T() const { return static_cast<int>(betas_.size()); }

    double beta(int t) const {
        check_step(t);
        return betas_[static_cast<std::size_t>(t - 1)];
    }

    /// Cumulative signal retention; valid for t in 0..T.
    double alpha_bar(int t) const {
        if (t < 0 || t > T()) {
            throw IndexError("step " + std::to_string(t) + " outside [0, " + std::to_string(T()) +
                             "]");
        }
        return alpha_bars_[static_cast<std::size_t>(t)];
    }

    const std::vector<double>& betas() const { return betas_; }

    void check_step(int t) const {
        if (t < 1 || t > T()) {
            throw IndexError("step " + std::to_string(t) + " outside [1, " + std::to_string(T()) +
                             "]");
        }
    }

    /// Stable hash over T and the exact bit patterns of every beta.
    std::string fingerprint() const {
        std::uint64_t h = fnv1a("debias-schedule", 15);
        const std::int64_t n = T();
        h = fnv1a(&n, sizeof n, h);
        for (double b : betas_) {
            const auto bits = std::bit_cast<std::uint64_t>(b);
            h = fnv1a(&bits, sizeof bits, h);
        }
        return to_hex(h);
    }

private:
    std::vector<double> betas_;
    std::vector<double> alpha_bars_;
};

/// Coefficients of the forward posterior q(x_{t-1} | x_t, x_0):
/// mean = c1 * x0 + c2 * x_t, variance = tilde_beta.
struct PosteriorCoeffs {
    double c1 = 0.0;
    double c2 = 0.0;
    double tilde_beta = 0.0;
};

/// Linear betas from beta_start to beta_end inclusive.
inline NoiseSchedule build_linear(int T, double beta_start, double beta_end) {
    if (T < 1) {
        throw ConfigError("schedule.T: must be >= 1, got " + std::to_string(T));
    }
    if (!(beta_start > 0.0)) {
        throw ConfigError("schedule.beta_start: must be > 0");
    }
    if (!(beta_end < 1.0)) {
        throw ConfigError("schedule.beta_end: must be < 1");
    }
    if (!(beta_start <= beta_end)) {
        throw ConfigError("schedule.beta_start: must not exceed schedule.beta_end");
    }
    std::vector<double> betas(static_cast<std::size_t>(T));
    if (T == 1) {
        betas[0] = beta_start;
    } else {
        const double span = beta_end - beta_start;
        for (int i = 0; i < T; ++i) {
            betas[static_cast<std::size_t>(i)] =
                beta_start + span * static_cast<double>(i) / static_cast<double>(T - 1);
        }
        betas.back() = beta_end;
    }
    return NoiseSchedule(std::move(betas));
}

inline double snr(const NoiseSchedule& s, int t) {
    s.check_step(t);
    const double a = s.alpha_bar(t);
    return a / (1.0 - a);
}

/// 1 / sqrt(SNR(t)): the factor that maps a noise-prediction error into x0 space.
inline double amplification_coeff(const NoiseSchedule& s, int t) {
    s.check_step(t);
    const double a = s.alpha_bar(t);
    return std::sqrt((1.0 - a) / a);
}

inline PosteriorCoeffs posterior_coeffs(const NoiseSchedule& s, int t) {
    s.check_step(t);
    const double beta = s.beta(t);
    const double a = s.alpha_bar(t);
    const double a_prev = s.alpha_bar(t - 1);
    PosteriorCoeffs pc;
    pc.c1 = std::sqrt(a_prev) * beta / (1.0 - a);
    pc.c2 = std::sqrt(1.0 - beta) * (1.0 - a_prev) / (1.0 - a);
    pc.tilde_beta = (1.0 - a_prev) / (1.0 - a) * beta;
    return pc;
}

/// Per-step coefficient of the epsilon-space KL term: beta^2 / ((1-beta)(1-alpha_bar)).
inline double vlb_weight(const NoiseSchedule& s, int t) {
    s.check_step(t);
    const double beta = s.beta(t);
    return beta * beta / ((1.0 - beta) * (1.0 - s.alpha_bar(t)));
}

/// An S-step schedule whose cumulative products coincide with the base
/// schedule at `selected` (1-based base steps, strictly increasing).
///
/// `effective()` is itself a NoiseSchedule indexed k = 1..S, so posterior
/// coefficients of the respaced chain come from the effective betas.
class RespacedSchedule {
public:
    RespacedSchedule(NoiseSchedule base, std::vector<int> selected)
        : base_(std::move(base)), selected_(std::move(selected)) {
        if (selected_.empty()) {
            throw ConfigError("sample.steps: respacing needs at least one step");
        }
        std::vector<double> eff;
        eff.reserve(selected_.size());
        int prev = 0;
        for (int t : selected_) {
            if (t <= prev || t > base_.T()) {
                throw ConfigError("respace: selected steps must be strictly increasing in [1, T]");
            }
            if (t == prev + 1) {
                eff.push_back(base_.beta(t));
            } else {
                eff.push_back(1.0 - base_.alpha_bar(t) / base_.alpha_bar(prev));
            }
            prev = t;
        }
        effective_ = NoiseSchedule(std::move(eff));
    }

    const NoiseSchedule& base() const { return base_; }
    const NoiseSchedule& effective() const { return effective_; }
    const std::vector<int>& selected_timesteps() const { return selected_; }
    const std::vector<double>& effective_betas() const { return effective_.betas(); }
    int S() const { return static_cast<int>(selected_.size()); }

    /// Base-schedule step fed to the network at respaced index k (1-based).
    int base_step(int k) const {
        effective_.check_step(k);
        return selected_[static_cast<std::size_t>(k - 1)];
    }

private:
    NoiseSchedule base_;
    std::vector<int> selected_;
    NoiseSchedule effective_;
};

/// Evenly spaced respacing that always keeps the final step T:
/// selected_k = round(k * T / S) for k = 1..S.
inline RespacedSchedule respace(const NoiseSchedule& s, int S) {
    if (S < 1 || S > s.T()) {
        throw ConfigError("sample.steps: must lie in [1, " + std::to_string(s.T()) + "], got " +
                          std::to_string(S));
    }
    const auto T64 = static_cast<std::int64_t>(s.T());
    const auto S64 = static_cast<std::int64_t>(S);
    std::vector<int> selected(static_cast<std::size_t>(S));
    for (std::int64_t k = 1; k <= S64; ++k) {
        selected[static_cast<std::size_t>(k - 1)] =
            static_cast<int>((2 * k * T64 + S64) / (2 * S64));
    }
    return RespacedSchedule(s, std::move(selected));
}

}  // namespace debias
