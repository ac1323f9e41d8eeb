// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "debias/diagnostics.hpp"
#include "debias/error.hpp"
#include "debias/schedule.hpp"
#include "debias/types.hpp"

namespace debias {

enum class SamplerKind { DDPM, DDIM };

/// Reverse-step variance for the ancestral sampler.
enum class VarianceKind { Beta, TildeBeta };

inline SamplerKind parse_sampler_kind(std::string_view s) {
    if (s == "ddpm") return SamplerKind::DDPM;
    if (s == "ddim") return SamplerKind::DDIM;
    throw ConfigError("sample.kind: unknown sampler '" + std::string(s) + "'");
}

inline std::string_view to_string(SamplerKind k) {
    return k == SamplerKind::DDPM ? "ddpm" : "ddim";
}

struct StepOptions {
    bool clip_x0 = false;
    double clip_min = -1.0;
    double clip_max = 1.0;
    VarianceKind variance = VarianceKind::Beta;
};

struct SamplerConfig {
    SamplerKind kind = SamplerKind::DDPM;
    int steps = 1000;
    StepOptions step;
    std::uint64_t seed = 0;
    bool use_ema = true;
    int workers = 1;

    void validate() const {
        if (steps < 1) throw ConfigError("sample.steps: must be >= 1");
        if (workers < 1) throw ConfigError("workers: must be >= 1");
        if (step.clip_x0 && !(step.clip_min < step.clip_max)) {
            throw ConfigError("sample.clip_min: must be below sample.clip_max");
        }
    }
};

namespace detail {

inline void require_finite(const Batch& b, const char* what, int k) {
    if (!b.allFinite()) {
        throw NumericError(std::string(what) + ": non-finite value at respaced step " +
                           std::to_string(k));
    }
}

inline Batch x0_from_eps(const RespacedSchedule& rs, int k, const Batch& x_t, const Batch& eps_hat,
                         const StepOptions& opt) {
    Batch x0 = estimate_x0_at(rs.effective().alpha_bar(k), x_t, eps_hat);
    if (opt.clip_x0) x0 = x0.cwiseMax(opt.clip_min).cwiseMin(opt.clip_max);
    return x0;
}

}  // namespace detail

/// Ancestral step k -> k-1 on the respaced chain:
/// x_prev = c1 * x0_hat + c2 * x_t + sigma_k * noise, with sigma_k^2 = beta_k
/// (or tilde_beta_k). The noise term is dropped on the final transition.
inline Batch ddpm_step(const RespacedSchedule& rs, int k, const Batch& x_t, const Batch& eps_hat,
                       const Batch& noise, const StepOptions& opt = {}) {
    require_same_shape(x_t, eps_hat, "ddpm_step");
    const NoiseSchedule& eff = rs.effective();
    eff.check_step(k);
    const Batch x0 = detail::x0_from_eps(rs, k, x_t, eps_hat, opt);
    const PosteriorCoeffs pc = posterior_coeffs(eff, k);
    Batch x_prev = pc.c1 * x0 + pc.c2 * x_t;
    if (k > 1) {
        require_same_shape(x_t, noise, "ddpm_step noise");
        const double var = opt.variance == VarianceKind::Beta ? eff.beta(k) : pc.tilde_beta;
        x_prev += std::sqrt(var) * noise;
    }
    detail::require_finite(x_prev, "ddpm_step", k);
    return x_prev;
}

/// Deterministic (eta = 0) step k -> k-1:
/// x_prev = sqrt(a_prev) * x0_hat + sqrt(1 - a_prev) * eps_hat.
inline Batch ddim_step(const RespacedSchedule& rs, int k, const Batch& x_t, const Batch& eps_hat,
                       const StepOptions& opt = {}) {
    require_same_shape(x_t, eps_hat, "ddim_step");
    const NoiseSchedule& eff = rs.effective();
    eff.check_step(k);
    const Batch x0 = detail::x0_from_eps(rs, k, x_t, eps_hat, opt);
    const double a_prev = eff.alpha_bar(k - 1);
    Batch x_prev = std::sqrt(a_prev) * x0 + std::sqrt(1.0 - a_prev) * eps_hat;
    detail::require_finite(x_prev, "ddim_step", k);
    return x_prev;
}

/// One trajectory record: the state entering respaced step k and the x0
/// estimate formed there.
struct TrajectoryRow {
    std::int64_t sample_id = 0;
    int step_index = 0;
    int t = 0;
    Vector x;
    Vector x0_hat;
};

inline constexpr Eigen::Index kSampleChunk = 512;

/// Runs the chosen sampler over `rs` for `n` samples.
///
/// Sample i draws its initial point and per-step noise from its own stream
/// keyed by (seed, i), and chunk boundaries are fixed, so the output does not
/// depend on the worker count.
template <class Predictor>
Batch sample(const Predictor& predict, const RespacedSchedule& rs, const SamplerConfig& cfg,
             Eigen::Index n, std::vector<TrajectoryRow>* trajectory = nullptr) {
    cfg.validate();
    if (n < 0) throw ConfigError("sample.count: must be >= 0");
    const Eigen::Index d = predict.dim();
    Batch out(d, n);
    if (n == 0) return out;

    const Eigen::Index n_chunks = (n + kSampleChunk - 1) / kSampleChunk;
    std::vector<std::vector<TrajectoryRow>> traj_parts(trajectory ? static_cast<std::size_t>(n_chunks) : 0);

    auto run_chunk = [&](Eigen::Index c) {
        const Eigen::Index begin = c * kSampleChunk;
        const Eigen::Index m = std::min(kSampleChunk, n - begin);
        std::vector<StreamRng> rngs;
        std::vector<std::normal_distribution<double>> normals(static_cast<std::size_t>(m));
        rngs.reserve(static_cast<std::size_t>(m));
        for (Eigen::Index i = 0; i < m; ++i) {
            rngs.emplace_back(cfg.seed, 0x5a3b1e, static_cast<std::uint64_t>(begin + i));
        }
        auto draw = [&](Batch& b) {
            for (Eigen::Index i = 0; i < m; ++i) {
                auto& rng = rngs[static_cast<std::size_t>(i)];
                auto& nd = normals[static_cast<std::size_t>(i)];
                for (Eigen::Index r = 0; r < d; ++r) b(r, i) = nd(rng);
            }
        };
        Batch x(d, m);
        draw(x);
        Batch noise(d, m);
        std::vector<int> tv(static_cast<std::size_t>(m));
        for (int k = rs.S(); k >= 1; --k) {
            const int t = rs.base_step(k);
            std::fill(tv.begin(), tv.end(), t);
            const Batch eps_hat = predict(x, tv);
            if (trajectory) {
                const Batch x0 = detail::x0_from_eps(rs, k, x, eps_hat, cfg.step);
                auto& part = traj_parts[static_cast<std::size_t>(c)];
                for (Eigen::Index i = 0; i < m; ++i) {
                    part.push_back({begin + i, k, t, x.col(i), x0.col(i)});
                }
            }
            if (cfg.kind == SamplerKind::DDPM) {
                if (k > 1) {
                    draw(noise);
                } else {
                    noise.setZero();
                }
                x = ddpm_step(rs, k, x, eps_hat, noise, cfg.step);
            } else {
                x = ddim_step(rs, k, x, eps_hat, cfg.step);
            }
        }
        out.middleCols(begin, m) = x;
    };

    const int workers = static_cast<int>(std::min<Eigen::Index>(cfg.workers, n_chunks));
    if (workers <= 1) {
        for (Eigen::Index c = 0; c < n_chunks; ++c) run_chunk(c);
    } else {
        std::vector<std::thread> pool;
        std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&, w] {
                try {
                    for (Eigen::Index c = w; c < n_chunks; c += workers) run_chunk(c);
                } catch (...) {
                    errors[static_cast<std::size_t>(w)] = std::current_exception();
                }
            });
        }
        for (auto& th : pool) th.join();
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
    }

    if (trajectory) {
        trajectory->clear();
        for (auto& part : traj_parts) {
            for (auto& row : part) trajectory->push_back(std::move(row));
        }
    }
    return out;
}

/// Convenience overload that respaces `base` to cfg.steps first.
template <class Predictor>
Batch sample(const Predictor& predict, const NoiseSchedule& base, const SamplerConfig& cfg,
             Eigen::Index n, std::vector<TrajectoryRow>* trajectory = nullptr) {
    cfg.validate();
    return sample(predict, respace(base, cfg.steps), cfg, n, trajectory);
}

}  // namespace debias
