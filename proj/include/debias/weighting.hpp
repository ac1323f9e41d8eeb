// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <string_view>

#include "debias/error.hpp"
#include "debias/schedule.hpp"

namespace debias {

enum class WeightKind { Constant, InvSqrtSnr, InvSnr, P2, MinSnr, Vlb };

/// Per-timestep loss weight rule. Hyperparameters are only read for the
/// kinds that use them.
struct WeightStrategy {
    WeightKind kind = WeightKind::Constant;
    double p2_k = 1.0;
    double p2_gamma = 1.0;
    double minsnr_gamma = 5.0;

    static WeightStrategy constant() { return {WeightKind::Constant}; }
    static WeightStrategy inv_sqrt_snr() { return {WeightKind::InvSqrtSnr}; }
    static WeightStrategy inv_snr() { return {WeightKind::InvSnr}; }
    static WeightStrategy vlb() { return {WeightKind::Vlb}; }
    static WeightStrategy p2(double k = 1.0, double gamma = 1.0) {
        return {WeightKind::P2, k, gamma};
    }
    static WeightStrategy min_snr(double gamma = 5.0) {
        WeightStrategy w{WeightKind::MinSnr};
        w.minsnr_gamma = gamma;
        return w;
    }

    void validate() const {
        if (kind == WeightKind::P2) {
            if (!(p2_k > 0.0) || !std::isfinite(p2_k)) {
                throw ConfigError("weight.p2_k: must be > 0");
            }
            if (!(p2_gamma > 0.0) || !std::isfinite(p2_gamma)) {
                throw ConfigError("weight.p2_gamma: must be > 0");
            }
        }
        if (kind == WeightKind::MinSnr && (!(minsnr_gamma > 0.0) || !std::isfinite(minsnr_gamma))) {
            throw ConfigError("weight.minsnr_gamma: must be > 0");
        }
    }
};

inline constexpr std::array<std::pair<std::string_view, WeightKind>, 6> kWeightNames{{
    {"constant", WeightKind::Constant},
    {"inv_sqrt_snr", WeightKind::InvSqrtSnr},
    {"inv_snr", WeightKind::InvSnr},
    {"p2", WeightKind::P2},
    {"min_snr", WeightKind::MinSnr},
    {"vlb", WeightKind::Vlb},
}};

inline std::string_view to_string(WeightKind k) {
    for (const auto& [name, kind] : kWeightNames) {
        if (kind == k) return name;
    }
    return "unknown";
}

/// Accepts the canonical names plus "ours" as an alias for inv_sqrt_snr.
inline WeightKind parse_weight_kind(std::string_view name) {
    if (name == "ours") return WeightKind::InvSqrtSnr;
    for (const auto& [n, kind] : kWeightNames) {
        if (n == name) return kind;
    }
    throw ConfigError("weight.kind: unknown strategy '" + std::string(name) + "'");
}

/// Weight as a function of SNR alone; Vlb needs the schedule and is excluded.
inline double weight_from_snr(const WeightStrategy& w, double snr_t) {
    switch (w.kind) {
        case WeightKind::Constant:
            return 1.0;
        case WeightKind::InvSqrtSnr:
            return 1.0 / std::sqrt(snr_t);
        case WeightKind::InvSnr:
            return 1.0 / snr_t;
        case WeightKind::P2:
            return 1.0 / std::pow(w.p2_k + snr_t, w.p2_gamma);
        case WeightKind::MinSnr:
            return std::min(snr_t, w.minsnr_gamma) / snr_t;
        case WeightKind::Vlb:
            break;
    }
    throw ConfigError("weight.kind: vlb weight requires a schedule");
}

inline double weight(const WeightStrategy& w, const NoiseSchedule& s, int t) {
    w.validate();
    s.check_step(t);
    if (w.kind == WeightKind::Vlb) {
        return vlb_weight(s, t);
    }
    if (w.kind == WeightKind::InvSqrtSnr) {
        return amplification_coeff(s, t);
    }
    return weight_from_snr(w, snr(s, t));
}

/// Weights for t = 1..T (index 0 holds t = 1).
inline std::vector<double> weight_table(const WeightStrategy& w, const NoiseSchedule& s) {
    std::vector<double> out(static_cast<std::size_t>(s.T()));
    for (int t = 1; t <= s.T(); ++t) {
        out[static_cast<std::size_t>(t - 1)] = weight(w, s, t);
    }
    return out;
}

}  // namespace debias
