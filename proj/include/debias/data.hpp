// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <string_view>

#include "debias/error.hpp"
#include "debias/types.hpp"

namespace debias {

enum class DatasetKind { GaussianMixture, SwissRoll, Checkerboard, Rings };

/// Seeded 2-D toy distribution. Example i is a pure function of
/// (kind, params, seed, i), so any index range can be regenerated.
struct ToyDataset {
    DatasetKind kind = DatasetKind::GaussianMixture;
    int k = 8;                     // mixture components / ring count
    double radius = 4.0;           // mixture circle radius
    double component_sigma = 0.1;  // mixture component std
    double noise = 0.1;            // swiss roll / rings jitter
    double extent = 2.0;           // checkerboard half-width
    std::uint64_t seed = 0;

    static ToyDataset gaussian_mixture(int k, double radius, double sigma, std::uint64_t seed) {
        ToyDataset d;
        d.kind = DatasetKind::GaussianMixture;
        d.k = k;
        d.radius = radius;
        d.component_sigma = sigma;
        d.seed = seed;
        return d;
    }

    void validate() const {
        switch (kind) {
            case DatasetKind::GaussianMixture:
                if (k < 1) throw ConfigError("data.k: must be >= 1");
                if (!(radius >= 0.0)) throw ConfigError("data.radius: must be >= 0");
                if (!(component_sigma > 0.0)) throw ConfigError("data.sigma: must be > 0");
                break;
            case DatasetKind::SwissRoll:
                if (!(noise >= 0.0)) throw ConfigError("data.noise: must be >= 0");
                break;
            case DatasetKind::Checkerboard:
                if (!(extent > 0.0)) throw ConfigError("data.extent: must be > 0");
                break;
            case DatasetKind::Rings:
                if (k < 1) throw ConfigError("data.k: must be >= 1");
                if (!(noise >= 0.0)) throw ConfigError("data.noise: must be >= 0");
                break;
        }
    }

    /// Copy of this dataset drawing from an unrelated stream (held-out data).
    ToyDataset with_seed(std::uint64_t s) const {
        ToyDataset d = *this;
        d.seed = s;
        return d;
    }
};

inline DatasetKind parse_dataset_kind(std::string_view name) {
    if (name == "gaussian_mixture") return DatasetKind::GaussianMixture;
    if (name == "swiss_roll") return DatasetKind::SwissRoll;
    if (name == "checkerboard") return DatasetKind::Checkerboard;
    if (name == "rings") return DatasetKind::Rings;
    throw ConfigError("data.kind: unknown dataset '" + std::string(name) + "'");
}

inline std::string_view to_string(DatasetKind k) {
    switch (k) {
        case DatasetKind::GaussianMixture: return "gaussian_mixture";
        case DatasetKind::SwissRoll: return "swiss_roll";
        case DatasetKind::Checkerboard: return "checkerboard";
        case DatasetKind::Rings: return "rings";
    }
    return "unknown";
}

/// Draws example `index` into out[0..1].
inline void generate_one(const ToyDataset& d, std::uint64_t index, double* out) {
    StreamRng rng(d.seed, 0xda7a, index);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    constexpr double two_pi = 2.0 * std::numbers::pi;
    switch (d.kind) {
        case DatasetKind::GaussianMixture: {
            std::uniform_int_distribution<int> pick(0, d.k - 1);
            const double angle = two_pi * pick(rng) / d.k;
            out[0] = d.radius * std::cos(angle) + d.component_sigma * normal(rng);
            out[1] = d.radius * std::sin(angle) + d.component_sigma * normal(rng);
            break;
        }
        case DatasetKind::SwissRoll: {
            // sklearn-style 2-D roll, scaled by 1/4 to keep coordinates O(1).
            const double t = 1.5 * std::numbers::pi * (1.0 + 2.0 * unit(rng));
            out[0] = 0.25 * (t * std::cos(t)) + d.noise * normal(rng);
            out[1] = 0.25 * (t * std::sin(t)) + d.noise * normal(rng);
            break;
        }
        case DatasetKind::Checkerboard: {
            // 4x4 board over [-extent, extent]^2, filled cells where (col + row) is even.
            const double cell = d.extent / 2.0;
            std::uniform_int_distribution<int> pick(0, 7);
            const int idx = pick(rng);
            const int row = idx / 2;
            const int col = 2 * (idx % 2) + (row % 2);
            out[0] = -d.extent + cell * (col + unit(rng));
            out[1] = -d.extent + cell * (row + unit(rng));
            break;
        }
        case DatasetKind::Rings: {
            std::uniform_int_distribution<int> pick(1, d.k);
            const double r = static_cast<double>(pick(rng));
            const double angle = two_pi * unit(rng);
            out[0] = r * std::cos(angle) + d.noise * normal(rng);
            out[1] = r * std::sin(angle) + d.noise * normal(rng);
            break;
        }
    }
}

/// Examples [offset, offset + n) as a 2 x n batch.
inline Batch generate(const ToyDataset& d, Eigen::Index n, std::uint64_t offset = 0) {
    d.validate();
    if (n < 0) throw ConfigError("generate: n must be >= 0");
    Batch out(2, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        generate_one(d, offset + static_cast<std::uint64_t>(i), out.col(i).data());
    }
    return out;
}

}  // namespace debias
