// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "debias/error.hpp"
#include "debias/types.hpp"

namespace debias {

/// Distances between a generated and a reference point cloud.
/// mean_shift is the point-cloud stand-in for color shift (error in the
/// spatial mean of generated data).
struct MetricReport {
    double sliced_wasserstein = 0.0;
    double mean_shift = 0.0;
    double cov_error = 0.0;
    double energy_distance = 0.0;
};

namespace detail {

inline void require_cloud_pair(const Batch& a, const Batch& b, const char* what) {
    if (a.cols() == 0 || b.cols() == 0) {
        throw MetricError(std::string(what) + ": sample sets must be non-empty");
    }
    if (a.rows() != b.rows()) {
        throw MetricError(std::string(what) + ": dimensionality " + std::to_string(a.rows()) +
                          " vs " + std::to_string(b.rows()));
    }
}

/// Wasserstein-1 between two 1-D empirical measures, integrating |F - G|
/// over the merged support. Handles unequal sample counts.
inline double wasserstein1_sorted(const std::vector<double>& a, const std::vector<double>& b) {
    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    std::size_t i = 0, j = 0;
    double x_prev = std::min(a.front(), b.front());
    double total = 0.0;
    while (i < a.size() || j < b.size()) {
        double x;
        if (j == b.size() || (i < a.size() && a[i] <= b[j])) {
            x = a[i];
        } else {
            x = b[j];
        }
        const double gap = std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb);
        total += gap * (x - x_prev);
        x_prev = x;
        while (i < a.size() && a[i] == x) ++i;
        while (j < b.size() && b[j] == x) ++j;
    }
    return total;
}

inline Vector column_mean(const Batch& a) { return a.rowwise().mean(); }

inline Eigen::MatrixXd covariance(const Batch& a) {
    const Batch centered = a.colwise() - column_mean(a);
    return centered * centered.transpose() / static_cast<double>(a.cols());
}

inline double mean_pair_distance(const Batch& a, const Batch& b) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < a.cols(); ++i) {
        double row = 0.0;
        for (Eigen::Index j = 0; j < b.cols(); ++j) {
            row += (a.col(i) - b.col(j)).norm();
        }
        total += row;
    }
    return total / (static_cast<double>(a.cols()) * static_cast<double>(b.cols()));
}

}  // namespace detail

/// Random unit directions (columns) in `dim` dimensions from a fixed seed.
inline Batch random_directions(Eigen::Index dim, int count, std::uint64_t seed) {
    Batch dirs(dim, count);
    StreamRng rng(seed, 0x5117, 0);
    fill_normal(dirs, rng);
    for (Eigen::Index j = 0; j < dirs.cols(); ++j) {
        dirs.col(j).normalize();
    }
    return dirs;
}

/// Average 1-D Wasserstein-1 distance over the given projection directions.
inline double sliced_wasserstein(const Batch& a, const Batch& b, const Batch& directions) {
    detail::require_cloud_pair(a, b, "sliced_wasserstein");
    if (directions.rows() != a.rows() || directions.cols() == 0) {
        throw MetricError("sliced_wasserstein: directions must be non-empty and match data dim");
    }
    double total = 0.0;
    std::vector<double> pa(static_cast<std::size_t>(a.cols()));
    std::vector<double> pb(static_cast<std::size_t>(b.cols()));
    for (Eigen::Index k = 0; k < directions.cols(); ++k) {
        Eigen::Map<Eigen::RowVectorXd>(pa.data(), a.cols()) = directions.col(k).transpose() * a;
        Eigen::Map<Eigen::RowVectorXd>(pb.data(), b.cols()) = directions.col(k).transpose() * b;
        std::sort(pa.begin(), pa.end());
        std::sort(pb.begin(), pb.end());
        total += detail::wasserstein1_sorted(pa, pb);
    }
    return total / static_cast<double>(directions.cols());
}

inline double sliced_wasserstein(const Batch& a, const Batch& b, int n_projections,
                                 std::uint64_t seed) {
    if (n_projections < 1) throw MetricError("sliced_wasserstein: n_projections must be >= 1");
    detail::require_cloud_pair(a, b, "sliced_wasserstein");
    return sliced_wasserstein(a, b, random_directions(a.rows(), n_projections, seed));
}

inline double mean_shift(const Batch& a, const Batch& b) {
    detail::require_cloud_pair(a, b, "mean_shift");
    return (detail::column_mean(a) - detail::column_mean(b)).norm();
}

/// Frobenius distance between (1/n-normalised) sample covariances.
inline double cov_error(const Batch& a, const Batch& b) {
    detail::require_cloud_pair(a, b, "cov_error");
    return (detail::covariance(a) - detail::covariance(b)).norm();
}

/// V-statistic energy distance 2E|a-b| - E|a-a'| - E|b-b'|. O(n*m).
inline double energy_distance(const Batch& a, const Batch& b) {
    detail::require_cloud_pair(a, b, "energy_distance");
    const double ab = detail::mean_pair_distance(a, b);
    const double aa = detail::mean_pair_distance(a, a);
    const double bb = detail::mean_pair_distance(b, b);
    return std::max(0.0, 2.0 * ab - aa - bb);
}

struct MetricOptions {
    int n_projections = 128;
    std::uint64_t seed = 0;
    bool with_energy = true;
};

inline MetricReport evaluate_metrics(const Batch& generated, const Batch& reference,
                                     const MetricOptions& opt = {}) {
    MetricReport r;
    r.sliced_wasserstein = sliced_wasserstein(generated, reference, opt.n_projections, opt.seed);
    r.mean_shift = mean_shift(generated, reference);
    r.cov_error = cov_error(generated, reference);
    if (opt.with_energy) r.energy_distance = energy_distance(generated, reference);
    return r;
}

}  // namespace debias
