// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <limits>
#include <random>
#include <string>

#include "debias/error.hpp"

namespace debias {

/// A batch of d-vectors stored column-wise: rows = data dimension, cols = examples.
using Batch = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

inline void require_same_shape(const Batch& a, const Batch& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ShapeError(std::string(what) + ": shape " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
    }
}

/// SplitMix64 generator. Cheap to seed, so every (seed, index) pair can own
/// an independent stream; used wherever results must not depend on batching
/// or worker count.
class StreamRng {
public:
    using result_type = std::uint64_t;

    explicit StreamRng(std::uint64_t seed) : state_(seed) {}

    /// Stream keyed by (seed, stream, index).
    StreamRng(std::uint64_t seed, std::uint64_t stream, std::uint64_t index)
        : state_(mix(mix(seed ^ 0x6a09e667f3bcc909ULL) ^ mix(stream + 0x3c6ef372fe94f82bULL) ^
                     (index * 0x9e3779b97f4a7c15ULL))) {}

    static constexpr result_type min() { return 0; }
    static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

    result_type operator()() {
        state_ += 0x9e3779b97f4a7c15ULL;
        return mix(state_);
    }

private:
    static std::uint64_t mix(std::uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    std::uint64_t state_;
};

/// Fills `out` with independent standard normal draws from `rng`.
template <class Rng>
void fill_normal(Batch& out, Rng& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
        for (Eigen::Index i = 0; i < out.rows(); ++i) {
            out(i, j) = normal(rng);
        }
    }
}

/// 64-bit FNV-1a, used for fingerprints and version hashes.
inline std::uint64_t fnv1a(const void* data, std::size_t size,
                           std::uint64_t hash = 0xcbf29ce484222325ULL) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < size; ++i) {
        hash ^= bytes[i];
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

inline std::string to_hex(std::uint64_t v) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i) {
        s[static_cast<std::size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return s;
}

}  // namespace debias
