// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "debias/error.hpp"
#include "debias/schedule.hpp"
#include "debias/types.hpp"

namespace debias {

/// Shape of the denoiser MLP. The network input is the data vector
/// concatenated with a sinusoidal embedding of the step index.
struct Architecture {
    int input_dim = 2;
    std::vector<int> hidden_dims{128, 128, 128, 128};
    int time_embed_dim = 64;

    bool operator==(const Architecture&) const = default;

    void validate() const {
        if (input_dim < 1) throw ConfigError("model.input_dim: must be >= 1");
        if (time_embed_dim < 0 || time_embed_dim % 2 != 0) {
            throw ConfigError("model.time_embed_dim: must be a non-negative even number");
        }
        for (int h : hidden_dims) {
            if (h < 1) throw ConfigError("model.hidden_dims: widths must be >= 1");
        }
    }

    std::string hidden_string() const {
        std::string s;
        for (std::size_t i = 0; i < hidden_dims.size(); ++i) {
            if (i) s += ',';
            s += std::to_string(hidden_dims[i]);
        }
        return s;
    }
};

/// One dense layer's slice of the flat parameter vector. Weights are stored
/// column-major (rows = fan_out, cols = fan_in), bias follows.
struct LayerLayout {
    Eigen::Index rows = 0;
    Eigen::Index cols = 0;
    Eigen::Index weight_offset = 0;
    Eigen::Index bias_offset = 0;
};

inline std::vector<LayerLayout> make_layout(const Architecture& arch) {
    arch.validate();
    std::vector<LayerLayout> layout;
    Eigen::Index fan_in = arch.input_dim + arch.time_embed_dim;
    Eigen::Index offset = 0;
    auto push = [&](Eigen::Index fan_out) {
        LayerLayout l;
        l.rows = fan_out;
        l.cols = fan_in;
        l.weight_offset = offset;
        offset += fan_out * fan_in;
        l.bias_offset = offset;
        offset += fan_out;
        layout.push_back(l);
        fan_in = fan_out;
    };
    for (int h : arch.hidden_dims) push(h);
    push(arch.input_dim);
    return layout;
}

inline Eigen::Index layout_param_count(const std::vector<LayerLayout>& layout) {
    return layout.empty() ? 0 : layout.back().bias_offset + layout.back().rows;
}

/// Sinusoidal step embedding: [cos(t * f_i), sin(t * f_i)] with
/// f_i = 10000^(-i / half), i = 0..half-1.
inline void time_embedding(int t, int dim, double* out) {
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / half);
        const double arg = static_cast<double>(t) * freq;
        out[i] = std::cos(arg);
        out[half + i] = std::sin(arg);
    }
}

/// Flat gradient vector aligned with Denoiser::params().
struct Gradients {
    Vector flat;
};

/// Activations recorded by a forward pass for use by backward.
class Tape {
public:
    bool recorded() const { return recorded_; }
    void clear() {
        inputs_.clear();
        preacts_.clear();
        recorded_ = false;
    }

private:
    friend class Denoiser;
    std::vector<Batch> inputs_;   // input to each layer
    std::vector<Batch> preacts_;  // pre-activation of each hidden layer
    bool recorded_ = false;
};

/// Feed-forward epsilon/x0/v predictor with SiLU activations.
class Denoiser {
public:
    Denoiser() : Denoiser(Architecture{}) {}

    /// All parameters zero.
    explicit Denoiser(Architecture arch)
        : arch_(std::move(arch)), layout_(make_layout(arch_)),
          params_(Vector::Zero(layout_param_count(layout_))) {}

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) init for weights and biases.
    static Denoiser initialized(Architecture arch, std::uint64_t seed) {
        Denoiser m(std::move(arch));
        StreamRng rng(seed, 0x1417, 0);
        for (const auto& l : m.layout_) {
            const double bound = 1.0 / std::sqrt(static_cast<double>(l.cols));
            std::uniform_real_distribution<double> u(-bound, bound);
            for (Eigen::Index i = 0; i < l.rows * l.cols + l.rows; ++i) {
                m.params_[l.weight_offset + i] = u(rng);
            }
        }
        return m;
    }

    const Architecture& arch() const { return arch_; }
    const std::vector<LayerLayout>& layout() const { return layout_; }
    Vector& params() { return params_; }
    const Vector& params() const { return params_; }
    Eigen::Index param_count() const { return params_.size(); }

    void set_params(const Vector& p) {
        if (p.size() != params_.size()) {
            throw ShapeError("set_params: expected " + std::to_string(params_.size()) +
                             " parameters, got " + std::to_string(p.size()));
        }
        params_ = p;
    }

    /// Evaluates the network on a batch (columns are examples). When `tape`
    /// is given, intermediate activations are recorded for backward().
    Batch forward(const Batch& x, std::span<const int> t, const NoiseSchedule& s,
                  Tape* tape = nullptr) const {
        return forward_with(params_, x, t, s, tape);
    }

    /// Forward pass using an external parameter vector with this layout
    /// (e.g. EMA shadow parameters).
    Batch forward_with(const Vector& params, const Batch& x, std::span<const int> t,
                       const NoiseSchedule& s, Tape* tape = nullptr) const {
        if (params.size() != params_.size()) {
            throw ShapeError("forward: parameter vector has " + std::to_string(params.size()) +
                             " entries, layout needs " + std::to_string(params_.size()));
        }
        if (x.rows() != arch_.input_dim) {
            throw ShapeError("forward: input has " + std::to_string(x.rows()) +
                             " rows, model expects " + std::to_string(arch_.input_dim));
        }
        if (static_cast<Eigen::Index>(t.size()) != x.cols()) {
            throw ShapeError("forward: batch has " + std::to_string(x.cols()) + " examples but " +
                             std::to_string(t.size()) + " step indices");
        }
        for (int ti : t) s.check_step(ti);

        const Eigen::Index n = x.cols();
        Batch h(arch_.input_dim + arch_.time_embed_dim, n);
        h.topRows(arch_.input_dim) = x;
        if (arch_.time_embed_dim > 0) {
            for (Eigen::Index j = 0; j < n; ++j) {
                time_embedding(t[static_cast<std::size_t>(j)], arch_.time_embed_dim,
                               h.col(j).data() + arch_.input_dim);
            }
        }
        if (tape) {
            tape->clear();
            tape->inputs_.reserve(layout_.size());
            tape->preacts_.reserve(layout_.size());
        }

        for (std::size_t li = 0; li < layout_.size(); ++li) {
            const auto& l = layout_[li];
            Eigen::Map<const Eigen::MatrixXd> W(params.data() + l.weight_offset, l.rows, l.cols);
            Eigen::Map<const Eigen::VectorXd> b(params.data() + l.bias_offset, l.rows);
            Batch z(l.rows, n);
            z.noalias() = W * h;
            z.colwise() += b;
            if (tape) tape->inputs_.push_back(std::move(h));
            if (li + 1 == layout_.size()) {
                h = std::move(z);
            } else {
                h = silu(z);
                if (tape) tape->preacts_.push_back(std::move(z));
            }
        }
        if (tape) tape->recorded_ = true;
        return h;
    }

    /// Gradient of a scalar loss w.r.t. every parameter, given dLoss/dOutput.
    Gradients backward(const Tape& tape, const Batch& upstream) const {
        if (!tape.recorded()) {
            throw StateError("backward: no forward pass has been recorded on this tape");
        }
        const Eigen::Index n = tape.inputs_.front().cols();
        if (upstream.rows() != arch_.input_dim || upstream.cols() != n) {
            throw ShapeError("backward: upstream gradient is " + std::to_string(upstream.rows()) +
                             "x" + std::to_string(upstream.cols()) + ", forward output was " +
                             std::to_string(arch_.input_dim) + "x" + std::to_string(n));
        }
        Gradients g{Vector::Zero(params_.size())};
        Batch delta = upstream;
        for (std::size_t li = layout_.size(); li-- > 0;) {
            const auto& l = layout_[li];
            Eigen::Map<Eigen::MatrixXd> dW(g.flat.data() + l.weight_offset, l.rows, l.cols);
            Eigen::Map<Eigen::VectorXd> db(g.flat.data() + l.bias_offset, l.rows);
            dW.noalias() = delta * tape.inputs_[li].transpose();
            db = delta.rowwise().sum();
            if (li == 0) break;
            Eigen::Map<const Eigen::MatrixXd> W(params_.data() + l.weight_offset, l.rows, l.cols);
            Batch back(l.cols, n);
            back.noalias() = W.transpose() * delta;
            delta = back.cwiseProduct(silu_grad(tape.preacts_[li - 1]));
        }
        return g;
    }

    static Batch silu(const Batch& z) {
        return (z.array() / (1.0 + (-z.array()).exp())).matrix();
    }

    static Batch silu_grad(const Batch& z) {
        const Eigen::ArrayXXd sig = 1.0 / (1.0 + (-z.array()).exp());
        return (sig * (1.0 + z.array() * (1.0 - sig))).matrix();
    }

private:
    Architecture arch_;
    std::vector<LayerLayout> layout_;
    Vector params_;
};

/// Adam moments with bias correction; no weight decay.
struct AdamState {
    Vector m;
    Vector v;
    std::int64_t step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    static AdamState for_params(Eigen::Index n) {
        AdamState s;
        s.m = Vector::Zero(n);
        s.v = Vector::Zero(n);
        return s;
    }
};

inline void adam_step(Vector& params, const Gradients& g, AdamState& st, double lr) {
    if (g.flat.size() != params.size() || st.m.size() != params.size() ||
        st.v.size() != params.size()) {
        throw ShapeError("adam_step: gradient/moment/parameter lengths differ (" +
                         std::to_string(g.flat.size()) + ", " + std::to_string(st.m.size()) +
                         ", " + std::to_string(params.size()) + ")");
    }
    if (!g.flat.allFinite()) {
        throw NumericError("adam_step: non-finite gradient at step " +
                           std::to_string(st.step + 1));
    }
    ++st.step;
    st.m = st.beta1 * st.m + (1.0 - st.beta1) * g.flat;
    st.v = st.beta2 * st.v + (1.0 - st.beta2) * g.flat.cwiseAbs2();
    const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    params.array() -= lr * (st.m.array() / c1) / ((st.v.array() / c2).sqrt() + st.eps);
}

/// Exponential moving average of parameters, used for evaluation.
struct EmaState {
    double decay = 0.9999;
    Vector shadow;
};

inline void ema_update(EmaState& e, const Vector& params) {
    if (e.shadow.size() != params.size()) {
        throw ShapeError("ema_update: shadow has " + std::to_string(e.shadow.size()) +
                         " entries, params " + std::to_string(params.size()));
    }
    e.shadow = e.decay * e.shadow + (1.0 - e.decay) * params;
}

}  // namespace debias
