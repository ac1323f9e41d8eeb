// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <cstdint>
#include <functional>
#include <istream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "debias/error.hpp"
#include "debias/metrics.hpp"
#include "debias/sampling.hpp"
#include "debias/training.hpp"

namespace debias {

struct EvalConfig {
    MetricOptions metrics;
    Eigen::Index n_reference = 10000;
    std::uint64_t reference_seed = 1;
};

struct DiagConfig {
    int t_stride = 10;
    Eigen::Index n_eval = 4096;
    std::uint64_t data_seed = 2;
    std::uint64_t noise_seed = 3;
    bool use_ema = true;
};

struct CompareConfig {
    std::vector<WeightKind> strategies{WeightKind::Constant, WeightKind::InvSqrtSnr};
    std::vector<int> steps{2, 5, 10, 50};
    std::vector<SamplerKind> samplers{SamplerKind::DDPM};
    Eigen::Index n_samples = 10000;
};

/// Everything a subcommand can be configured with. Defaults reproduce the
/// documented protocol; a config file overrides any subset of keys.
struct RunConfig {
    std::string name;
    TrainConfig train;
    SamplerConfig sample;
    Eigen::Index sample_count = 10000;
    EvalConfig eval;
    DiagConfig diag;
    CompareConfig compare;
    std::vector<WeightKind> curve_weights{WeightKind::Constant, WeightKind::P2, WeightKind::MinSnr,
                                          WeightKind::InvSqrtSnr};
};

namespace config_detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split_list(std::string_view s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto comma = s.find(',', start);
        const auto end = comma == std::string_view::npos ? s.size() : comma;
        std::string item = trim(s.substr(start, end - start));
        if (!item.empty()) out.push_back(std::move(item));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

template <class T>
T parse_number(const std::string& key, std::string_view v) {
    T out{};
    const auto* first = v.data();
    const auto* last = v.data() + v.size();
    auto [ptr, ec] = std::from_chars(first, last, out);
    if (ec != std::errc{} || ptr != last) {
        throw UsageError(key + ": cannot parse '" + std::string(v) + "'");
    }
    return out;
}

inline bool parse_bool(const std::string& key, std::string_view v) {
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    throw UsageError(key + ": expected a boolean, got '" + std::string(v) + "'");
}

inline std::string fmt(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    (void)ec;
    return std::string(buf, end);
}

template <class T, class F>
std::string join(const std::vector<T>& xs, F&& f) {
    std::string s;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) s += ',';
        s += f(xs[i]);
    }
    return s;
}

// Wraps value parsers so their ConfigErrors surface as usage errors.
template <class F>
auto as_usage(const std::string& key, F&& f) {
    try {
        return f();
    } catch (const UsageError&) {
        throw;
    } catch (const Error& e) {
        const std::string msg = e.what();
        throw UsageError(msg.starts_with(key) ? msg : key + ": " + msg);
    }
}

struct Field {
    std::string_view key;
    std::function<void(RunConfig&, const std::string& key, const std::string& value)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline const std::vector<Field>& fields() {
    using C = RunConfig;
    using S = const std::string&;
    auto num = [](auto& dst, S k, S v) { dst = parse_number<std::remove_reference_t<decltype(dst)>>(k, v); };
    static const std::vector<Field> table = {
        {"run.name", [](C& c, S, S v) { c.name = v; }, [](const C& c) { return c.name; }},

        {"schedule.T", [=](C& c, S k, S v) { num(c.train.T, k, v); },
         [](const C& c) { return std::to_string(c.train.T); }},
        {"schedule.beta_start", [=](C& c, S k, S v) { num(c.train.beta_start, k, v); },
         [](const C& c) { return fmt(c.train.beta_start); }},
        {"schedule.beta_end", [=](C& c, S k, S v) { num(c.train.beta_end, k, v); },
         [](const C& c) { return fmt(c.train.beta_end); }},

        {"weight.kind",
         [](C& c, S k, S v) { c.train.weight.kind = as_usage(k, [&] { return parse_weight_kind(v); }); },
         [](const C& c) { return std::string(to_string(c.train.weight.kind)); }},
        {"weight.p2_k", [=](C& c, S k, S v) { num(c.train.weight.p2_k, k, v); },
         [](const C& c) { return fmt(c.train.weight.p2_k); }},
        {"weight.p2_gamma", [=](C& c, S k, S v) { num(c.train.weight.p2_gamma, k, v); },
         [](const C& c) { return fmt(c.train.weight.p2_gamma); }},
        {"weight.minsnr_gamma", [=](C& c, S k, S v) { num(c.train.weight.minsnr_gamma, k, v); },
         [](const C& c) { return fmt(c.train.weight.minsnr_gamma); }},
        {"weight.eps_space",
         [](C& c, S k, S v) { c.train.loss.weight_in_eps_space = parse_bool(k, v); },
         [](const C& c) { return std::string(c.train.loss.weight_in_eps_space ? "true" : "false"); }},

        {"model.hidden_dims",
         [](C& c, S k, S v) {
             std::vector<int> dims;
             for (const auto& item : split_list(v)) dims.push_back(parse_number<int>(k, item));
             if (dims.empty()) throw UsageError(k + ": needs at least one width");
             c.train.arch.hidden_dims = std::move(dims);
         },
         [](const C& c) { return c.train.arch.hidden_string(); }},
        {"model.time_embed_dim", [=](C& c, S k, S v) { num(c.train.arch.time_embed_dim, k, v); },
         [](const C& c) { return std::to_string(c.train.arch.time_embed_dim); }},

        {"train.target",
         [](C& c, S k, S v) { c.train.target = as_usage(k, [&] { return parse_prediction_target(v); }); },
         [](const C& c) { return std::string(to_string(c.train.target)); }},
        {"train.batch_size", [=](C& c, S k, S v) { num(c.train.batch_size, k, v); },
         [](const C& c) { return std::to_string(c.train.batch_size); }},
        {"train.total_steps", [=](C& c, S k, S v) { num(c.train.total_steps, k, v); },
         [](const C& c) { return std::to_string(c.train.total_steps); }},
        {"train.lr", [=](C& c, S k, S v) { num(c.train.lr, k, v); },
         [](const C& c) { return fmt(c.train.lr); }},
        {"train.ema_decay", [=](C& c, S k, S v) { num(c.train.ema_decay, k, v); },
         [](const C& c) { return fmt(c.train.ema_decay); }},
        {"train.seed", [=](C& c, S k, S v) { num(c.train.seed, k, v); },
         [](const C& c) { return std::to_string(c.train.seed); }},
        {"train.log_every", [=](C& c, S k, S v) { num(c.train.log_every, k, v); },
         [](const C& c) { return std::to_string(c.train.log_every); }},

        {"data.kind",
         [](C& c, S k, S v) { c.train.data.kind = as_usage(k, [&] { return parse_dataset_kind(v); }); },
         [](const C& c) { return std::string(to_string(c.train.data.kind)); }},
        {"data.k", [=](C& c, S k, S v) { num(c.train.data.k, k, v); },
         [](const C& c) { return std::to_string(c.train.data.k); }},
        {"data.radius", [=](C& c, S k, S v) { num(c.train.data.radius, k, v); },
         [](const C& c) { return fmt(c.train.data.radius); }},
        {"data.sigma", [=](C& c, S k, S v) { num(c.train.data.component_sigma, k, v); },
         [](const C& c) { return fmt(c.train.data.component_sigma); }},
        {"data.noise", [=](C& c, S k, S v) { num(c.train.data.noise, k, v); },
         [](const C& c) { return fmt(c.train.data.noise); }},
        {"data.extent", [=](C& c, S k, S v) { num(c.train.data.extent, k, v); },
         [](const C& c) { return fmt(c.train.data.extent); }},
        {"data.seed", [=](C& c, S k, S v) { num(c.train.data.seed, k, v); },
         [](const C& c) { return std::to_string(c.train.data.seed); }},

        {"sample.kind",
         [](C& c, S k, S v) { c.sample.kind = as_usage(k, [&] { return parse_sampler_kind(v); }); },
         [](const C& c) { return std::string(to_string(c.sample.kind)); }},
        {"sample.steps", [=](C& c, S k, S v) { num(c.sample.steps, k, v); },
         [](const C& c) { return std::to_string(c.sample.steps); }},
        {"sample.count", [=](C& c, S k, S v) { num(c.sample_count, k, v); },
         [](const C& c) { return std::to_string(c.sample_count); }},
        {"sample.seed", [=](C& c, S k, S v) { num(c.sample.seed, k, v); },
         [](const C& c) { return std::to_string(c.sample.seed); }},
        {"sample.use_ema", [](C& c, S k, S v) { c.sample.use_ema = parse_bool(k, v); },
         [](const C& c) { return std::string(c.sample.use_ema ? "true" : "false"); }},
        {"sample.clip", [](C& c, S k, S v) { c.sample.step.clip_x0 = parse_bool(k, v); },
         [](const C& c) { return std::string(c.sample.step.clip_x0 ? "true" : "false"); }},
        {"sample.clip_min", [=](C& c, S k, S v) { num(c.sample.step.clip_min, k, v); },
         [](const C& c) { return fmt(c.sample.step.clip_min); }},
        {"sample.clip_max", [=](C& c, S k, S v) { num(c.sample.step.clip_max, k, v); },
         [](const C& c) { return fmt(c.sample.step.clip_max); }},
        {"sample.variance",
         [](C& c, S k, S v) {
             if (v == "beta") {
                 c.sample.step.variance = VarianceKind::Beta;
             } else if (v == "tilde_beta") {
                 c.sample.step.variance = VarianceKind::TildeBeta;
             } else {
                 throw UsageError(k + ": expected beta or tilde_beta, got '" + v + "'");
             }
         },
         [](const C& c) {
             return std::string(c.sample.step.variance == VarianceKind::Beta ? "beta" : "tilde_beta");
         }},

        {"eval.n_projections", [=](C& c, S k, S v) { num(c.eval.metrics.n_projections, k, v); },
         [](const C& c) { return std::to_string(c.eval.metrics.n_projections); }},
        {"eval.seed", [=](C& c, S k, S v) { num(c.eval.metrics.seed, k, v); },
         [](const C& c) { return std::to_string(c.eval.metrics.seed); }},
        {"eval.energy", [](C& c, S k, S v) { c.eval.metrics.with_energy = parse_bool(k, v); },
         [](const C& c) { return std::string(c.eval.metrics.with_energy ? "true" : "false"); }},
        {"eval.n_reference", [=](C& c, S k, S v) { num(c.eval.n_reference, k, v); },
         [](const C& c) { return std::to_string(c.eval.n_reference); }},
        {"eval.reference_seed", [=](C& c, S k, S v) { num(c.eval.reference_seed, k, v); },
         [](const C& c) { return std::to_string(c.eval.reference_seed); }},

        {"diag.t_stride", [=](C& c, S k, S v) { num(c.diag.t_stride, k, v); },
         [](const C& c) { return std::to_string(c.diag.t_stride); }},
        {"diag.n_eval", [=](C& c, S k, S v) { num(c.diag.n_eval, k, v); },
         [](const C& c) { return std::to_string(c.diag.n_eval); }},
        {"diag.data_seed", [=](C& c, S k, S v) { num(c.diag.data_seed, k, v); },
         [](const C& c) { return std::to_string(c.diag.data_seed); }},
        {"diag.noise_seed", [=](C& c, S k, S v) { num(c.diag.noise_seed, k, v); },
         [](const C& c) { return std::to_string(c.diag.noise_seed); }},
        {"diag.use_ema", [](C& c, S k, S v) { c.diag.use_ema = parse_bool(k, v); },
         [](const C& c) { return std::string(c.diag.use_ema ? "true" : "false"); }},

        {"compare.strategies",
         [](C& c, S k, S v) {
             std::vector<WeightKind> ws;
             for (const auto& item : split_list(v)) {
                 ws.push_back(as_usage(k, [&] { return parse_weight_kind(item); }));
             }
             if (ws.empty()) throw UsageError(k + ": needs at least one strategy");
             c.compare.strategies = std::move(ws);
         },
         [](const C& c) {
             return join(c.compare.strategies, [](WeightKind w) { return std::string(to_string(w)); });
         }},
        {"compare.steps",
         [](C& c, S k, S v) {
             std::vector<int> steps;
             for (const auto& item : split_list(v)) steps.push_back(parse_number<int>(k, item));
             if (steps.empty()) throw UsageError(k + ": needs at least one step count");
             c.compare.steps = std::move(steps);
         },
         [](const C& c) { return join(c.compare.steps, [](int s) { return std::to_string(s); }); }},
        {"compare.samplers",
         [](C& c, S k, S v) {
             std::vector<SamplerKind> ks;
             for (const auto& item : split_list(v)) {
                 ks.push_back(as_usage(k, [&] { return parse_sampler_kind(item); }));
             }
             if (ks.empty()) throw UsageError(k + ": needs at least one sampler");
             c.compare.samplers = std::move(ks);
         },
         [](const C& c) {
             return join(c.compare.samplers, [](SamplerKind s) { return std::string(to_string(s)); });
         }},
        {"compare.n_samples", [=](C& c, S k, S v) { num(c.compare.n_samples, k, v); },
         [](const C& c) { return std::to_string(c.compare.n_samples); }},

        {"curves.weights",
         [](C& c, S k, S v) {
             std::vector<WeightKind> ws;
             for (const auto& item : split_list(v)) {
                 ws.push_back(as_usage(k, [&] { return parse_weight_kind(item); }));
             }
             c.curve_weights = std::move(ws);
         },
         [](const C& c) {
             return join(c.curve_weights, [](WeightKind w) { return std::string(to_string(w)); });
         }},
    };
    return table;
}

}  // namespace config_detail

/// Sets one dotted key. Unknown keys and unparsable values raise UsageError
/// naming the key.
inline void set_config_key(RunConfig& c, const std::string& key, const std::string& value) {
    for (const auto& f : config_detail::fields()) {
        if (f.key == key) {
            f.set(c, key, value);
            return;
        }
    }
    throw UsageError("unknown config key '" + key + "'");
}

/// Applies `key = value` lines. Blank lines and '#' comments are skipped.
inline void apply_config(RunConfig& c, std::istream& in, const std::string& source = "config") {
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const std::string body = config_detail::trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw UsageError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
        }
        set_config_key(c, config_detail::trim(body.substr(0, eq)),
                       config_detail::trim(body.substr(eq + 1)));
    }
}

inline RunConfig parse_config(std::string_view text) {
    RunConfig c;
    std::istringstream in{std::string(text)};
    apply_config(c, in);
    return c;
}

/// Canonical dump of every key, in table order. Feeding it back through
/// apply_config reproduces the same RunConfig.
inline std::string config_to_text(const RunConfig& c) {
    std::string out;
    for (const auto& f : config_detail::fields()) {
        out += f.key;
        out += " = ";
        out += f.get(c);
        out += '\n';
    }
    return out;
}

inline std::vector<std::string> config_keys() {
    std::vector<std::string> keys;
    for (const auto& f : config_detail::fields()) keys.emplace_back(f.key);
    return keys;
}

}  // namespace debias
