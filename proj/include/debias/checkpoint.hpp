// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "debias/error.hpp"
#include "debias/nn.hpp"

namespace debias {

inline constexpr int kCheckpointSchemaVersion = 1;
inline constexpr const char* kCheckpointMagic = "debias-checkpoint";

/// Run metadata carried alongside the parameters.
struct CheckpointMeta {
    int schedule_T = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    std::string schedule_fingerprint;
    std::uint64_t seed = 0;
    std::string prediction_target = "epsilon";
    std::string weight_kind = "constant";
    std::int64_t train_step = 0;
};

struct Checkpoint {
    Denoiser model;
    EmaState ema;
    CheckpointMeta meta;
    std::optional<AdamState> optimizer;
    /// Serialized training generator state; empty when not resumable.
    std::string rng_state;
};

namespace detail {

inline std::string format_double(double v) {
    char buf[64];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    (void)ec;
    return std::string(buf, end);
}

inline void write_le_doubles(std::ostream& os, const Vector& v) {
    std::vector<unsigned char> bytes(static_cast<std::size_t>(v.size()) * 8);
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        auto bits = std::bit_cast<std::uint64_t>(v[i]);
        for (int b = 0; b < 8; ++b) {
            bytes[static_cast<std::size_t>(i) * 8 + static_cast<std::size_t>(b)] =
                static_cast<unsigned char>(bits >> (8 * b));
        }
    }
    os.write(reinterpret_cast<const char*>(bytes.data()),
             static_cast<std::streamsize>(bytes.size()));
}

inline Vector read_le_doubles(const std::string& blob, std::size_t& pos, Eigen::Index n,
                              const char* field) {
    const std::size_t need = static_cast<std::size_t>(n) * 8;
    if (blob.size() < pos + need) {
        throw LoadError(std::string(field) + ": payload truncated");
    }
    Vector v(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) {
            bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(
                        blob[pos + static_cast<std::size_t>(i) * 8 + static_cast<std::size_t>(b)]))
                    << (8 * b);
        }
        v[i] = std::bit_cast<double>(bits);
    }
    pos += need;
    return v;
}

inline const std::string& require(const std::map<std::string, std::string>& kv,
                                  const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end()) throw LoadError(key + ": missing from checkpoint manifest");
    return it->second;
}

template <class T>
T parse_number(const std::map<std::string, std::string>& kv, const std::string& key) {
    const std::string& s = require(kv, key);
    T value{};
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc{} || end != s.data() + s.size()) {
        throw LoadError(key + ": malformed value '" + s + "'");
    }
    return value;
}

inline std::vector<int> parse_int_list(const std::string& s, const std::string& key) {
    std::vector<int> out;
    if (s.empty()) return out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        int v = 0;
        auto [end, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
        if (ec != std::errc{} || end != item.data() + item.size()) {
            throw LoadError(key + ": malformed list '" + s + "'");
        }
        out.push_back(v);
    }
    return out;
}

}  // namespace detail

/// Writes a text manifest followed by little-endian float64 payloads in
/// manifest order: params, shadow, then Adam m and v when present.
inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
    if (ck.ema.shadow.size() != ck.model.param_count()) {
        throw ShapeError("save_checkpoint: shadow length differs from params");
    }
    std::ostringstream man;
    const auto& a = ck.model.arch();
    man << kCheckpointMagic << '\n'
        << "schema_version = " << kCheckpointSchemaVersion << '\n'
        << "input_dim = " << a.input_dim << '\n'
        << "hidden_dims = " << a.hidden_string() << '\n'
        << "time_embed_dim = " << a.time_embed_dim << '\n'
        << "param_count = " << ck.model.param_count() << '\n'
        << "ema_decay = " << detail::format_double(ck.ema.decay) << '\n'
        << "schedule_T = " << ck.meta.schedule_T << '\n'
        << "schedule_beta_start = " << detail::format_double(ck.meta.beta_start) << '\n'
        << "schedule_beta_end = " << detail::format_double(ck.meta.beta_end) << '\n'
        << "schedule_fingerprint = " << ck.meta.schedule_fingerprint << '\n'
        << "seed = " << ck.meta.seed << '\n'
        << "prediction_target = " << ck.meta.prediction_target << '\n'
        << "weight_kind = " << ck.meta.weight_kind << '\n'
        << "train_step = " << ck.meta.train_step << '\n'
        << "has_optimizer = " << (ck.optimizer ? 1 : 0) << '\n';
    if (ck.optimizer) {
        man << "optimizer_step = " << ck.optimizer->step << '\n';
    }
    if (!ck.rng_state.empty()) {
        man << "rng_state = " << ck.rng_state << '\n';
    }
    man << "end_manifest\n";

    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw Error("save_checkpoint: cannot open " + tmp.string());
        const std::string text = man.str();
        os.write(text.data(), static_cast<std::streamsize>(text.size()));
        detail::write_le_doubles(os, ck.model.params());
        detail::write_le_doubles(os, ck.ema.shadow);
        if (ck.optimizer) {
            detail::write_le_doubles(os, ck.optimizer->m);
            detail::write_le_doubles(os, ck.optimizer->v);
        }
        if (!os) throw Error("save_checkpoint: write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw LoadError("path: cannot open " + path.string());
    std::string blob((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());

    std::size_t pos = 0;
    auto next_line = [&]() -> std::optional<std::string> {
        const auto nl = blob.find('\n', pos);
        if (nl == std::string::npos) return std::nullopt;
        std::string line = blob.substr(pos, nl - pos);
        pos = nl + 1;
        return line;
    };
    auto first = next_line();
    if (!first || *first != kCheckpointMagic) {
        throw LoadError("magic: not a debias checkpoint");
    }
    std::map<std::string, std::string> kv;
    bool terminated = false;
    while (auto line = next_line()) {
        if (*line == "end_manifest") {
            terminated = true;
            break;
        }
        const auto eq = line->find(" = ");
        if (eq == std::string::npos) throw LoadError("manifest: malformed line '" + *line + "'");
        kv[line->substr(0, eq)] = line->substr(eq + 3);
    }
    if (!terminated) throw LoadError("end_manifest: manifest not terminated");

    const int version = detail::parse_number<int>(kv, "schema_version");
    if (version != kCheckpointSchemaVersion) {
        throw LoadError("schema_version: expected " + std::to_string(kCheckpointSchemaVersion) +
                        ", got " + std::to_string(version));
    }

    Architecture arch;
    arch.input_dim = detail::parse_number<int>(kv, "input_dim");
    arch.hidden_dims = detail::parse_int_list(detail::require(kv, "hidden_dims"), "hidden_dims");
    arch.time_embed_dim = detail::parse_number<int>(kv, "time_embed_dim");
    try {
        arch.validate();
    } catch (const ConfigError& e) {
        throw LoadError(std::string("architecture: ") + e.what());
    }
    const auto count = detail::parse_number<std::int64_t>(kv, "param_count");
    Denoiser model(arch);
    if (count != model.param_count()) {
        throw LoadError("param_count: manifest says " + std::to_string(count) +
                        ", architecture implies " + std::to_string(model.param_count()));
    }

    Checkpoint ck{model, EmaState{}, CheckpointMeta{}, std::nullopt, {}};
    ck.ema.decay = detail::parse_number<double>(kv, "ema_decay");
    if (!(ck.ema.decay >= 0.0 && ck.ema.decay <= 1.0)) {
        throw LoadError("ema_decay: outside [0, 1]");
    }
    ck.meta.schedule_T = detail::parse_number<int>(kv, "schedule_T");
    ck.meta.beta_start = detail::parse_number<double>(kv, "schedule_beta_start");
    ck.meta.beta_end = detail::parse_number<double>(kv, "schedule_beta_end");
    ck.meta.schedule_fingerprint = detail::require(kv, "schedule_fingerprint");
    ck.meta.seed = detail::parse_number<std::uint64_t>(kv, "seed");
    ck.meta.prediction_target = detail::require(kv, "prediction_target");
    ck.meta.weight_kind = detail::require(kv, "weight_kind");
    ck.meta.train_step = detail::parse_number<std::int64_t>(kv, "train_step");
    const int has_opt = detail::parse_number<int>(kv, "has_optimizer");
    if (auto it = kv.find("rng_state"); it != kv.end()) ck.rng_state = it->second;

    ck.model.set_params(detail::read_le_doubles(blob, pos, count, "params"));
    ck.ema.shadow = detail::read_le_doubles(blob, pos, count, "shadow");
    if (has_opt) {
        AdamState st = AdamState::for_params(count);
        st.step = detail::parse_number<std::int64_t>(kv, "optimizer_step");
        st.m = detail::read_le_doubles(blob, pos, count, "optimizer_m");
        st.v = detail::read_le_doubles(blob, pos, count, "optimizer_v");
        ck.optimizer = std::move(st);
    }
    if (pos != blob.size()) throw LoadError("payload: trailing bytes after declared vectors");
    return ck;
}

/// Loads and additionally requires the stored architecture to equal `expected`.
inline Checkpoint load_checkpoint(const std::filesystem::path& path, const Architecture& expected) {
    Checkpoint ck = load_checkpoint(path);
    const auto& got = ck.model.arch();
    if (got.input_dim != expected.input_dim) {
        throw LoadError("input_dim: checkpoint has " + std::to_string(got.input_dim) +
                        ", expected " + std::to_string(expected.input_dim));
    }
    if (got.hidden_dims != expected.hidden_dims) {
        throw LoadError("hidden_dims: checkpoint has " + got.hidden_string() + ", expected " +
                        expected.hidden_string());
    }
    if (got.time_embed_dim != expected.time_embed_dim) {
        throw LoadError("time_embed_dim: checkpoint has " + std::to_string(got.time_embed_dim) +
                        ", expected " + std::to_string(expected.time_embed_dim));
    }
    return ck;
}

}  // namespace debias
