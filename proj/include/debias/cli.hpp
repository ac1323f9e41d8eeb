// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "debias/checkpoint.hpp"
#include "debias/config.hpp"
#include "debias/diagnostics.hpp"
#include "debias/metrics.hpp"
#include "debias/sampling.hpp"
#include "debias/training.hpp"
#include "debias/weighting.hpp"

namespace debias {

inline constexpr const char* kVersion = "0.1.0";

namespace fs = std::filesystem;

// --- run directory -----------------------------------------------------------

/// runs/<name>/ with a manifest written before any work and rewritten with the
/// output list on success. Wall-clock data goes to manifest.timing so the
/// manifest itself is reproducible.
class RunDir {
public:
    RunDir(fs::path root, const RunConfig& cfg, std::string subcommand, std::string command)
        : dir_(std::move(root) / cfg.name), subcommand_(std::move(subcommand)),
          command_(std::move(command)), config_text_(config_to_text(cfg)),
          seed_(cfg.train.seed), start_(std::chrono::system_clock::now()) {
        fs::create_directories(dir_);
        try {
            fingerprint_ = cfg.train.schedule().fingerprint();
        } catch (const ConfigError&) {
            fingerprint_ = "invalid";
        }
        write_text("config.conf", config_text_);
        write_manifest("running");
        write_timing(false);
    }

    const fs::path& dir() const { return dir_; }

    /// Registers `name` as an output and returns its full path.
    fs::path output(const std::string& name) {
        for (const auto& o : outputs_) {
            if (o == name) return dir_ / name;
        }
        outputs_.push_back(name);
        return dir_ / name;
    }

    /// Marks an output whose contents include wall-clock values.
    void mark_timing(const std::string& name) { timing_outputs_.push_back(name); }

    /// <stem>.csv gets the loss columns; wall_ms goes to the <stem>.timing sidecar.
    void write_train_log(const std::string& stem, const RunLog& log) {
        {
            std::ofstream os(output(stem + ".csv"), std::ios::binary);
            log.write_loss_csv(os);
            if (!os) throw Error("run dir: cannot write " + stem + ".csv");
        }
        std::ofstream os(output(stem + ".timing"), std::ios::binary);
        log.write_timing(os);
        if (!os) throw Error("run dir: cannot write " + stem + ".timing");
        mark_timing(stem + ".timing");
    }

    void finish() {
        write_timing(true);
        write_manifest("complete");
    }

private:
    void write_text(const std::string& name, const std::string& text) {
        std::ofstream os(dir_ / name, std::ios::binary);
        os << text;
        if (!os) throw Error("run dir: cannot write " + (dir_ / name).string());
    }

    void write_manifest(const std::string& status) {
        std::ostringstream m;
        m << "debias-run-manifest\n";
        m << "schema_version = 1\n";
        m << "subcommand = " << subcommand_ << "\n";
        m << "command = " << command_ << "\n";
        m << "binary_version = " << kVersion << "\n";
        m << "binary_version_hash = " << to_hex(fnv1a(kVersion, std::string_view(kVersion).size()))
          << "\n";
        m << "config = config.conf\n";
        m << "config_hash = " << to_hex(fnv1a(config_text_.data(), config_text_.size())) << "\n";
        m << "seed = " << seed_ << "\n";
        m << "schedule_fingerprint = " << fingerprint_ << "\n";
        m << "timing_sidecar = manifest.timing\n";
        m << "status = " << status << "\n";
        m << "output = config.conf\n";
        m << "output = manifest.timing\n";
        for (const auto& o : outputs_) m << "output = " << o << "\n";
        for (const auto& o : timing_outputs_) m << "timing_output = " << o << "\n";
        write_text("manifest.txt", m.str());
    }

    void write_timing(bool done) {
        auto iso = [](std::chrono::system_clock::time_point tp) {
            const std::time_t tt = std::chrono::system_clock::to_time_t(tp);
            std::tm tm{};
            gmtime_r(&tt, &tm);
            char buf[32];
            std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
            return std::string(buf);
        };
        std::ostringstream t;
        t << "start = " << iso(start_) << "\n";
        if (done) {
            const auto now = std::chrono::system_clock::now();
            t << "end = " << iso(now) << "\n";
            t << "elapsed_ms = "
              << std::chrono::duration_cast<std::chrono::milliseconds>(now - start_).count() << "\n";
        }
        write_text("manifest.timing", t.str());
    }

    fs::path dir_;
    std::string subcommand_;
    std::string command_;
    std::string config_text_;
    std::uint64_t seed_;
    std::string fingerprint_;
    std::chrono::system_clock::time_point start_;
    std::vector<std::string> outputs_;
    std::vector<std::string> timing_outputs_;
};

// --- CSV helpers -------------------------------------------------------------

namespace cli_detail {

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::ofstream open_out(const fs::path& p) {
    std::ofstream os(p, std::ios::binary);
    if (!os) throw Error("cannot write " + p.string());
    return os;
}

inline void write_samples_csv(const fs::path& p, const Batch& x) {
    auto os = open_out(p);
    os << "sample_id";
    for (Eigen::Index r = 0; r < x.rows(); ++r) os << ",x_" << r;
    os << "\n";
    for (Eigen::Index j = 0; j < x.cols(); ++j) {
        os << j;
        for (Eigen::Index r = 0; r < x.rows(); ++r) os << ',' << num(x(r, j));
        os << "\n";
    }
}

inline void write_trajectory_csv(const fs::path& p, const std::vector<TrajectoryRow>& rows,
                                 Eigen::Index d) {
    auto os = open_out(p);
    os << "sample_id,step_index,t";
    for (Eigen::Index r = 0; r < d; ++r) os << ",x_" << r;
    for (Eigen::Index r = 0; r < d; ++r) os << ",x0_hat_" << r;
    os << "\n";
    for (const auto& row : rows) {
        os << row.sample_id << ',' << row.step_index << ',' << row.t;
        for (Eigen::Index r = 0; r < d; ++r) os << ',' << num(row.x[r]);
        for (Eigen::Index r = 0; r < d; ++r) os << ',' << num(row.x0_hat[r]);
        os << "\n";
    }
}

/// Reads a point cloud CSV with a header row. A leading sample_id column is
/// dropped; every other column is a coordinate.
inline Batch read_samples_csv(const fs::path& p) {
    std::ifstream is(p);
    if (!is) throw Error("cannot open " + p.string());
    std::string line;
    if (!std::getline(is, line)) throw Error(p.string() + ": empty file");
    const auto header = config_detail::split_list(line);
    const bool has_id = !header.empty() && header.front() == "sample_id";
    const std::size_t d = header.size() - (has_id ? 1 : 0);
    if (d == 0) throw Error(p.string() + ": no coordinate columns");
    std::vector<double> vals;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (config_detail::trim(line).empty()) continue;
        const auto cells = config_detail::split_list(line);
        if (cells.size() != header.size()) {
            throw Error(p.string() + ":" + std::to_string(lineno) + ": expected " +
                        std::to_string(header.size()) + " columns");
        }
        for (std::size_t c = has_id ? 1 : 0; c < cells.size(); ++c) {
            vals.push_back(config_detail::parse_number<double>(p.string(), cells[c]));
        }
    }
    const auto n = static_cast<Eigen::Index>(vals.size() / d);
    return Eigen::Map<const Batch>(vals.data(), static_cast<Eigen::Index>(d), n);
}

inline std::string metrics_header() {
    return "sliced_wasserstein,mean_shift,cov_error,energy_distance";
}

inline std::string metrics_row(const MetricReport& m) {
    return num(m.sliced_wasserstein) + ',' + num(m.mean_shift) + ',' + num(m.cov_error) + ',' +
           num(m.energy_distance);
}

/// Trained model plus the schedule it was trained on.
struct LoadedModel {
    Checkpoint ck;
    NoiseSchedule schedule;
    PredictionTarget target = PredictionTarget::Epsilon;

    ModelPredictor predictor(bool use_ema) const {
        return ModelPredictor(ck.model, use_ema ? ck.ema.shadow : ck.model.params(), target,
                              schedule);
    }
};

inline LoadedModel load_model(const fs::path& p) {
    LoadedModel lm{load_checkpoint(p), {}, {}};
    lm.schedule = build_linear(lm.ck.meta.schedule_T, lm.ck.meta.beta_start, lm.ck.meta.beta_end);
    if (lm.schedule.fingerprint() != lm.ck.meta.schedule_fingerprint) {
        throw LoadError("schedule_fingerprint: does not match the stored schedule parameters in " +
                        p.string());
    }
    lm.target = parse_prediction_target(lm.ck.meta.prediction_target);
    return lm;
}

inline void adopt_schedule(RunConfig& c, const LoadedModel& lm) {
    c.train.T = lm.ck.meta.schedule_T;
    c.train.beta_start = lm.ck.meta.beta_start;
    c.train.beta_end = lm.ck.meta.beta_end;
    c.train.target = lm.target;
}

inline void write_mse_curves(const fs::path& p, const std::vector<MseCurve>& curves) {
    auto os = open_out(p);
    os << "mode,t,mse\n";
    for (const auto& c : curves) {
        for (std::size_t i = 0; i < c.t.size(); ++i) {
            os << c.mode << ',' << c.t[i] << ',' << num(c.mse[i]) << "\n";
        }
    }
}

inline EvalSet eval_set(const RunConfig& c) {
    return EvalSet{c.train.data.with_seed(c.diag.data_seed), c.diag.n_eval, c.diag.noise_seed};
}

inline Batch reference_set(const RunConfig& c) {
    return generate(c.train.data.with_seed(c.eval.reference_seed), c.eval.n_reference);
}

template <class F>
void parallel_for(int n, int workers, F&& f) {
    workers = std::max(1, std::min(workers, n));
    if (workers == 1) {
        for (int i = 0; i < n; ++i) f(i);
        return;
    }
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (int i = w; i < n; i += workers) f(i);
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

}  // namespace cli_detail

// --- subcommands -------------------------------------------------------------

struct CommonOptions {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string name;
    std::string runs_dir = "runs";
    int workers = 1;
};

struct CliContext {
    std::ostream& out;
    std::ostream& err;
    std::string command;
};

inline RunConfig resolve_config(const CommonOptions& o, const std::string& subcommand,
                                const std::vector<std::pair<std::string, std::string>>& flags) {
    RunConfig c;
    c.name = subcommand;
    if (!o.config_path.empty()) {
        std::ifstream is(o.config_path);
        if (!is) throw UsageError("--config: cannot open " + o.config_path);
        apply_config(c, is, o.config_path);
    }
    for (const auto& kv : o.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw UsageError("--set: expected KEY=VALUE, got '" + kv + "'");
        set_config_key(c, config_detail::trim(kv.substr(0, eq)),
                       config_detail::trim(kv.substr(eq + 1)));
    }
    for (const auto& [k, v] : flags) set_config_key(c, k, v);
    if (!o.name.empty()) c.name = o.name;
    if (c.name.empty() || c.name.find('/') != std::string::npos || c.name == "." || c.name == "..") {
        throw UsageError("run.name: must be a plain directory name");
    }
    c.sample.workers = o.workers;
    return c;
}

inline void cmd_train(const RunConfig& c, const CommonOptions& o, const std::string& resume,
                      CliContext& ctx) {
    c.train.validate();
    std::optional<Checkpoint> from;
    if (!resume.empty()) from = load_checkpoint(resume, c.train.arch);
    RunDir run(o.runs_dir, c, "train", ctx.command);
    try {
        const TrainResult r = train(c.train, from ? &*from : nullptr);
        save_checkpoint(make_checkpoint(c.train, r), run.output("checkpoint.bin"));
        run.write_train_log("train_log", r.log);
        if (!r.log.rows.empty()) {
            ctx.err << "train: " << r.steps_done << " steps, final loss "
                    << cli_detail::num(r.log.rows.back().loss) << "\n";
        }
    } catch (const TrainingDiverged& e) {
        save_checkpoint(e.last_finite(), run.output("checkpoint_last_finite.bin"));
        run.finish();
        throw;
    }
    run.finish();
}

inline void cmd_sample(RunConfig c, const CommonOptions& o, const std::string& checkpoint,
                       const std::string& trajectory, CliContext& ctx) {
    if (trajectory.find('/') != std::string::npos || trajectory == "." || trajectory == "..") {
        throw UsageError("--trajectory: expected a file name inside the run directory");
    }
    const auto lm = cli_detail::load_model(checkpoint);
    cli_detail::adopt_schedule(c, lm);
    c.sample.validate();
    if (c.sample_count < 0) throw UsageError("sample.count: must be >= 0");
    RunDir run(o.runs_dir, c, "sample", ctx.command);
    std::vector<TrajectoryRow> traj;
    const Batch x = sample(lm.predictor(c.sample.use_ema), lm.schedule, c.sample, c.sample_count,
                           trajectory.empty() ? nullptr : &traj);
    cli_detail::write_samples_csv(run.output("samples.csv"), x);
    if (!trajectory.empty()) {
        cli_detail::write_trajectory_csv(run.output(trajectory), traj, x.rows());
    }
    run.finish();
}

inline void cmd_diagnose(RunConfig c, const CommonOptions& o, const std::vector<std::string>& models,
                         std::vector<std::string> modes, const std::vector<int>& t_list,
                         const std::string& out_name, CliContext& ctx) {
    std::vector<std::pair<std::string, cli_detail::LoadedModel>> loaded;
    for (const auto& spec : models) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw UsageError("--model: expected LABEL=CHECKPOINT, got '" + spec + "'");
        }
        const std::string label = spec.substr(0, eq);
        if (label == "initial") throw UsageError("--model: label 'initial' is reserved");
        loaded.emplace_back(label, cli_detail::load_model(spec.substr(eq + 1)));
    }
    if (!loaded.empty()) {
        cli_detail::adopt_schedule(c, loaded.front().second);
        for (const auto& [label, lm] : loaded) {
            if (lm.schedule.fingerprint() != loaded.front().second.schedule.fingerprint()) {
                throw ConfigError("diagnose: model '" + label + "' uses a different schedule");
            }
        }
    }
    const NoiseSchedule s = c.train.schedule();
    if (modes.empty()) {
        modes.push_back("initial");
        for (const auto& m : loaded) modes.push_back(m.first);
    }
    auto find_model = [&](const std::string& label) -> const cli_detail::LoadedModel& {
        for (const auto& m : loaded) {
            if (m.first == label) return m.second;
        }
        throw UsageError("--modes: no --model with label '" + label + "'");
    };
    for (const auto& m : modes) {
        if (m != "initial") find_model(m);
    }
    const std::vector<int> grid = t_list.empty() ? strided_grid(s.T(), c.diag.t_stride) : t_list;
    for (int t : grid) s.check_step(t);
    const EvalSet ev = cli_detail::eval_set(c);
    ev.validate();

    RunDir run(o.runs_dir, c, "diagnose", ctx.command);
    std::vector<MseCurve> curves;
    std::vector<std::pair<std::string, std::vector<SweepRow>>> sweeps;
    for (const auto& m : modes) {
        if (m == "initial") {
            curves.push_back(mse_curve_initial(s, ev, grid));
            continue;
        }
        const auto pred = find_model(m).predictor(c.diag.use_ema);
        curves.push_back(mse_curve(m, pred, s, ev, grid));
        sweeps.emplace_back(m, one_step_sweep(pred, s, ev, grid));
    }
    cli_detail::write_mse_curves(run.output(out_name), curves);
    if (!sweeps.empty()) {
        auto os = cli_detail::open_out(run.output("sweep.csv"));
        os << "mode,t,x0_sq_error,amplified_error_sq\n";
        for (const auto& [mode, rows] : sweeps) {
            for (const auto& r : rows) {
                os << mode << ',' << r.t << ',' << cli_detail::num(r.x0_sq_error) << ','
                   << cli_detail::num(r.amplified_error_sq) << "\n";
            }
        }
    }
    run.finish();
}

inline void cmd_eval(RunConfig c, const CommonOptions& o, const std::string& generated,
                     const std::string& reference, const std::string& checkpoint, CliContext& ctx) {
    if (generated.empty() == checkpoint.empty()) {
        throw UsageError("eval: give exactly one of --generated or --checkpoint");
    }
    std::optional<cli_detail::LoadedModel> lm;
    if (!checkpoint.empty()) {
        lm = cli_detail::load_model(checkpoint);
        cli_detail::adopt_schedule(c, *lm);
        c.sample.validate();
    }
    RunDir run(o.runs_dir, c, "eval", ctx.command);
    Batch gen;
    if (lm) {
        gen = sample(lm->predictor(c.sample.use_ema), lm->schedule, c.sample, c.sample_count);
        cli_detail::write_samples_csv(run.output("samples.csv"), gen);
    } else {
        gen = cli_detail::read_samples_csv(generated);
    }
    const Batch ref =
        reference.empty() ? cli_detail::reference_set(c) : cli_detail::read_samples_csv(reference);
    const MetricReport m = evaluate_metrics(gen, ref, c.eval.metrics);

    {
        auto os = cli_detail::open_out(run.output("metrics.csv"));
        os << cli_detail::metrics_header() << "\n" << cli_detail::metrics_row(m) << "\n";
    }
    nlohmann::ordered_json j;
    j["sliced_wasserstein"] = m.sliced_wasserstein;
    j["mean_shift"] = m.mean_shift;
    j["cov_error"] = m.cov_error;
    j["energy_distance"] = m.energy_distance;
    j["n_generated"] = gen.cols();
    j["n_reference"] = ref.cols();
    {
        auto os = cli_detail::open_out(run.output("metrics.json"));
        os << j.dump(2) << "\n";
    }
    ctx.out << cli_detail::metrics_header() << "\n" << cli_detail::metrics_row(m) << "\n";
    ctx.out << j.dump() << "\n";
    run.finish();
}

inline void cmd_curves(const RunConfig& c, const CommonOptions& o, CliContext& ctx) {
    const NoiseSchedule s = c.train.schedule();
    std::vector<WeightStrategy> ws;
    for (WeightKind k : c.curve_weights) {
        WeightStrategy w = c.train.weight;
        w.kind = k;
        w.validate();
        ws.push_back(w);
    }
    RunDir run(o.runs_dir, c, "curves", ctx.command);
    auto os = cli_detail::open_out(run.output("curves.csv"));
    os << "t,beta,alpha_bar,snr,amp_coeff,vlb_weight";
    for (const auto& w : ws) os << ",w_" << to_string(w.kind);
    os << "\n";
    for (int t = 1; t <= s.T(); ++t) {
        os << t << ',' << cli_detail::num(s.beta(t)) << ',' << cli_detail::num(s.alpha_bar(t)) << ','
           << cli_detail::num(snr(s, t)) << ',' << cli_detail::num(amplification_coeff(s, t)) << ','
           << cli_detail::num(vlb_weight(s, t));
        for (const auto& w : ws) os << ',' << cli_detail::num(weight(w, s, t));
        os << "\n";
    }
    os.close();
    run.finish();
}

/// One model per strategy (shared seed and data), sampled at every
/// (sampler, S) pair and scored against a held-out reference set.
inline void cmd_compare(const RunConfig& c, const CommonOptions& o, CliContext& ctx) {
    c.train.validate();
    c.sample.validate();
    const NoiseSchedule s = c.train.schedule();
    for (int S : c.compare.steps) {
        if (S < 1 || S > s.T()) {
            throw UsageError("compare.steps: " + std::to_string(S) + " outside [1, " +
                             std::to_string(s.T()) + "]");
        }
    }
    if (c.compare.n_samples < 1) throw UsageError("compare.n_samples: must be >= 1");
    RunDir run(o.runs_dir, c, "compare", ctx.command);

    const auto& kinds = c.compare.strategies;
    const int n = static_cast<int>(kinds.size());
    std::vector<std::optional<TrainResult>> results(static_cast<std::size_t>(n));
    std::vector<TrainConfig> cfgs(static_cast<std::size_t>(n), c.train);
    for (int i = 0; i < n; ++i) cfgs[static_cast<std::size_t>(i)].weight.kind = kinds[static_cast<std::size_t>(i)];
    cli_detail::parallel_for(n, o.workers, [&](int i) {
        results[static_cast<std::size_t>(i)] = train(cfgs[static_cast<std::size_t>(i)]);
    });

    const Batch ref = cli_detail::reference_set(c);
    const EvalSet ev = cli_detail::eval_set(c);
    const std::vector<int> grid = strided_grid(s.T(), c.diag.t_stride);
    std::vector<MseCurve> curves{mse_curve_initial(s, ev, grid)};

    std::ostringstream table;
    table << "strategy,sampler,steps," << cli_detail::metrics_header() << "\n";
    for (int i = 0; i < n; ++i) {
        const auto& r = *results[static_cast<std::size_t>(i)];
        const std::string label(to_string(kinds[static_cast<std::size_t>(i)]));
        save_checkpoint(make_checkpoint(cfgs[static_cast<std::size_t>(i)], r),
                        run.output("checkpoint_" + label + ".bin"));
        run.write_train_log("train_log_" + label, r.log);
        const ModelPredictor pred(r.model, c.sample.use_ema ? r.ema.shadow : r.model.params(),
                                  c.train.target, s);
        curves.push_back(mse_curve(label, pred, s, ev, grid));
        for (SamplerKind sk : c.compare.samplers) {
            for (int S : c.compare.steps) {
                SamplerConfig sc = c.sample;
                sc.kind = sk;
                sc.steps = S;
                const Batch x = sample(pred, s, sc, c.compare.n_samples);
                const std::string tag =
                    label + "_" + std::string(to_string(sk)) + "_S" + std::to_string(S);
                cli_detail::write_samples_csv(run.output("samples_" + tag + ".csv"), x);
                const MetricReport m = evaluate_metrics(x, ref, c.eval.metrics);
                table << label << ',' << to_string(sk) << ',' << S << ','
                      << cli_detail::metrics_row(m) << "\n";
                ctx.err << "compare: " << tag << " sw=" << cli_detail::num(m.sliced_wasserstein)
                        << " mean_shift=" << cli_detail::num(m.mean_shift) << "\n";
            }
        }
    }
    cli_detail::write_samples_csv(run.output("reference.csv"), ref);
    cli_detail::write_mse_curves(run.output("mse_curve.csv"), curves);
    {
        auto os = cli_detail::open_out(run.output("comparison.csv"));
        os << table.str();
    }
    run.finish();
}

// --- entry point -------------------------------------------------------------

/// Parses argv and dispatches. Returns 0 on success, 2 on usage errors
/// (unknown subcommand, flag or config key), 1 on runtime failures.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
    CLI::App app{"Desk-scale diffusion training, sampling and bias diagnostics", "debias"};
    app.set_version_flag("--version", kVersion);
    app.require_subcommand(1);

    CommonOptions common;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", common.config_path, "Config file of 'key = value' lines");
        sub->add_option("--set", common.overrides, "Override one config key (KEY=VALUE), repeatable");
        sub->add_option("--name", common.name, "Run name (directory under --runs-dir)");
        sub->add_option("--runs-dir", common.runs_dir, "Parent directory for run outputs")
            ->capture_default_str();
        sub->add_option("--workers", common.workers, "Maximum worker threads")
            ->check(CLI::PositiveNumber)
            ->capture_default_str();
    };

    std::vector<std::pair<std::string, std::string>> flags;
    auto flag_to_key = [&](CLI::App* sub, const std::string& flag, const std::string& key,
                           const std::string& help) {
        sub->add_option_function<std::string>(
            flag, [&flags, key](const std::string& v) { flags.emplace_back(key, v); }, help);
    };

    auto* train_cmd = app.add_subcommand("train", "Train one denoiser; writes checkpoint.bin and train_log.csv");
    add_common(train_cmd);
    std::string resume;
    train_cmd->add_option("--resume", resume, "Continue from a checkpoint with optimizer state");
    flag_to_key(train_cmd, "--steps", "train.total_steps", "Total optimisation steps");
    flag_to_key(train_cmd, "--weight", "weight.kind", "Loss weighting strategy");
    flag_to_key(train_cmd, "--seed", "train.seed", "Training seed");

    auto* sample_cmd = app.add_subcommand("sample", "Draw samples from a checkpoint; writes samples.csv");
    add_common(sample_cmd);
    std::string sample_ckpt;
    std::string trajectory;
    sample_cmd->add_option("--checkpoint", sample_ckpt, "Checkpoint path")->required();
    flag_to_key(sample_cmd, "--sampler", "sample.kind", "ddpm or ddim");
    flag_to_key(sample_cmd, "--steps", "sample.steps", "Respaced step count S");
    flag_to_key(sample_cmd, "--count", "sample.count", "Number of samples");
    flag_to_key(sample_cmd, "--seed", "sample.seed", "Sampling seed");
    sample_cmd->add_flag_callback("--clip", [&flags] { flags.emplace_back("sample.clip", "true"); },
                                  "Clip x0 estimates to [sample.clip_min, sample.clip_max]");
    sample_cmd->add_option("--trajectory", trajectory,
                           "Also dump per-step states and x0 estimates to this file in the run dir");

    auto* diag_cmd = app.add_subcommand("diagnose", "MSE-step curves and one-step bias sweeps");
    add_common(diag_cmd);
    std::vector<std::string> models;
    std::vector<std::string> modes;
    std::vector<int> t_list;
    std::string diag_out = "mse_curve.csv";
    diag_cmd->add_option("--model", models, "LABEL=CHECKPOINT, repeatable");
    diag_cmd->add_option("--modes", modes, "Modes to evaluate: initial and model labels")->delimiter(',');
    flag_to_key(diag_cmd, "--t-stride", "diag.t_stride", "Probe every k-th step");
    diag_cmd->add_option("--t-list", t_list, "Explicit comma-separated steps")->delimiter(',');
    diag_cmd->add_option("--out", diag_out, "MSE curve file name in the run dir")->capture_default_str();

    auto* eval_cmd = app.add_subcommand("eval", "Distribution metrics between generated and reference sets");
    add_common(eval_cmd);
    std::string generated, reference, eval_ckpt;
    eval_cmd->add_option("--generated", generated, "Generated samples CSV");
    eval_cmd->add_option("--reference", reference,
                         "Reference samples CSV (default: held-out draws from the dataset)");
    eval_cmd->add_option("--checkpoint", eval_ckpt, "Sample from this checkpoint instead of --generated");

    auto* curves_cmd = app.add_subcommand("curves", "Per-step schedule quantities and loss weights");
    add_common(curves_cmd);
    flag_to_key(curves_cmd, "--weights", "curves.weights", "Comma-separated weight strategies");

    auto* compare_cmd = app.add_subcommand("compare", "Train one model per strategy, sample, and score");
    add_common(compare_cmd);
    flag_to_key(compare_cmd, "--strategies", "compare.strategies", "Comma-separated strategies");
    flag_to_key(compare_cmd, "--sampling-steps", "compare.steps", "Comma-separated step counts S");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    std::string command = "debias";
    for (int i = 1; i < argc; ++i) {
        command += ' ';
        command += argv[i];
    }
    CliContext ctx{out, err, command};

    try {
        CLI::App* sub = app.get_subcommands().front();
        const std::string name = sub->get_name();
        RunConfig cfg = resolve_config(common, name, flags);
        if (name == "train") {
            cmd_train(cfg, common, resume, ctx);
        } else if (name == "sample") {
            cmd_sample(cfg, common, sample_ckpt, trajectory, ctx);
        } else if (name == "diagnose") {
            cmd_diagnose(cfg, common, models, modes, t_list, diag_out, ctx);
        } else if (name == "eval") {
            cmd_eval(cfg, common, generated, reference, eval_ckpt, ctx);
        } else if (name == "curves") {
            cmd_curves(cfg, common, ctx);
        } else {
            cmd_compare(cfg, common, ctx);
        }
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace debias
