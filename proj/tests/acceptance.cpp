// SPDX-License-Identifier: Apache-2.0

// Acceptance gates. Prints one PASS/FAIL line per criterion and exits non-zero
// when any gate fails. Pass criterion numbers as arguments to run a subset.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "debias/cli.hpp"
#include "debias/debias.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace debias;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

const NoiseSchedule& sched() {
    static const NoiseSchedule s = build_linear(1000, 1e-4, 0.02);
    return s;
}

Batch normals(Eigen::Index r, Eigen::Index c, std::uint64_t seed, double scale = 1.0) {
    Batch b(r, c);
    StreamRng rng(seed);
    fill_normal(b, rng);
    return scale * b;
}

// --- 1..6: exact and oracle gates ---------------------------------------------

Outcome decomposition_identity() {
    std::mt19937_64 rng(20261015);
    std::uniform_int_distribution<int> pick(1, 1000);
    std::normal_distribution<double> nd;
    double worst = 0.0;
    Batch x0(2, 1), eps(2, 1), eh(2, 1);
    for (int i = 0; i < 100000; ++i) {
        const int t = pick(rng);
        for (int r = 0; r < 2; ++r) {
            x0(r, 0) = 3.0 * nd(rng);
            eps(r, 0) = nd(rng);
            eh(r, 0) = 2.0 * nd(rng);
        }
        const auto d = decompose(sched(), t, x0, eps, eh);
        worst = std::max(worst, (x0 - (d.x0_hat + d.amplified_error)).cwiseAbs().maxCoeff());
    }
    return {worst < 1e-12, fmt("max |x0 - (x0_hat + amplified_error)| = %.3e over 1e5 draws (tol 1e-12)", worst)};
}

Outcome inversion_identity() {
    const Batch x0 = normals(2, 10000, 1, 3.0);
    const Batch eps = normals(2, 10000, 2);
    double worst = 0.0;
    for (int t : {1, 250, 500, 750, 1000}) {
        const Batch xt = q_sample_at(sched().alpha_bar(t), x0, eps);
        worst = std::max(worst, (estimate_x0(sched(), t, xt, eps) - x0).cwiseAbs().maxCoeff());
    }
    return {worst < 1e-12, fmt("max |estimate_x0 - x0| = %.3e at t in {1,250,500,750,1000} (tol 1e-12)", worst)};
}

Outcome target_round_trips() {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> pick(1, 1000);
    const Batch x0 = normals(2, 10000, 4, 3.0);
    const Batch eps = normals(2, 10000, 5);
    double worst = 0.0;
    for (Eigen::Index j = 0; j < x0.cols(); ++j) {
        const double a = sched().alpha_bar(pick(rng));
        const Batch x = x0.col(j), e = eps.col(j);
        const Batch xt = q_sample_at(a, x, e);
        for (auto target : {PredictionTarget::Epsilon, PredictionTarget::X0, PredictionTarget::V}) {
            const Batch back = to_eps_hat_at(target, a, xt, make_target_at(target, a, x, e));
            worst = std::max(worst, (back - e).cwiseAbs().maxCoeff());
        }
        const Batch v = make_target_at(PredictionTarget::V, a, x, e);
        const Batch x0_from_v = std::sqrt(a) * xt - std::sqrt(1 - a) * v;
        const Batch e_from_x0 = to_eps_hat_at(PredictionTarget::X0, a, xt, x0_from_v);
        worst = std::max(worst, (e_from_x0 - e).cwiseAbs().maxCoeff());
    }
    return {worst < 1e-12, fmt("max |eps_back - eps| = %.3e over 1e4 draws, eps/x0/v (tol 1e-12)", worst)};
}

Outcome gradient_fidelity() {
    std::mt19937_64 rng(4);
    double worst = 0.0;
    for (int i = 0; i < 100; ++i) worst = std::max(worst, gradcheck::random_case(rng, sched()).max_rel_error);
    return {worst < 1e-4, fmt("max relative error = %.3e over 100 configurations (tol 1e-4)", worst)};
}

Outcome oracle_sampler() {
    const GaussianOraclePredictor pred(Vector::Zero(2), 1.0, sched());
    bool ok = true;
    std::string detail;
    for (auto kind : {SamplerKind::DDPM, SamplerKind::DDIM}) {
        SamplerConfig cfg;
        cfg.kind = kind;
        cfg.steps = 1000;
        cfg.seed = 5;
        const Batch x = sample(pred, sched(), cfg, 10000);
        const Vector m = x.rowwise().mean();
        const Batch c = x.colwise() - m;
        const Eigen::MatrixXd cov = c * c.transpose() / 10000.0;
        const double mean_err = m.cwiseAbs().maxCoeff();
        const double cov_err = (cov - Eigen::MatrixXd::Identity(2, 2)).norm();
        ok = ok && mean_err < 0.05 && cov_err < 0.1;
        detail += fmt("%s max|mean| = %.4f (tol 0.05) ||cov - I||_F = %.4f (tol 0.1); ",
                      std::string(to_string(kind)).c_str(), mean_err, cov_err);
    }
    return {ok, detail};
}

Outcome schedule_properties() {
    const NoiseSchedule& s = sched();
    bool increasing = true;
    for (int t = 2; t <= s.T(); ++t) increasing = increasing && amplification_coeff(s, t) > amplification_coeff(s, t - 1);
    const auto inv = weight_table(WeightStrategy::inv_snr(), s);
    const double range = *std::max_element(inv.begin(), inv.end()) / *std::min_element(inv.begin(), inv.end());

    const RespacedSchedule full = respace(s, s.T());
    bool identity = full.S() == s.T();
    for (int k = 1; identity && k <= s.T(); ++k) {
        identity = full.base_step(k) == k && full.effective().beta(k) == s.beta(k) &&
                   full.effective().alpha_bar(k) == s.alpha_bar(k);
    }
    double worst = 0.0;
    for (int S : {1, 2, 5, 10, 50, 100, 250, 999}) {
        const RespacedSchedule rs = respace(s, S);
        for (int k = 1; k <= S; ++k) {
            worst = std::max(worst, std::abs(rs.effective().alpha_bar(k) - s.alpha_bar(rs.base_step(k))));
        }
    }
    const bool ok = increasing && range >= 1e8 && identity && worst < 1e-12;
    return {ok, fmt("amp strictly increasing = %s; InvSnr range = %.3e (>= 1e8); respace(T) identity = %s; "
                    "max respaced alpha_bar error = %.3e (tol 1e-12)",
                    increasing ? "yes" : "no", range, identity ? "yes" : "no", worst)};
}

// --- 7, 8: trained-model gates ----------------------------------------------------

constexpr int kSeeds = 3;

struct SeedModels {
    TrainConfig cfg;
    TrainResult constant;
    TrainResult ours;
};

TrainConfig behavioral_config(std::uint64_t seed) {
    TrainConfig c;
    c.data = ToyDataset::gaussian_mixture(8, 4.0, 0.1, seed);
    c.total_steps = 20000;
    c.lr = 5e-4;
    c.ema_decay = 0.999;
    c.seed = seed;
    return c;
}

std::vector<SeedModels>& trained_models(double* seconds) {
    static std::vector<SeedModels> models;
    static double elapsed = 0.0;
    if (models.empty()) {
        const auto t0 = std::chrono::steady_clock::now();
        for (int seed = 0; seed < kSeeds; ++seed) {
            SeedModels m;
            m.cfg = behavioral_config(static_cast<std::uint64_t>(seed));
            TrainConfig c = m.cfg;
            c.weight = WeightStrategy::constant();
            m.constant = train(c);
            c.weight = WeightStrategy::inv_sqrt_snr();
            m.ours = train(c);
            models.push_back(std::move(m));
        }
        elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    }
    if (seconds) *seconds = elapsed;
    return models;
}

ModelPredictor ema_predictor(const TrainResult& r) {
    return ModelPredictor(r.model, r.ema.shadow, PredictionTarget::Epsilon, sched());
}

Outcome large_t_mse() {
    double train_s = 0.0;
    auto& models = trained_models(&train_s);
    const auto t0 = std::chrono::steady_clock::now();
    std::vector<int> grid;
    for (int t = 951; t <= 1000; ++t) grid.push_back(t);
    int both = 0, below_initial = 0, below_constant = 0, constant_above_initial = 0;
    std::string detail;
    for (int seed = 0; seed < kSeeds; ++seed) {
        const auto& m = models[static_cast<std::size_t>(seed)];
        const EvalSet ev{m.cfg.data.with_seed(1000 + seed), 4096, static_cast<std::uint64_t>(2000 + seed)};
        const double initial = curve_mean_from(mse_curve_initial(sched(), ev, grid), 951);
        const double constant = curve_mean_from(mse_curve("constant", ema_predictor(m.constant), sched(), ev, grid), 951);
        const double ours = curve_mean_from(mse_curve("ours", ema_predictor(m.ours), sched(), ev, grid), 951);
        const oracle::RingMixturePredictor bayes{8, 4.0, 0.01, &sched()};
        const double best = curve_mean_from(mse_curve("bayes", bayes, sched(), ev, grid), 951);
        const bool a = ours < initial, b = ours < constant;
        below_initial += a;
        below_constant += b;
        both += a && b;
        constant_above_initial += constant >= initial;
        detail += fmt("seed %d: initial %.6e ours %.6e constant %.6e bayes %.6e; ", seed, initial, ours,
                      constant, best);
    }
    const double total = train_s + std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    detail += fmt("ours<initial %d/3, ours<constant %d/3, both %d/3 (need 2); constant>=initial %d/3 (reported); "
                  "train+eval %.0f s (budget 900 s)",
                  below_initial, below_constant, both, constant_above_initial, total);
    return {2 * both > kSeeds && total < 900.0, detail};
}

Outcome few_step_sampling() {
    auto& models = trained_models(nullptr);
    const auto t0 = std::chrono::steady_clock::now();
    int wins = 0;
    std::string detail = "ms/sw as ours/constant; ";
    for (int seed = 0; seed < kSeeds; ++seed) {
        const auto& m = models[static_cast<std::size_t>(seed)];
        const Batch ref = generate(m.cfg.data.with_seed(5000 + seed), 10000);
        MetricOptions mo;
        mo.seed = static_cast<std::uint64_t>(seed);
        mo.with_energy = false;
        bool seed_ok = true;
        detail += fmt("seed %d:", seed);
        for (int S : {2, 5, 10, 50}) {
            SamplerConfig sc;
            sc.steps = S;
            sc.seed = static_cast<std::uint64_t>(7000 + seed);
            const MetricReport c = evaluate_metrics(sample(ema_predictor(m.constant), sched(), sc, 10000), ref, mo);
            const MetricReport o = evaluate_metrics(sample(ema_predictor(m.ours), sched(), sc, 10000), ref, mo);
            if (S != 50) seed_ok = seed_ok && o.mean_shift < c.mean_shift && o.sliced_wasserstein < c.sliced_wasserstein;
            detail += fmt(" S=%d ms %.4f/%.4f sw %.4f/%.4f", S, o.mean_shift, c.mean_shift, o.sliced_wasserstein,
                          c.sliced_wasserstein);
        }
        wins += seed_ok;
        detail += seed_ok ? " [ok]" : " [not ok]";
        SamplerConfig ddim;
        ddim.kind = SamplerKind::DDIM;
        ddim.seed = static_cast<std::uint64_t>(7000 + seed);
        for (const auto* r : {&m.constant, &m.ours}) {
            ddim.steps = 2;
            const double sw2 = evaluate_metrics(sample(ema_predictor(*r), sched(), ddim, 10000), ref, mo).sliced_wasserstein;
            ddim.steps = 50;
            const double sw50 = evaluate_metrics(sample(ema_predictor(*r), sched(), ddim, 10000), ref, mo).sliced_wasserstein;
            detail += fmt(" ddim sw S2-S50 %s %.4f", r == &m.ours ? "ours" : "constant", sw2 - sw50);
        }
        detail += "; ";
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    detail += fmt("seeds passing %d/3 (need 2); sampling+metrics %.0f s (budget 300 s)", wins, secs);
    return {2 * wins > kSeeds && secs < 300.0, detail};
}

// --- 9: reproducibility ---------------------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::ostringstream s;
    s << is.rdbuf();
    return s.str();
}

Outcome compare_determinism() {
    const fs::path root = fs::temp_directory_path() / ("debias_acceptance_" + std::to_string(::getpid()));
    fs::remove_all(root);
    auto run_once = [&](const std::string& sub) {
        const std::string dir = (root / sub).string();
        const std::vector<std::string> args = {
            "debias", "compare", "--runs-dir", dir, "--name", "cmp", "--strategies", "constant,ours",
            "--sampling-steps", "2,10,50", "--set", "train.total_steps=2000", "--set", "compare.n_samples=2000",
            "--set", "eval.n_reference=2000"};
        std::vector<const char*> argv;
        for (const auto& a : args) argv.push_back(a.c_str());
        std::ostringstream out, err;
        const int code = run(static_cast<int>(argv.size()), argv.data(), out, err);
        if (code != 0) throw std::runtime_error("compare exited " + std::to_string(code) + ": " + err.str());
        return root / sub / "cmp";
    };
    const fs::path a = run_once("a");
    const fs::path b = run_once("b");
    int files = 0, identical = 0;
    std::string differing;
    for (const auto& e : fs::directory_iterator(a)) {
        if (e.path().extension() != ".csv") continue;
        ++files;
        const fs::path other = b / e.path().filename();
        if (fs::exists(other) && slurp(e.path()) == slurp(other)) {
            ++identical;
        } else {
            differing += " " + e.path().filename().string();
        }
    }
    fs::remove_all(root);
    return {files > 0 && identical == files,
            fmt("%d/%d CSV files byte-identical across two runs%s", identical, files,
                differing.empty() ? "" : (";" + differing).c_str())};
}

}  // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> gates = {
        {"decomposition identity", decomposition_identity},
        {"inversion identity", inversion_identity},
        {"target round trips", target_round_trips},
        {"gradient fidelity", gradient_fidelity},
        {"oracle sampler equivalence", oracle_sampler},
        {"schedule and weight properties", schedule_properties},
        {"large-t MSE ordering", large_t_mse},
        {"few-step sampling bias", few_step_sampling},
        {"compare determinism", compare_determinism},
    };
    const double budget_s[] = {5, 1, 0, 0, 60, 0, 0, 0, 0};

    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::stoi(argv[i]));

    int failed = 0;
    for (std::size_t i = 0; i < gates.size(); ++i) {
        const int id = static_cast<int>(i) + 1;
        if (!only.empty() && !only.contains(id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = gates[i].second();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (budget_s[i] > 0 && secs >= budget_s[i]) {
            o.pass = false;
            o.detail += fmt(" runtime %.2f s over budget %.0f s", secs, budget_s[i]);
        }
        failed += !o.pass;
        std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << " " << gates[i].first << ": "
                  << o.detail << fmt(" [%.2f s]", secs) << std::endl;
    }
    std::cout << (failed == 0 ? "all criteria passed" : std::to_string(failed) + " criterion(s) failed") << "\n";
    return failed == 0 ? 0 : 1;
}
