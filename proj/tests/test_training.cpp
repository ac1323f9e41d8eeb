// SPDX-License-Identifier: Apache-2.0

#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <limits>
#include <random>
#include <sstream>

#include "debias/checkpoint.hpp"
#include "debias/training.hpp"
#include "support/oracles.hpp"

using namespace debias;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;
using Catch::Matchers::WithinRel;

namespace {

const NoiseSchedule& sched() {
    static const NoiseSchedule s = build_linear(1000, 1e-4, 0.02);
    return s;
}

Batch normals(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
    Batch b(r, c);
    StreamRng rng(seed);
    fill_normal(b, rng);
    return b;
}

TrainConfig small_config() {
    TrainConfig cfg;
    cfg.arch = Architecture{2, {16, 16}, 8};
    cfg.batch_size = 32;
    cfg.total_steps = 40;
    cfg.log_every = 10;
    cfg.lr = 1e-3;
    cfg.ema_decay = 0.9;
    cfg.seed = 17;
    cfg.data.seed = 5;
    return cfg;
}

}  // namespace

TEST_CASE("forward noising has the closed-form moments") {
    const int N = 200000;
    Batch x0 = Batch::Constant(2, N, 1.5);
    x0.row(1).setConstant(-0.7);
    const Batch eps = normals(2, N, 1);
    for (int t : {1, 250, 500, 1000}) {
        const double a = sched().alpha_bar(t);
        const std::vector<int> ts(N, t);
        const Batch xt = q_sample(sched(), x0, ts, eps);
        for (int r = 0; r < 2; ++r) {
            const double mean = xt.row(r).mean();
            const double var = (xt.row(r).array() - mean).square().mean();
            const double se = std::sqrt((1 - a) / N);
            CHECK(std::abs(mean - std::sqrt(a) * x0(r, 0)) < 5 * se);
            CHECK_THAT(var, WithinRel(1 - a, 0.02));
        }
    }
}

TEST_CASE("target conversions recover the noise") {
    std::mt19937_64 rng(8);
    std::uniform_int_distribution<int> pick(1, 1000);
    const Batch x0 = normals(2, 500, 2) * 3.0;
    const Batch eps = normals(2, 500, 3);
    std::vector<int> t(500);
    for (auto& ti : t) ti = pick(rng);
    t[0] = 1;
    t[1] = 1000;
    const Batch xt = q_sample(sched(), x0, t, eps);
    for (auto target : {PredictionTarget::Epsilon, PredictionTarget::X0, PredictionTarget::V}) {
        const Batch tgt = make_target(target, sched(), t, x0, eps);
        const Batch back = to_eps_hat(target, sched(), t, xt, tgt);
        CHECK((back - eps).cwiseAbs().maxCoeff() < 1e-12);
    }
    const Batch v = make_target(PredictionTarget::V, sched(), t, x0, eps);
    for (Eigen::Index j = 0; j < 500; ++j) {
        const double a = sched().alpha_bar(t[static_cast<std::size_t>(j)]);
        CHECK((v.col(j) - (std::sqrt(a) * eps.col(j) - std::sqrt(1 - a) * x0.col(j))).norm() < 1e-12);
    }
}

TEST_CASE("x0 target guards alpha_bar = 1") {
    const Batch x = Batch::Ones(2, 1);
    CHECK_THROWS_AS(to_eps_hat_at(PredictionTarget::X0, 1.0, x, x), NumericError);
    CHECK_NOTHROW(to_eps_hat_at(PredictionTarget::V, 1.0, x, x));
}

TEST_CASE("eps-space factors are the derivatives of the conversion") {
    const Batch xt = normals(2, 1, 4);
    const Batch out = normals(2, 1, 5);
    Batch bumped = out;
    bumped(0, 0) += 1e-6;
    for (auto target : {PredictionTarget::Epsilon, PredictionTarget::X0, PredictionTarget::V}) {
        for (double a : {0.9, 0.3, 1e-3}) {
            const double d = (to_eps_hat_at(target, a, xt, bumped)(0, 0) - to_eps_hat_at(target, a, xt, out)(0, 0)) / 1e-6;
            CHECK_THAT(d, WithinRel(eps_space_factor(target, a), 1e-6));
        }
    }
}

TEST_CASE("weighted squared error") {
    Batch pred(2, 3), tgt = Batch::Zero(2, 3);
    pred << 1, 0, 2,
            0, 3, 0;
    const std::vector<double> c{1.0, 2.0, 0.5};
    const auto r = weighted_squared_error(pred, tgt, c);
    CHECK_THAT(r.value, WithinRel((1.0 + 18.0 + 2.0) / 3.0, 1e-15));
    CHECK_THAT(r.output_grad(1, 1), WithinRel(2.0 * 2.0 * 3.0 / 3.0, 1e-15));

    Batch bad = pred;
    bad(0, 2) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_MATCHES(weighted_squared_error(bad, tgt, c), NumericError,
                         Catch::Matchers::MessageMatches(ContainsSubstring("batch index 2")));
    CHECK_THROWS_AS(weighted_squared_error(pred, tgt, std::vector<double>{1.0}), ShapeError);
}

TEST_CASE("constant weight on eps target is the plain mean squared error") {
    const auto m = Denoiser::initialized(Architecture{2, {8}, 4}, 3);
    const Batch x0 = normals(2, 64, 6);
    const Batch eps = normals(2, 64, 7);
    std::vector<int> t(64);
    for (int j = 0; j < 64; ++j) t[static_cast<std::size_t>(j)] = 1 + 15 * j;
    const double L = loss(WeightStrategy::constant(), PredictionTarget::Epsilon, sched(), m, x0, t, eps);
    const Batch pred = m.forward(q_sample(sched(), x0, t, eps), t, sched());
    CHECK_THAT(L, WithinRel((pred - eps).colwise().squaredNorm().mean(), 1e-14));
}

TEST_CASE("eps-space weighting multiplies by the squared factor") {
    std::vector<int> t{10, 700};
    for (auto target : {PredictionTarget::X0, PredictionTarget::V}) {
        const auto plain = loss_coefficients(WeightStrategy::inv_sqrt_snr(), target, sched(), t);
        const auto eps = loss_coefficients(WeightStrategy::inv_sqrt_snr(), target, sched(), t, LossOptions{true});
        for (std::size_t j = 0; j < t.size(); ++j) {
            const double f = eps_space_factor(target, sched().alpha_bar(t[j]));
            CHECK_THAT(eps[j], WithinRel(plain[j] * f * f, 1e-14));
        }
    }
}

TEST_CASE("loss gradient matches central differences for every target and weight") {
    const Batch x0 = normals(2, 6, 9) * 2.0;
    const Batch eps = normals(2, 6, 10);
    const std::vector<int> t{1, 3, 100, 400, 900, 1000};
    const WeightStrategy weights[] = {WeightStrategy::constant(), WeightStrategy::inv_sqrt_snr(),
                                      WeightStrategy::p2(), WeightStrategy::min_snr(),
                                      WeightStrategy::vlb()};
    for (auto target : {PredictionTarget::Epsilon, PredictionTarget::X0, PredictionTarget::V}) {
        for (const auto& w : weights) {
            auto m = Denoiser::initialized(Architecture{2, {6, 5}, 4}, 12);
            const auto [value, g] = loss_and_grad(w, target, sched(), m, x0, t, eps);
            CHECK(value == loss(w, target, sched(), m, x0, t, eps));
            auto f = [&](const Eigen::VectorXd& p) {
                Denoiser probe = m;
                probe.set_params(p);
                return loss(w, target, sched(), probe, x0, t, eps);
            };
            const Vector numeric = oracle::central_difference(f, m.params(), 1e-5);
            CHECK(oracle::max_relative_error(g.flat, numeric) < 1e-4);
        }
    }
}

TEST_CASE("step indices are drawn uniformly") {
    TrainRng rng(3);
    std::uniform_int_distribution<int> pick(1, 10);
    std::vector<int> counts(10, 0);
    const int N = 100000;
    for (int i = 0; i < N; ++i) ++counts[static_cast<std::size_t>(pick(rng.engine) - 1)];
    double chi2 = 0.0;
    for (int c : counts) chi2 += (c - N / 10.0) * (c - N / 10.0) / (N / 10.0);
    CHECK(chi2 < 27.88);  // 0.999 quantile, 9 dof
}

TEST_CASE("generator state round-trips") {
    TrainRng a(99);
    for (int i = 0; i < 7; ++i) a.normal(a.engine);
    TrainRng b(1);
    b.restore(a.serialize());
    for (int i = 0; i < 50; ++i) CHECK(a.normal(a.engine) == b.normal(b.engine));
    CHECK_THROWS_AS(b.restore("garbage"), LoadError);
}

TEST_CASE("training is deterministic and logs on schedule") {
    const auto cfg = small_config();
    const auto a = train(cfg);
    const auto b = train(cfg);
    CHECK(a.model.params() == b.model.params());
    CHECK(a.ema.shadow == b.ema.shadow);
    CHECK(a.steps_done == 40);
    REQUIRE(a.log.rows.size() == 4);
    CHECK(a.log.rows.front().step == 10);
    CHECK(a.log.rows.back().step == 40);
    for (std::size_t i = 0; i < a.log.rows.size(); ++i) {
        CHECK(a.log.rows[i].loss == b.log.rows[i].loss);
        CHECK(a.log.rows[i].ema_loss == b.log.rows[i].ema_loss);
    }
    std::ostringstream os;
    a.log.write_csv(os);
    CHECK(os.str().rfind("step,wall_ms,loss,ema_loss\n", 0) == 0);
}

TEST_CASE("training reduces the loss") {
    auto cfg = small_config();
    cfg.total_steps = 600;
    cfg.log_every = 50;
    const auto r = train(cfg);
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < 3; ++i) first += r.log.rows[i].loss;
    for (std::size_t i = r.log.rows.size() - 3; i < r.log.rows.size(); ++i) last += r.log.rows[i].loss;
    CHECK(last < 0.8 * first);
}

TEST_CASE("resume from a checkpoint reproduces an uninterrupted run bit for bit") {
    const auto full_cfg = small_config();
    const auto full = train(full_cfg);

    auto half_cfg = full_cfg;
    half_cfg.total_steps = 20;
    const auto half = train(half_cfg);
    const auto path = std::filesystem::temp_directory_path() / "debias_resume_test.bin";
    save_checkpoint(make_checkpoint(half_cfg, half), path);
    const Checkpoint ck = load_checkpoint(path);
    std::filesystem::remove(path);
    const auto resumed = train(full_cfg, &ck);

    CHECK(resumed.steps_done == 40);
    CHECK(resumed.model.params() == full.model.params());
    CHECK(resumed.ema.shadow == full.ema.shadow);
    CHECK(resumed.optimizer.m == full.optimizer.m);
    CHECK(resumed.rng_state == full.rng_state);
}

TEST_CASE("resume rejects incompatible checkpoints") {
    const auto cfg = small_config();
    auto r = train([&] { auto c = cfg; c.total_steps = 2; return c; }());
    auto ck = make_checkpoint(cfg, r);
    auto other = cfg;
    other.T = 500;
    CHECK_THROWS_AS(train(other, &ck), ConfigError);
    auto wider = cfg;
    wider.arch.hidden_dims = {16, 17};
    CHECK_THROWS_AS(train(wider, &ck), ConfigError);
    ck.optimizer.reset();
    CHECK_THROWS_AS(train(cfg, &ck), ConfigError);
}

TEST_CASE("divergence surfaces the last finite state") {
    auto cfg = small_config();
    cfg.lr = 1e120;
    cfg.total_steps = 50;
    try {
        train(cfg);
        FAIL("expected divergence");
    } catch (const TrainingDiverged& e) {
        CHECK_THAT(std::string(e.what()), ContainsSubstring("diverged at step"));
        const auto& ck = e.last_finite();
        CHECK(ck.model.params().allFinite());
        CHECK(ck.meta.train_step == e.step() - 1);
        CHECK(!ck.rng_state.empty());
    }
}

TEST_CASE("config validation names the field") {
    auto cfg = small_config();
    cfg.batch_size = 0;
    CHECK_THROWS_MATCHES(cfg.validate(), ConfigError,
                         Catch::Matchers::MessageMatches(ContainsSubstring("train.batch_size")));
    cfg = small_config();
    cfg.ema_decay = 1.5;
    CHECK_THROWS_MATCHES(cfg.validate(), ConfigError,
                         Catch::Matchers::MessageMatches(ContainsSubstring("train.ema_decay")));
    cfg = small_config();
    cfg.beta_end = 2.0;
    CHECK_THROWS_MATCHES(cfg.validate(), ConfigError,
                         Catch::Matchers::MessageMatches(ContainsSubstring("schedule.beta_end")));
    CHECK(parse_prediction_target("v") == PredictionTarget::V);
    CHECK_THROWS_AS(parse_prediction_target("score"), ConfigError);
}
