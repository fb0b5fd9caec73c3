#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "echoatt/optim.hpp"
#include "test_util.hpp"

using namespace echoatt;
using echoatt::testing::rand_tensor;

namespace {

// Independent straight-from-the-formulas AdamW, kept deliberately separate
// from the library implementation.
struct ScalarAdamWOracle {
    double m = 0.0, v = 0.0;
    int t = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, wd = 0.0;

    double step(double p, double g, double lr) {
        ++t;
        p -= lr * wd * p;  // decoupled decay before the adaptive update
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        double mhat = m / (1.0 - std::pow(beta1, t));
        double vhat = v / (1.0 - std::pow(beta2, t));
        return p - lr * mhat / (std::sqrt(vhat) + eps);
    }
};

}  // namespace

TEST(Schedule, WarmupAndDecayAnchors) {
    Schedule s{1000, 0.005, 1e-4};
    EXPECT_EQ(s.warmup_steps(), 5);
    EXPECT_DOUBLE_EQ(lr_at(s, 0), 0.0);
    EXPECT_DOUBLE_EQ(lr_at(s, 5), 1e-4);          // warmup end
    EXPECT_DOUBLE_EQ(lr_at(s, 1000), 0.0);        // total
    double mid = lr_at(s, 5 + (1000 - 5) / 2);  // progress ~0.5
    EXPECT_NEAR(mid, 0.5e-4, 1e-7);
    // exact midpoint of the decay span: cos(pi/2) = 0 gives the 0.5 factor
    Schedule f{106, 0.05, 2e-3};
    EXPECT_EQ(f.warmup_steps(), 6);
    EXPECT_NEAR(lr_at(f, 6 + 50), 1e-3, 1e-18);
}

TEST(Schedule, ContinuityAndMonotoneDecay) {
    Schedule s{400, 0.01, 3e-4};
    int64_t w = s.warmup_steps();
    EXPECT_NEAR(lr_at(s, w - 1), lr_at(s, w), s.lr_peak / static_cast<double>(w) + 1e-15);
    double prev = lr_at(s, w);
    for (int64_t step = w + 1; step <= 400; ++step) {
        double cur = lr_at(s, step);
        EXPECT_LE(cur, prev + 1e-18);
        prev = cur;
    }
}

TEST(Schedule, ContractErrors) {
    Schedule s{100, 0.005, 1e-4};
    EXPECT_THROW(lr_at(s, -1), ContractError);
    EXPECT_THROW(lr_at(s, 101), ContractError);
    EXPECT_THROW(lr_at(Schedule{100, 1.0, 1e-4}, 5), ContractError);
}

TEST(AdamW, ZeroGradZeroDecayKeepsParams) {
    Rng rng(1);
    Tensor p = rand_tensor({8}, rng);
    std::vector<double> before = p.data();
    AdamW opt({{"p", p}}, AdamWConfig{});
    p.grad();  // allocate zeros
    opt.step(0.1);
    EXPECT_EQ(p.data(), before);
}

TEST(AdamW, FirstStepIsSignedLrStep) {
    Tensor p = Tensor::from_data({1}, {1.0});
    p.set_requires_grad(true);
    p.grad()[0] = 1.0;
    AdamW opt({{"p", p}}, AdamWConfig{});
    opt.step(0.1);
    // bias-corrected first step: p - lr * g/|g| / (1 + eps) ~ 1 - 0.1
    EXPECT_NEAR(p.data()[0], 0.9, 1e-7);
}

TEST(AdamW, TrajectoryMatchesOracle) {
    Rng rng(2);
    Tensor p = rand_tensor({6}, rng);
    std::vector<ScalarAdamWOracle> oracle(6);
    for (auto& o : oracle) o.wd = 0.01;
    std::vector<double> op = p.data();

    AdamWConfig cfg;
    cfg.weight_decay = 0.01;
    AdamW opt({{"p", p}}, cfg);
    Rng grng(3);
    for (int step = 0; step < 10; ++step) {
        double lr = 0.05 / (1 + step);
        std::vector<double> g(6);
        for (double& x : g) x = grng.uniform(-1, 1);
        p.zero_grad();
        for (size_t i = 0; i < 6; ++i) p.grad()[i] = g[i];
        opt.step(lr);
        for (size_t i = 0; i < 6; ++i) op[i] = oracle[i].step(op[i], g[i], lr);
        for (size_t i = 0; i < 6; ++i) EXPECT_NEAR(p.data()[i], op[i], 1e-12);
    }
}

TEST(AdamW, ZeroDecayEqualsAdamExactly) {
    // AdamW with wd=0 must be plain Adam: compare against the oracle with its
    // decay term hard-disabled, bitwise over a trajectory.
    Tensor p = Tensor::from_data({3}, {0.5, -1.25, 2.0});
    p.set_requires_grad(true);
    std::vector<ScalarAdamWOracle> adam(3);  // wd defaults to 0: pure Adam
    std::vector<double> op = p.data();
    AdamW opt({{"p", p}}, AdamWConfig{});
    Rng grng(4);
    for (int step = 0; step < 20; ++step) {
        std::vector<double> g(3);
        for (double& x : g) x = grng.uniform(-2, 2);
        p.zero_grad();
        for (size_t i = 0; i < 3; ++i) p.grad()[i] = g[i];
        opt.step(1e-3);
        for (size_t i = 0; i < 3; ++i) {
            op[i] = adam[i].step(op[i], g[i], 1e-3);
            EXPECT_NEAR(p.data()[i], op[i], 1e-15);
        }
    }
}

TEST(AdamW, NanGradientAbortsWithDiagnostics) {
    Tensor p = Tensor::from_data({2}, {1.0, 2.0});
    p.set_requires_grad(true);
    p.grad()[1] = std::nan("");
    AdamW opt({{"embedding", p}}, AdamWConfig{});
    try {
        opt.step(0.1);
        FAIL() << "expected ContractError";
    } catch (const ContractError& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("embedding"), std::string::npos);
        EXPECT_NE(msg.find("step 1"), std::string::npos);
    }
}

TEST(AdamW, DeterministicTrajectories) {
    auto run = [] {
        Tensor p = Tensor::from_data({4}, {1.0, -1.0, 0.5, 2.0});
        p.set_requires_grad(true);
        AdamW opt({{"p", p}}, AdamWConfig{});
        Rng grng(5);
        for (int step = 0; step < 15; ++step) {
            p.zero_grad();
            for (size_t i = 0; i < 4; ++i) p.grad()[i] = grng.uniform(-1, 1);
            opt.step(1e-2);
        }
        return p.data();
    };
    EXPECT_EQ(run(), run());  // bitwise
}

TEST(AdamW, StateRoundTripResumesExactly) {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "echoatt_optim_test";
    fs::create_directories(dir);
    std::string path = (dir / "optim.ckpt").string();

    auto make = [] {
        Tensor p = Tensor::from_data({3}, {1.0, 2.0, 3.0});
        p.set_requires_grad(true);
        return p;
    };
    Tensor p1 = make();
    AdamW opt1({{"p", p1}}, AdamWConfig{});
    Rng g1(6);
    for (int i = 0; i < 5; ++i) {
        p1.zero_grad();
        for (size_t k = 0; k < 3; ++k) p1.grad()[k] = g1.uniform(-1, 1);
        opt1.step(1e-2);
    }
    opt1.save_state(path);
    std::vector<double> params_mid = p1.data();

    // continue the original
    for (int i = 0; i < 5; ++i) {
        p1.zero_grad();
        for (size_t k = 0; k < 3; ++k) p1.grad()[k] = 0.1 * (static_cast<double>(k) + i);
        opt1.step(1e-2);
    }

    // resume a fresh optimizer from saved state and replay the same grads
    Tensor p2 = make();
    p2.data() = params_mid;
    AdamW opt2({{"p", p2}}, AdamWConfig{});
    opt2.load_state(path);
    EXPECT_EQ(opt2.steps_taken(), 5);
    for (int i = 0; i < 5; ++i) {
        p2.zero_grad();
        for (size_t k = 0; k < 3; ++k) p2.grad()[k] = 0.1 * (static_cast<double>(k) + i);
        opt2.step(1e-2);
    }
    EXPECT_EQ(p1.data(), p2.data());  // bitwise
    fs::remove_all(dir);
}
