#include <gtest/gtest.h>

#include "echoatt/bench.hpp"

using namespace echoatt;

namespace {

ModelConfig toy_config(int n_layers = 4) {
    ModelConfig cfg;
    cfg.n_layers = n_layers;
    cfg.d_model = 64;
    cfg.n_heads = 4;
    cfg.n_kv_heads = 4;
    cfg.d_ff = 128;
    cfg.vocab_size = 257;
    cfg.max_seq_len = 256;
    return cfg;
}

}  // namespace

TEST(Flops, IdentityPlanMatchesBaseline) {
    ModelConfig cfg = toy_config();
    auto [baseline, shared] = analytic_flops(cfg, SharingPlan::identity(4), 32);
    EXPECT_DOUBLE_EQ(baseline, shared);
    EXPECT_GT(baseline, 0.0);
}

TEST(Flops, SavingsMonotoneInSharedCount) {
    ModelConfig cfg = toy_config(8);
    double prev = 0.0;
    for (int n = 1; n <= 6; ++n) {
        std::vector<int> idx;
        for (int i = 0; i < n; ++i) idx.push_back(i + 1);
        auto [baseline, shared] = analytic_flops(cfg, SharingPlan::from_shared_indices(8, idx), 64);
        double saved = baseline - shared;
        EXPECT_GT(saved, prev);
        prev = saved;
    }
}

TEST(Flops, HandAuditOfOneSharedLayer) {
    // d = 64, kv width = 64, heads = 4, seq = 32: a shared layer skips
    //   q_proj   2*32*64*64          = 262144
    //   k_proj   2*32*64*64          = 262144
    //   rope     3*32*(64+64)        =  12288
    //   scores   2*T*64 + T*4, T=528 =  69696  (T = 32*33/2 causal pairs)
    //   softmax  4*T*4               =   8448
    // total saved per shared layer    = 614720
    ModelConfig cfg = toy_config();
    int seq = 32;
    auto [baseline, shared] = analytic_flops(cfg, SharingPlan::from_shared_indices(4, {2}), seq);
    EXPECT_DOUBLE_EQ(baseline - shared, 614720.0);

    FlopsBreakdown root = layer_flops(cfg, seq, true);
    FlopsBreakdown leaf = layer_flops(cfg, seq, false);
    EXPECT_DOUBLE_EQ(root.q_proj, 262144.0);
    EXPECT_DOUBLE_EQ(root.k_proj, 262144.0);
    EXPECT_DOUBLE_EQ(root.rope, 12288.0);
    EXPECT_DOUBLE_EQ(root.scores, 69696.0);
    EXPECT_DOUBLE_EQ(root.softmax, 8448.0);
    EXPECT_DOUBLE_EQ(root.total() - leaf.total(), 614720.0);
    // terms the sharing layers keep
    EXPECT_DOUBLE_EQ(leaf.v_proj, root.v_proj);
    EXPECT_DOUBLE_EQ(leaf.weighted_sum, root.weighted_sum);
    EXPECT_DOUBLE_EQ(leaf.mlp, root.mlp);
    EXPECT_DOUBLE_EQ(leaf.q_proj, 0.0);
}

TEST(Throughput, RepeatContract) {
    ModelConfig cfg = toy_config(2);
    TransformerModel m = TransformerModel::init(cfg, SharingPlan::identity(2), 1);
    EXPECT_THROW(measure_throughput(m, 16, 1, 4), ContractError);
}

TEST(Throughput, IdentityStudentWithinNoiseOfTeacher) {
    ModelConfig cfg = toy_config(4);
    TransformerModel teacher = TransformerModel::init(cfg, SharingPlan::identity(4), 2);
    TransformerModel twin = build_student(teacher, SharingPlan::identity(4));
    ThroughputResult a = measure_throughput(teacher, 64, 2, 7);
    ThroughputResult b = measure_throughput(twin, 64, 2, 7);
    bool iqr_overlap = std::max(a.q25_tps, b.q25_tps) <= std::min(a.q75_tps, b.q75_tps);
    double rel = std::abs(a.median_tps - b.median_tps) / std::max(a.median_tps, b.median_tps);
    EXPECT_TRUE(iqr_overlap || rel < 0.15) << "a=" << a.median_tps << " b=" << b.median_tps;
}

TEST(Throughput, HighSharingIsFasterThanDense) {
    ModelConfig cfg = toy_config(8);
    TransformerModel teacher = TransformerModel::init(cfg, SharingPlan::identity(8), 3);
    SharingPlan plan = SharingPlan::from_shared_indices(8, {2, 3, 4, 5, 6, 7});
    TransformerModel student = build_student(teacher, plan);
    ThroughputResult dense = measure_throughput(teacher, 192, 2, 9);
    ThroughputResult shared = measure_throughput(student, 192, 2, 9);
    EXPECT_GT(shared.median_tps, dense.median_tps);
}

TEST(Bench, ReportIsInternallyConsistent) {
    ModelConfig cfg = toy_config(4);
    TransformerModel teacher = TransformerModel::init(cfg, SharingPlan::identity(4), 4);
    SharingPlan plan = SharingPlan::from_sources({0, 1, 1, 1});
    TransformerModel student = build_student(teacher, plan);
    BenchReport r = run_bench(teacher, student, 48, 2, 5, 11);
    EXPECT_EQ(r.params_removed, removed_parameters(cfg, plan));
    EXPECT_EQ(r.params_baseline - r.params_student, r.params_removed);
    EXPECT_NEAR(r.removed_percent, 100.0 * static_cast<double>(r.params_removed) / r.params_baseline, 1e-9);
    EXPECT_LT(r.flops_shared, r.flops_baseline);
    EXPECT_GT(r.tps_baseline.median_tps, 0.0);
    EXPECT_GT(r.train_student_distill.median_sec, 0.0);
    json j = r;  // serializes without throwing
    EXPECT_TRUE(j.contains("params"));
    EXPECT_TRUE(j["inference"].contains("speedup_percent"));
}

TEST(Bench, MismatchedArchitecturesRejected) {
    ModelConfig a = toy_config(4);
    ModelConfig b = toy_config(4);
    b.d_model = 32;
    b.d_ff = 64;
    TransformerModel ma = TransformerModel::init(a, SharingPlan::identity(4), 5);
    TransformerModel mb = TransformerModel::init(b, SharingPlan::identity(4), 6);
    EXPECT_THROW(run_bench(ma, mb, 32, 1, 5, 1), InputError);
}
