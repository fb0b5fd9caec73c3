#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "echoatt/analysis.hpp"
#include "echoatt/model.hpp"
#include "test_util.hpp"

using namespace echoatt;

namespace {

ModelConfig toy_config(int n_layers) {
    ModelConfig cfg;
    cfg.n_layers = n_layers;
    cfg.d_model = 16;
    cfg.n_heads = 4;
    cfg.n_kv_heads = 2;
    cfg.d_ff = 24;
    cfg.vocab_size = 23;
    cfg.max_seq_len = 64;
    return cfg;
}

std::vector<TokenBatch> random_samples(const ModelConfig& cfg, int n_samples, int seq, int batch, uint64_t seed) {
    Rng rng(seed);
    std::vector<TokenBatch> out;
    int remaining = n_samples;
    while (remaining > 0) {
        int rows = std::min(remaining, batch);
        TokenBatch tb;
        tb.batch = rows;
        tb.seq = seq;
        for (int i = 0; i < rows * seq; ++i) {
            tb.ids.push_back(static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.vocab_size))));
        }
        out.push_back(std::move(tb));
        remaining -= rows;
    }
    return out;
}

}  // namespace

TEST(Cosine, ClosedForms) {
    std::vector<double> u = {1.0, 2.0, -3.0};
    EXPECT_DOUBLE_EQ(cosine_similarity(u, u), 1.0);
    EXPECT_DOUBLE_EQ(cosine_similarity({1.0, 0.0}, {0.0, 1.0}), 0.0);
    EXPECT_NEAR(cosine_similarity({1.0, 0.0}, {1.0, 1.0}), 0.70710678, 1e-8);
    EXPECT_THROW(cosine_similarity({0.0, 0.0}, {1.0, 1.0}), DegenerateInputError);
    EXPECT_THROW(cosine_similarity({1.0}, {1.0, 2.0}), DimensionError);
}

TEST(Similarity, IdenticalLayersGiveUnitPairwise) {
    // Layers 0 and 1 share weights, and the residual contributions are zeroed
    // so both layers see the same input: their attention is identical.
    ModelConfig cfg = toy_config(2);
    TransformerModel m = TransformerModel::init(cfg, SharingPlan::identity(2), 31);
    m.layers[1].wq.data() = m.layers[0].wq.data();
    m.layers[1].wk.data() = m.layers[0].wk.data();
    m.layers[1].attn_norm.data() = m.layers[0].attn_norm.data();
    for (double& v : m.layers[0].wo.data()) v = 0.0;
    for (double& v : m.layers[0].w_down.data()) v = 0.0;
    SimilarityReport r = attention_similarity(m, random_samples(cfg, 4, 12, 2, 1));
    EXPECT_DOUBLE_EQ(r.pairwise[0][1], 1.0);
}

TEST(Similarity, DiagonalAndSymmetry) {
    ModelConfig cfg = toy_config(3);
    TransformerModel m = TransformerModel::init(cfg, SharingPlan::identity(3), 32);
    SimilarityReport r = attention_similarity(m, random_samples(cfg, 5, 10, 2, 2));
    for (int i = 0; i < 3; ++i) {
        EXPECT_DOUBLE_EQ(r.pairwise[i][i], 1.0);
        for (int j = 0; j < 3; ++j) {
            EXPECT_DOUBLE_EQ(r.pairwise[i][j], r.pairwise[j][i]);
            EXPECT_GE(r.pairwise[i][j], -1.0);
            EXPECT_LE(r.pairwise[i][j], 1.0);
        }
    }
    // per_layer_avg is the row mean excluding the diagonal
    for (int i = 0; i < 3; ++i) {
        double s = 0.0;
        for (int j = 0; j < 3; ++j) {
            if (j != i) s += r.pairwise[i][j];
        }
        EXPECT_NEAR(r.per_layer_avg[i], s / 2.0, 1e-15);
    }
}

TEST(Similarity, MatchesBruteForceOracle) {
    // store-everything oracle: keep every flattened attention tensor, then
    // loop pairs naively
    ModelConfig cfg = toy_config(4);
    TransformerModel m = TransformerModel::init(cfg, SharingPlan::identity(4), 33);
    std::vector<TokenBatch> samples = random_samples(cfg, 8, 64, 3, 7);

    std::vector<std::vector<std::vector<double>>> stored;  // [sample][layer]
    {
        NoGradScope ng;
        for (const auto& tb : samples) {
            ForwardResult res = m.forward(tb, TraceMode::kAttention);
            for (int row = 0; row < tb.batch; ++row) {
                std::vector<std::vector<double>> per_layer;
                for (int l = 0; l < 4; ++l) {
                    per_layer.push_back(flatten_sample_attention(res.trace.attention[l], row));
                }
                stored.push_back(std::move(per_layer));
            }
        }
    }
    ASSERT_EQ(stored.size(), 8u);
    SimilarityReport r = attention_similarity(m, samples);
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
            double expect;
            if (i == j) {
                expect = 1.0;
            } else {
                double s = 0.0;
                for (const auto& sample : stored) s += cosine_similarity(sample[i], sample[j]);
                expect = s / static_cast<double>(stored.size());
            }
            EXPECT_NEAR(r.pairwise[i][j], expect, 1e-12) << i << "," << j;
        }
    }
}

TEST(Similarity, StreamingEqualsMergedAccumulation) {
    ModelConfig cfg = toy_config(3);
    TransformerModel m = TransformerModel::init(cfg, SharingPlan::identity(3), 34);
    std::vector<TokenBatch> samples = random_samples(cfg, 6, 16, 1, 9);

    SimilarityReport whole = attention_similarity(m, samples);

    SimilarityAccumulator acc1(3, 16), acc2(3, 16);
    NoGradScope ng;
    for (size_t i = 0; i < samples.size(); ++i) {
        ForwardResult res = m.forward(samples[i], TraceMode::kAttention);
        std::vector<std::vector<double>> flats;
        for (int l = 0; l < 3; ++l) flats.push_back(flatten_sample_attention(res.trace.attention[l], 0));
        (i < 3 ? acc1 : acc2).add_sample(flats);
    }
    acc1.merge(acc2);
    SimilarityReport merged = acc1.finalize();
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            EXPECT_NEAR(whole.pairwise[i][j], merged.pairwise[i][j], 1e-12);
        }
    }
}

TEST(Similarity, InputErrors) {
    ModelConfig cfg = toy_config(2);
    TransformerModel dense = TransformerModel::init(cfg, SharingPlan::identity(2), 35);
    std::vector<TokenBatch> ragged = random_samples(cfg, 1, 8, 1, 3);
    std::vector<TokenBatch> other = random_samples(cfg, 1, 12, 1, 4);
    ragged.push_back(other[0]);
    EXPECT_THROW(attention_similarity(dense, ragged), InputError);

    TransformerModel shared = build_student(dense, SharingPlan::from_sources({0, 0}));
    EXPECT_THROW(attention_similarity(shared, random_samples(cfg, 2, 8, 1, 5)), InputError);
}

TEST(Selection, WorkedExampleFromFigure) {
    SelectionResult r = select_unchanged_layers(std::vector<double>{0.20, 0.85, 0.90, 0.92, 0.30});
    EXPECT_FALSE(r.degenerate);
    EXPECT_EQ(r.unchanged, (std::vector<int>{0, 4}));
    EXPECT_TRUE(r.violations.empty());
}

TEST(Selection, PrefixExample) {
    SelectionResult r = select_unchanged_layers(std::vector<double>{0.2, 0.21, 0.9, 0.91});
    EXPECT_EQ(r.unchanged, (std::vector<int>{0, 1}));
}

TEST(Selection, AllEqualIsDegenerate) {
    SelectionResult r = select_unchanged_layers(std::vector<double>{0.5, 0.5, 0.5, 0.5});
    EXPECT_TRUE(r.degenerate);
    EXPECT_TRUE(r.unchanged.empty());
}

TEST(Selection, ViolationsAreReportedNotIncluded) {
    // layer 2 sits on the low-similarity side but is neither prefix nor suffix
    SelectionResult r = select_unchanged_layers(std::vector<double>{0.2, 0.9, 0.25, 0.92, 0.3});
    EXPECT_EQ(r.unchanged, (std::vector<int>{0, 4}));
    EXPECT_EQ(r.violations, (std::vector<int>{2}));
}

TEST(Selection, TiesBreakByLowerLayerIndex) {
    SelectionResult r = select_unchanged_layers(std::vector<double>{0.5, 0.2, 0.2, 0.9});
    EXPECT_EQ(r.unchanged, (std::vector<int>{0, 1, 2}));
    EXPECT_THROW(select_unchanged_layers(std::vector<double>{0.5}), ContractError);
}

TEST(BuildPlan, WorkedExample) {
    SharingPlan p = build_plan({0, 5}, 6, 2);
    EXPECT_EQ(p.source_of, (std::vector<int>{0, 1, 1, 3, 3, 5}));
    EXPECT_DOUBLE_EQ(p.sharing_ratio(), 2.0 / 6.0);
    EXPECT_EQ(p.k, 2);
    EXPECT_EQ(p.b, 1);
}

TEST(BuildPlan, AllUnchangedIsIdentity) {
    SharingPlan p = build_plan({0, 1, 2, 3}, 4, 2);
    EXPECT_TRUE(p.is_identity());
    EXPECT_DOUBLE_EQ(p.sharing_ratio(), 0.0);
}

TEST(BuildPlan, ContractAndSegments) {
    EXPECT_THROW(build_plan({0}, 4, 1), ContractError);
    // runs never span an unchanged layer
    SharingPlan p = build_plan({0, 3}, 6, 3);
    EXPECT_EQ(p.source_of, (std::vector<int>{0, 1, 1, 3, 4, 4}));
    // trailing run of length 1 stays unshared
    SharingPlan q = build_plan({0}, 4, 2);
    EXPECT_EQ(q.source_of, (std::vector<int>{0, 1, 1, 3}));
    EXPECT_TRUE(q.is_root(3));
}

TEST(BuildPlan, ForcedEarlySkip) {
    SharingPlan p = build_plan({}, 6, 2, 2);
    EXPECT_EQ(p.source_of, (std::vector<int>{0, 1, 2, 2, 4, 4}));
    EXPECT_EQ(p.b, 2);
}

TEST(Report, JsonRoundTripAndCsv) {
    namespace fs = std::filesystem;
    ModelConfig cfg = toy_config(3);
    TransformerModel m = TransformerModel::init(cfg, SharingPlan::identity(3), 36);
    SimilarityReport r = attention_similarity(m, random_samples(cfg, 3, 8, 1, 11));
    SimilarityReport rt = report_from_json(report_to_json(r));
    EXPECT_EQ(rt.n_layers, r.n_layers);
    EXPECT_EQ(rt.pairwise, r.pairwise);
    EXPECT_EQ(rt.per_layer_avg, r.per_layer_avg);
    EXPECT_EQ(rt.n_samples, r.n_samples);

    fs::path dir = fs::temp_directory_path() / "echoatt_analysis_test";
    fs::create_directories(dir);
    write_pairwise_csv((dir / "p.csv").string(), r);
    write_per_layer_csv((dir / "a.csv").string(), r);
    std::ifstream pcsv(dir / "p.csv");
    std::string line;
    std::getline(pcsv, line);
    EXPECT_EQ(line, "layer_i,layer_j,cosine");
    int rows = 0;
    while (std::getline(pcsv, line)) ++rows;
    EXPECT_EQ(rows, 3);  // upper triangle of a 3x3
    fs::remove_all(dir);
}
