#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "echoatt/distill.hpp"
#include "test_util.hpp"

using namespace echoatt;
using echoatt::testing::rand_tensor;

namespace {

ModelConfig toy_config(int n_layers = 6) {
    ModelConfig cfg;
    cfg.n_layers = n_layers;
    cfg.d_model = 16;
    cfg.n_heads = 4;
    cfg.n_kv_heads = 4;
    cfg.d_ff = 24;
    cfg.vocab_size = 23;
    cfg.max_seq_len = 32;
    return cfg;
}

Batch random_batch(const ModelConfig& cfg, int batch, int seq, uint64_t seed) {
    Rng rng(seed);
    Batch b;
    b.tokens.batch = batch;
    b.tokens.seq = seq;
    for (int i = 0; i < batch * seq; ++i) {
        b.tokens.ids.push_back(static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.vocab_size))));
        b.targets.push_back(static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.vocab_size))));
    }
    return b;
}

ForwardTrace fake_trace(const SharingPlan& plan, const std::vector<Tensor>& hidden) {
    ForwardTrace t;
    t.hidden = hidden;
    t.source_of = plan.source_of;
    return t;
}

}  // namespace

TEST(AlignmentPoints, LastLayerOfEachSharedRun) {
    EXPECT_EQ(alignment_points(SharingPlan::from_sources({0, 1, 1, 3, 3, 5}, 2, 1)), (std::vector<int>{2, 4}));
    EXPECT_EQ(alignment_points(SharingPlan::from_shared_indices(22, {2, 5, 4, 3, 7})), (std::vector<int>{5, 7}));
    EXPECT_TRUE(alignment_points(SharingPlan::identity(6)).empty());
}

TEST(IntermediateLoss, ZeroWhenTracesMatch) {
    SharingPlan plan = SharingPlan::from_sources({0, 1, 1}, 2, 1);
    std::vector<Tensor> h;
    Rng rng(1);
    for (int i = 0; i < 3; ++i) h.push_back(rand_tensor({2, 4, 8}, rng, -1, 1, false));
    Tensor li = intermediate_loss(fake_trace(plan, h), fake_trace(plan, h), plan);
    EXPECT_DOUBLE_EQ(li.value(), 0.0);
}

TEST(IntermediateLoss, ConstantOffsetGivesAnalyticMse) {
    SharingPlan plan = SharingPlan::from_sources({0, 1, 1}, 2, 1);  // single alignment point: layer 2
    std::vector<Tensor> hs, ht;
    Rng rng(2);
    for (int i = 0; i < 3; ++i) {
        Tensor t = rand_tensor({2, 3, 4}, rng, -1, 1, false);
        Tensor s = t.clone();
        if (i == 2) {
            for (double& v : s.data()) v += 0.5;  // S - T = 0.5 everywhere
        }
        ht.push_back(t);
        hs.push_back(s);
    }
    Tensor li = intermediate_loss(fake_trace(plan, hs), fake_trace(plan, ht), plan);
    EXPECT_NEAR(li.value(), 0.25, 1e-12);
}

TEST(IntermediateLoss, VacuousOnIdentityPlan) {
    SharingPlan plan = SharingPlan::identity(3);
    std::vector<Tensor> h;
    Rng rng(3);
    for (int i = 0; i < 3; ++i) h.push_back(rand_tensor({1, 2, 4}, rng, -1, 1, false));
    bool vacuous = false;
    Tensor li = intermediate_loss(fake_trace(plan, h), fake_trace(plan, h), plan, &vacuous);
    EXPECT_TRUE(vacuous);
    EXPECT_DOUBLE_EQ(li.value(), 0.0);
}

TEST(IntermediateLoss, MatchesHandLoopedOracle) {
    SharingPlan plan = SharingPlan::from_sources({0, 1, 1, 3, 3, 5}, 2, 1);  // points {2, 4}
    Rng rng(4);
    std::vector<Tensor> hs, ht;
    for (int i = 0; i < 6; ++i) {
        hs.push_back(rand_tensor({2, 3, 5}, rng, -2, 2, false));
        ht.push_back(rand_tensor({2, 3, 5}, rng, -2, 2, false));
    }
    Tensor li = intermediate_loss(fake_trace(plan, hs), fake_trace(plan, ht), plan);
    double expect = 0.0;
    for (int p : {2, 4}) {
        double sum = 0.0;
        for (int64_t i = 0; i < hs[static_cast<size_t>(p)].numel(); ++i) {
            double d = hs[static_cast<size_t>(p)].data()[static_cast<size_t>(i)] -
                       ht[static_cast<size_t>(p)].data()[static_cast<size_t>(i)];
            sum += d * d;
        }
        expect += sum / static_cast<double>(hs[static_cast<size_t>(p)].numel());
    }
    expect /= 2.0;
    EXPECT_NEAR(li.value(), expect, 1e-12);
}

TEST(HardLabelLoss, ClosedFormsAndOracle) {
    // student puts probability ~1 on the teacher argmax -> ~0
    Tensor t = Tensor::from_data({1, 4}, {0.0, 3.0, 1.0, 2.0});
    Tensor s = Tensor::from_data({1, 4}, {0.0, 60.0, 0.0, 0.0});
    EXPECT_NEAR(hard_label_loss(s, t).value(), 0.0, 1e-12);

    // uniform student over V classes -> ln V
    Tensor su = Tensor::zeros({2, 16});
    Rng rng(5);
    Tensor tu = rand_tensor({2, 16}, rng, -1, 1, false);
    EXPECT_NEAR(hard_label_loss(su, tu).value(), std::log(16.0), 1e-12);

    // random pair against a hand-looped -log sigma(S)[argmax T] oracle
    Tensor sr = rand_tensor({5, 9}, rng, -2, 2, false);
    Tensor tr = rand_tensor({5, 9}, rng, -2, 2, false);
    double expect = 0.0;
    for (int r = 0; r < 5; ++r) {
        const double* trow = tr.ptr() + r * 9;
        int am = 0;
        for (int i = 1; i < 9; ++i) {
            if (trow[i] > trow[am]) am = i;
        }
        const double* srow = sr.ptr() + r * 9;
        double mx = srow[0];
        for (int i = 1; i < 9; ++i) mx = std::max(mx, srow[i]);
        double sum = 0.0;
        for (int i = 0; i < 9; ++i) sum += std::exp(srow[i] - mx);
        expect += (mx + std::log(sum)) - srow[am];
    }
    expect /= 5.0;
    EXPECT_NEAR(hard_label_loss(sr, tr).value(), expect, 1e-12);
    EXPECT_THROW(hard_label_loss(Tensor::zeros({1, 3}), Tensor::zeros({1, 4})), DimensionError);
}

TEST(SoftLabelLoss, ZeroAtEquality) {
    Rng rng(6);
    Tensor s = rand_tensor({3, 7}, rng, -2, 2, false);
    EXPECT_DOUBLE_EQ(soft_label_loss(s, s).value(), 0.0);
}

TEST(Stage1, CopyStudentIdentityPlanHasExactZeroLosses) {
    ModelConfig cfg = toy_config(4);
    TransformerModel teacher = TransformerModel::init(cfg, SharingPlan::identity(4), 51);
    teacher.set_requires_grad(false);
    TransformerModel student = build_student(teacher, SharingPlan::identity(4));
    Batch batch = random_batch(cfg, 2, 8, 52);
    AdamW opt(student.named_parameters(), AdamWConfig{});
    DistillConfig dc;
    StepRecord rec = stage1_step(student, teacher, batch, dc, opt, 0.0);
    EXPECT_EQ(rec.loss_i, 0.0);  // vacuous on the identity plan
    EXPECT_EQ(rec.loss_s, 0.0);  // identical logits, KL exactly zero
    EXPECT_GE(rec.loss_h, 0.0);  // teacher's self-CE on its own argmax
    EXPECT_TRUE(std::isfinite(rec.loss_h));
    EXPECT_NEAR(rec.total, dc.alpha * rec.loss_i + dc.beta * rec.loss_s + dc.gamma * rec.loss_h, 1e-12);
}

TEST(Stage1, WeightDegeneracyReducesToHardLabel) {
    ModelConfig cfg = toy_config(4);
    TransformerModel teacher = TransformerModel::init(cfg, SharingPlan::identity(4), 53);
    teacher.set_requires_grad(false);
    TransformerModel student = build_student(teacher, SharingPlan::from_sources({0, 1, 1, 3}));
    Batch batch = random_batch(cfg, 2, 6, 54);
    AdamW opt(student.named_parameters(), AdamWConfig{});
    DistillConfig dc;
    dc.alpha = 0.0;
    dc.beta = 0.0;
    dc.gamma = 1.0;
    StepRecord rec = stage1_step(student, teacher, batch, dc, opt, 0.0);
    EXPECT_NEAR(rec.total, rec.loss_h, 1e-12);
}

TEST(Stage1, TotalIsLinearInWeights) {
    ModelConfig cfg = toy_config(4);
    TransformerModel teacher = TransformerModel::init(cfg, SharingPlan::identity(4), 55);
    teacher.set_requires_grad(false);
    TransformerModel student = build_student(teacher, SharingPlan::from_sources({0, 1, 1, 3}));
    // perturb so every component is nonzero
    Rng pr(56);
    for (auto& [name, t] : student.named_parameters()) {
        for (double& x : t.data()) x += pr.uniform(-0.02, 0.02);
    }
    Batch batch = random_batch(cfg, 2, 6, 57);
    AdamW opt(student.named_parameters(), AdamWConfig{});
    DistillConfig dc;  // defaults [0.25, 0.25, 0.5] from the hyperparameter table
    StepRecord rec1 = stage1_step(student, teacher, batch, dc, opt, 0.0);
    DistillConfig dc2 = dc;
    dc2.alpha *= 2.0;
    dc2.beta *= 2.0;
    dc2.gamma *= 2.0;
    StepRecord rec2 = stage1_step(student, teacher, batch, dc2, opt, 0.0);
    EXPECT_NEAR(rec2.total, 2.0 * rec1.total, 1e-12);
    EXPECT_NEAR(rec1.total, 0.25 * rec1.loss_i + 0.25 * rec1.loss_s + 0.5 * rec1.loss_h, 1e-12);
}

TEST(Stage1, TeacherParametersAreUntouched) {
    ModelConfig cfg = toy_config(4);
    TransformerModel teacher = TransformerModel::init(cfg, SharingPlan::identity(4), 58);
    teacher.set_requires_grad(false);
    std::vector<std::vector<double>> before;
    for (const auto& [name, t] : teacher.named_parameters()) before.push_back(t.data());
    TransformerModel student = build_student(teacher, SharingPlan::from_sources({0, 1, 1, 3}));
    AdamW opt(student.named_parameters(), AdamWConfig{1e-3});
    DistillConfig dc;
    for (int step = 0; step < 3; ++step) {
        Batch batch = random_batch(cfg, 2, 6, 59 + static_cast<uint64_t>(step));
        stage1_step(student, teacher, batch, dc, opt, 1e-3);
    }
    size_t i = 0;
    for (const auto& [name, t] : teacher.named_parameters()) {
        EXPECT_EQ(t.data(), before[i++]) << name;  // bit-identical
    }
}

TEST(Stage2, MatchesPlainCrossEntropy) {
    ModelConfig cfg = toy_config(3);
    TransformerModel m = TransformerModel::init(cfg, SharingPlan::identity(3), 60);
    Batch batch = random_batch(cfg, 2, 7, 61);
    double direct;
    {
        NoGradScope ng;
        direct = cross_entropy(m.forward(batch.tokens).logits, batch.targets).value();
    }
    AdamW opt(m.named_parameters(), AdamWConfig{});
    StepRecord rec = stage2_step(m, batch, opt, 0.0);
    EXPECT_NEAR(rec.total, direct, 1e-12);
    EXPECT_EQ(rec.stage, 2);
}

TEST(Stage2, UniformLogitsGiveLogVocab) {
    ModelConfig cfg = toy_config(2);
    TransformerModel m = TransformerModel::init(cfg, SharingPlan::identity(2), 62);
    // zero the head: logits identically 0 -> uniform distribution
    for (double& v : m.lm_head.data()) v = 0.0;
    Batch batch = random_batch(cfg, 1, 5, 63);
    AdamW opt(m.named_parameters(), AdamWConfig{});
    StepRecord rec = stage2_step(m, batch, opt, 0.0);
    EXPECT_NEAR(rec.total, std::log(static_cast<double>(cfg.vocab_size)), 1e-12);
}

TEST(Training, LossDecreasesOnToyCorpus) {
    // 200 stage-1 steps on a tiny repeating corpus: smoothed loss must drop.
    ModelConfig cfg = toy_config(4);
    cfg.vocab_size = 257;
    TransformerModel teacher = TransformerModel::init(cfg, SharingPlan::identity(4), 64);
    teacher.set_requires_grad(false);
    TransformerModel student = build_student(teacher, SharingPlan::from_sources({0, 1, 1, 3}));
    std::string text;
    for (int i = 0; i < 60; ++i) text += "the quick brown fox jumps over the lazy dog. ";
    std::vector<int> stream = encode_bytes(text);
    BatchStream train(stream, BatchPlan{16, 4, 7, true});
    AdamW opt(student.named_parameters(), AdamWConfig{});
    DistillConfig dc;
    Schedule sched{200, 0.01, 3e-3};
    std::vector<double> losses;
    size_t bpe = train.batches_per_epoch();
    for (int64_t s = 0; s < 200; ++s) {
        Batch b = train.get(static_cast<size_t>(s) / bpe, static_cast<size_t>(s) % bpe);
        StepRecord rec = stage1_step(student, teacher, b, dc, opt, lr_at(sched, s));
        losses.push_back(rec.total);
    }
    double first = std::accumulate(losses.begin(), losses.begin() + 20, 0.0) / 20.0;
    double last = std::accumulate(losses.end() - 20, losses.end(), 0.0) / 20.0;
    EXPECT_LT(last, first);
    for (double l : losses) EXPECT_TRUE(std::isfinite(l));
}

TEST(Perplexity, NearVocabSizeAtInit) {
    ModelConfig cfg = toy_config(2);
    TransformerModel m = TransformerModel::init(cfg, SharingPlan::identity(2), 65);
    for (double& v : m.lm_head.data()) v = 0.0;
    Rng rng(66);
    std::vector<int> stream(400);
    for (int& t : stream) t = static_cast<int>(rng.next_below(static_cast<uint64_t>(cfg.vocab_size)));
    double ppl = evaluate_perplexity(m, stream, 16, 4);
    EXPECT_NEAR(ppl, static_cast<double>(cfg.vocab_size), 1e-9);
}

TEST(ReportWriter, NdjsonShape) {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "echoatt_distill_test";
    fs::create_directories(dir);
    std::string path = (dir / "train.ndjson").string();
    TrainReportWriter w;
    w.open(path, json{{"note", "test"}});
    StepRecord rec;
    rec.step = 0;
    rec.stage = 1;
    rec.loss_i = 0.5;
    rec.loss_s = 0.25;
    rec.loss_h = 1.0;
    rec.total = 0.25 * 0.5 + 0.25 * 0.25 + 0.5 * 1.0;
    rec.lr = 1e-4;
    w.write(rec);
    w.write_final(3.5);

    std::ifstream in(path);
    std::string line;
    std::getline(in, line);
    json header = json::parse(line);
    EXPECT_TRUE(header.contains("config"));
    std::getline(in, line);
    json r = json::parse(line);
    EXPECT_EQ(r["step"], 0);
    EXPECT_NEAR(r["total"].get<double>(),
                0.25 * r["loss_i"].get<double>() + 0.25 * r["loss_s"].get<double>() + 0.5 * r["loss_h"].get<double>(),
                1e-12);
    std::getline(in, line);
    EXPECT_NEAR(json::parse(line)["final_perplexity"].get<double>(), 3.5, 0.0);
    fs::remove_all(dir);
}
