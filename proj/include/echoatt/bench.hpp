#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "echoatt/distill.hpp"
#include "echoatt/model.hpp"
#include "echoatt/optim.hpp"
#include "echoatt/rng.hpp"

namespace echoatt {

// Analytic forward FLOPs per layer for one sequence (batch 1). Multiplies and
// adds count separately (2 FLOPs per multiply-accumulate); attention terms
// use the causal pair count T = s(s+1)/2. Sharing layers skip the Q/K
// projections, their rotary embedding, the score matmul and the softmax.
struct FlopsBreakdown {
    double q_proj = 0, k_proj = 0, v_proj = 0, o_proj = 0;
    double rope = 0, scores = 0, softmax = 0, weighted_sum = 0;
    double mlp = 0, norms = 0;

    double total() const {
        return q_proj + k_proj + v_proj + o_proj + rope + scores + softmax + weighted_sum + mlp + norms;
    }
};

inline FlopsBreakdown layer_flops(const ModelConfig& cfg, int seq, bool root) {
    double s = seq;
    double d = cfg.d_model;
    double kvw = cfg.kv_width();
    double f = cfg.d_ff;
    double h = cfg.n_heads;
    double t = s * (s + 1.0) / 2.0;  // causal (query, key) pairs

    FlopsBreakdown fb;
    fb.v_proj = 2.0 * s * d * kvw;
    fb.o_proj = 2.0 * s * d * d;
    fb.weighted_sum = 2.0 * t * d;
    fb.mlp = 3.0 * 2.0 * s * d * f   // gate, up, down matmuls
             + 5.0 * s * f           // silu
             + s * f;                // gate multiply
    fb.norms = 2.0 * 4.0 * s * d;    // two rmsnorms
    if (root) {
        fb.q_proj = 2.0 * s * d * d;
        fb.k_proj = 2.0 * s * d * kvw;
        fb.rope = 3.0 * s * (d + kvw);
        fb.scores = 2.0 * t * d + t * h;  // dot products plus the 1/sqrt(d) scale
        fb.softmax = 4.0 * t * h;         // max, exp, sum, divide per scored entry
    }
    return fb;
}

// (baseline, shared) analytic forward FLOPs for one sequence, including the
// final norm and vocabulary projection.
inline std::pair<double, double> analytic_flops(const ModelConfig& cfg, const SharingPlan& plan, int seq) {
    if (plan.n_layers() != cfg.n_layers) throw ContractError("analytic_flops: plan/config layer count mismatch");
    double s = seq;
    double head = 4.0 * s * cfg.d_model + 2.0 * s * cfg.d_model * cfg.vocab_size;
    double baseline = head, shared = head;
    for (int j = 0; j < cfg.n_layers; ++j) {
        baseline += layer_flops(cfg, seq, true).total();
        shared += layer_flops(cfg, seq, plan.is_root(j)).total();
    }
    return {baseline, shared};
}

struct ThroughputResult {
    double median_tps = 0.0;
    double q25_tps = 0.0;
    double q75_tps = 0.0;
    int repeats = 0;
};

inline void to_json(json& j, const ThroughputResult& t) {
    j = json{{"median_tokens_per_sec", t.median_tps},
             {"iqr_low", t.q25_tps},
             {"iqr_high", t.q75_tps},
             {"repeats", t.repeats}};
}

namespace detail {
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return 0.0;
    double pos = q * static_cast<double>(sorted.size() - 1);
    size_t lo = static_cast<size_t>(pos);
    size_t hi = std::min(lo + 1, sorted.size() - 1);
    double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}
}  // namespace detail

// Median tokens/sec of full-sequence no-grad forwards after two warmup runs.
// Single worker pinning is the caller's responsibility (the CLI forbids
// concurrent benchmark runs in one process).
inline ThroughputResult measure_throughput(const TransformerModel& model, int seq_len, int batch, int repeats,
                                           uint64_t seed = 1234) {
    if (repeats < 5) throw ContractError("measure_throughput: repeats must be >= 5");
    Rng rng = Rng::from_label(seed, "bench/tokens");
    TokenBatch tokens;
    tokens.batch = batch;
    tokens.seq = seq_len;
    tokens.ids.resize(static_cast<size_t>(batch) * seq_len);
    for (int& id : tokens.ids) id = static_cast<int>(rng.next_below(static_cast<uint64_t>(model.config.vocab_size)));

    NoGradScope no_grad;
    for (int i = 0; i < 2; ++i) model.forward(tokens, TraceMode::kNone);

    std::vector<double> tps;
    tps.reserve(static_cast<size_t>(repeats));
    for (int i = 0; i < repeats; ++i) {
        auto t0 = std::chrono::steady_clock::now();
        model.forward(tokens, TraceMode::kNone);
        auto t1 = std::chrono::steady_clock::now();
        double dt = std::chrono::duration<double>(t1 - t0).count();
        tps.push_back(static_cast<double>(batch) * seq_len / dt);
    }
    std::sort(tps.begin(), tps.end());
    ThroughputResult r;
    r.repeats = repeats;
    r.median_tps = detail::quantile_sorted(tps, 0.5);
    r.q25_tps = detail::quantile_sorted(tps, 0.25);
    r.q75_tps = detail::quantile_sorted(tps, 0.75);
    return r;
}

struct TrainStepTiming {
    double median_sec = 0.0;
    double q25_sec = 0.0;
    double q75_sec = 0.0;
    int repeats = 0;
};

inline void to_json(json& j, const TrainStepTiming& t) {
    j = json{{"median_sec_per_step", t.median_sec}, {"iqr_low", t.q25_sec}, {"iqr_high", t.q75_sec},
             {"repeats", t.repeats}};
}

// Median seconds per training step. With a teacher the step is a Stage-1
// distillation step (teacher forward included); without, a pure next-token
// training step. Both variants are reported because the paper does not state
// which one its training speedups include.
inline TrainStepTiming measure_train_step(TransformerModel& model, const TransformerModel* teacher, int seq_len,
                                          int batch, int repeats, uint64_t seed = 1234) {
    if (repeats < 5) throw ContractError("measure_train_step: repeats must be >= 5");
    Rng rng = Rng::from_label(seed, "bench/train-tokens");
    Batch b;
    b.tokens.batch = batch;
    b.tokens.seq = seq_len;
    b.tokens.ids.resize(static_cast<size_t>(batch) * seq_len);
    b.targets.resize(b.tokens.ids.size());
    for (int& id : b.tokens.ids) id = static_cast<int>(rng.next_below(static_cast<uint64_t>(model.config.vocab_size)));
    for (int& id : b.targets) id = static_cast<int>(rng.next_below(static_cast<uint64_t>(model.config.vocab_size)));

    AdamWConfig ocfg;
    ocfg.lr_peak = 0.0;  // timing only; keep weights fixed
    AdamW opt(model.named_parameters(), ocfg);
    DistillConfig dcfg;

    auto run_once = [&] {
        if (teacher) {
            stage1_step(model, *teacher, b, dcfg, opt, 0.0);
        } else {
            stage2_step(model, b, opt, 0.0);
        }
    };
    for (int i = 0; i < 2; ++i) run_once();
    std::vector<double> secs;
    secs.reserve(static_cast<size_t>(repeats));
    for (int i = 0; i < repeats; ++i) {
        auto t0 = std::chrono::steady_clock::now();
        run_once();
        auto t1 = std::chrono::steady_clock::now();
        secs.push_back(std::chrono::duration<double>(t1 - t0).count());
    }
    std::sort(secs.begin(), secs.end());
    TrainStepTiming t;
    t.repeats = repeats;
    t.median_sec = detail::quantile_sorted(secs, 0.5);
    t.q25_sec = detail::quantile_sorted(secs, 0.25);
    t.q75_sec = detail::quantile_sorted(secs, 0.75);
    return t;
}

struct BenchReport {
    json config_summary;
    int64_t params_baseline = 0;
    int64_t params_student = 0;
    int64_t params_removed = 0;
    double removed_percent = 0.0;
    double flops_baseline = 0.0;
    double flops_shared = 0.0;
    ThroughputResult tps_baseline, tps_student;
    double inference_speedup = 0.0;
    TrainStepTiming train_baseline_pure, train_student_pure;
    TrainStepTiming train_student_distill;
    int seq_len = 0, batch = 0, repeats = 0;
};

inline void to_json(json& j, const BenchReport& r) {
    j = json{{"config", r.config_summary},
             {"params", {{"baseline", r.params_baseline},
                         {"student", r.params_student},
                         {"removed", r.params_removed},
                         {"removed_percent", r.removed_percent}}},
             {"analytic_flops_per_seq", {{"baseline", r.flops_baseline},
                                          {"shared", r.flops_shared},
                                          {"savings_percent",
                                           r.flops_baseline > 0.0
                                               ? 100.0 * (1.0 - r.flops_shared / r.flops_baseline)
                                               : 0.0}}},
             {"inference", {{"baseline", r.tps_baseline},
                            {"student", r.tps_student},
                            {"speedup_percent", r.inference_speedup}}},
             {"training", {{"baseline_pure", r.train_baseline_pure},
                           {"student_pure", r.train_student_pure},
                           {"student_distill", r.train_student_distill}}},
             {"seq_len", r.seq_len},
             {"batch", r.batch},
             {"repeats", r.repeats}};
}

inline BenchReport run_bench(const TransformerModel& baseline, const TransformerModel& student, int seq_len,
                             int batch, int repeats, uint64_t seed) {
    if (baseline.config.d_model != student.config.d_model || baseline.config.n_layers != student.config.n_layers ||
        baseline.config.n_heads != student.config.n_heads || baseline.config.vocab_size != student.config.vocab_size) {
        throw InputError("bench: baseline and student architectures differ");
    }
    BenchReport r;
    r.seq_len = seq_len;
    r.batch = batch;
    r.repeats = repeats;
    r.config_summary = json{{"model", baseline.config}, {"plan", student.plan}};
    r.params_baseline = baseline.parameter_count();
    r.params_student = student.parameter_count();
    r.params_removed = removed_parameters(student.config, student.plan);
    r.removed_percent = 100.0 * static_cast<double>(r.params_removed) / static_cast<double>(r.params_baseline);
    auto [fb, fs] = analytic_flops(student.config, student.plan, seq_len);
    r.flops_baseline = fb;
    r.flops_shared = fs;
    r.tps_baseline = measure_throughput(baseline, seq_len, batch, repeats, seed);
    r.tps_student = measure_throughput(student, seq_len, batch, repeats, seed);
    r.inference_speedup = 100.0 * (r.tps_student.median_tps / r.tps_baseline.median_tps - 1.0);

    TransformerModel base_copy = build_student(baseline, SharingPlan::identity(baseline.config.n_layers));
    TransformerModel stud_copy = build_student(baseline, student.plan);
    r.train_baseline_pure = measure_train_step(base_copy, nullptr, seq_len, batch, repeats, seed);
    r.train_student_pure = measure_train_step(stud_copy, nullptr, seq_len, batch, repeats, seed);
    r.train_student_distill = measure_train_step(stud_copy, &baseline, seq_len, batch, repeats, seed);
    return r;
}

}  // namespace echoatt
