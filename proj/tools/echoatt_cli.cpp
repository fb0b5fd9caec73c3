// Command-line entry point wiring the toolkit into one workflow:
// train a dense teacher, analyze cross-layer attention similarity, build a
// sharing plan, distill a shared-attention student, evaluate, and benchmark.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "echoatt/analysis.hpp"
#include "echoatt/bench.hpp"
#include "echoatt/checkpoint.hpp"
#include "echoatt/config.hpp"
#include "echoatt/data.hpp"
#include "echoatt/distill.hpp"
#include "echoatt/model.hpp"
#include "echoatt/optim.hpp"
#include "echoatt/thread_pool.hpp"

namespace fs = std::filesystem;
using namespace echoatt;
using nlohmann::json;

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_override;
    int workers = 0;
};

RunConfig prepare(const CommonOpts& opts) {
    RunConfig cfg = load_config(opts.config_path);
    if (const char* env = std::getenv("ECHOATT_SEED")) {
        try {
            cfg.seed = std::stoull(env);
        } catch (const std::exception&) {
            throw ConfigError(std::string("ECHOATT_SEED is not an integer: ") + env);
        }
    }
    if (!opts.out_override.empty()) cfg.out = opts.out_override;
    if (opts.workers > 0) cfg.workers = opts.workers;
    int w = cfg.workers > 0 ? cfg.workers : static_cast<int>(std::thread::hardware_concurrency());
    set_workers(w > 0 ? w : 1);
    fs::create_directories(cfg.out);
    return cfg;
}

Corpus load_corpus_for(const RunConfig& cfg) {
    if (cfg.data.path.empty()) throw ConfigError("config has no data.path");
    Corpus c = load_corpus(cfg.data.path, cfg.data.mode, cfg.data.vocab_file, cfg.data.val_fraction, cfg.seed);
    if (c.vocab_size > cfg.model.vocab_size) {
        throw InputError("corpus vocab size " + std::to_string(c.vocab_size) + " exceeds model vocab_size " +
                         std::to_string(cfg.model.vocab_size));
    }
    return c;
}

std::string out_path(const RunConfig& cfg, const std::string& name) {
    return (fs::path(cfg.out) / name).string();
}

void write_json_file(const std::string& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << j.dump(2) << "\n";
}

std::vector<int> parse_index_list(const std::string& s) {
    std::vector<int> out;
    std::string cur;
    for (char c : s) {
        if (c == ',' || c == ' ') {
            if (!cur.empty()) {
                out.push_back(std::stoi(cur));
                cur.clear();
            }
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(std::stoi(cur));
    return out;
}

std::string ratio_label(double ratio) {
    return "paper-" + std::to_string(static_cast<int>(std::lround(ratio * 100.0))) + "%";
}

int cmd_train_teacher(const CommonOpts& opts) {
    RunConfig cfg = prepare(opts);
    Corpus corpus = load_corpus_for(cfg);
    TransformerModel teacher =
        TransformerModel::init(cfg.model, SharingPlan::identity(cfg.model.n_layers), cfg.seed);
    BatchPlan bp{cfg.data.seq_len, cfg.data.batch_size, cfg.seed, true};
    BatchStream train(corpus.train_tokens, bp);
    TrainReportWriter writer;
    writer.open(out_path(cfg, "train.ndjson"), json(cfg));
    double ppl = pretrain_run(teacher, train, corpus.val_tokens, cfg.train.epochs, cfg.adamw_config(),
                              cfg.optim.warmup_ratio, &writer);
    std::string ckpt = out_path(cfg, "teacher.ckpt");
    save_checkpoint(ckpt, teacher);
    json summary{{"teacher_checkpoint", ckpt},
                 {"val_perplexity", ppl},
                 {"steps", steps_for_epochs(cfg.train.epochs, train.batches_per_epoch())},
                 {"train_tokens", static_cast<int64_t>(corpus.train_tokens.size())},
                 {"val_tokens", static_cast<int64_t>(corpus.val_tokens.size())}};
    std::cout << summary.dump(2) << std::endl;
    return 0;
}

int cmd_analyze(const CommonOpts& opts, const std::string& checkpoint) {
    RunConfig cfg = prepare(opts);
    TransformerModel model = load_checkpoint(checkpoint);
    if (!model.plan.is_identity()) {
        throw InputError("analyze requires a dense checkpoint (identity plan)");
    }
    Corpus corpus = load_corpus_for(cfg);
    int seq = cfg.analysis.seq_len;
    const std::vector<int>& stream = corpus.train_tokens;
    size_t windows = stream.size() / static_cast<size_t>(seq);
    if (windows < static_cast<size_t>(cfg.analysis.n_samples)) {
        throw InputError("corpus provides " + std::to_string(windows) + " analysis windows, need " +
                         std::to_string(cfg.analysis.n_samples));
    }
    std::vector<TokenBatch> samples;
    int remaining = cfg.analysis.n_samples;
    size_t w = 0;
    while (remaining > 0) {
        int rows = std::min(remaining, cfg.analysis.batch_size);
        TokenBatch tb;
        tb.batch = rows;
        tb.seq = seq;
        for (int r = 0; r < rows; ++r, ++w) {
            size_t begin = w * static_cast<size_t>(seq);
            tb.ids.insert(tb.ids.end(), stream.begin() + static_cast<long>(begin),
                          stream.begin() + static_cast<long>(begin + static_cast<size_t>(seq)));
        }
        samples.push_back(std::move(tb));
        remaining -= rows;
    }
    SimilarityReport report = attention_similarity(model, samples);
    write_json_file(out_path(cfg, "report.json"), report_to_json(report));
    write_pairwise_csv(out_path(cfg, "report_pairwise.csv"), report);
    write_per_layer_csv(out_path(cfg, "report_per_layer.csv"), report);
    json summary{{"report", out_path(cfg, "report.json")},
                 {"n_samples", report.n_samples},
                 {"seq_len", report.seq_len},
                 {"per_layer_avg", report.per_layer_avg}};
    std::cout << summary.dump(2) << std::endl;
    return 0;
}

int cmd_plan(const CommonOpts& opts, const std::string& report_path, int k_flag,
             const std::string& indices_flag) {
    RunConfig cfg = prepare(opts);
    SharingPlan plan;
    json extra;
    std::vector<int> indices = cfg.plan.indices;
    if (!indices_flag.empty()) indices = parse_index_list(indices_flag);
    bool explicit_mode = !indices.empty() || cfg.plan.source == "explicit";
    if (explicit_mode) {
        if (indices.empty()) throw ConfigError("explicit plan requested but no indices given");
        plan = SharingPlan::from_shared_indices(cfg.model.n_layers, indices);
        extra["label"] = ratio_label(plan.sharing_ratio());
        extra["source"] = "explicit";
        extra["indices"] = indices;
    } else {
        if (report_path.empty()) throw ConfigError("auto plan requires --report <report.json>");
        std::ifstream in(report_path);
        if (!in) throw IoError("cannot open " + report_path);
        json rj;
        try {
            in >> rj;
        } catch (const json::exception& e) {
            throw InputError(std::string("bad report file: ") + e.what());
        }
        SimilarityReport report = report_from_json(rj);
        if (report.n_layers != cfg.model.n_layers) {
            throw InputError("report has " + std::to_string(report.n_layers) + " layers, config has " +
                             std::to_string(cfg.model.n_layers));
        }
        int k = k_flag > 0 ? k_flag : cfg.plan.k;
        SelectionResult sel = select_unchanged_layers(report);
        std::set<int> unchanged(sel.unchanged.begin(), sel.unchanged.end());
        plan = build_plan(unchanged, cfg.model.n_layers, k, cfg.plan.b);
        extra["label"] = "auto-k" + std::to_string(k);
        extra["source"] = "auto";
        extra["selection"] = {{"unchanged", sel.unchanged},
                              {"violations", sel.violations},
                              {"degenerate", sel.degenerate}};
    }
    json pj = plan;
    for (auto it = extra.begin(); it != extra.end(); ++it) pj[it.key()] = it.value();
    write_json_file(out_path(cfg, "plan.json"), pj);
    std::cout << pj.dump(2) << std::endl;
    return 0;
}

SharingPlan load_plan_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw InputError(std::string("bad plan file: ") + e.what());
    }
    return j.get<SharingPlan>();
}

int cmd_distill(const CommonOpts& opts, const std::string& teacher_path, const std::string& plan_path) {
    RunConfig cfg = prepare(opts);
    TransformerModel teacher = load_checkpoint(teacher_path);
    if (teacher.config.n_layers != cfg.model.n_layers || teacher.config.d_model != cfg.model.d_model ||
        teacher.config.vocab_size != cfg.model.vocab_size) {
        throw InputError("teacher checkpoint architecture does not match config");
    }
    SharingPlan plan = load_plan_file(plan_path);
    if (plan.n_layers() != teacher.config.n_layers) {
        throw InputError("plan covers " + std::to_string(plan.n_layers()) + " layers, teacher has " +
                         std::to_string(teacher.config.n_layers));
    }
    teacher.set_requires_grad(false);
    TransformerModel student = build_student(teacher, plan);
    Corpus corpus = load_corpus_for(cfg);
    BatchPlan bp{cfg.data.seq_len, cfg.data.batch_size, cfg.seed, true};
    BatchStream train(corpus.train_tokens, bp);
    DistillConfig dc = cfg.distill;
    dc.k = plan.k;
    dc.b = plan.b;
    TrainReportWriter writer;
    writer.open(out_path(cfg, "train.ndjson"), json(cfg));
    DistillRunResult res = distill_run(student, teacher, train, corpus.val_tokens, dc, cfg.adamw_config(),
                                       cfg.optim.warmup_ratio, &writer);
    std::string ckpt = out_path(cfg, "student.ckpt");
    save_checkpoint(ckpt, student);
    json summary{{"student_checkpoint", ckpt},
                 {"final_perplexity", res.final_val_perplexity},
                 {"stage1_steps", res.stage1_steps},
                 {"stage2_steps", res.stage2_steps},
                 {"sharing_ratio", plan.sharing_ratio()}};
    std::cout << summary.dump(2) << std::endl;
    return 0;
}

int cmd_eval(const CommonOpts& opts, const std::string& checkpoint) {
    RunConfig cfg = prepare(opts);
    TransformerModel model = load_checkpoint(checkpoint);
    Corpus corpus = load_corpus_for(cfg);
    if (static_cast<int64_t>(corpus.val_tokens.size()) <= cfg.data.seq_len) {
        throw InputError("validation stream too short for seq_len " + std::to_string(cfg.data.seq_len));
    }
    double ppl = evaluate_perplexity(model, corpus.val_tokens, cfg.data.seq_len, cfg.data.batch_size);
    json summary{{"perplexity", ppl},
                 {"checkpoint", checkpoint},
                 {"val_tokens", static_cast<int64_t>(corpus.val_tokens.size())}};
    write_json_file(out_path(cfg, "eval.json"), summary);
    std::cout << summary.dump(2) << std::endl;
    return 0;
}

int cmd_bench(const CommonOpts& opts, const std::string& baseline_path, const std::string& student_path) {
    RunConfig cfg = prepare(opts);
    TransformerModel baseline = load_checkpoint(baseline_path);
    TransformerModel student = load_checkpoint(student_path);
    if (!baseline.plan.is_identity()) throw InputError("bench baseline must be a dense checkpoint");
    BenchReport report =
        run_bench(baseline, student, cfg.bench.seq_len, cfg.bench.batch_size, cfg.bench.repeats, cfg.seed);
    write_json_file(out_path(cfg, "bench.json"), json(report));
    std::printf("%-28s %18s %18s\n", "metric", "baseline", "student");
    std::printf("%-28s %18lld %18lld\n", "parameters", static_cast<long long>(report.params_baseline),
                static_cast<long long>(report.params_student));
    std::printf("%-28s %18s %15.2f%%\n", "removed parameters", "-", report.removed_percent);
    std::printf("%-28s %18.3e %18.3e\n", "analytic FLOPs/seq", report.flops_baseline, report.flops_shared);
    std::printf("%-28s %18.1f %18.1f\n", "tokens/sec (median)", report.tps_baseline.median_tps,
                report.tps_student.median_tps);
    std::printf("%-28s %18s %15.2f%%\n", "inference speedup", "-", report.inference_speedup);
    std::printf("%-28s %18.4f %18.4f\n", "train sec/step (pure)", report.train_baseline_pure.median_sec,
                report.train_student_pure.median_sec);
    std::printf("%-28s %18s %18.4f\n", "train sec/step (distill)", "-", report.train_student_distill.median_sec);
    return 0;
}

// Paper Table 3 reference rows for the TinyLlama architecture: sharing label,
// shared layer count (from the appendix index lists), removed parameters and
// percentage as printed in the paper.
struct Table3Reference {
    const char* label;
    int shared_layers;
    double paper_removed;
    double paper_percent;
};
constexpr Table3Reference kTable3Rows[] = {
    {"23%", 5, 24e6, 2.14},
    {"41%", 8, 43e6, 3.86},
    {"77%", 17, 80e6, 7.29},
};

int cmd_table3(const CommonOpts& opts, bool as_json) {
    RunConfig cfg = prepare(opts);
    const ModelConfig& m = cfg.model;
    int64_t baseline = dense_parameter_count(m);
    int64_t per_layer = static_cast<int64_t>(m.d_model) * m.d_model + static_cast<int64_t>(m.d_model) * m.kv_width();
    bool tinyllama_shape = (m.n_layers == 22 && m.d_model == 2048 && m.kv_width() == 256);

    json rows = json::array();
    for (const auto& ref : kTable3Rows) {
        if (ref.shared_layers >= m.n_layers) continue;
        int64_t removed = per_layer * ref.shared_layers;
        double percent = 100.0 * static_cast<double>(removed) / static_cast<double>(baseline);
        json row{{"label", ref.label},
                 {"shared_layers", ref.shared_layers},
                 {"removed", removed},
                 {"removed_percent", percent}};
        if (tinyllama_shape) {
            bool removed_ok = std::abs(static_cast<double>(removed) - ref.paper_removed) / ref.paper_removed <= 0.05;
            bool percent_ok = std::abs(percent - ref.paper_percent) / ref.paper_percent <= 0.05;
            row["paper_removed"] = ref.paper_removed;
            row["paper_percent"] = ref.paper_percent;
            row["discrepancy"] = !(removed_ok && percent_ok);
        }
        rows.push_back(row);
    }
    json out{{"baseline_parameters", baseline}, {"removed_per_shared_layer", per_layer}, {"rows", rows}};
    if (as_json) {
        std::cout << out.dump(2) << std::endl;
        return 0;
    }
    std::printf("baseline parameters: %lld\n", static_cast<long long>(baseline));
    std::printf("removed per shared layer: %lld\n", static_cast<long long>(per_layer));
    std::printf("%-8s %8s %16s %10s", "sharing", "layers", "removed", "percent");
    if (tinyllama_shape) std::printf(" %14s %10s %12s", "paper removed", "paper %", "discrepancy");
    std::printf("\n");
    for (const auto& row : rows) {
        std::printf("%-8s %8d %16lld %9.2f%%", row["label"].get<std::string>().c_str(),
                    row["shared_layers"].get<int>(), static_cast<long long>(row["removed"].get<int64_t>()),
                    row["removed_percent"].get<double>());
        if (tinyllama_shape) {
            std::printf(" %14.0f %9.2f%% %12s", row["paper_removed"].get<double>(),
                        row["paper_percent"].get<double>(), row["discrepancy"].get<bool>() ? "FLAGGED" : "ok");
        }
        std::printf("\n");
    }
    return 0;
}

int error_code_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return 2;
    if (dynamic_cast<const IoError*>(&e)) return 3;
    if (dynamic_cast<const InputError*>(&e)) return 4;
    if (dynamic_cast<const DegenerateInputError*>(&e)) return 4;
    if (dynamic_cast<const ContractError*>(&e)) return 5;
    if (dynamic_cast<const DimensionError*>(&e)) return 5;
    return 1;
}

const char* error_type_for(const std::exception& e) {
    if (dynamic_cast<const ConfigError*>(&e)) return "ConfigError";
    if (dynamic_cast<const IoError*>(&e)) return "IoError";
    if (dynamic_cast<const InputError*>(&e)) return "InputError";
    if (dynamic_cast<const DegenerateInputError*>(&e)) return "DegenerateInputError";
    if (dynamic_cast<const ContractError*>(&e)) return "ContractError";
    if (dynamic_cast<const DimensionError*>(&e)) return "DimensionError";
    return "Error";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"EchoAtt: shared-attention transformer engine and toolkit"};
    app.require_subcommand(1);

    CommonOpts opts;
    std::string checkpoint, teacher, plan_file, report_file, baseline, student, indices;
    int k_flag = 0;
    bool as_json = false;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("config", opts.config_path, "JSON run config")->required();
        sub->add_option("--out", opts.out_override, "output directory (overrides config)");
        sub->add_option("--workers", opts.workers, "worker thread count");
    };

    CLI::App* sub_teacher = app.add_subcommand("train-teacher", "pretrain a dense teacher on the corpus");
    add_common(sub_teacher);

    CLI::App* sub_analyze = app.add_subcommand("analyze", "cross-layer attention similarity report");
    add_common(sub_analyze);
    sub_analyze->add_option("--checkpoint", checkpoint, "dense model checkpoint")->required();

    CLI::App* sub_plan = app.add_subcommand("plan", "build a sharing plan (max-gap rule or explicit indices)");
    add_common(sub_plan);
    sub_plan->add_option("--report", report_file, "similarity report JSON");
    sub_plan->add_option("--k", k_flag, "shared block size");
    sub_plan->add_option("--indices", indices, "comma-separated shared layer indices");

    CLI::App* sub_distill = app.add_subcommand("distill", "two-stage knowledge distillation of a student");
    add_common(sub_distill);
    sub_distill->add_option("--teacher", teacher, "teacher checkpoint")->required();
    sub_distill->add_option("--plan", plan_file, "sharing plan JSON")->required();

    CLI::App* sub_eval = app.add_subcommand("eval", "validation perplexity of a checkpoint");
    add_common(sub_eval);
    sub_eval->add_option("--checkpoint", checkpoint, "model checkpoint")->required();

    CLI::App* sub_bench = app.add_subcommand("bench", "parameter, FLOP and wall-clock comparison");
    add_common(sub_bench);
    sub_bench->add_option("--baseline", baseline, "dense baseline checkpoint")->required();
    sub_bench->add_option("--student", student, "shared-attention checkpoint")->required();

    CLI::App* sub_table3 = app.add_subcommand("table3", "parameter-reduction arithmetic for the paper's rows");
    add_common(sub_table3);
    sub_table3->add_flag("--json", as_json, "print JSON instead of a table");

    CLI11_PARSE(app, argc, argv);

    try {
        if (sub_teacher->parsed()) return cmd_train_teacher(opts);
        if (sub_analyze->parsed()) return cmd_analyze(opts, checkpoint);
        if (sub_plan->parsed()) return cmd_plan(opts, report_file, k_flag, indices);
        if (sub_distill->parsed()) return cmd_distill(opts, teacher, plan_file);
        if (sub_eval->parsed()) return cmd_eval(opts, checkpoint);
        if (sub_bench->parsed()) return cmd_bench(opts, baseline, student);
        if (sub_table3->parsed()) return cmd_table3(opts, as_json);
    } catch (const std::exception& e) {
        int code = error_code_for(e);
        json err{{"error", {{"type", error_type_for(e)}, {"message", e.what()}, {"code", code}}}};
        std::cerr << err.dump() << std::endl;
        return code;
    }
    return 1;
}
