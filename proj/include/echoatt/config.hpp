#pragma once

#include <cstdint>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "echoatt/data.hpp"
#include "echoatt/distill.hpp"
#include "echoatt/model.hpp"
#include "echoatt/optim.hpp"

namespace echoatt {

// One JSON document drives every command. Unknown keys are rejected so typos
// fail loudly; every cross-field constraint is checked before any work starts.
struct RunConfig {
    uint64_t seed = 42;
    std::string out = ".";
    int workers = 0;  // 0 = hardware concurrency

    ModelConfig model;

    struct Data {
        std::string path;
        TokenMode mode = TokenMode::kBytes;
        std::string vocab_file;
        int seq_len = 128;
        int batch_size = 8;
        double val_fraction = 0.05;
    } data;

    struct Train {
        double epochs = 1.0;
    } train;

    struct Plan {
        std::string source = "auto";  // "auto" | "explicit"
        int k = 2;
        int b = 0;
        std::vector<int> indices;
    } plan;

    DistillConfig distill;

    struct Optim {
        double lr_peak = 1e-4;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.0;
        double warmup_ratio = 0.005;
    } optim;

    struct Analysis {
        int n_samples = 8;
        int seq_len = 64;
        int batch_size = 8;
    } analysis;

    struct Bench {
        int seq_len = 256;
        int batch_size = 4;
        int repeats = 7;
    } bench;

    AdamWConfig adamw_config() const {
        AdamWConfig c;
        c.lr_peak = optim.lr_peak;
        c.beta1 = optim.beta1;
        c.beta2 = optim.beta2;
        c.eps = optim.eps;
        c.weight_decay = optim.weight_decay;
        return c;
    }

    void validate() const {
        model.validate();
        distill.validate();
        if (data.seq_len < 1 || data.batch_size < 1) throw ConfigError("data: seq_len and batch_size must be >= 1");
        if (data.seq_len > model.max_seq_len) {
            throw ConfigError("data.seq_len " + std::to_string(data.seq_len) + " exceeds model.max_seq_len " +
                              std::to_string(model.max_seq_len));
        }
        if (data.val_fraction < 0.0 || data.val_fraction >= 1.0) {
            throw ConfigError("data.val_fraction must lie in [0, 1)");
        }
        if (data.mode == TokenMode::kBytes && model.vocab_size < kByteVocabSize) {
            throw ConfigError("byte-mode data requires model.vocab_size >= " + std::to_string(kByteVocabSize));
        }
        if (data.mode == TokenMode::kVocab && data.vocab_file.empty()) {
            throw ConfigError("vocab-mode data requires data.vocab_file");
        }
        if (train.epochs < 0.0) throw ConfigError("train.epochs must be nonnegative");
        if (plan.source != "auto" && plan.source != "explicit") {
            throw ConfigError("plan.source must be 'auto' or 'explicit'");
        }
        if (plan.source == "auto" && plan.k < 2) throw ConfigError("plan.k must be >= 2 for auto plans");
        if (plan.b < 0 || plan.b > model.n_layers) throw ConfigError("plan.b out of range");
        for (int idx : plan.indices) {
            if (idx < 0 || idx >= model.n_layers) {
                throw ConfigError("plan.indices entry " + std::to_string(idx) + " out of range for " +
                                  std::to_string(model.n_layers) + " layers");
            }
        }
        if (optim.lr_peak < 0.0 || optim.eps <= 0.0) throw ConfigError("optim: bad lr_peak or eps");
        if (optim.beta1 < 0.0 || optim.beta1 >= 1.0 || optim.beta2 < 0.0 || optim.beta2 >= 1.0) {
            throw ConfigError("optim: betas must lie in [0, 1)");
        }
        if (optim.warmup_ratio < 0.0 || optim.warmup_ratio >= 1.0) {
            throw ConfigError("optim.warmup_ratio must lie in [0, 1)");
        }
        if (analysis.n_samples < 1 || analysis.seq_len < 1 || analysis.batch_size < 1) {
            throw ConfigError("analysis: counts must be >= 1");
        }
        if (analysis.seq_len > model.max_seq_len) {
            throw ConfigError("analysis.seq_len exceeds model.max_seq_len");
        }
        if (bench.seq_len < 1 || bench.batch_size < 1) throw ConfigError("bench: sizes must be >= 1");
        if (bench.seq_len > model.max_seq_len) throw ConfigError("bench.seq_len exceeds model.max_seq_len");
        if (bench.repeats < 5) throw ConfigError("bench.repeats must be >= 5");
        if (workers < 0) throw ConfigError("workers must be >= 0");
    }
};

namespace detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!allowed.count(it.key())) throw ConfigError("unknown key '" + it.key() + "' in " + where);
    }
}

}  // namespace detail

inline void to_json(json& j, const RunConfig& c) {
    j = json{
        {"seed", c.seed},
        {"out", c.out},
        {"workers", c.workers},
        {"model", c.model},
        {"data",
         {{"path", c.data.path},
          {"mode", c.data.mode == TokenMode::kBytes ? "bytes" : "vocab"},
          {"vocab_file", c.data.vocab_file},
          {"seq_len", c.data.seq_len},
          {"batch_size", c.data.batch_size},
          {"val_fraction", c.data.val_fraction}}},
        {"train", {{"epochs", c.train.epochs}}},
        {"plan", {{"source", c.plan.source}, {"k", c.plan.k}, {"b", c.plan.b}, {"indices", c.plan.indices}}},
        {"distill",
         {{"alpha", c.distill.alpha},
          {"beta", c.distill.beta},
          {"gamma", c.distill.gamma},
          {"stage1_epochs", c.distill.stage1_epochs},
          {"stage2_epochs", c.distill.stage2_epochs},
          {"kl_direction",
           c.distill.kl_direction == KlDirection::kStudentTeacher ? "student_teacher" : "teacher_student"}}},
        {"optim",
         {{"lr_peak", c.optim.lr_peak},
          {"beta1", c.optim.beta1},
          {"beta2", c.optim.beta2},
          {"eps", c.optim.eps},
          {"weight_decay", c.optim.weight_decay},
          {"warmup_ratio", c.optim.warmup_ratio}}},
        {"analysis",
         {{"n_samples", c.analysis.n_samples},
          {"seq_len", c.analysis.seq_len},
          {"batch_size", c.analysis.batch_size}}},
        {"bench",
         {{"seq_len", c.bench.seq_len}, {"batch_size", c.bench.batch_size}, {"repeats", c.bench.repeats}}},
    };
}

inline RunConfig config_from_json(const json& j) {
    detail::check_keys(j, {"seed", "out", "workers", "model", "data", "train", "plan", "distill", "optim",
                           "analysis", "bench"},
                       "config");
    RunConfig c;
    c.seed = j.value("seed", static_cast<uint64_t>(42));
    c.out = j.value("out", std::string("."));
    c.workers = j.value("workers", 0);

    if (!j.contains("model")) throw ConfigError("config requires a 'model' block");
    detail::check_keys(j.at("model"),
                       {"n_layers", "d_model", "n_heads", "n_kv_heads", "d_ff", "vocab_size", "max_seq_len",
                        "norm_eps"},
                       "model");
    c.model = j.at("model").get<ModelConfig>();

    if (j.contains("data")) {
        const json& d = j.at("data");
        detail::check_keys(d, {"path", "mode", "vocab_file", "seq_len", "batch_size", "val_fraction"}, "data");
        c.data.path = d.value("path", std::string());
        std::string mode = d.value("mode", std::string("bytes"));
        if (mode == "bytes") {
            c.data.mode = TokenMode::kBytes;
        } else if (mode == "vocab") {
            c.data.mode = TokenMode::kVocab;
        } else {
            throw ConfigError("data.mode must be 'bytes' or 'vocab'");
        }
        c.data.vocab_file = d.value("vocab_file", std::string());
        c.data.seq_len = d.value("seq_len", 128);
        c.data.batch_size = d.value("batch_size", 8);
        c.data.val_fraction = d.value("val_fraction", 0.05);
    }
    if (j.contains("train")) {
        detail::check_keys(j.at("train"), {"epochs"}, "train");
        c.train.epochs = j.at("train").value("epochs", 1.0);
    }
    if (j.contains("plan")) {
        const json& p = j.at("plan");
        detail::check_keys(p, {"source", "k", "b", "indices"}, "plan");
        c.plan.source = p.value("source", std::string("auto"));
        c.plan.k = p.value("k", 2);
        c.plan.b = p.value("b", 0);
        c.plan.indices = p.value("indices", std::vector<int>{});
    }
    if (j.contains("distill")) {
        const json& d = j.at("distill");
        detail::check_keys(d, {"alpha", "beta", "gamma", "stage1_epochs", "stage2_epochs", "kl_direction"},
                           "distill");
        c.distill.alpha = d.value("alpha", 0.25);
        c.distill.beta = d.value("beta", 0.25);
        c.distill.gamma = d.value("gamma", 0.5);
        c.distill.stage1_epochs = d.value("stage1_epochs", 1.0);
        c.distill.stage2_epochs = d.value("stage2_epochs", 0.25);
        std::string dir = d.value("kl_direction", std::string("student_teacher"));
        if (dir == "student_teacher") {
            c.distill.kl_direction = KlDirection::kStudentTeacher;
        } else if (dir == "teacher_student") {
            c.distill.kl_direction = KlDirection::kTeacherStudent;
        } else {
            throw ConfigError("distill.kl_direction must be 'student_teacher' or 'teacher_student'");
        }
    }
    if (j.contains("optim")) {
        const json& o = j.at("optim");
        detail::check_keys(o, {"lr_peak", "beta1", "beta2", "eps", "weight_decay", "warmup_ratio"}, "optim");
        c.optim.lr_peak = o.value("lr_peak", 1e-4);
        c.optim.beta1 = o.value("beta1", 0.9);
        c.optim.beta2 = o.value("beta2", 0.999);
        c.optim.eps = o.value("eps", 1e-8);
        c.optim.weight_decay = o.value("weight_decay", 0.0);
        c.optim.warmup_ratio = o.value("warmup_ratio", 0.005);
    }
    if (j.contains("analysis")) {
        const json& a = j.at("analysis");
        detail::check_keys(a, {"n_samples", "seq_len", "batch_size"}, "analysis");
        c.analysis.n_samples = a.value("n_samples", 8);
        c.analysis.seq_len = a.value("seq_len", 64);
        c.analysis.batch_size = a.value("batch_size", 8);
    }
    if (j.contains("bench")) {
        const json& b = j.at("bench");
        detail::check_keys(b, {"seq_len", "batch_size", "repeats"}, "bench");
        c.bench.seq_len = b.value("seq_len", 256);
        c.bench.batch_size = b.value("batch_size", 4);
        c.bench.repeats = b.value("repeats", 7);
    }
    c.validate();
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("config " + path + " is not valid JSON: " + e.what());
    }
    return config_from_json(j);
}

}  // namespace echoatt
