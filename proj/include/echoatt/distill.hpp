#pragma once

#include <chrono>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "echoatt/data.hpp"
#include "echoatt/model.hpp"
#include "echoatt/optim.hpp"

namespace echoatt {

struct DistillConfig {
    double alpha = 0.25;
    double beta = 0.25;
    double gamma = 0.5;
    int k = 2;
    int b = 0;
    double stage1_epochs = 1.0;
    double stage2_epochs = 0.25;
    KlDirection kl_direction = KlDirection::kStudentTeacher;

    void validate() const {
        if (alpha < 0.0 || beta < 0.0 || gamma < 0.0) throw ConfigError("distill: loss weights must be nonnegative");
        if (alpha + beta + gamma <= 0.0) throw ConfigError("distill: alpha + beta + gamma must be > 0");
        if (stage1_epochs < 0.0 || stage2_epochs < 0.0) throw ConfigError("distill: epochs must be nonnegative");
    }
};

struct StepRecord {
    int64_t step = 0;
    int stage = 0;
    double loss_i = 0.0;
    double loss_s = 0.0;
    double loss_h = 0.0;
    double total = 0.0;
    double lr = 0.0;
    double tokens_per_sec = 0.0;
};

inline void to_json(json& j, const StepRecord& r) {
    j = json{{"step", r.step},   {"stage", r.stage}, {"loss_i", r.loss_i},
             {"loss_s", r.loss_s}, {"loss_h", r.loss_h}, {"total", r.total},
             {"lr", r.lr},       {"tokens_per_sec", r.tokens_per_sec}};
}

// Streams one JSON object per line: a config header, then per-step records,
// then a final summary.
class TrainReportWriter {
public:
    TrainReportWriter() = default;

    void open(const std::string& path, const json& config_echo) {
        out_.open(path, std::ios::trunc);
        if (!out_) throw IoError("cannot open " + path + " for writing");
        out_ << json{{"config", config_echo}}.dump() << "\n";
    }

    void write(const StepRecord& r) {
        if (!out_.is_open()) return;
        out_ << json(r).dump() << "\n";
    }

    void write_final(double val_perplexity) {
        if (!out_.is_open()) return;
        out_ << json{{"final_perplexity", val_perplexity}}.dump() << "\n";
        out_.flush();
    }

private:
    std::ofstream out_;
};

// Alignment points for the intermediate loss: the last layer of every shared
// run (a root together with its consumers).
inline std::vector<int> alignment_points(const SharingPlan& plan) {
    std::map<int, int> last_consumer;
    for (int j = 0; j < plan.n_layers(); ++j) {
        int src = plan.source_of[static_cast<size_t>(j)];
        if (src != j) last_consumer[src] = j;
    }
    std::vector<int> points;
    points.reserve(last_consumer.size());
    for (const auto& [root, last] : last_consumer) points.push_back(last);
    std::sort(points.begin(), points.end());
    return points;
}

// Mean over shared-run boundary layers of the MSE between student and teacher
// hidden states. Returns 0 (and sets *vacuous) when the plan has no shared
// runs.
inline Tensor intermediate_loss(const ForwardTrace& student, const ForwardTrace& teacher, const SharingPlan& plan,
                                bool* vacuous = nullptr) {
    std::vector<int> points = alignment_points(plan);
    if (vacuous) *vacuous = points.empty();
    if (points.empty()) return Tensor::scalar(0.0);
    if (student.hidden.size() != static_cast<size_t>(plan.n_layers()) ||
        teacher.hidden.size() != static_cast<size_t>(plan.n_layers())) {
        throw ContractError("intermediate_loss: traces must expose hidden states for every layer");
    }
    Tensor acc = Tensor::scalar(0.0);
    for (int p : points) {
        acc = add(acc, mse(student.hidden[static_cast<size_t>(p)], teacher.hidden[static_cast<size_t>(p)]));
    }
    return scale(acc, 1.0 / static_cast<double>(points.size()));
}

// KL between student and teacher soft label distributions, averaged over
// batch x seq positions. The teacher term is a constant.
inline Tensor soft_label_loss(const Tensor& student_logits, const Tensor& teacher_logits,
                              KlDirection dir = KlDirection::kStudentTeacher) {
    return kl_divergence(student_logits, teacher_logits, dir);
}

// Cross-entropy of the student distribution against argmax-of-teacher labels;
// ties break toward the lowest vocab index.
inline Tensor hard_label_loss(const Tensor& student_logits, const Tensor& teacher_logits) {
    if (student_logits.shape() != teacher_logits.shape()) {
        throw DimensionError("hard_label_loss: shape mismatch " + shape_str(student_logits.shape()) + " vs " +
                             shape_str(teacher_logits.shape()));
    }
    return cross_entropy(student_logits, argmax_last(teacher_logits));
}

namespace detail {
inline double now_seconds() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch()).count();
}
}  // namespace detail

// One Stage-1 distillation step: teacher pseudo-labels, three-component loss,
// backward through the student only, optimizer update.
inline StepRecord stage1_step(TransformerModel& student, const TransformerModel& teacher, const Batch& batch,
                              const DistillConfig& cfg, AdamW& opt, double lr) {
    double t0 = detail::now_seconds();
    bool need_hidden = !alignment_points(student.plan).empty();
    ForwardResult teacher_res;
    {
        NoGradScope no_grad;
        teacher_res = teacher.forward(batch.tokens, need_hidden ? TraceMode::kFull : TraceMode::kNone);
    }
    Tape tape;
    StepRecord rec;
    {
        TapeScope scope(tape);
        ForwardResult student_res = student.forward(batch.tokens, need_hidden ? TraceMode::kFull : TraceMode::kNone);
        bool vacuous = false;
        Tensor li = need_hidden ? intermediate_loss(student_res.trace, teacher_res.trace, student.plan, &vacuous)
                                : Tensor::scalar(0.0);
        Tensor ls = soft_label_loss(student_res.logits, teacher_res.logits, cfg.kl_direction);
        Tensor lh = hard_label_loss(student_res.logits, teacher_res.logits);
        Tensor total = add(add(scale(li, cfg.alpha), scale(ls, cfg.beta)), scale(lh, cfg.gamma));
        student.zero_grad();
        tape.backward(total);
        rec.loss_i = li.value();
        rec.loss_s = ls.value();
        rec.loss_h = lh.value();
        rec.total = total.value();
    }
    opt.step(lr);
    rec.stage = 1;
    rec.lr = lr;
    double dt = detail::now_seconds() - t0;
    rec.tokens_per_sec = dt > 0.0 ? static_cast<double>(batch.tokens.batch) * batch.tokens.seq / dt : 0.0;
    return rec;
}

// One Stage-2 (or plain pretraining) step: next-token cross-entropy on true
// labels, optimizer update.
inline StepRecord stage2_step(TransformerModel& model, const Batch& batch, AdamW& opt, double lr) {
    double t0 = detail::now_seconds();
    Tape tape;
    StepRecord rec;
    {
        TapeScope scope(tape);
        ForwardResult res = model.forward(batch.tokens, TraceMode::kNone);
        Tensor loss = cross_entropy(res.logits, batch.targets);
        model.zero_grad();
        tape.backward(loss);
        rec.loss_h = loss.value();
        rec.total = loss.value();
    }
    opt.step(lr);
    rec.stage = 2;
    rec.lr = lr;
    double dt = detail::now_seconds() - t0;
    rec.tokens_per_sec = dt > 0.0 ? static_cast<double>(batch.tokens.batch) * batch.tokens.seq / dt : 0.0;
    return rec;
}

inline int64_t steps_for_epochs(double epochs, size_t batches_per_epoch) {
    double steps = epochs * static_cast<double>(batches_per_epoch);
    int64_t n = static_cast<int64_t>(steps + 0.5);
    if (epochs > 0.0 && n == 0) n = 1;
    return n;
}

// Mean next-token cross-entropy over all full windows of a stream, reported
// as exp(mean) perplexity.
inline double evaluate_perplexity(const TransformerModel& model, const std::vector<int>& stream, int seq_len,
                                  int batch_size) {
    BatchPlan plan;
    plan.seq_len = seq_len;
    plan.batch_size = 1;
    plan.shuffle = false;
    BatchStream windows(stream, plan);
    size_t n = windows.windows_per_epoch();
    NoGradScope no_grad;
    double total_loss = 0.0;
    int64_t total_rows = 0;
    for (size_t start = 0; start < n; start += static_cast<size_t>(batch_size)) {
        size_t rows = std::min(static_cast<size_t>(batch_size), n - start);
        Batch merged;
        merged.tokens.batch = static_cast<int>(rows);
        merged.tokens.seq = seq_len;
        for (size_t r = 0; r < rows; ++r) {
            Batch one = windows.get(0, start + r);
            merged.tokens.ids.insert(merged.tokens.ids.end(), one.tokens.ids.begin(), one.tokens.ids.end());
            merged.targets.insert(merged.targets.end(), one.targets.begin(), one.targets.end());
        }
        ForwardResult res = model.forward(merged.tokens, TraceMode::kNone);
        double loss = cross_entropy(res.logits, merged.targets).value();
        total_loss += loss * static_cast<double>(rows);
        total_rows += static_cast<int64_t>(rows);
    }
    return std::exp(total_loss / static_cast<double>(total_rows));
}

// Full two-stage distillation run over a training stream. Each stage runs its
// own warmup+cosine schedule sized by its epoch fraction.
struct DistillRunResult {
    int64_t stage1_steps = 0;
    int64_t stage2_steps = 0;
    double final_val_perplexity = 0.0;
};

inline DistillRunResult distill_run(TransformerModel& student, const TransformerModel& teacher,
                                    const BatchStream& train, const std::vector<int>& val_stream,
                                    const DistillConfig& cfg, const AdamWConfig& opt_cfg, double warmup_ratio,
                                    TrainReportWriter* writer) {
    cfg.validate();
    size_t bpe = train.batches_per_epoch();
    int64_t steps1 = steps_for_epochs(cfg.stage1_epochs, bpe);
    int64_t steps2 = steps_for_epochs(cfg.stage2_epochs, bpe);
    DistillRunResult result;
    result.stage1_steps = steps1;
    result.stage2_steps = steps2;

    AdamW opt(student.named_parameters(), opt_cfg);
    int64_t global_step = 0;
    if (steps1 > 0) {
        Schedule sched{steps1, warmup_ratio, opt_cfg.lr_peak};
        for (int64_t s = 0; s < steps1; ++s) {
            Batch batch = train.get(static_cast<size_t>(s) / bpe, static_cast<size_t>(s) % bpe);
            StepRecord rec = stage1_step(student, teacher, batch, cfg, opt, lr_at(sched, s));
            rec.step = global_step++;
            if (writer) writer->write(rec);
        }
    }
    if (steps2 > 0) {
        Schedule sched{steps2, warmup_ratio, opt_cfg.lr_peak};
        for (int64_t s = 0; s < steps2; ++s) {
            Batch batch = train.get(static_cast<size_t>(s) / bpe, static_cast<size_t>(s) % bpe);
            StepRecord rec = stage2_step(student, batch, opt, lr_at(sched, s));
            rec.step = global_step++;
            if (writer) writer->write(rec);
        }
    }
    if (!val_stream.empty() && static_cast<int64_t>(val_stream.size()) > train.plan().seq_len) {
        result.final_val_perplexity =
            evaluate_perplexity(student, val_stream, train.plan().seq_len, train.plan().batch_size);
    }
    if (writer) writer->write_final(result.final_val_perplexity);
    return result;
}

// Plain next-token pretraining of a dense model (the teacher the paper
// assumes as given).
inline double pretrain_run(TransformerModel& model, const BatchStream& train, const std::vector<int>& val_stream,
                           double epochs, const AdamWConfig& opt_cfg, double warmup_ratio,
                           TrainReportWriter* writer) {
    size_t bpe = train.batches_per_epoch();
    int64_t steps = steps_for_epochs(epochs, bpe);
    AdamW opt(model.named_parameters(), opt_cfg);
    Schedule sched{steps, warmup_ratio, opt_cfg.lr_peak};
    for (int64_t s = 0; s < steps; ++s) {
        Batch batch = train.get(static_cast<size_t>(s) / bpe, static_cast<size_t>(s) % bpe);
        StepRecord rec = stage2_step(model, batch, opt, lr_at(sched, s));
        rec.step = s;
        if (writer) writer->write(rec);
    }
    double ppl = 0.0;
    if (!val_stream.empty() && static_cast<int64_t>(val_stream.size()) > train.plan().seq_len) {
        ppl = evaluate_perplexity(model, val_stream, train.plan().seq_len, train.plan().batch_size);
    }
    if (writer) writer->write_final(ppl);
    return ppl;
}

}  // namespace echoatt
