#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "echoatt/ops.hpp"
#include "echoatt/rng.hpp"
#include "echoatt/tensor.hpp"

namespace echoatt {

using nlohmann::json;

// Architecture constants for a decoder-only transformer with RMSNorm, rotary
// position embeddings, grouped-query attention and a gated SiLU MLP.
struct ModelConfig {
    int n_layers = 0;
    int d_model = 0;
    int n_heads = 0;
    int n_kv_heads = 0;
    int d_ff = 0;
    int vocab_size = 0;
    int max_seq_len = 0;
    double norm_eps = 1e-5;

    int d_head() const { return d_model / n_heads; }
    int kv_width() const { return n_kv_heads * d_head(); }

    void validate() const {
        if (n_layers < 1 || d_model < 1 || n_heads < 1 || n_kv_heads < 1 || d_ff < 1 || vocab_size < 1 ||
            max_seq_len < 1) {
            throw ConfigError("model config: all counts must be >= 1");
        }
        if (d_model % n_heads != 0) {
            throw ConfigError("model config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                              std::to_string(n_heads));
        }
        if (n_heads % n_kv_heads != 0) {
            throw ConfigError("model config: n_heads " + std::to_string(n_heads) + " not divisible by n_kv_heads " +
                              std::to_string(n_kv_heads));
        }
        if (d_head() % 2 != 0) {
            throw ConfigError("model config: head dimension must be even for rotary embeddings");
        }
    }
};

inline void to_json(json& j, const ModelConfig& c) {
    j = json{{"n_layers", c.n_layers},   {"d_model", c.d_model},       {"n_heads", c.n_heads},
             {"n_kv_heads", c.n_kv_heads}, {"d_ff", c.d_ff},           {"vocab_size", c.vocab_size},
             {"max_seq_len", c.max_seq_len}, {"norm_eps", c.norm_eps}};
}

inline void from_json(const json& j, ModelConfig& c) {
    j.at("n_layers").get_to(c.n_layers);
    j.at("d_model").get_to(c.d_model);
    j.at("n_heads").get_to(c.n_heads);
    j.at("n_kv_heads").get_to(c.n_kv_heads);
    j.at("d_ff").get_to(c.d_ff);
    j.at("vocab_size").get_to(c.vocab_size);
    j.at("max_seq_len").get_to(c.max_seq_len);
    c.norm_eps = j.value("norm_eps", 1e-5);
}

// Per-layer attention source map. source_of[j] == j marks a layer that
// computes its own attention probabilities; source_of[j] == i < j marks a
// layer that reuses layer i's probabilities for this forward pass.
struct SharingPlan {
    std::vector<int> source_of;
    int k = 0;  // block size used at construction; 0 when built from an explicit list
    int b = 0;  // number of early layers skipped before the first shared block

    int n_layers() const { return static_cast<int>(source_of.size()); }
    bool is_root(int j) const { return source_of[static_cast<size_t>(j)] == j; }

    int shared_count() const {
        int c = 0;
        for (int j = 0; j < n_layers(); ++j) {
            if (!is_root(j)) ++c;
        }
        return c;
    }

    double sharing_ratio() const { return n_layers() == 0 ? 0.0 : static_cast<double>(shared_count()) / n_layers(); }

    bool is_identity() const { return shared_count() == 0; }

    void validate() const {
        int n = n_layers();
        if (n == 0) throw ContractError("sharing plan is empty");
        for (int j = 0; j < n; ++j) {
            int s = source_of[static_cast<size_t>(j)];
            if (s < 0 || s > j) {
                throw ContractError("sharing plan: source_of[" + std::to_string(j) + "] = " + std::to_string(s) +
                                    " must lie in [0, " + std::to_string(j) + "]");
            }
            if (source_of[static_cast<size_t>(s)] != s) {
                throw ContractError("sharing plan: source " + std::to_string(s) + " of layer " + std::to_string(j) +
                                    " is itself a sharing layer");
            }
        }
    }

    static SharingPlan identity(int n_layers) {
        SharingPlan p;
        p.source_of.resize(static_cast<size_t>(n_layers));
        for (int j = 0; j < n_layers; ++j) p.source_of[static_cast<size_t>(j)] = j;
        return p;
    }

    static SharingPlan from_sources(std::vector<int> sources, int k = 0, int b = 0) {
        SharingPlan p;
        p.source_of = std::move(sources);
        p.k = k;
        p.b = b;
        p.validate();
        return p;
    }

    // Build a plan from an explicit list of shared layer indices; each shared
    // layer reuses the nearest preceding non-shared layer.
    static SharingPlan from_shared_indices(int n_layers, const std::vector<int>& shared) {
        std::set<int> s;
        for (int idx : shared) {
            if (idx < 0 || idx >= n_layers) {
                throw InputError("shared layer index " + std::to_string(idx) + " out of range for " +
                                 std::to_string(n_layers) + " layers");
            }
            if (!s.insert(idx).second) {
                throw InputError("duplicate shared layer index " + std::to_string(idx));
            }
        }
        if (s.count(0)) throw InputError("layer 0 cannot share attention: it has no preceding layer");
        SharingPlan p = identity(n_layers);
        for (int idx : s) {
            int src = idx - 1;
            while (src >= 0 && s.count(src)) --src;
            p.source_of[static_cast<size_t>(idx)] = src;
        }
        // b: length of the non-shared prefix
        int prefix = 0;
        while (prefix < n_layers && !s.count(prefix)) ++prefix;
        p.b = prefix;
        p.k = 0;
        p.validate();
        return p;
    }
};

inline void to_json(json& j, const SharingPlan& p) {
    j = json{{"n_layers", p.n_layers()},
             {"source_of", p.source_of},
             {"k", p.k},
             {"b", p.b},
             {"shared_count", p.shared_count()},
             {"sharing_ratio", p.sharing_ratio()}};
}

inline void from_json(const json& j, SharingPlan& p) {
    j.at("source_of").get_to(p.source_of);
    p.k = j.value("k", 0);
    p.b = j.value("b", 0);
    p.validate();
}

// Token ids for one forward pass, row-major [batch, seq].
struct TokenBatch {
    int batch = 0;
    int seq = 0;
    std::vector<int> ids;
};

enum class TraceMode {
    kNone,       // logits only
    kAttention,  // capture per-layer attention probabilities
    kFull,       // attention + post-block hidden states
};

struct ForwardTrace {
    std::vector<Tensor> attention;  // [b, heads, seq, seq] per layer; sharing layers hold the root's handle
    std::vector<Tensor> hidden;     // [b, seq, d_model] residual stream after each block
    std::vector<int> source_of;
};

struct ForwardResult {
    Tensor logits;  // [batch, seq, vocab]
    ForwardTrace trace;
};

struct LayerWeights {
    Tensor attn_norm;
    Tensor wq, wk;  // absent (undefined) in sharing layers
    Tensor wv, wo;
    Tensor mlp_norm;
    Tensor w_gate, w_up, w_down;
    bool has_qk = true;
};

// Number of parameters removed by eliminating Wq and Wk in each sharing layer.
inline int64_t removed_parameters(const ModelConfig& cfg, const SharingPlan& plan) {
    int64_t per_layer =
        static_cast<int64_t>(cfg.d_model) * cfg.d_model + static_cast<int64_t>(cfg.d_model) * cfg.kv_width();
    return plan.shared_count() * per_layer;
}

// Analytic parameter count of the dense (identity-plan) model.
inline int64_t dense_parameter_count(const ModelConfig& cfg) {
    int64_t d = cfg.d_model, v = cfg.vocab_size, f = cfg.d_ff, kvw = cfg.kv_width();
    int64_t per_layer = 2 * d               // two norm weights
                        + d * d + d * kvw   // wq, wk
                        + d * kvw + d * d   // wv, wo
                        + 3 * d * f;        // gate, up, down
    return 2 * v * d + d + cfg.n_layers * per_layer;
}

class TransformerModel {
public:
    ModelConfig config;
    SharingPlan plan;
    Tensor tok_embedding;  // [vocab, d_model]
    std::vector<LayerWeights> layers;
    Tensor final_norm;
    Tensor lm_head;  // [d_model, vocab]

    static TransformerModel init(const ModelConfig& cfg, const SharingPlan& plan, uint64_t seed,
                                 double init_std = 0.02) {
        cfg.validate();
        plan.validate();
        if (plan.n_layers() != cfg.n_layers) {
            throw ContractError("plan has " + std::to_string(plan.n_layers()) + " layers, config has " +
                                std::to_string(cfg.n_layers));
        }
        TransformerModel m;
        m.config = cfg;
        m.plan = plan;
        Rng rng = Rng::from_label(seed, "model/init");
        int d = cfg.d_model, kvw = cfg.kv_width(), f = cfg.d_ff;
        m.tok_embedding = Tensor::randn({cfg.vocab_size, d}, rng, init_std);
        m.layers.resize(static_cast<size_t>(cfg.n_layers));
        for (int j = 0; j < cfg.n_layers; ++j) {
            LayerWeights& lw = m.layers[static_cast<size_t>(j)];
            lw.attn_norm = Tensor::full({d}, 1.0);
            lw.has_qk = plan.is_root(j);
            if (lw.has_qk) {
                lw.wq = Tensor::randn({d, d}, rng, init_std);
                lw.wk = Tensor::randn({d, kvw}, rng, init_std);
            }
            lw.wv = Tensor::randn({d, kvw}, rng, init_std);
            lw.wo = Tensor::randn({d, d}, rng, init_std);
            lw.mlp_norm = Tensor::full({d}, 1.0);
            lw.w_gate = Tensor::randn({d, f}, rng, init_std);
            lw.w_up = Tensor::randn({d, f}, rng, init_std);
            lw.w_down = Tensor::randn({f, d}, rng, init_std);
        }
        m.final_norm = Tensor::full({d}, 1.0);
        m.lm_head = Tensor::randn({d, cfg.vocab_size}, rng, init_std);
        m.name_and_mark_parameters();
        return m;
    }

    ForwardResult forward(const TokenBatch& tokens, TraceMode mode = TraceMode::kNone) const {
        if (tokens.seq < 1 || tokens.batch < 1) throw InputError("forward: empty token batch");
        if (tokens.seq > config.max_seq_len) {
            throw InputError("sequence length " + std::to_string(tokens.seq) + " exceeds max_seq_len " +
                             std::to_string(config.max_seq_len));
        }
        if (static_cast<int64_t>(tokens.ids.size()) != static_cast<int64_t>(tokens.batch) * tokens.seq) {
            throw ContractError("forward: ids length does not match batch*seq");
        }
        int B = tokens.batch, S = tokens.seq, D = config.d_model;
        int H = config.n_heads, Hkv = config.n_kv_heads, dh = config.d_head();
        int group = H / Hkv;
        double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));

        ForwardResult res;
        if (mode != TraceMode::kNone) {
            res.trace.attention.resize(static_cast<size_t>(config.n_layers));
            res.trace.source_of = plan.source_of;
        }
        if (mode == TraceMode::kFull) res.trace.hidden.resize(static_cast<size_t>(config.n_layers));

        std::vector<Tensor> cached_probs(static_cast<size_t>(config.n_layers));
        Tensor x = embedding(tok_embedding, tokens.ids, B, S);
        for (int j = 0; j < config.n_layers; ++j) {
            const LayerWeights& lw = layers[static_cast<size_t>(j)];
            Tensor h = rmsnorm(x, lw.attn_norm, config.norm_eps);
            Tensor probs;
            if (plan.is_root(j)) {
                Tensor q = transpose(reshape(matmul(h, lw.wq), {B, S, H, dh}), 1, 2);
                q = rope(q);
                Tensor key = transpose(reshape(matmul(h, lw.wk), {B, S, Hkv, dh}), 1, 2);
                key = repeat_heads(rope(key), group);
                probs = causal_softmax(causal_scores(q, key, inv_scale));
                cached_probs[static_cast<size_t>(j)] = probs;
            } else {
                probs = cached_probs[static_cast<size_t>(plan.source_of[static_cast<size_t>(j)])];
            }
            Tensor v = transpose(reshape(matmul(h, lw.wv), {B, S, Hkv, dh}), 1, 2);
            v = repeat_heads(v, group);
            Tensor attn_out = reshape(transpose(causal_weighted_sum(probs, v), 1, 2), {B, S, D});
            x = add(x, matmul(attn_out, lw.wo));

            Tensor h2 = rmsnorm(x, lw.mlp_norm, config.norm_eps);
            Tensor ff = matmul(mul(silu(matmul(h2, lw.w_gate)), matmul(h2, lw.w_up)), lw.w_down);
            x = add(x, ff);

            if (mode != TraceMode::kNone) res.trace.attention[static_cast<size_t>(j)] = probs;
            if (mode == TraceMode::kFull) res.trace.hidden[static_cast<size_t>(j)] = x;
        }
        res.logits = matmul(rmsnorm(x, final_norm, config.norm_eps), lm_head);
        return res;
    }

    std::vector<std::pair<std::string, Tensor>> named_parameters() const {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back("tok_embedding", tok_embedding);
        for (int j = 0; j < config.n_layers; ++j) {
            const LayerWeights& lw = layers[static_cast<size_t>(j)];
            std::string prefix = "layers." + std::to_string(j) + ".";
            out.emplace_back(prefix + "attn_norm", lw.attn_norm);
            if (lw.has_qk) {
                out.emplace_back(prefix + "wq", lw.wq);
                out.emplace_back(prefix + "wk", lw.wk);
            }
            out.emplace_back(prefix + "wv", lw.wv);
            out.emplace_back(prefix + "wo", lw.wo);
            out.emplace_back(prefix + "mlp_norm", lw.mlp_norm);
            out.emplace_back(prefix + "w_gate", lw.w_gate);
            out.emplace_back(prefix + "w_up", lw.w_up);
            out.emplace_back(prefix + "w_down", lw.w_down);
        }
        out.emplace_back("final_norm", final_norm);
        out.emplace_back("lm_head", lm_head);
        return out;
    }

    int64_t parameter_count() const {
        int64_t n = 0;
        for (const auto& [name, t] : named_parameters()) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& [name, t] : named_parameters()) {
            Tensor tt = t;
            tt.zero_grad();
        }
    }

    void set_requires_grad(bool v) {
        for (auto& [name, t] : named_parameters()) {
            Tensor tt = t;
            tt.set_requires_grad(v);
        }
    }

private:
    void name_and_mark_parameters() {
        for (auto& [name, t] : named_parameters()) {
            Tensor tt = t;
            tt.set_name(name).set_requires_grad(true);
        }
    }
};

// Clone the teacher's weights into a student following `plan`. Every retained
// tensor is a bit-identical copy; Wq/Wk of sharing layers are dropped.
inline TransformerModel build_student(const TransformerModel& teacher, const SharingPlan& plan) {
    if (!teacher.plan.is_identity()) {
        throw ContractError("build_student requires a dense teacher (identity plan)");
    }
    plan.validate();
    if (plan.n_layers() != teacher.config.n_layers) {
        throw ContractError("plan has " + std::to_string(plan.n_layers()) + " layers, teacher has " +
                            std::to_string(teacher.config.n_layers));
    }
    TransformerModel s;
    s.config = teacher.config;
    s.plan = plan;
    s.tok_embedding = teacher.tok_embedding.clone();
    s.layers.resize(teacher.layers.size());
    for (int j = 0; j < teacher.config.n_layers; ++j) {
        const LayerWeights& t = teacher.layers[static_cast<size_t>(j)];
        LayerWeights& l = s.layers[static_cast<size_t>(j)];
        l.attn_norm = t.attn_norm.clone();
        l.has_qk = plan.is_root(j);
        if (l.has_qk) {
            l.wq = t.wq.clone();
            l.wk = t.wk.clone();
        }
        l.wv = t.wv.clone();
        l.wo = t.wo.clone();
        l.mlp_norm = t.mlp_norm.clone();
        l.w_gate = t.w_gate.clone();
        l.w_up = t.w_up.clone();
        l.w_down = t.w_down.clone();
    }
    s.final_norm = teacher.final_norm.clone();
    s.lm_head = teacher.lm_head.clone();
    for (auto& [name, t] : s.named_parameters()) {
        Tensor tt = t;
        tt.set_name(name).set_requires_grad(true);
    }
    return s;
}

}  // namespace echoatt
