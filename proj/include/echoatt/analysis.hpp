#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "echoatt/model.hpp"

namespace echoatt {

inline double cosine_similarity(const std::vector<double>& u, const std::vector<double>& v) {
    if (u.size() != v.size()) {
        throw DimensionError("cosine_similarity: lengths differ (" + std::to_string(u.size()) + " vs " +
                             std::to_string(v.size()) + ")");
    }
    if (u.empty()) throw DimensionError("cosine_similarity: empty vectors");
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    if (nu == 0.0 || nv == 0.0) throw DegenerateInputError("cosine_similarity: zero-norm vector");
    double c = dot / (std::sqrt(nu) * std::sqrt(nv));
    return std::min(1.0, std::max(-1.0, c));
}

// Pairwise cross-layer attention similarity: mean over samples of the cosine
// between flattened per-layer attention tensors, plus per-layer averages.
struct SimilarityReport {
    int n_layers = 0;
    std::vector<std::vector<double>> pairwise;  // symmetric, unit diagonal
    std::vector<double> per_layer_avg;          // row means excluding the diagonal
    int64_t n_samples = 0;
    int seq_len = 0;
};

inline json report_to_json(const SimilarityReport& r) {
    return json{{"n_layers", r.n_layers},
                {"pairwise", r.pairwise},
                {"per_layer_avg", r.per_layer_avg},
                {"n_samples", r.n_samples},
                {"seq_len", r.seq_len}};
}

inline SimilarityReport report_from_json(const json& j) {
    SimilarityReport r;
    j.at("n_layers").get_to(r.n_layers);
    j.at("pairwise").get_to(r.pairwise);
    j.at("per_layer_avg").get_to(r.per_layer_avg);
    j.at("n_samples").get_to(r.n_samples);
    j.at("seq_len").get_to(r.seq_len);
    return r;
}

// Upper triangle as (i, j, value) rows for external heatmap plotting.
inline void write_pairwise_csv(const std::string& path, const SimilarityReport& r) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "layer_i,layer_j,cosine\n";
    out << std::setprecision(17);
    for (int i = 0; i < r.n_layers; ++i) {
        for (int j = i + 1; j < r.n_layers; ++j) {
            out << i << "," << j << "," << r.pairwise[static_cast<size_t>(i)][static_cast<size_t>(j)] << "\n";
        }
    }
}

inline void write_per_layer_csv(const std::string& path, const SimilarityReport& r) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open " + path + " for writing");
    out << "layer,avg_cosine\n";
    out << std::setprecision(17);
    for (int i = 0; i < r.n_layers; ++i) {
        out << i << "," << r.per_layer_avg[static_cast<size_t>(i)] << "\n";
    }
}

// Streaming accumulator over samples. Commutative: batches may be processed
// by parallel workers and merged.
class SimilarityAccumulator {
public:
    SimilarityAccumulator(int n_layers, int seq_len) : n_layers_(n_layers), seq_len_(seq_len) {
        sums_.assign(static_cast<size_t>(n_layers) * n_layers, 0.0);
    }

    // One flattened attention vector per layer for a single sample.
    void add_sample(const std::vector<std::vector<double>>& flats) {
        if (static_cast<int>(flats.size()) != n_layers_) {
            throw ContractError("add_sample: expected " + std::to_string(n_layers_) + " layer vectors");
        }
        for (int i = 0; i < n_layers_; ++i) {
            for (int j = i + 1; j < n_layers_; ++j) {
                double c = cosine_similarity(flats[static_cast<size_t>(i)], flats[static_cast<size_t>(j)]);
                sums_[static_cast<size_t>(i) * n_layers_ + j] += c;
            }
        }
        ++n_samples_;
    }

    void merge(const SimilarityAccumulator& other) {
        if (other.n_layers_ != n_layers_ || other.seq_len_ != seq_len_) {
            throw ContractError("merge: accumulator shapes differ");
        }
        for (size_t i = 0; i < sums_.size(); ++i) sums_[i] += other.sums_[i];
        n_samples_ += other.n_samples_;
    }

    int64_t n_samples() const { return n_samples_; }

    SimilarityReport finalize() const {
        if (n_samples_ == 0) throw ContractError("finalize: no samples accumulated");
        SimilarityReport r;
        r.n_layers = n_layers_;
        r.seq_len = seq_len_;
        r.n_samples = n_samples_;
        r.pairwise.assign(static_cast<size_t>(n_layers_), std::vector<double>(static_cast<size_t>(n_layers_), 0.0));
        for (int i = 0; i < n_layers_; ++i) {
            r.pairwise[static_cast<size_t>(i)][static_cast<size_t>(i)] = 1.0;
            for (int j = i + 1; j < n_layers_; ++j) {
                double m = sums_[static_cast<size_t>(i) * n_layers_ + j] / static_cast<double>(n_samples_);
                r.pairwise[static_cast<size_t>(i)][static_cast<size_t>(j)] = m;
                r.pairwise[static_cast<size_t>(j)][static_cast<size_t>(i)] = m;
            }
        }
        r.per_layer_avg.resize(static_cast<size_t>(n_layers_));
        for (int i = 0; i < n_layers_; ++i) {
            double s = 0.0;
            for (int j = 0; j < n_layers_; ++j) {
                if (j != i) s += r.pairwise[static_cast<size_t>(i)][static_cast<size_t>(j)];
            }
            r.per_layer_avg[static_cast<size_t>(i)] = n_layers_ > 1 ? s / (n_layers_ - 1) : 0.0;
        }
        return r;
    }

private:
    int n_layers_;
    int seq_len_;
    int64_t n_samples_ = 0;
    std::vector<double> sums_;  // upper triangle of per-pair cosine sums
};

// Flatten one sample's [heads, seq, seq] attention block to a single vector.
inline std::vector<double> flatten_sample_attention(const Tensor& probs, int sample_row) {
    int heads = probs.dim(1), s = probs.dim(2);
    int64_t plane = static_cast<int64_t>(heads) * s * s;
    std::vector<double> flat(static_cast<size_t>(plane));
    const double* p = probs.ptr() + static_cast<int64_t>(sample_row) * plane;
    for (int64_t i = 0; i < plane; ++i) flat[static_cast<size_t>(i)] = p[i];
    return flat;
}

// Cross-layer attention similarity of a dense model over fixed-length
// samples. Every row of every batch is one sample; ragged lengths are
// rejected (fixed length stands in for padding-free batching).
inline SimilarityReport attention_similarity(const TransformerModel& model, const std::vector<TokenBatch>& samples) {
    if (!model.plan.is_identity()) {
        throw InputError("attention_similarity requires a dense model (identity plan)");
    }
    if (samples.empty()) throw InputError("attention_similarity: no samples");
    int seq = samples.front().seq;
    for (const auto& s : samples) {
        if (s.seq != seq) {
            throw InputError("attention_similarity: ragged sample lengths (" + std::to_string(s.seq) + " vs " +
                             std::to_string(seq) + ")");
        }
    }
    int n_layers = model.config.n_layers;
    SimilarityAccumulator acc(n_layers, seq);
    NoGradScope no_grad;
    for (const auto& batch : samples) {
        ForwardResult res = model.forward(batch, TraceMode::kAttention);
        for (int row = 0; row < batch.batch; ++row) {
            std::vector<std::vector<double>> flats(static_cast<size_t>(n_layers));
            for (int l = 0; l < n_layers; ++l) {
                flats[static_cast<size_t>(l)] = flatten_sample_attention(res.trace.attention[static_cast<size_t>(l)], row);
            }
            acc.add_sample(flats);
        }
    }
    return acc.finalize();
}

// Max-gap cutoff selection of unchanged layers (lowest-similarity side),
// restricted to a prefix and/or suffix of the layer range. Candidates that
// violate the prefix/suffix constraint are reported, not silently included.
struct SelectionResult {
    std::vector<int> unchanged;   // ascending
    std::vector<int> violations;  // low-similarity candidates that are neither prefix nor suffix
    bool degenerate = false;      // all per-layer averages equal; no gap exists
};

inline SelectionResult select_unchanged_layers(const std::vector<double>& per_layer_avg) {
    int n = static_cast<int>(per_layer_avg.size());
    if (n < 2) throw ContractError("select_unchanged_layers requires at least 2 layers");
    SelectionResult res;

    std::vector<std::pair<double, int>> sorted(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) sorted[static_cast<size_t>(i)] = {per_layer_avg[static_cast<size_t>(i)], i};
    std::sort(sorted.begin(), sorted.end());  // ties broken by lower layer index

    double max_gap = 0.0;
    int gap_pos = -1;  // gap between sorted[gap_pos] and sorted[gap_pos+1]
    for (int i = 0; i + 1 < n; ++i) {
        double gap = sorted[static_cast<size_t>(i) + 1].first - sorted[static_cast<size_t>(i)].first;
        if (gap > max_gap) {  // ties keep the gap closest to the low-similarity end
            max_gap = gap;
            gap_pos = i;
        }
    }
    if (gap_pos < 0 || max_gap == 0.0) {
        res.degenerate = true;
        return res;
    }

    std::vector<bool> candidate(static_cast<size_t>(n), false);
    for (int i = 0; i <= gap_pos; ++i) candidate[static_cast<size_t>(sorted[static_cast<size_t>(i)].second)] = true;

    // prefix/suffix filter
    std::vector<bool> keep(static_cast<size_t>(n), false);
    for (int i = 0; i < n && candidate[static_cast<size_t>(i)]; ++i) keep[static_cast<size_t>(i)] = true;
    for (int i = n - 1; i >= 0 && candidate[static_cast<size_t>(i)]; --i) keep[static_cast<size_t>(i)] = true;
    for (int i = 0; i < n; ++i) {
        if (keep[static_cast<size_t>(i)]) {
            res.unchanged.push_back(i);
        } else if (candidate[static_cast<size_t>(i)]) {
            res.violations.push_back(i);
        }
    }
    return res;
}

inline SelectionResult select_unchanged_layers(const SimilarityReport& report) {
    return select_unchanged_layers(report.per_layer_avg);
}

// Group the inner (changeable) layers into left-to-right runs of at most k
// consecutive layers; the first layer of each run computes attention and the
// rest reuse it. A trailing run of length 1 stays unshared. Layers [0, b)
// are forced unchanged.
inline SharingPlan build_plan(const std::set<int>& unchanged, int n_layers, int k, int b = 0) {
    if (k < 2) throw ContractError("build_plan: k must be >= 2, got " + std::to_string(k));
    if (b < 0 || b > n_layers) throw ContractError("build_plan: b out of range");
    for (int u : unchanged) {
        if (u < 0 || u >= n_layers) {
            throw ContractError("build_plan: unchanged layer " + std::to_string(u) + " out of range");
        }
    }
    std::vector<bool> fixed(static_cast<size_t>(n_layers), false);
    for (int u : unchanged) fixed[static_cast<size_t>(u)] = true;
    for (int i = 0; i < b; ++i) fixed[static_cast<size_t>(i)] = true;

    SharingPlan plan = SharingPlan::identity(n_layers);
    plan.k = k;
    int j = 0;
    while (j < n_layers) {
        if (fixed[static_cast<size_t>(j)]) {
            ++j;
            continue;
        }
        // maximal consecutive segment of inner layers starting at j
        int seg_end = j;
        while (seg_end < n_layers && !fixed[static_cast<size_t>(seg_end)]) ++seg_end;
        for (int run = j; run < seg_end; run += k) {
            int run_end = std::min(run + k, seg_end);
            for (int m = run + 1; m < run_end; ++m) plan.source_of[static_cast<size_t>(m)] = run;
        }
        j = seg_end;
    }
    int prefix = 0;
    while (prefix < n_layers && fixed[static_cast<size_t>(prefix)]) ++prefix;
    plan.b = prefix;
    plan.validate();
    return plan;
}

}  // namespace echoatt
