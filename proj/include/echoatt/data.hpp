#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "echoatt/model.hpp"
#include "echoatt/rng.hpp"

namespace echoatt {

enum class TokenMode { kBytes, kVocab };

// Byte-level vocabulary: ids 0..255 are raw bytes, id 256 separates documents
// in a token stream (never produced by encode).
constexpr int kDocSeparator = 256;
constexpr int kByteVocabSize = 257;

inline std::vector<int> encode_bytes(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(static_cast<int>(c));
    return out;
}

inline std::string decode_bytes(const std::vector<int>& ids) {
    std::string out;
    out.reserve(ids.size());
    for (int id : ids) {
        if (id >= 0 && id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
    }
    return out;
}

struct Corpus {
    std::vector<int> train_tokens;
    std::vector<int> val_tokens;
    int vocab_size = 0;
    size_t n_docs = 0;
    size_t n_train_docs = 0;
    size_t n_val_docs = 0;
};

namespace detail {

// Documents are blank-line separated blocks of text.
inline std::vector<std::string> split_documents(const std::string& text) {
    std::vector<std::string> docs;
    std::string cur;
    size_t i = 0;
    auto flush = [&] {
        while (!cur.empty() && cur.back() == '\n') cur.pop_back();
        if (!cur.empty()) docs.push_back(cur);
        cur.clear();
    };
    while (i < text.size()) {
        size_t eol = text.find('\n', i);
        std::string_view line(text.data() + i, (eol == std::string::npos ? text.size() : eol) - i);
        bool blank = line.find_first_not_of(" \t\r") == std::string_view::npos;
        if (blank) {
            flush();
        } else {
            cur.append(line);
            cur.push_back('\n');
        }
        if (eol == std::string::npos) break;
        i = eol + 1;
    }
    flush();
    return docs;
}

inline std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw IoError("cannot open " + p.string());
    std::string s(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>{});
    return s;
}

struct VocabTokenizer {
    std::unordered_map<std::string, int> token_to_id;
    int max_id = -1;

    static VocabTokenizer load(const std::string& vocab_path) {
        std::ifstream in(vocab_path);
        if (!in) throw IoError("cannot open vocab file " + vocab_path);
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw InputError(std::string("bad vocab file: ") + e.what());
        }
        VocabTokenizer v;
        for (auto it = j.begin(); it != j.end(); ++it) {
            int id = it.value().get<int>();
            if (id < 0) throw InputError("vocab file maps '" + it.key() + "' to negative id");
            v.token_to_id[it.key()] = id;
            v.max_id = std::max(v.max_id, id);
        }
        if (v.token_to_id.empty()) throw InputError("vocab file is empty");
        return v;
    }

    std::vector<int> encode(std::string_view text) const {
        std::vector<int> out;
        size_t i = 0;
        while (i < text.size()) {
            while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
            size_t j = i;
            while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
            if (j > i) {
                std::string tok(text.substr(i, j - i));
                auto it = token_to_id.find(tok);
                if (it == token_to_id.end()) throw InputError("token '" + tok + "' not in vocabulary");
                out.push_back(it->second);
            }
            i = j;
        }
        return out;
    }
};

}  // namespace detail

// Load a plain-text file (or directory of files), tokenize, and split into
// train/validation streams at document granularity. Documents are blank-line
// separated; each document is followed by a separator token in its stream.
inline Corpus load_corpus(const std::string& path, TokenMode mode = TokenMode::kBytes,
                          const std::string& vocab_path = "", double val_fraction = 0.05, uint64_t seed = 0) {
    namespace fs = std::filesystem;
    if (val_fraction < 0.0 || val_fraction >= 1.0) throw ContractError("val_fraction must lie in [0, 1)");
    std::vector<fs::path> files;
    fs::path root(path);
    if (fs::is_directory(root)) {
        for (const auto& e : fs::directory_iterator(root)) {
            if (e.is_regular_file()) files.push_back(e.path());
        }
        std::sort(files.begin(), files.end());
    } else if (fs::is_regular_file(root)) {
        files.push_back(root);
    } else {
        throw IoError("corpus path " + path + " does not exist");
    }

    std::vector<std::vector<int>> docs;
    int vocab_size = 0;
    int separator = 0;
    if (mode == TokenMode::kBytes) {
        for (const auto& f : files) {
            for (const std::string& d : detail::split_documents(detail::read_file(f))) {
                docs.push_back(encode_bytes(d));
            }
        }
        vocab_size = kByteVocabSize;
        separator = kDocSeparator;
    } else {
        detail::VocabTokenizer tok = detail::VocabTokenizer::load(vocab_path);
        for (const auto& f : files) {
            for (const std::string& d : detail::split_documents(detail::read_file(f))) {
                docs.push_back(tok.encode(d));
            }
        }
        separator = tok.max_id + 1;
        vocab_size = tok.max_id + 2;  // dense ids plus the separator
    }
    docs.erase(std::remove_if(docs.begin(), docs.end(), [](const auto& d) { return d.empty(); }), docs.end());
    if (docs.empty()) throw InputError("corpus at " + path + " is empty");

    int64_t total_tokens = 0;
    for (const auto& d : docs) total_tokens += static_cast<int64_t>(d.size());

    // Deterministic doc-granular split: walk a seeded shuffle of the doc
    // indices, assigning to validation until its token share is reached.
    std::vector<size_t> order(docs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng = Rng::from_label(seed, "data/split");
    rng.shuffle(order);
    std::vector<bool> is_val(docs.size(), false);
    int64_t val_target = static_cast<int64_t>(val_fraction * static_cast<double>(total_tokens));
    int64_t val_tokens = 0;
    size_t train_left = docs.size();
    for (size_t i : order) {
        if (val_tokens >= val_target) break;
        if (train_left <= 1) break;  // the training stream keeps at least one document
        is_val[i] = true;
        --train_left;
        val_tokens += static_cast<int64_t>(docs[i].size());
    }

    Corpus c;
    c.vocab_size = vocab_size;
    c.n_docs = docs.size();
    for (size_t i = 0; i < docs.size(); ++i) {
        std::vector<int>& stream = is_val[i] ? c.val_tokens : c.train_tokens;
        stream.insert(stream.end(), docs[i].begin(), docs[i].end());
        stream.push_back(separator);
        (is_val[i] ? c.n_val_docs : c.n_train_docs)++;
    }
    return c;
}

struct BatchPlan {
    int seq_len = 128;
    int batch_size = 1;
    uint64_t shuffle_seed = 0;
    bool shuffle = true;
};

struct Batch {
    TokenBatch tokens;
    std::vector<int> targets;  // inputs shifted left by one
};

// Non-overlapping fixed-length windows over a token stream with next-token
// targets. Batches are addressed by (epoch, index); the window order per
// epoch is a seeded permutation, so iteration is reproducible and epochs
// contain identical window multisets.
class BatchStream {
public:
    BatchStream(std::vector<int> stream, BatchPlan plan)
        : stream_(std::make_shared<std::vector<int>>(std::move(stream))), plan_(plan) {
        if (plan_.seq_len < 1 || plan_.batch_size < 1) throw ContractError("batch plan: sizes must be >= 1");
        if (static_cast<int64_t>(stream_->size()) < plan_.seq_len + 1) {
            throw InputError("corpus too short: " + std::to_string(stream_->size()) + " tokens < seq_len+1 = " +
                             std::to_string(plan_.seq_len + 1));
        }
        windows_ = (stream_->size() - 1) / static_cast<size_t>(plan_.seq_len);
        if (windows_ < static_cast<size_t>(plan_.batch_size)) {
            throw InputError("corpus too short: " + std::to_string(windows_) + " windows < batch_size " +
                             std::to_string(plan_.batch_size));
        }
    }

    size_t windows_per_epoch() const { return windows_; }
    size_t batches_per_epoch() const { return windows_ / static_cast<size_t>(plan_.batch_size); }
    int64_t tokens_per_epoch() const { return static_cast<int64_t>(windows_) * plan_.seq_len; }
    const BatchPlan& plan() const { return plan_; }

    Batch get(size_t epoch, size_t index) const {
        if (index >= batches_per_epoch()) throw ContractError("batch index out of range");
        const std::vector<size_t>& perm = permutation(epoch);
        Batch b;
        b.tokens.batch = plan_.batch_size;
        b.tokens.seq = plan_.seq_len;
        b.tokens.ids.reserve(static_cast<size_t>(plan_.batch_size) * plan_.seq_len);
        b.targets.reserve(b.tokens.ids.capacity());
        const std::vector<int>& s = *stream_;
        for (int r = 0; r < plan_.batch_size; ++r) {
            size_t w = perm[index * static_cast<size_t>(plan_.batch_size) + static_cast<size_t>(r)];
            size_t begin = w * static_cast<size_t>(plan_.seq_len);
            for (int i = 0; i < plan_.seq_len; ++i) {
                b.tokens.ids.push_back(s[begin + static_cast<size_t>(i)]);
                b.targets.push_back(s[begin + static_cast<size_t>(i) + 1]);
            }
        }
        return b;
    }

private:
    const std::vector<size_t>& permutation(size_t epoch) const {
        if (perm_epoch_ != static_cast<int64_t>(epoch) || perm_.empty()) {
            perm_.resize(windows_);
            for (size_t i = 0; i < windows_; ++i) perm_[i] = i;
            if (plan_.shuffle) {
                Rng rng = Rng::from_label(plan_.shuffle_seed, "data/shuffle/epoch" + std::to_string(epoch));
                rng.shuffle(perm_);
            }
            perm_epoch_ = static_cast<int64_t>(epoch);
        }
        return perm_;
    }

    std::shared_ptr<std::vector<int>> stream_;
    BatchPlan plan_;
    size_t windows_ = 0;
    mutable std::vector<size_t> perm_;
    mutable int64_t perm_epoch_ = -1;
};

}  // namespace echoatt
