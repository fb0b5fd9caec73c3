#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "echoatt/model.hpp"

namespace echoatt {

// Self-describing tensor container: an 8-byte little-endian header length,
// a JSON header (config, plan, tensor directory, extras), then raw
// little-endian f64 payloads at the listed offsets (relative to payload
// start). Round-trips are bit-exact.

namespace detail {

inline void write_u64_le(std::ostream& out, uint64_t v) {
    unsigned char buf[8];
    for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(buf), 8);
}

inline uint64_t read_u64_le(std::istream& in) {
    unsigned char buf[8];
    in.read(reinterpret_cast<char*>(buf), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(buf[i]) << (8 * i);
    return v;
}

static_assert(sizeof(double) == 8, "f64 payloads require 8-byte doubles");

}  // namespace detail

inline void write_container(const std::string& path, json header_extra,
                            const std::vector<std::pair<std::string, Tensor>>& tensors) {
    json dir = json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        dir.push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        offset += static_cast<uint64_t>(t.numel()) * 8;
    }
    json header = std::move(header_extra);
    header["format"] = "echoatt-ckpt";
    header["version"] = 1;
    header["dtype"] = "f64le";
    header["tensors"] = std::move(dir);

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + path + " for writing");
    std::string hstr = header.dump();
    detail::write_u64_le(out, hstr.size());
    out.write(hstr.data(), static_cast<std::streamsize>(hstr.size()));
    for (const auto& [name, t] : tensors) {
        out.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.numel() * 8));
    }
    if (!out) throw IoError("failed writing " + path);
}

struct Container {
    json header;
    std::vector<char> payload;

    Tensor tensor(const std::string& name) const {
        for (const auto& e : header.at("tensors")) {
            if (e.at("name").get<std::string>() != name) continue;
            Shape shape = e.at("shape").get<Shape>();
            uint64_t offset = e.at("offset").get<uint64_t>();
            int64_t count = shape_numel(shape);
            if (offset + static_cast<uint64_t>(count) * 8 > payload.size()) {
                throw IoError("container payload truncated for tensor " + name);
            }
            std::vector<double> values(static_cast<size_t>(count));
            std::memcpy(values.data(), payload.data() + offset, static_cast<size_t>(count) * 8);
            return Tensor::from_data(std::move(shape), std::move(values));
        }
        throw IoError("container has no tensor named " + name);
    }

    bool has_tensor(const std::string& name) const {
        for (const auto& e : header.at("tensors")) {
            if (e.at("name").get<std::string>() == name) return true;
        }
        return false;
    }
};

inline Container read_container(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    uint64_t hlen = detail::read_u64_le(in);
    if (!in) throw IoError("truncated container header in " + path);
    std::string hstr(hlen, '\0');
    in.read(hstr.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw IoError("truncated container header in " + path);
    Container c;
    try {
        c.header = json::parse(hstr);
    } catch (const json::exception& e) {
        throw IoError("bad container header in " + path + ": " + e.what());
    }
    if (c.header.value("format", "") != "echoatt-ckpt") {
        throw IoError(path + " is not an echoatt checkpoint");
    }
    c.payload.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    return c;
}

inline void save_checkpoint(const std::string& path, const TransformerModel& model) {
    json extra;
    extra["kind"] = "model";
    extra["config"] = model.config;
    extra["plan"] = model.plan;
    write_container(path, std::move(extra), model.named_parameters());
}

inline TransformerModel load_checkpoint(const std::string& path) {
    Container c = read_container(path);
    if (c.header.value("kind", "") != "model") throw IoError(path + " is not a model checkpoint");
    TransformerModel m;
    m.config = c.header.at("config").get<ModelConfig>();
    m.plan = c.header.at("plan").get<SharingPlan>();
    m.config.validate();
    if (m.plan.n_layers() != m.config.n_layers) {
        throw IoError(path + ": plan/config layer count mismatch");
    }
    m.tok_embedding = c.tensor("tok_embedding");
    m.layers.resize(static_cast<size_t>(m.config.n_layers));
    for (int j = 0; j < m.config.n_layers; ++j) {
        LayerWeights& lw = m.layers[static_cast<size_t>(j)];
        std::string prefix = "layers." + std::to_string(j) + ".";
        lw.attn_norm = c.tensor(prefix + "attn_norm");
        lw.has_qk = m.plan.is_root(j);
        if (lw.has_qk) {
            lw.wq = c.tensor(prefix + "wq");
            lw.wk = c.tensor(prefix + "wk");
        }
        lw.wv = c.tensor(prefix + "wv");
        lw.wo = c.tensor(prefix + "wo");
        lw.mlp_norm = c.tensor(prefix + "mlp_norm");
        lw.w_gate = c.tensor(prefix + "w_gate");
        lw.w_up = c.tensor(prefix + "w_up");
        lw.w_down = c.tensor(prefix + "w_down");
    }
    m.final_norm = c.tensor("final_norm");
    m.lm_head = c.tensor("lm_head");
    for (auto& [name, t] : m.named_parameters()) {
        t.set_name(name).set_requires_grad(true);
    }
    return m;
}

}  // namespace echoatt
