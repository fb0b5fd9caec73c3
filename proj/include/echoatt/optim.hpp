#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "echoatt/checkpoint.hpp"
#include "echoatt/tensor.hpp"

namespace echoatt {

// Cosine learning-rate schedule with linear warmup. Warmup ramps 0 -> lr_peak
// over ceil(warmup_ratio * total_steps) steps, then cosine decays to 0 at
// total_steps.
struct Schedule {
    int64_t total_steps = 0;
    double warmup_ratio = 0.005;
    double lr_peak = 1e-4;

    int64_t warmup_steps() const {
        return static_cast<int64_t>(std::ceil(warmup_ratio * static_cast<double>(total_steps)));
    }
};

inline double lr_at(const Schedule& s, int64_t step) {
    if (s.total_steps < 1) throw ContractError("schedule has no steps");
    if (s.warmup_ratio < 0.0 || s.warmup_ratio >= 1.0) {
        throw ContractError("warmup_ratio must lie in [0, 1)");
    }
    if (step < 0 || step > s.total_steps) {
        throw ContractError("lr_at: step " + std::to_string(step) + " outside [0, " + std::to_string(s.total_steps) +
                            "]");
    }
    int64_t warmup = s.warmup_steps();
    if (step < warmup) {
        return s.lr_peak * static_cast<double>(step) / static_cast<double>(warmup);
    }
    double progress = s.total_steps == warmup
                          ? 1.0
                          : static_cast<double>(step - warmup) / static_cast<double>(s.total_steps - warmup);
    return s.lr_peak * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

struct AdamWConfig {
    double lr_peak = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// AdamW with decoupled weight decay applied to parameters before the
// bias-corrected adaptive update.
class AdamW {
public:
    AdamW(std::vector<std::pair<std::string, Tensor>> params, AdamWConfig cfg)
        : params_(std::move(params)), cfg_(cfg) {
        m_.resize(params_.size());
        v_.resize(params_.size());
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i].assign(params_[i].second.data().size(), 0.0);
            v_[i].assign(params_[i].second.data().size(), 0.0);
        }
    }

    void step(double lr) {
        if (lr < 0.0) throw ContractError("adamw: negative learning rate");
        ++step_;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (size_t pi = 0; pi < params_.size(); ++pi) {
            Tensor& t = params_[pi].second;
            t.ensure_grad();
            const std::vector<double>& g = t.grad();
            std::vector<double>& p = t.data();
            std::vector<double>& m = m_[pi];
            std::vector<double>& v = v_[pi];
            for (size_t i = 0; i < p.size(); ++i) {
                if (std::isnan(g[i])) {
                    throw ContractError("NaN gradient in parameter '" + params_[pi].first + "' at step " +
                                        std::to_string(step_));
                }
                if (cfg_.weight_decay != 0.0) p[i] -= lr * cfg_.weight_decay * p[i];
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                double mhat = m[i] / bc1;
                double vhat = v[i] / bc2;
                p[i] -= lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    int64_t steps_taken() const { return step_; }
    const AdamWConfig& config() const { return cfg_; }

    void save_state(const std::string& path) const {
        std::vector<std::pair<std::string, Tensor>> tensors;
        tensors.reserve(params_.size() * 2);
        for (size_t i = 0; i < params_.size(); ++i) {
            Shape shape = params_[i].second.shape();
            tensors.emplace_back("m." + params_[i].first, Tensor::from_data(shape, m_[i]));
            tensors.emplace_back("v." + params_[i].first, Tensor::from_data(shape, v_[i]));
        }
        json extra;
        extra["kind"] = "optim-state";
        extra["step"] = step_;
        extra["hyper"] = {{"lr_peak", cfg_.lr_peak}, {"beta1", cfg_.beta1},        {"beta2", cfg_.beta2},
                          {"eps", cfg_.eps},         {"weight_decay", cfg_.weight_decay}};
        write_container(path, std::move(extra), tensors);
    }

    void load_state(const std::string& path) {
        Container c = read_container(path);
        if (c.header.value("kind", "") != "optim-state") throw IoError(path + " is not an optimizer state file");
        step_ = c.header.at("step").get<int64_t>();
        for (size_t i = 0; i < params_.size(); ++i) {
            m_[i] = c.tensor("m." + params_[i].first).data();
            v_[i] = c.tensor("v." + params_[i].first).data();
            if (m_[i].size() != params_[i].second.data().size()) {
                throw IoError("optimizer state shape mismatch for " + params_[i].first);
            }
        }
    }

private:
    std::vector<std::pair<std::string, Tensor>> params_;
    std::vector<std::vector<double>> m_, v_;
    int64_t step_ = 0;
    AdamWConfig cfg_;
};

}  // namespace echoatt
