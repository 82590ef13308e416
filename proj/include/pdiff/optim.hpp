#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "pdiff/tensor.hpp"

namespace pdiff {

enum class OptimizerKind { Sgd, Adam, AdamW };

inline std::string to_string(OptimizerKind k) {
    switch (k) {
        case OptimizerKind::Sgd: return "sgd";
        case OptimizerKind::Adam: return "adam";
        case OptimizerKind::AdamW: return "adamw";
    }
    return "?";
}

inline OptimizerKind optimizer_kind_from(const std::string& s) {
    if (s == "sgd") return OptimizerKind::Sgd;
    if (s == "adam") return OptimizerKind::Adam;
    if (s == "adamw") return OptimizerKind::AdamW;
    throw std::invalid_argument("unknown optimizer kind: " + s);
}

/// lr(step) = base * 0.5 * (1 + cos(pi * step / total)).
inline double cosine_lr(std::size_t step, std::size_t total_steps, double base_lr) {
    if (total_steps < 1) throw std::invalid_argument("cosine_lr: total_steps must be >= 1");
    if (step > total_steps) {
        throw std::invalid_argument("cosine_lr: step " + std::to_string(step) + " > total " +
                                    std::to_string(total_steps));
    }
    const double x = 3.14159265358979323846 * static_cast<double>(step) / static_cast<double>(total_steps);
    return base_lr * 0.5 * (1.0 + std::cos(x));
}

/// Parameter updater over a fixed tensor list. Adam/AdamW keep bias-corrected
/// first/second moments; AdamW decays weights in the update, not the gradient.
class Optimizer {
public:
    struct Hyper {
        OptimizerKind kind = OptimizerKind::AdamW;
        double lr = 1e-3;
        double weight_decay = 0.0;
        double momentum = 0.9;   // SGD only
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    Optimizer(std::vector<Tensor> params, Hyper hyper) : params_(std::move(params)), hyper_(hyper) {
        if (hyper_.lr <= 0.0) throw std::invalid_argument("optimizer: learning rate must be positive");
        state_.resize(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i) {
            state_[i].m.assign(params_[i].size(), 0.0);
            state_[i].v.assign(params_[i].size(), 0.0);
        }
    }

    const Hyper& hyper() const { return hyper_; }
    std::uint64_t step_count() const { return step_; }
    std::vector<Tensor>& params() { return params_; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    /// One update using each parameter's accumulated gradient; lr_scale
    /// applies a schedule on top of the base learning rate.
    void step(double lr_scale = 1.0) {
        ++step_;
        const double lr = hyper_.lr * lr_scale;
        const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(step_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i];
            if (!p.has_grad()) continue;
            const std::vector<double>& g = p.grad();
            if (g.size() != p.size()) {
                throw std::invalid_argument("optimizer: gradient size " + std::to_string(g.size()) +
                                            " vs parameter " + std::to_string(p.size()));
            }
            double* pv = p.data();
            switch (hyper_.kind) {
                case OptimizerKind::Sgd: {
                    auto& vel = state_[i].m;
                    for (std::size_t j = 0; j < g.size(); ++j) {
                        double grad = g[j] + hyper_.weight_decay * pv[j];
                        if (hyper_.momentum != 0.0) {
                            vel[j] = hyper_.momentum * vel[j] + grad;
                            grad = vel[j];
                        }
                        pv[j] -= lr * grad;
                    }
                    break;
                }
                case OptimizerKind::Adam: {
                    auto& m = state_[i].m;
                    auto& v = state_[i].v;
                    for (std::size_t j = 0; j < g.size(); ++j) {
                        const double grad = g[j] + hyper_.weight_decay * pv[j];
                        m[j] = hyper_.beta1 * m[j] + (1.0 - hyper_.beta1) * grad;
                        v[j] = hyper_.beta2 * v[j] + (1.0 - hyper_.beta2) * grad * grad;
                        const double mh = m[j] / bc1;
                        const double vh = v[j] / bc2;
                        pv[j] -= lr * mh / (std::sqrt(vh) + hyper_.eps);
                    }
                    break;
                }
                case OptimizerKind::AdamW: {
                    auto& m = state_[i].m;
                    auto& v = state_[i].v;
                    for (std::size_t j = 0; j < g.size(); ++j) {
                        const double grad = g[j];
                        m[j] = hyper_.beta1 * m[j] + (1.0 - hyper_.beta1) * grad;
                        v[j] = hyper_.beta2 * v[j] + (1.0 - hyper_.beta2) * grad * grad;
                        const double mh = m[j] / bc1;
                        const double vh = v[j] / bc2;
                        pv[j] -= lr * (mh / (std::sqrt(vh) + hyper_.eps) + hyper_.weight_decay * pv[j]);
                    }
                    break;
                }
            }
        }
    }

private:
    struct Slot {
        std::vector<double> m;
        std::vector<double> v;
    };
    std::vector<Tensor> params_;
    std::vector<Slot> state_;
    Hyper hyper_;
    std::uint64_t step_ = 0;
};

}  // namespace pdiff
