#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "pdiff/ops.hpp"
#include "pdiff/rng.hpp"
#include "pdiff/tensor.hpp"

namespace pdiff::nn {

struct NamedParam {
    std::string name;
    Tensor tensor;
};

inline void he_uniform(Rng& rng, Tensor& w, std::size_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : w.values()) v = rng.uniform(-bound, bound);
}

class Layer {
public:
    virtual ~Layer() = default;
    virtual Tensor forward(Tape& tape, const Tensor& x, bool training) = 0;
    virtual std::vector<NamedParam> params() { return {}; }
    virtual std::vector<NamedParam> buffers() { return {}; }
};

class Dense : public Layer {
public:
    Dense(std::size_t in, std::size_t out, Rng& rng)
        : weight({out, in}, true), bias({out}, true) {
        he_uniform(rng, weight, in);
    }

    Tensor forward(Tape& tape, const Tensor& x, bool) override {
        return ops::dense(tape, x, weight, bias);
    }

    std::vector<NamedParam> params() override {
        return {{"weight", weight}, {"bias", bias}};
    }

    Tensor weight, bias;
};

class Conv1d : public Layer {
public:
    Conv1d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride,
           std::size_t pad, Rng& rng)
        : weight({out_ch, in_ch, kernel}, true), bias({out_ch}, true), stride_(stride), pad_(pad) {
        he_uniform(rng, weight, in_ch * kernel);
    }

    Tensor forward(Tape& tape, const Tensor& x, bool) override {
        return ops::conv1d(tape, x, weight, bias, stride_, pad_);
    }

    std::vector<NamedParam> params() override {
        return {{"weight", weight}, {"bias", bias}};
    }

    Tensor weight, bias;

private:
    std::size_t stride_, pad_;
};

class ConvTranspose1d : public Layer {
public:
    ConvTranspose1d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride,
                    std::size_t pad, std::size_t out_pad, Rng& rng)
        : weight({in_ch, out_ch, kernel}, true), bias({out_ch}, true),
          stride_(stride), pad_(pad), out_pad_(out_pad) {
        he_uniform(rng, weight, in_ch * kernel);
    }

    Tensor forward(Tape& tape, const Tensor& x, bool) override {
        return ops::conv1d_transpose(tape, x, weight, bias, stride_, pad_, out_pad_);
    }

    std::vector<NamedParam> params() override {
        return {{"weight", weight}, {"bias", bias}};
    }

    Tensor weight, bias;

private:
    std::size_t stride_, pad_, out_pad_;
};

class Conv2d : public Layer {
public:
    Conv2d(std::size_t in_ch, std::size_t out_ch, std::size_t kernel, std::size_t stride,
           std::size_t pad, Rng& rng)
        : weight({out_ch, in_ch, kernel, kernel}, true), bias({out_ch}, true),
          stride_(stride), pad_(pad) {
        he_uniform(rng, weight, in_ch * kernel * kernel);
    }

    Tensor forward(Tape& tape, const Tensor& x, bool) override {
        return ops::conv2d(tape, x, weight, bias, stride_, pad_);
    }

    std::vector<NamedParam> params() override {
        return {{"weight", weight}, {"bias", bias}};
    }

    Tensor weight, bias;

private:
    std::size_t stride_, pad_;
};

class BatchNorm : public Layer {
public:
    explicit BatchNorm(std::size_t channels, double momentum = 0.1, double eps = 1e-5)
        : weight(Tensor::full({channels}, 1.0)), bias({channels}, true),
          running_mean({channels}), running_var(Tensor::full({channels}, 1.0)),
          momentum_(momentum), eps_(eps) {
        weight.set_requires_grad(true);
    }

    Tensor forward(Tape& tape, const Tensor& x, bool training) override {
        const bool use_batch_stats = training && !stats_frozen_;
        return ops::batch_norm(tape, x, weight, bias, running_mean, running_var, use_batch_stats,
                               momentum_, eps_);
    }

    std::vector<NamedParam> params() override {
        return {{"weight", weight}, {"bias", bias}};
    }

    std::vector<NamedParam> buffers() override {
        return {{"running_mean", running_mean}, {"running_var", running_var}};
    }

    /// While frozen, training-mode forwards normalize by the running stats
    /// and leave them untouched.
    void freeze_stats(bool frozen) { stats_frozen_ = frozen; }

    Tensor weight, bias;
    Tensor running_mean, running_var;

private:
    double momentum_, eps_;
    bool stats_frozen_ = false;
};

class ReLU : public Layer {
public:
    Tensor forward(Tape& tape, const Tensor& x, bool) override { return ops::relu(tape, x); }
};

/// Collapses all trailing axes into one: [N, ...] -> [N, M].
class Flatten : public Layer {
public:
    Tensor forward(Tape& tape, const Tensor& x, bool) override {
        return ops::reshape(tape, x, {x.dim(0), x.size() / x.dim(0)});
    }
};

class Sequential {
public:
    template <typename L, typename... Args>
    L* emplace(std::string name, Args&&... args) {
        auto layer = std::make_unique<L>(std::forward<Args>(args)...);
        L* raw = layer.get();
        names_.push_back(std::move(name));
        layers_.push_back(std::move(layer));
        return raw;
    }

    Tensor forward(Tape& tape, const Tensor& x, bool training) {
        Tensor h = x;
        for (auto& layer : layers_) h = layer->forward(tape, h, training);
        return h;
    }

    /// Trainable parameters in layer order, weights before biases, named
    /// "<layer>.<param>".
    std::vector<NamedParam> named_params() const {
        std::vector<NamedParam> out;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            for (auto& p : layers_[i]->params()) {
                out.push_back({names_[i] + "." + p.name, p.tensor});
            }
        }
        return out;
    }

    std::vector<NamedParam> named_buffers() const {
        std::vector<NamedParam> out;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            for (auto& p : layers_[i]->buffers()) {
                out.push_back({names_[i] + "." + p.name, p.tensor});
            }
        }
        return out;
    }

    Layer* layer(const std::string& name) const {
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            if (names_[i] == name) return layers_[i].get();
        }
        return nullptr;
    }

    const std::vector<std::string>& layer_names() const { return names_; }
    std::size_t size() const { return layers_.size(); }

private:
    std::vector<std::string> names_;
    std::vector<std::unique_ptr<Layer>> layers_;
};

}  // namespace pdiff::nn
