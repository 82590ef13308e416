#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pdiff/corpus.hpp"
#include "pdiff/nn.hpp"
#include "pdiff/optim.hpp"
#include "pdiff/rng.hpp"

namespace pdiff {

enum class DatasetKind { GaussianBlobs, TinyImages };

inline std::string to_string(DatasetKind k) {
    return k == DatasetKind::GaussianBlobs ? "gaussian-blobs" : "tiny-images";
}

inline DatasetKind dataset_kind_from(const std::string& s) {
    if (s == "gaussian-blobs") return DatasetKind::GaussianBlobs;
    if (s == "tiny-images") return DatasetKind::TinyImages;
    throw std::invalid_argument("unknown dataset kind: " + s);
}

struct SyntheticDataset {
    DatasetKind kind = DatasetKind::GaussianBlobs;
    std::size_t n_classes = 0;
    Shape sample_shape;          // {dim} for blobs, {C,H,W} for tiny images
    std::vector<double> train_x;
    std::vector<int> train_y;
    std::vector<double> val_x;
    std::vector<int> val_y;
    std::uint64_t seed = 0;

    std::size_t sample_size() const { return numel(sample_shape); }
    std::size_t n_train() const { return train_y.size(); }
    std::size_t n_val() const { return val_y.size(); }

    /// Batch tensor for the given split indices: [N,dim] or [N,C,H,W].
    Tensor batch(bool train_split, const std::vector<std::size_t>& idx) const {
        const auto& xs = train_split ? train_x : val_x;
        Shape shape{idx.size()};
        shape.insert(shape.end(), sample_shape.begin(), sample_shape.end());
        Tensor t(shape);
        const std::size_t sz = sample_size();
        for (std::size_t i = 0; i < idx.size(); ++i) {
            const double* src = xs.data() + idx[i] * sz;
            std::copy(src, src + sz, t.data() + i * sz);
        }
        return t;
    }

    std::vector<int> labels(bool train_split, const std::vector<std::size_t>& idx) const {
        const auto& ys = train_split ? train_y : val_y;
        std::vector<int> out(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) out[i] = ys[idx[i]];
        return out;
    }
};

namespace detail_tasks {

/// Class means as seeded orthonormal directions scaled by `separation`
/// (pairwise equidistant); falls back to random unit vectors when there are
/// more classes than dimensions.
inline std::vector<std::vector<double>> blob_means(Rng& rng, std::size_t n_classes,
                                                   std::size_t dim, double separation) {
    std::vector<std::vector<double>> means(n_classes, std::vector<double>(dim));
    for (auto& m : means) rng.fill_normal(m);
    const bool orthonormalize = n_classes <= dim;
    for (std::size_t c = 0; c < n_classes; ++c) {
        auto& m = means[c];
        if (orthonormalize) {
            for (std::size_t prev = 0; prev < c; ++prev) {
                double dot = 0.0;
                for (std::size_t i = 0; i < dim; ++i) dot += m[i] * means[prev][i];
                for (std::size_t i = 0; i < dim; ++i) m[i] -= dot * means[prev][i];
            }
        }
        double norm = 0.0;
        for (double v : m) norm += v * v;
        norm = std::sqrt(norm);
        if (norm < 1e-9) throw std::runtime_error("blob means degenerate; change the seed");
        for (auto& v : m) v /= norm;
    }
    for (auto& m : means) {
        for (auto& v : m) v *= separation;
    }
    return means;
}

inline void fill_split(Rng& rng, DatasetKind kind, const std::vector<std::vector<double>>& patterns,
                       std::size_t n, std::size_t n_classes, std::size_t sz, double noise,
                       std::vector<double>& xs, std::vector<int>& ys) {
    xs.resize(n * sz);
    ys.resize(n);
    // round-robin labels keep class counts balanced within one
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t i = 0; i < n; ++i) {
        const int label = static_cast<int>(i % n_classes);
        ys[order[i]] = label;
        double* x = xs.data() + order[i] * sz;
        const auto& base = patterns[static_cast<std::size_t>(label)];
        for (std::size_t j = 0; j < sz; ++j) x[j] = base[j] + noise * rng.normal();
    }
    (void)kind;
}

}  // namespace detail_tasks

/// Builds a reproducible synthetic classification task. For gaussian-blobs,
/// `dims` is {input_dim}; for tiny-images it is {C,H,W}. `separation` scales
/// the class means (blobs) or the pattern contrast (images) against unit
/// per-coordinate noise.
inline SyntheticDataset make_dataset(DatasetKind kind, std::size_t n_train, std::size_t n_val,
                                     std::size_t n_classes, const Shape& dims, std::uint64_t seed,
                                     double separation = 3.0) {
    if (n_classes == 0) throw std::invalid_argument("make_dataset: need at least one class");
    if (n_train < n_classes) {
        throw std::invalid_argument("make_dataset: n_train " + std::to_string(n_train) +
                                    " < n_classes " + std::to_string(n_classes));
    }
    if (dims.empty() || numel(dims) == 0) throw std::invalid_argument("make_dataset: empty dims");
    if (kind == DatasetKind::GaussianBlobs && dims.size() != 1) {
        throw std::invalid_argument("make_dataset: gaussian-blobs expects {input_dim}");
    }
    if (kind == DatasetKind::TinyImages && dims.size() != 3) {
        throw std::invalid_argument("make_dataset: tiny-images expects {C,H,W}");
    }

    SyntheticDataset ds;
    ds.kind = kind;
    ds.n_classes = n_classes;
    ds.sample_shape = dims;
    ds.seed = seed;
    const std::size_t sz = ds.sample_size();

    Rng rng(derive_seed(seed, "dataset"));
    std::vector<std::vector<double>> patterns;
    if (kind == DatasetKind::GaussianBlobs) {
        patterns = detail_tasks::blob_means(rng, n_classes, sz, separation);
    } else {
        patterns.assign(n_classes, std::vector<double>(sz));
        for (auto& p : patterns) {
            rng.fill_normal(p);
            for (auto& v : p) v *= separation;
        }
    }
    detail_tasks::fill_split(rng, kind, patterns, n_train, n_classes, sz, 1.0, ds.train_x, ds.train_y);
    detail_tasks::fill_split(rng, kind, patterns, n_val, n_classes, sz, 1.0, ds.val_x, ds.val_y);
    return ds;
}

enum class Arch { MlpMiniS, ConvNetMiniS };

inline std::string to_string(Arch a) {
    return a == Arch::MlpMiniS ? "mlp-mini-s" : "convnet-mini-s";
}

inline Arch arch_from(const std::string& s) {
    if (s == "mlp-mini-s") return Arch::MlpMiniS;
    if (s == "convnet-mini-s") return Arch::ConvNetMiniS;
    throw std::invalid_argument("unknown architecture: " + s);
}

/// Architecture template plus its layer table. mlp-mini-s is a dense stack
/// over `dims`; convnet-mini-s is conv-bn-relu, strided conv-relu, then two
/// dense layers on top of `image` shaped inputs.
struct ModelSpec {
    Arch arch = Arch::MlpMiniS;
    std::vector<std::size_t> dims = {16, 32, 16, 4};  // mlp: in, hidden..., classes
    std::size_t in_channels = 3;
    std::size_t image_size = 8;
    std::size_t conv1_channels = 8;
    std::size_t conv2_channels = 8;
    std::size_t fc_dim = 16;
    std::size_t n_classes = 4;

    static ModelSpec mlp_mini_s(std::vector<std::size_t> dims) {
        if (dims.size() < 2) throw std::invalid_argument("mlp-mini-s: need at least input and output dims");
        ModelSpec s;
        s.arch = Arch::MlpMiniS;
        s.n_classes = dims.back();
        s.dims = std::move(dims);
        return s;
    }

    static ModelSpec convnet_mini_s(std::size_t in_channels, std::size_t image_size,
                                    std::size_t n_classes) {
        if (image_size % 2 != 0) throw std::invalid_argument("convnet-mini-s: image size must be even");
        ModelSpec s;
        s.arch = Arch::ConvNetMiniS;
        s.in_channels = in_channels;
        s.image_size = image_size;
        s.n_classes = n_classes;
        return s;
    }

    std::size_t flat_after_conv() const {
        const std::size_t half = image_size / 2;
        return conv2_channels * half * half;
    }

    struct ParamInfo {
        std::string layer, param;
        Shape shape;
    };

    std::vector<ParamInfo> layer_table() const {
        std::vector<ParamInfo> t;
        if (arch == Arch::MlpMiniS) {
            for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
                const std::string name = "linear" + std::to_string(i + 1);
                t.push_back({name, "weight", {dims[i + 1], dims[i]}});
                t.push_back({name, "bias", {dims[i + 1]}});
            }
        } else {
            t.push_back({"conv1", "weight", {conv1_channels, in_channels, 3, 3}});
            t.push_back({"conv1", "bias", {conv1_channels}});
            t.push_back({"bn1", "weight", {conv1_channels}});
            t.push_back({"bn1", "bias", {conv1_channels}});
            t.push_back({"conv2", "weight", {conv2_channels, conv1_channels, 3, 3}});
            t.push_back({"conv2", "bias", {conv2_channels}});
            t.push_back({"fc1", "weight", {fc_dim, flat_after_conv()}});
            t.push_back({"fc1", "bias", {fc_dim}});
            t.push_back({"fc2", "weight", {n_classes, fc_dim}});
            t.push_back({"fc2", "bias", {n_classes}});
        }
        return t;
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& p : layer_table()) n += numel(p.shape);
        return n;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["arch"] = to_string(arch);
        if (arch == Arch::MlpMiniS) {
            j["dims"] = dims;
        } else {
            j["in_channels"] = in_channels;
            j["image_size"] = image_size;
            j["conv1_channels"] = conv1_channels;
            j["conv2_channels"] = conv2_channels;
            j["fc_dim"] = fc_dim;
            j["n_classes"] = n_classes;
        }
        return j;
    }

    static ModelSpec from_json(const nlohmann::json& j) {
        const Arch a = arch_from(j.at("arch").get<std::string>());
        if (a == Arch::MlpMiniS) {
            return mlp_mini_s(j.at("dims").get<std::vector<std::size_t>>());
        }
        ModelSpec s = convnet_mini_s(j.at("in_channels").get<std::size_t>(),
                                     j.at("image_size").get<std::size_t>(),
                                     j.at("n_classes").get<std::size_t>());
        s.conv1_channels = j.value("conv1_channels", s.conv1_channels);
        s.conv2_channels = j.value("conv2_channels", s.conv2_channels);
        s.fc_dim = j.value("fc_dim", s.fc_dim);
        return s;
    }
};

/// A task network instantiated from a spec: He-uniform weights, zero biases,
/// identity batch-norm, all seeded.
class Classifier {
public:
    Classifier(ModelSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
        Rng rng(derive_seed(seed, "init"));
        if (spec_.arch == Arch::MlpMiniS) {
            for (std::size_t i = 0; i + 1 < spec_.dims.size(); ++i) {
                net_.emplace<nn::Dense>("linear" + std::to_string(i + 1), spec_.dims[i],
                                        spec_.dims[i + 1], rng);
                if (i + 2 < spec_.dims.size()) {
                    net_.emplace<nn::ReLU>("act" + std::to_string(i + 1));
                }
            }
        } else {
            net_.emplace<nn::Conv2d>("conv1", spec_.in_channels, spec_.conv1_channels, 3, 1, 1, rng);
            bn_ = net_.emplace<nn::BatchNorm>("bn1", spec_.conv1_channels);
            net_.emplace<nn::ReLU>("act1");
            net_.emplace<nn::Conv2d>("conv2", spec_.conv1_channels, spec_.conv2_channels, 3, 2, 1, rng);
            net_.emplace<nn::ReLU>("act2");
            net_.emplace<nn::Flatten>("flatten");
            net_.emplace<nn::Dense>("fc1", spec_.flat_after_conv(), spec_.fc_dim, rng);
            net_.emplace<nn::ReLU>("act3");
            net_.emplace<nn::Dense>("fc2", spec_.fc_dim, spec_.n_classes, rng);
        }
    }

    const ModelSpec& spec() const { return spec_; }

    Tensor forward(Tape& tape, const Tensor& x, bool training) {
        return net_.forward(tape, x, training);
    }

    std::vector<nn::NamedParam> named_params() const { return net_.named_params(); }
    std::vector<nn::NamedParam> named_buffers() const { return net_.named_buffers(); }

    /// While frozen, training-mode forwards keep normalization statistics
    /// fixed; fine-tuning uses this so harvested checkpoints replay exactly.
    void freeze_norm_stats(bool frozen) {
        if (bn_) bn_->freeze_stats(frozen);
    }

    bool has_batch_norm() const { return bn_ != nullptr; }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& p : named_params()) n += p.tensor.size();
        return n;
    }

private:
    ModelSpec spec_;
    nn::Sequential net_;
    nn::BatchNorm* bn_ = nullptr;
};

inline void save_classifier(const std::filesystem::path& path, const Classifier& model) {
    std::vector<double> payload;
    for (const auto& p : model.named_params()) {
        payload.insert(payload.end(), p.tensor.values().begin(), p.tensor.values().end());
    }
    for (const auto& b : model.named_buffers()) {
        payload.insert(payload.end(), b.tensor.values().begin(), b.tensor.values().end());
    }
    nlohmann::json m;
    m["kind"] = "model";
    m["spec"] = model.spec().to_json();
    save_container_f64(path, m, 1, payload.size(), payload);
}

inline Classifier load_classifier(const std::filesystem::path& path) {
    Container c = load_container(path);
    if (c.manifest.value("kind", "") != "model") {
        throw std::runtime_error("model: container kind is '" +
                                 c.manifest.value("kind", std::string{}) + "'");
    }
    Classifier model(ModelSpec::from_json(c.manifest.at("spec")), 0);
    std::size_t pos = 0;
    auto fill = [&](std::vector<nn::NamedParam> list) {
        for (auto& p : list) {
            auto& vals = p.tensor.values();
            if (pos + vals.size() > c.f64.size()) throw std::runtime_error("model: payload too small");
            std::copy(c.f64.begin() + static_cast<std::ptrdiff_t>(pos),
                      c.f64.begin() + static_cast<std::ptrdiff_t>(pos + vals.size()), vals.begin());
            pos += vals.size();
        }
    };
    fill(model.named_params());
    fill(model.named_buffers());
    if (pos != c.f64.size()) throw std::runtime_error("model: payload size mismatch");
    return model;
}

struct TrainConfig {
    OptimizerKind optimizer = OptimizerKind::AdamW;
    double lr = 5e-3;
    double weight_decay = 5e-4;
    std::size_t epochs = 20;
    std::size_t batch_size = 32;
    std::uint64_t seed = 0;
    double finetune_lr = 0.03;
    std::size_t finetune_steps = 300;
    std::size_t finetune_batch_size = 32;

    void validate(std::size_t n_train) const {
        if (finetune_steps < 1) throw std::invalid_argument("train config: finetune steps must be >= 1");
        if (batch_size == 0 || batch_size > n_train) {
            throw std::invalid_argument("train config: batch size " + std::to_string(batch_size) +
                                        " invalid for " + std::to_string(n_train) + " samples");
        }
    }
};

struct EvalResult {
    double accuracy = 0.0;
    std::vector<int> predictions;
};

/// Accuracy plus per-sample predictions on one split; ties go to the lowest
/// class index.
inline EvalResult evaluate(Classifier& model, const SyntheticDataset& ds, bool train_split = false) {
    const std::size_t n = train_split ? ds.n_train() : ds.n_val();
    EvalResult res;
    res.predictions.reserve(n);
    const auto& ys = train_split ? ds.train_y : ds.val_y;
    std::size_t correct = 0;
    const std::size_t chunk = 256;
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t stop = std::min(n, start + chunk);
        std::vector<std::size_t> idx(stop - start);
        for (std::size_t i = start; i < stop; ++i) idx[i - start] = i;
        Tape tape(false);
        Tensor logits = model.forward(tape, ds.batch(train_split, idx), false);
        for (int p : ops::argmax_rows(logits)) res.predictions.push_back(p);
    }
    for (std::size_t i = 0; i < n; ++i) {
        if (res.predictions[i] == ys[i]) ++correct;
    }
    res.accuracy = n == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(n);
    return res;
}

struct TrainResult {
    std::vector<double> val_accuracy;  // per epoch
};

/// Minibatch training with cosine decay over all steps. Throws on non-finite
/// loss. Zero epochs leaves the model at initialization.
inline TrainResult train_to_convergence(Classifier& model, const SyntheticDataset& ds,
                                        const TrainConfig& cfg) {
    cfg.validate(ds.n_train());
    TrainResult result;
    if (cfg.epochs == 0) return result;

    std::vector<Tensor> params;
    for (auto& p : model.named_params()) {
        p.tensor.set_requires_grad(true);
        params.push_back(p.tensor);
    }
    Optimizer opt(params, {.kind = cfg.optimizer,
                           .lr = cfg.lr,
                           .weight_decay = cfg.weight_decay});
    Rng rng(derive_seed(cfg.seed, "train"));

    const std::size_t n = ds.n_train();
    const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
    const std::size_t total_steps = cfg.epochs * steps_per_epoch;
    std::size_t step = 0;

    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < n; start += cfg.batch_size) {
            const std::size_t stop = std::min(n, start + cfg.batch_size);
            if (stop - start < 2 && model.has_batch_norm()) break;  // batch stats need >= 2
            std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                         order.begin() + static_cast<std::ptrdiff_t>(stop));
            Tape tape;
            Tensor logits = model.forward(tape, ds.batch(true, idx), true);
            Tensor loss = ops::softmax_cross_entropy(tape, logits, ds.labels(true, idx));
            if (!std::isfinite(loss.item())) {
                throw std::runtime_error("train: loss diverged at epoch " + std::to_string(epoch) +
                                         " step " + std::to_string(step));
            }
            opt.zero_grad();
            tape.backward(loss);
            opt.step(cosine_lr(step, total_steps, 1.0));
            ++step;
        }
        result.val_accuracy.push_back(evaluate(model, ds).accuracy);
    }
    return result;
}

struct HarvestResult {
    CheckpointCorpus corpus;
    std::vector<double> step_accuracy;  // validation accuracy after each step
};

/// Fine-tunes only the selected parameters for cfg.finetune_steps steps and
/// appends the flattened subset after every step, so row k is the model state
/// after optimizer step k+1. Normalization statistics stay frozen and
/// non-selected parameters are bit-identical afterwards. Selected parameters
/// are rounded to storage precision before logging so replaying a corpus row
/// reproduces the recorded accuracy exactly.
inline HarvestResult finetune_and_harvest(Classifier& model, const SyntheticDataset& ds,
                                          const TrainConfig& cfg, const ParamSelector& selector,
                                          bool record_accuracy = true,
                                          nlohmann::json manifest = {}) {
    cfg.validate(ds.n_train());
    auto named = model.named_params();
    const auto idx = selector.resolve(named);
    if (idx.empty()) throw std::invalid_argument("harvest: selector resolves to nothing");

    for (auto& p : named) p.tensor.set_requires_grad(false);
    std::vector<Tensor> selected;
    for (std::size_t i : idx) {
        named[i].tensor.set_requires_grad(true);
        selected.push_back(named[i].tensor);
    }
    model.freeze_norm_stats(true);

    if (manifest.is_null() || manifest.empty()) manifest = nlohmann::json::object();
    manifest["selector"] = selector.to_json();
    manifest["model"] = model.spec().to_json();

    CheckpointCorpus corpus(selector.dimension(named), manifest);
    HarvestResult result{std::move(corpus), {}};

    Optimizer opt(selected, {.kind = cfg.optimizer,
                             .lr = cfg.finetune_lr,
                             .weight_decay = cfg.weight_decay});
    Rng rng(derive_seed(cfg.seed, "harvest"));
    const std::size_t n = ds.n_train();
    const std::size_t bs = std::min(cfg.finetune_batch_size, n);

    for (std::size_t step = 0; step < cfg.finetune_steps; ++step) {
        std::vector<std::size_t> batch_idx(bs);
        for (auto& i : batch_idx) i = rng.index(n);
        Tape tape;
        Tensor logits = model.forward(tape, ds.batch(true, batch_idx), true);
        Tensor loss = ops::softmax_cross_entropy(tape, logits, ds.labels(true, batch_idx));
        if (!std::isfinite(loss.item())) {
            throw std::runtime_error("harvest: loss diverged at step " + std::to_string(step));
        }
        opt.zero_grad();
        tape.backward(loss);
        opt.step(cosine_lr(step, cfg.finetune_steps, 1.0));

        for (Tensor& t : selected) {
            for (auto& v : t.values()) v = static_cast<double>(static_cast<float>(v));
        }
        result.corpus.append(flatten(named, selector).values);
        if (record_accuracy) {
            result.step_accuracy.push_back(evaluate(model, ds).accuracy);
        }
    }
    model.freeze_norm_stats(false);
    for (auto& p : named) p.tensor.set_requires_grad(false);
    return result;
}

}  // namespace pdiff
