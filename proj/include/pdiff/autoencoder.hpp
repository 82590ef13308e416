#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pdiff/container.hpp"
#include "pdiff/corpus.hpp"
#include "pdiff/nn.hpp"
#include "pdiff/optim.hpp"
#include "pdiff/rng.hpp"

namespace pdiff {

struct LatentCode {
    std::vector<double> values;
};

/// Latent width rule: d/4 rounded up, clamped to [4, 128].
inline std::size_t derive_latent_dim(std::size_t d) {
    const std::size_t raw = (d + 3) / 4;
    return std::clamp<std::size_t>(raw, 4, 128);
}

struct AutoencoderConfig {
    std::size_t input_dim = 0;
    std::size_t latent_dim = 0;  // 0 derives from input_dim
    std::vector<std::size_t> channels = {8, 16, 32, 32, 16};
    std::size_t kernel = 3;
    double sigma_v = 1e-3;
    double sigma_z = 1e-1;
    double lr = 2e-5;
    double weight_decay = 0.0;
    std::size_t iterations = 500;
    std::size_t batch_size = 50;

    std::size_t resolved_latent_dim() const {
        return latent_dim != 0 ? latent_dim : derive_latent_dim(input_dim);
    }

    void validate() const {
        if (input_dim == 0) throw std::invalid_argument("autoencoder: input_dim required");
        if (channels.size() != 5) throw std::invalid_argument("autoencoder: expected five conv stages");
        if (sigma_v < 0.0 || sigma_z < 0.0) throw std::invalid_argument("autoencoder: negative noise scale");
        if (resolved_latent_dim() < 1) throw std::invalid_argument("autoencoder: latent dim must be >= 1");
    }

    nlohmann::json to_json() const {
        return {{"input_dim", input_dim}, {"latent_dim", latent_dim}, {"channels", channels},
                {"kernel", kernel},       {"sigma_v", sigma_v},       {"sigma_z", sigma_z},
                {"lr", lr},               {"weight_decay", weight_decay},
                {"iterations", iterations}, {"batch_size", batch_size}};
    }

    static AutoencoderConfig from_json(const nlohmann::json& j) {
        AutoencoderConfig c;
        c.input_dim = j.value("input_dim", c.input_dim);
        c.latent_dim = j.value("latent_dim", c.latent_dim);
        c.channels = j.value("channels", c.channels);
        c.kernel = j.value("kernel", c.kernel);
        c.sigma_v = j.value("sigma_v", c.sigma_v);
        c.sigma_z = j.value("sigma_z", c.sigma_z);
        c.lr = j.value("lr", c.lr);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.iterations = j.value("iterations", c.iterations);
        c.batch_size = j.value("batch_size", c.batch_size);
        return c;
    }
};

/// Stride plan for the five stages: stride 2 while the running length allows a
/// halving that stays at four or more, stride 1 after. The input is
/// zero-padded to the smallest multiple of the cumulative stride and the
/// padding is stripped again on decode.
struct ConvStackPlan {
    std::vector<std::size_t> strides;
    std::size_t padded_len = 0;
    std::size_t final_len = 0;

    static ConvStackPlan for_dim(std::size_t d, std::size_t n_stages = 5) {
        ConvStackPlan p;
        std::size_t len = d;
        std::size_t total_stride = 1;
        for (std::size_t i = 0; i < n_stages; ++i) {
            if (len >= 8) {
                p.strides.push_back(2);
                len = (len + 1) / 2;
                total_stride *= 2;
            } else {
                p.strides.push_back(1);
            }
        }
        p.padded_len = (d + total_stride - 1) / total_stride * total_stride;
        p.final_len = p.padded_len / total_stride;
        return p;
    }
};

/// Noise-augmented parameter autoencoder: five strided 1-D conv stages and a
/// fully-connected head on each side. Gaussian noise can be injected into the
/// input vector (sigma_v) and the latent code (sigma_z); training keeps both
/// on, inference paths run noise-off.
class ParamAutoencoder {
public:
    ParamAutoencoder(AutoencoderConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        plan_ = ConvStackPlan::for_dim(cfg_.input_dim);
        latent_dim_ = cfg_.resolved_latent_dim();

        Rng rng(derive_seed(seed, "autoencoder-init"));
        const auto& ch = cfg_.channels;
        std::size_t in_ch = 1;
        for (std::size_t i = 0; i < 5; ++i) {
            encoder_.emplace<nn::Conv1d>("enc_conv" + std::to_string(i + 1), in_ch, ch[i],
                                         cfg_.kernel, plan_.strides[i], cfg_.kernel / 2, rng);
            encoder_.emplace<nn::ReLU>("enc_act" + std::to_string(i + 1));
            in_ch = ch[i];
        }
        enc_fc_ = std::make_unique<nn::Dense>(ch[4] * plan_.final_len, latent_dim_, rng);
        dec_fc_ = std::make_unique<nn::Dense>(latent_dim_, ch[4] * plan_.final_len, rng);
        std::size_t cur = ch[4];
        for (std::size_t i = 5; i-- > 0;) {
            const std::size_t out_ch = i == 0 ? 1 : ch[i - 1];
            const std::size_t stride = plan_.strides[i];
            decoder_.emplace<nn::ConvTranspose1d>("dec_conv" + std::to_string(i + 1), cur, out_ch,
                                                  cfg_.kernel, stride, cfg_.kernel / 2,
                                                  stride == 2 ? 1 : 0, rng);
            if (i != 0) decoder_.emplace<nn::ReLU>("dec_act" + std::to_string(i + 1));
            cur = out_ch;
        }
    }

    const AutoencoderConfig& config() const { return cfg_; }
    std::size_t input_dim() const { return cfg_.input_dim; }
    std::size_t latent_dim() const { return latent_dim_; }
    std::size_t padded_len() const { return plan_.padded_len; }

    std::vector<nn::NamedParam> named_params() const {
        std::vector<nn::NamedParam> out = encoder_.named_params();
        for (auto& p : enc_fc_->params()) out.push_back({"enc_fc." + p.name, p.tensor});
        for (auto& p : dec_fc_->params()) out.push_back({"dec_fc." + p.name, p.tensor});
        for (auto& p : decoder_.named_params()) out.push_back(p);
        return out;
    }

    /// [N,d] -> [N,latent]; zero-pads to the conv length first.
    Tensor encode_batch(Tape& tape, const Tensor& x) {
        if (x.rank() != 2 || x.dim(1) != cfg_.input_dim) {
            throw std::invalid_argument("encode: expected [N," + std::to_string(cfg_.input_dim) +
                                        "], got " + shape_str(x.shape()));
        }
        const std::size_t n = x.dim(0);
        Tensor padded({n, 1, plan_.padded_len});
        for (std::size_t i = 0; i < n; ++i) {
            std::copy(x.data() + i * cfg_.input_dim, x.data() + (i + 1) * cfg_.input_dim,
                      padded.data() + i * plan_.padded_len);
        }
        padded.set_requires_grad(x.requires_grad());
        Tensor h = encoder_.forward(tape, padded, true);
        h = ops::reshape(tape, h, {n, cfg_.channels[4] * plan_.final_len});
        return enc_fc_->forward(tape, h, true);
    }

    /// [N,latent] -> [N,d]; strips the conv padding.
    Tensor decode_batch(Tape& tape, const Tensor& z) {
        if (z.rank() != 2 || z.dim(1) != latent_dim_) {
            throw std::invalid_argument("decode: expected [N," + std::to_string(latent_dim_) +
                                        "], got " + shape_str(z.shape()));
        }
        const std::size_t n = z.dim(0);
        Tensor h = dec_fc_->forward(tape, z, true);
        h = ops::reshape(tape, h, {n, cfg_.channels[4], plan_.final_len});
        h = decoder_.forward(tape, h, true);
        h = ops::slice_last(tape, h, 0, cfg_.input_dim);
        return ops::reshape(tape, h, {n, cfg_.input_dim});
    }

    static void add_noise(std::vector<double>& v, double sigma, Rng& rng) {
        if (sigma == 0.0) return;
        for (auto& x : v) x += sigma * rng.normal();
    }

    LatentCode encode(const FlatParamVector& v, bool noise, Rng& rng) {
        if (v.d() != cfg_.input_dim) {
            throw std::invalid_argument("encode: vector length " + std::to_string(v.d()) + " != " +
                                        std::to_string(cfg_.input_dim));
        }
        for (double x : v.values) {
            if (!std::isfinite(x)) throw std::invalid_argument("encode: non-finite input");
        }
        std::vector<double> in = v.values;
        if (noise) add_noise(in, cfg_.sigma_v, rng);
        Tape tape(false);
        Tensor z = encode_batch(tape, Tensor({1, cfg_.input_dim}, std::move(in)));
        return LatentCode{z.values()};
    }

    FlatParamVector decode(const LatentCode& z, bool noise, Rng& rng) {
        if (z.values.size() != latent_dim_) {
            throw std::invalid_argument("decode: latent length " + std::to_string(z.values.size()) +
                                        " != " + std::to_string(latent_dim_));
        }
        std::vector<double> in = z.values;
        if (noise) add_noise(in, cfg_.sigma_z, rng);
        Tape tape(false);
        Tensor v = decode_batch(tape, Tensor({1, latent_dim_}, std::move(in)));
        return FlatParamVector{v.values()};
    }

    /// Noise-off round trip.
    FlatParamVector reconstruct(const FlatParamVector& v) {
        Rng unused(0);
        return decode(encode(v, false, unused), false, unused);
    }

    /// Per-iteration mean squared reconstruction error under both noise
    /// injections (Gaussian on the input vector and on the latent code).
    std::vector<double> train(const CheckpointCorpus& corpus, std::uint64_t seed) {
        if (corpus.cols() != cfg_.input_dim) {
            throw std::invalid_argument("autoencoder train: corpus dimension " +
                                        std::to_string(corpus.cols()) + " != " +
                                        std::to_string(cfg_.input_dim));
        }
        std::vector<Tensor> params;
        for (auto& p : named_params()) {
            p.tensor.set_requires_grad(true);
            params.push_back(p.tensor);
        }
        Optimizer opt(params, {.kind = OptimizerKind::AdamW,
                               .lr = cfg_.lr,
                               .weight_decay = cfg_.weight_decay});
        Rng rng(derive_seed(seed, "autoencoder-train"));
        const std::size_t bs = std::min(cfg_.batch_size, corpus.rows());

        std::vector<double> history;
        history.reserve(cfg_.iterations);
        for (std::size_t it = 0; it < cfg_.iterations; ++it) {
            Tensor clean({bs, cfg_.input_dim});
            for (std::size_t b = 0; b < bs; ++b) {
                const auto row = corpus.row(rng.index(corpus.rows()));
                std::copy(row.begin(), row.end(), clean.data() + b * cfg_.input_dim);
            }
            std::vector<double> noised(clean.values());
            add_noise(noised, cfg_.sigma_v, rng);
            std::vector<double> zeta(bs * latent_dim_, 0.0);
            if (cfg_.sigma_z > 0.0) rng.fill_normal(zeta, 0.0, cfg_.sigma_z);

            Tape tape;
            Tensor z = encode_batch(tape, Tensor({bs, cfg_.input_dim}, std::move(noised)));
            Tensor z_noised = ops::add(tape, z, Tensor({bs, latent_dim_}, std::move(zeta)));
            Tensor recon = decode_batch(tape, z_noised);
            Tensor loss = ops::mse_loss(tape, recon, clean);
            const double l = loss.item();
            if (!std::isfinite(l)) {
                throw std::runtime_error("autoencoder train: loss diverged at iteration " +
                                         std::to_string(it));
            }
            history.push_back(l);
            opt.zero_grad();
            tape.backward(loss);
            opt.step(cosine_lr(it, cfg_.iterations, 1.0));
        }
        if (!history.empty() && history.back() >= history.front() && cfg_.iterations > 1) {
            throw std::runtime_error("autoencoder train: final error " +
                                     std::to_string(history.back()) +
                                     " not below initial " + std::to_string(history.front()));
        }
        return history;
    }

    /// Noise-off latents for every corpus row.
    std::vector<std::vector<double>> encode_all(const CheckpointCorpus& corpus) {
        std::vector<std::vector<double>> out;
        out.reserve(corpus.rows());
        const std::size_t chunk = 64;
        for (std::size_t start = 0; start < corpus.rows(); start += chunk) {
            const std::size_t stop = std::min(corpus.rows(), start + chunk);
            Tensor batch({stop - start, cfg_.input_dim});
            for (std::size_t k = start; k < stop; ++k) {
                const auto row = corpus.row(k);
                std::copy(row.begin(), row.end(), batch.data() + (k - start) * cfg_.input_dim);
            }
            Tape tape(false);
            Tensor z = encode_batch(tape, batch);
            for (std::size_t k = start; k < stop; ++k) {
                const double* p = z.data() + (k - start) * latent_dim_;
                out.emplace_back(p, p + latent_dim_);
            }
        }
        return out;
    }

    /// Noise-off decode of a latent batch.
    std::vector<std::vector<double>> decode_all(const std::vector<std::vector<double>>& latents) {
        std::vector<std::vector<double>> out;
        out.reserve(latents.size());
        const std::size_t chunk = 64;
        for (std::size_t start = 0; start < latents.size(); start += chunk) {
            const std::size_t stop = std::min(latents.size(), start + chunk);
            Tensor batch({stop - start, latent_dim_});
            for (std::size_t k = start; k < stop; ++k) {
                if (latents[k].size() != latent_dim_) {
                    throw std::invalid_argument("decode_all: latent length mismatch");
                }
                std::copy(latents[k].begin(), latents[k].end(),
                          batch.data() + (k - start) * latent_dim_);
            }
            Tape tape(false);
            Tensor v = decode_batch(tape, batch);
            for (std::size_t k = start; k < stop; ++k) {
                const double* p = v.data() + (k - start) * cfg_.input_dim;
                out.emplace_back(p, p + cfg_.input_dim);
            }
        }
        return out;
    }

    void save(const std::filesystem::path& path) const {
        std::vector<double> payload;
        for (const auto& p : named_params()) {
            payload.insert(payload.end(), p.tensor.values().begin(), p.tensor.values().end());
        }
        nlohmann::json m;
        m["kind"] = "autoencoder";
        m["config"] = cfg_.to_json();
        save_container_f64(path, m, 1, payload.size(), payload);
    }

    static ParamAutoencoder load(const std::filesystem::path& path) {
        Container c = load_container(path);
        if (c.manifest.value("kind", "") != "autoencoder") {
            throw std::runtime_error("autoencoder: container kind is '" +
                                     c.manifest.value("kind", std::string{}) + "'");
        }
        ParamAutoencoder ae(AutoencoderConfig::from_json(c.manifest.at("config")), 0);
        std::size_t pos = 0;
        for (auto& p : ae.named_params()) {
            auto& vals = p.tensor.values();
            if (pos + vals.size() > c.f64.size()) {
                throw std::runtime_error("autoencoder: payload too small");
            }
            std::copy(c.f64.begin() + static_cast<std::ptrdiff_t>(pos),
                      c.f64.begin() + static_cast<std::ptrdiff_t>(pos + vals.size()), vals.begin());
            pos += vals.size();
        }
        if (pos != c.f64.size()) throw std::runtime_error("autoencoder: payload size mismatch");
        return ae;
    }

private:
    AutoencoderConfig cfg_;
    ConvStackPlan plan_;
    std::size_t latent_dim_ = 0;
    nn::Sequential encoder_;
    nn::Sequential decoder_;
    std::unique_ptr<nn::Dense> enc_fc_;
    std::unique_ptr<nn::Dense> dec_fc_;
};

}  // namespace pdiff
