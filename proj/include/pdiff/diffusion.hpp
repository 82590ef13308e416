#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pdiff/container.hpp"
#include "pdiff/nn.hpp"
#include "pdiff/optim.hpp"
#include "pdiff/rng.hpp"

namespace pdiff {

/// Linear variance schedule: beta interpolates the endpoints inclusively,
/// alpha_bar is the running product of (1 - beta).
struct NoiseSchedule {
    std::size_t T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;

    double beta_at(std::size_t t) const { return beta.at(t - 1); }       // t in [1,T]
    double alpha_at(std::size_t t) const { return alpha.at(t - 1); }
    double alpha_bar_at(std::size_t t) const { return alpha_bar.at(t - 1); }
};

inline NoiseSchedule build_schedule(std::size_t T, double beta1 = 1e-4, double betaT = 2e-2) {
    if (T < 1) throw std::invalid_argument("schedule: T must be >= 1");
    if (!(beta1 > 0.0) || !(beta1 <= betaT) || !(betaT < 1.0)) {
        throw std::invalid_argument("schedule: need 0 < beta1 <= betaT < 1");
    }
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    double running = 1.0;
    for (std::size_t i = 0; i < T; ++i) {
        const double frac = T == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(T - 1);
        s.beta[i] = beta1 + (betaT - beta1) * frac;
        s.alpha[i] = 1.0 - s.beta[i];
        running *= s.alpha[i];
        s.alpha_bar[i] = running;
    }
    return s;
}

/// One forward noising step: x_t = sqrt(1-beta_t) x_{t-1} + sqrt(beta_t) eps.
inline std::vector<double> forward_step(const NoiseSchedule& s, const std::vector<double>& x_prev,
                                        std::size_t t, Rng& rng) {
    if (t < 1 || t > s.T) throw std::invalid_argument("forward_step: t out of range");
    const double keep = std::sqrt(1.0 - s.beta_at(t));
    const double add = std::sqrt(s.beta_at(t));
    std::vector<double> out(x_prev.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = keep * x_prev[i] + add * rng.normal();
    return out;
}

/// Closed-form jump to step t: x_t = sqrt(abar_t) x_0 + sqrt(1-abar_t) eps.
inline std::vector<double> forward_sample(const NoiseSchedule& s, const std::vector<double>& x0,
                                          std::size_t t, const std::vector<double>& eps) {
    if (t < 1 || t > s.T) throw std::invalid_argument("forward_sample: t out of range");
    if (eps.size() != x0.size()) {
        throw std::invalid_argument("forward_sample: eps length " + std::to_string(eps.size()) +
                                    " != x0 length " + std::to_string(x0.size()));
    }
    const double ab = s.alpha_bar_at(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    std::vector<double> out(x0.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

/// Reverse-step arithmetic with the noise prediction and the injected
/// gaussian given explicitly; zeta is ignored at t == 1.
inline std::vector<double> reverse_step_math(const NoiseSchedule& s, const std::vector<double>& x_t,
                                             std::size_t t, const std::vector<double>& eps_theta,
                                             const std::vector<double>& zeta) {
    if (t < 1 || t > s.T) throw std::invalid_argument("reverse_step: t out of range");
    if (eps_theta.size() != x_t.size()) {
        throw std::invalid_argument("reverse_step: eps length mismatch");
    }
    const double beta = s.beta_at(t);
    const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha_at(t));
    const double eps_coef = beta / std::sqrt(1.0 - s.alpha_bar_at(t));
    const double sigma = t > 1 ? std::sqrt(beta) : 0.0;
    std::vector<double> out(x_t.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = inv_sqrt_alpha * (x_t[i] - eps_coef * eps_theta[i]);
        if (sigma != 0.0) out[i] += sigma * zeta[i];
    }
    return out;
}

struct DiffusionSample {
    std::vector<double> latent;  // final z_0 estimate
    std::vector<std::pair<std::size_t, std::vector<double>>> trajectory;  // (t, latent), t strictly decreasing to 0
};

struct DenoiserConfig {
    std::size_t latent_dim = 0;
    std::vector<std::size_t> channels = {16, 32, 32, 16, 4};
    std::size_t kernel = 3;
    std::size_t embed_dim = 64;
    double lr = 1e-4;
    double weight_decay = 0.0;
    std::size_t iterations = 1000;
    std::size_t batch_size = 50;

    void validate() const {
        if (latent_dim == 0) throw std::invalid_argument("denoiser: latent_dim required");
        if (channels.size() != 5) throw std::invalid_argument("denoiser: expected five conv stages");
        if (embed_dim % 2 != 0) throw std::invalid_argument("denoiser: embed_dim must be even");
    }

    nlohmann::json to_json() const {
        return {{"latent_dim", latent_dim}, {"channels", channels}, {"kernel", kernel},
                {"embed_dim", embed_dim},   {"lr", lr},             {"weight_decay", weight_decay},
                {"iterations", iterations}, {"batch_size", batch_size}};
    }

    static DenoiserConfig from_json(const nlohmann::json& j) {
        DenoiserConfig c;
        c.latent_dim = j.value("latent_dim", c.latent_dim);
        c.channels = j.value("channels", c.channels);
        c.kernel = j.value("kernel", c.kernel);
        c.embed_dim = j.value("embed_dim", c.embed_dim);
        c.lr = j.value("lr", c.lr);
        c.weight_decay = j.value("weight_decay", c.weight_decay);
        c.iterations = j.value("iterations", c.iterations);
        c.batch_size = j.value("batch_size", c.batch_size);
        return c;
    }
};

/// Epsilon-prediction network over latent vectors: five stride-1 conv stages
/// with an additive sinusoidal timestep embedding on the first stage, then a
/// fully-connected head back to the latent width. Latents are standardized
/// per dimension during training; sampling inverts the affine map, so callers
/// only ever see raw latent space.
class Denoiser {
public:
    Denoiser(DenoiserConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        Rng rng(derive_seed(seed, "denoiser-init"));
        const auto& ch = cfg_.channels;
        std::size_t in_ch = 1;
        for (std::size_t i = 0; i < 5; ++i) {
            convs_.emplace<nn::Conv1d>("conv" + std::to_string(i + 1), in_ch, ch[i], cfg_.kernel, 1,
                                       cfg_.kernel / 2, rng);
            in_ch = ch[i];
        }
        time_proj_ = std::make_unique<nn::Dense>(cfg_.embed_dim, ch[0], rng);
        head_ = std::make_unique<nn::Dense>(ch[4] * cfg_.latent_dim, cfg_.latent_dim, rng);
        norm_mean_.assign(cfg_.latent_dim, 0.0);
        norm_std_.assign(cfg_.latent_dim, 1.0);
    }

    const DenoiserConfig& config() const { return cfg_; }
    std::size_t latent_dim() const { return cfg_.latent_dim; }
    const std::vector<double>& norm_mean() const { return norm_mean_; }
    const std::vector<double>& norm_std() const { return norm_std_; }

    std::vector<nn::NamedParam> named_params() const {
        auto out = convs_.named_params();
        for (auto& p : time_proj_->params()) out.push_back({"time_proj." + p.name, p.tensor});
        for (auto& p : head_->params()) out.push_back({"head." + p.name, p.tensor});
        return out;
    }

    std::vector<double> timestep_embedding(std::size_t t) const {
        std::vector<double> emb(cfg_.embed_dim);
        const std::size_t half = cfg_.embed_dim / 2;
        for (std::size_t i = 0; i < half; ++i) {
            const double freq =
                std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(cfg_.embed_dim));
            emb[2 * i] = std::sin(static_cast<double>(t) * freq);
            emb[2 * i + 1] = std::cos(static_cast<double>(t) * freq);
        }
        return emb;
    }

    /// Predicted noise for a standardized batch: x [N,latent], one timestep
    /// per row.
    Tensor forward(Tape& tape, const Tensor& x, const std::vector<std::size_t>& t) {
        if (x.rank() != 2 || x.dim(1) != cfg_.latent_dim) {
            throw std::invalid_argument("denoiser: expected [N," + std::to_string(cfg_.latent_dim) +
                                        "], got " + shape_str(x.shape()));
        }
        const std::size_t n = x.dim(0);
        if (t.size() != n) throw std::invalid_argument("denoiser: one timestep per row required");

        Tensor emb({n, cfg_.embed_dim});
        for (std::size_t i = 0; i < n; ++i) {
            const auto e = timestep_embedding(t[i]);
            std::copy(e.begin(), e.end(), emb.data() + i * cfg_.embed_dim);
        }
        Tensor h = ops::reshape(tape, x, {n, 1, cfg_.latent_dim});
        bool first = true;
        Tensor cond = time_proj_->forward(tape, emb, true);
        for (const std::string& name : convs_.layer_names()) {
            h = convs_.layer(name)->forward(tape, h, true);
            if (first) {
                h = ops::add_channelwise(tape, h, cond);
                first = false;
            }
            h = ops::relu(tape, h);
        }
        h = ops::reshape(tape, h, {n, cfg_.channels[4] * cfg_.latent_dim});
        return head_->forward(tape, h, true);
    }

    /// Noise prediction for one raw-space vector; the returned epsilon lives
    /// in the standardized space the chain runs in.
    std::vector<double> predict_eps(const std::vector<double>& x_raw, std::size_t t) {
        Tensor x({1, cfg_.latent_dim}, standardize(x_raw));
        Tape tape(false);
        Tensor e = forward(tape, x, {t});
        return e.values();
    }

    std::vector<double> standardize(const std::vector<double>& raw) const {
        if (raw.size() != cfg_.latent_dim) throw std::invalid_argument("denoiser: latent length mismatch");
        std::vector<double> out(raw.size());
        for (std::size_t i = 0; i < raw.size(); ++i) out[i] = (raw[i] - norm_mean_[i]) / norm_std_[i];
        return out;
    }

    std::vector<double> unstandardize(const std::vector<double>& std_space) const {
        std::vector<double> out(std_space.size());
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = std_space[i] * norm_std_[i] + norm_mean_[i];
        }
        return out;
    }

    /// Epsilon-prediction training: every iteration draws latents, uniform
    /// timesteps and gaussian noise, then minimizes the mean squared error
    /// between the injected and the predicted noise. Returns the per-iteration
    /// loss history.
    std::vector<double> train(const std::vector<std::vector<double>>& latents,
                              const NoiseSchedule& schedule, std::uint64_t seed) {
        if (latents.empty()) throw std::invalid_argument("denoiser train: empty latent set");
        for (const auto& z : latents) {
            if (z.size() != cfg_.latent_dim) {
                throw std::invalid_argument("denoiser train: latent length mismatch");
            }
        }
        fit_normalizer(latents);
        std::vector<std::vector<double>> zs(latents.size());
        for (std::size_t i = 0; i < latents.size(); ++i) zs[i] = standardize(latents[i]);

        std::vector<Tensor> params;
        for (auto& p : named_params()) {
            p.tensor.set_requires_grad(true);
            params.push_back(p.tensor);
        }
        Optimizer opt(params, {.kind = OptimizerKind::AdamW,
                               .lr = cfg_.lr,
                               .weight_decay = cfg_.weight_decay});
        Rng rng(derive_seed(seed, "denoiser-train"));
        const std::size_t bs = std::min(cfg_.batch_size, zs.size() * 4);
        const std::size_t ld = cfg_.latent_dim;

        std::vector<double> history;
        history.reserve(cfg_.iterations);
        for (std::size_t it = 0; it < cfg_.iterations; ++it) {
            Tensor noisy({bs, ld});
            Tensor target({bs, ld});
            std::vector<std::size_t> ts(bs);
            for (std::size_t b = 0; b < bs; ++b) {
                const auto& z = zs[rng.index(zs.size())];
                const std::size_t t = 1 + rng.index(schedule.T);
                ts[b] = t;
                const double a = std::sqrt(schedule.alpha_bar_at(t));
                const double c = std::sqrt(1.0 - schedule.alpha_bar_at(t));
                for (std::size_t i = 0; i < ld; ++i) {
                    const double eps = rng.normal();
                    target.data()[b * ld + i] = eps;
                    noisy.data()[b * ld + i] = a * z[i] + c * eps;
                }
            }
            Tape tape;
            Tensor pred = forward(tape, noisy, ts);
            Tensor loss = ops::mse_loss(tape, pred, target);
            const double l = loss.item();
            if (!std::isfinite(l)) {
                throw std::runtime_error("denoiser train: loss diverged at iteration " +
                                         std::to_string(it));
            }
            history.push_back(l);
            opt.zero_grad();
            tape.backward(loss);
            opt.step(cosine_lr(it, cfg_.iterations, 1.0));
        }
        return history;
    }

    void save(const std::filesystem::path& path) const {
        std::vector<double> payload;
        for (const auto& p : named_params()) {
            payload.insert(payload.end(), p.tensor.values().begin(), p.tensor.values().end());
        }
        nlohmann::json m;
        m["kind"] = "denoiser";
        m["config"] = cfg_.to_json();
        m["norm_mean"] = norm_mean_;
        m["norm_std"] = norm_std_;
        save_container_f64(path, m, 1, payload.size(), payload);
    }

    static Denoiser load(const std::filesystem::path& path) {
        Container c = load_container(path);
        if (c.manifest.value("kind", "") != "denoiser") {
            throw std::runtime_error("denoiser: container kind is '" +
                                     c.manifest.value("kind", std::string{}) + "'");
        }
        Denoiser d(DenoiserConfig::from_json(c.manifest.at("config")), 0);
        d.norm_mean_ = c.manifest.at("norm_mean").get<std::vector<double>>();
        d.norm_std_ = c.manifest.at("norm_std").get<std::vector<double>>();
        std::size_t pos = 0;
        for (auto& p : d.named_params()) {
            auto& vals = p.tensor.values();
            if (pos + vals.size() > c.f64.size()) throw std::runtime_error("denoiser: payload too small");
            std::copy(c.f64.begin() + static_cast<std::ptrdiff_t>(pos),
                      c.f64.begin() + static_cast<std::ptrdiff_t>(pos + vals.size()), vals.begin());
            pos += vals.size();
        }
        if (pos != c.f64.size()) throw std::runtime_error("denoiser: payload size mismatch");
        return d;
    }

private:
    void fit_normalizer(const std::vector<std::vector<double>>& latents) {
        const std::size_t ld = cfg_.latent_dim;
        norm_mean_.assign(ld, 0.0);
        norm_std_.assign(ld, 0.0);
        for (const auto& z : latents) {
            for (std::size_t i = 0; i < ld; ++i) norm_mean_[i] += z[i];
        }
        for (auto& m : norm_mean_) m /= static_cast<double>(latents.size());
        for (const auto& z : latents) {
            for (std::size_t i = 0; i < ld; ++i) {
                const double d = z[i] - norm_mean_[i];
                norm_std_[i] += d * d;
            }
        }
        for (auto& s : norm_std_) {
            s = std::sqrt(s / static_cast<double>(latents.size()));
            if (s < 1e-8) s = 1.0;  // degenerate dimension, e.g. single-latent corpus
        }
    }

    DenoiserConfig cfg_;
    nn::Sequential convs_;
    std::unique_ptr<nn::Dense> time_proj_;
    std::unique_ptr<nn::Dense> head_;
    std::vector<double> norm_mean_;
    std::vector<double> norm_std_;
};

/// Ancestral reverse step in raw latent space.
inline std::vector<double> reverse_step(Denoiser& denoiser, const NoiseSchedule& s,
                                        const std::vector<double>& x_t, std::size_t t, Rng& rng) {
    std::vector<double> x_std = denoiser.standardize(x_t);
    Tape tape(false);
    Tensor pred = denoiser.forward(tape, Tensor({1, x_std.size()}, std::vector<double>(x_std)), {t});
    std::vector<double> zeta(x_std.size(), 0.0);
    if (t > 1) rng.fill_normal(zeta);
    return denoiser.unstandardize(reverse_step_math(s, x_std, t, pred.values(), zeta));
}

namespace detail_diffusion {

inline std::vector<std::size_t> snapshot_steps(std::size_t T, std::size_t count) {
    std::vector<std::size_t> steps;
    if (count == 0) return steps;
    const std::size_t stride = std::max<std::size_t>(1, T / count);
    for (std::size_t t = 0; t < T; t += stride) steps.push_back(t);
    return steps;  // ascending; sampling records them as it descends
}

}  // namespace detail_diffusion

/// Runs n independent reverse chains from pure noise, batched across chains
/// but with one rng per chain, so results match one-at-a-time sampling
/// seed-for-seed. Trajectories record `snapshots` intermediates, timesteps
/// strictly decreasing and ending at 0.
inline std::vector<DiffusionSample> sample_batch(Denoiser& denoiser, const NoiseSchedule& s,
                                                 const std::vector<std::uint64_t>& chain_seeds,
                                                 bool record_trajectory = false,
                                                 std::size_t snapshots = 10) {
    const std::size_t n = chain_seeds.size();
    const std::size_t ld = denoiser.latent_dim();
    std::vector<DiffusionSample> out(n);
    if (n == 0) return out;

    std::vector<Rng> rngs;
    rngs.reserve(n);
    for (auto seed : chain_seeds) rngs.emplace_back(seed);

    Tensor x({n, ld});
    for (std::size_t c = 0; c < n; ++c) {
        for (std::size_t i = 0; i < ld; ++i) x.data()[c * ld + i] = rngs[c].normal();
    }
    const auto snaps = detail_diffusion::snapshot_steps(s.T, snapshots);
    auto is_snapshot = [&](std::size_t t) {
        return std::find(snaps.begin(), snaps.end(), t) != snaps.end();
    };

    std::vector<std::size_t> ts(n);
    for (std::size_t t = s.T; t >= 1; --t) {
        std::fill(ts.begin(), ts.end(), t);
        Tape tape(false);
        Tensor eps = denoiser.forward(tape, x, ts);
        for (std::size_t c = 0; c < n; ++c) {
            double* row = x.data() + c * ld;
            const double* eps_row = eps.data() + c * ld;
            const double beta = s.beta_at(t);
            const double inv_sqrt_alpha = 1.0 / std::sqrt(s.alpha_at(t));
            const double eps_coef = beta / std::sqrt(1.0 - s.alpha_bar_at(t));
            const double sigma = t > 1 ? std::sqrt(beta) : 0.0;
            for (std::size_t i = 0; i < ld; ++i) {
                double v = inv_sqrt_alpha * (row[i] - eps_coef * eps_row[i]);
                if (sigma != 0.0) v += sigma * rngs[c].normal();
                row[i] = v;
            }
        }
        if (record_trajectory && is_snapshot(t - 1)) {
            for (std::size_t c = 0; c < n; ++c) {
                std::vector<double> std_space(x.data() + c * ld, x.data() + (c + 1) * ld);
                out[c].trajectory.emplace_back(t - 1, denoiser.unstandardize(std_space));
            }
        }
    }
    for (std::size_t c = 0; c < n; ++c) {
        std::vector<double> std_space(x.data() + c * ld, x.data() + (c + 1) * ld);
        out[c].latent = denoiser.unstandardize(std_space);
        if (record_trajectory && (out[c].trajectory.empty() || out[c].trajectory.back().first != 0)) {
            out[c].trajectory.emplace_back(0, out[c].latent);
        }
    }
    return out;
}

/// Single-chain convenience wrapper.
inline DiffusionSample sample(Denoiser& denoiser, const NoiseSchedule& s, std::uint64_t chain_seed,
                              bool record_trajectory = false, std::size_t snapshots = 10) {
    return sample_batch(denoiser, s, {chain_seed}, record_trajectory, snapshots)[0];
}

}  // namespace pdiff
