#pragma once

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pdiff/autoencoder.hpp"
#include "pdiff/corpus.hpp"
#include "pdiff/diffusion.hpp"
#include "pdiff/novelty.hpp"
#include "pdiff/tasks.hpp"

namespace pdiff {

struct TaskConfig {
    DatasetKind kind = DatasetKind::GaussianBlobs;
    std::size_t n_train = 400;
    std::size_t n_val = 400;
    std::size_t n_classes = 4;
    Shape dims = {16};
    double separation = 3.0;

    nlohmann::json to_json() const {
        return {{"kind", to_string(kind)}, {"n_train", n_train},       {"n_val", n_val},
                {"n_classes", n_classes},  {"dims", dims},             {"separation", separation}};
    }

    static TaskConfig from_json(const nlohmann::json& j) {
        TaskConfig c;
        if (j.contains("kind")) c.kind = dataset_kind_from(j.at("kind").get<std::string>());
        c.n_train = j.value("n_train", c.n_train);
        c.n_val = j.value("n_val", c.n_val);
        c.n_classes = j.value("n_classes", c.n_classes);
        c.dims = j.value("dims", c.dims);
        c.separation = j.value("separation", c.separation);
        return c;
    }

    SyntheticDataset build(std::uint64_t seed) const {
        return make_dataset(kind, n_train, n_val, n_classes, dims, seed, separation);
    }
};

struct EvalConfig {
    std::size_t n_generated = 200;
    std::vector<double> noise_scales = {0.001, 0.05, 0.15};
    std::string noise_scale_mode = "corpus-std";  // or "absolute"
    std::size_t noise_draws = 20;
    bool include_iou_matrix = false;
    std::size_t n_trajectories = 5;
    std::size_t trajectory_snapshots = 10;

    nlohmann::json to_json() const {
        return {{"n_generated", n_generated},
                {"noise_scales", noise_scales},
                {"noise_scale_mode", noise_scale_mode},
                {"noise_draws", noise_draws},
                {"include_iou_matrix", include_iou_matrix},
                {"n_trajectories", n_trajectories},
                {"trajectory_snapshots", trajectory_snapshots}};
    }

    static EvalConfig from_json(const nlohmann::json& j) {
        EvalConfig c;
        c.n_generated = j.value("n_generated", c.n_generated);
        c.noise_scales = j.value("noise_scales", c.noise_scales);
        c.noise_scale_mode = j.value("noise_scale_mode", c.noise_scale_mode);
        c.noise_draws = j.value("noise_draws", c.noise_draws);
        c.include_iou_matrix = j.value("include_iou_matrix", c.include_iou_matrix);
        c.n_trajectories = j.value("n_trajectories", c.n_trajectories);
        c.trajectory_snapshots = j.value("trajectory_snapshots", c.trajectory_snapshots);
        return c;
    }
};

/// Everything one experiment needs. Defaults describe the desk-scale toy
/// pipeline; training recipes keep their published shape but with step sizes
/// and iteration counts rescaled for the small networks used here.
struct ExperimentConfig {
    std::uint64_t seed = 1;
    TaskConfig task;
    ModelSpec model;
    ParamSelector selector;  // full by default
    TrainConfig train;
    AutoencoderConfig autoencoder;
    DenoiserConfig diffusion;
    std::size_t T = 1000;
    double beta1 = 1e-4;
    double betaT = 2e-2;
    EvalConfig eval;

    ExperimentConfig() {
        train.lr = 5e-3;
        train.epochs = 20;
        train.batch_size = 32;
        autoencoder.lr = 2e-3;        // desk-scale step for the tiny stacks
        autoencoder.iterations = 800;
        diffusion.lr = 1e-3;
        diffusion.iterations = 1500;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["seed"] = seed;
        j["task"] = task.to_json();
        j["model"] = model.to_json();
        j["selector"] = selector.to_json();
        j["train"] = {{"optimizer", to_string(train.optimizer)},
                      {"lr", train.lr},
                      {"weight_decay", train.weight_decay},
                      {"epochs", train.epochs},
                      {"batch_size", train.batch_size},
                      {"finetune_lr", train.finetune_lr},
                      {"finetune_steps", train.finetune_steps},
                      {"finetune_batch_size", train.finetune_batch_size}};
        j["autoencoder"] = autoencoder.to_json();
        j["diffusion"] = diffusion.to_json();
        j["schedule"] = {{"T", T}, {"beta1", beta1}, {"betaT", betaT}};
        j["eval"] = eval.to_json();
        return j;
    }

    static ExperimentConfig from_json(const nlohmann::json& j) {
        ExperimentConfig c;
        c.seed = j.value("seed", c.seed);
        if (j.contains("task")) c.task = TaskConfig::from_json(j.at("task"));
        if (j.contains("model")) c.model = ModelSpec::from_json(j.at("model"));
        if (j.contains("selector")) c.selector = ParamSelector::from_json(j.at("selector"));
        if (j.contains("train")) {
            const auto& t = j.at("train");
            if (t.contains("optimizer")) {
                c.train.optimizer = optimizer_kind_from(t.at("optimizer").get<std::string>());
            }
            c.train.lr = t.value("lr", c.train.lr);
            c.train.weight_decay = t.value("weight_decay", c.train.weight_decay);
            c.train.epochs = t.value("epochs", c.train.epochs);
            c.train.batch_size = t.value("batch_size", c.train.batch_size);
            c.train.finetune_lr = t.value("finetune_lr", c.train.finetune_lr);
            c.train.finetune_steps = t.value("finetune_steps", c.train.finetune_steps);
            c.train.finetune_batch_size = t.value("finetune_batch_size", c.train.finetune_batch_size);
        }
        if (j.contains("autoencoder")) {
            auto merged = c.autoencoder.to_json();
            merged.update(j.at("autoencoder"));
            c.autoencoder = AutoencoderConfig::from_json(merged);
        }
        if (j.contains("diffusion")) {
            auto merged = c.diffusion.to_json();
            merged.update(j.at("diffusion"));
            c.diffusion = DenoiserConfig::from_json(merged);
        }
        if (j.contains("schedule")) {
            const auto& s = j.at("schedule");
            c.T = s.value("T", c.T);
            c.beta1 = s.value("beta1", c.beta1);
            c.betaT = s.value("betaT", c.betaT);
        }
        if (j.contains("eval")) c.eval = EvalConfig::from_json(j.at("eval"));
        return c;
    }
};

inline std::uint64_t fnv1a_hash(const std::string& bytes) {
    return detail::fnv1a(detail::kFnvOffset, bytes.data(), bytes.size());
}

inline std::string hash_hex(const std::string& bytes) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx",
                  static_cast<unsigned long long>(fnv1a_hash(bytes)));
    return buf;
}

struct StageTiming {
    std::string stage;
    double seconds = 0.0;
};

struct RunReport {
    nlohmann::json config_snapshot;
    std::string config_hash;
    std::uint64_t seed = 0;
    nlohmann::json corpus_summary;
    std::vector<double> train_val_accuracy;
    std::vector<double> harvest_accuracy;
    std::vector<double> ae_loss;
    std::vector<double> ddpm_loss;
    SimilarityReport similarity;
    std::vector<std::vector<std::pair<std::size_t, double>>> trajectories;  // (timestep, accuracy)
    std::vector<StageTiming> timings;
    std::map<std::string, std::string> artifacts;

    nlohmann::json trajectories_json() const {
        auto arr = nlohmann::json::array();
        for (const auto& traj : trajectories) {
            auto t = nlohmann::json::array();
            for (const auto& [step, acc] : traj) t.push_back({{"t", step}, {"accuracy", acc}});
            arr.push_back(std::move(t));
        }
        return arr;
    }

    /// Full run report; wall-clock timings make this file non-deterministic,
    /// unlike the similarity report.
    nlohmann::json to_json(bool include_matrix = false) const {
        nlohmann::json j;
        j["config_hash"] = config_hash;
        j["seed"] = seed;
        j["config"] = config_snapshot;
        j["corpus"] = corpus_summary;
        j["train_val_accuracy"] = train_val_accuracy;
        j["harvest_accuracy"] = harvest_accuracy;
        j["autoencoder_loss"] = ae_loss;
        j["diffusion_loss"] = ddpm_loss;
        j["similarity_report"] = similarity.to_json(include_matrix);
        j["trajectories"] = trajectories_json();
        auto t = nlohmann::json::array();
        for (const auto& s : timings) t.push_back({{"stage", s.stage}, {"seconds", s.seconds}});
        j["timings"] = std::move(t);
        j["artifacts"] = artifacts;
        return j;
    }
};

namespace detail_experiment {

class StageClock {
public:
    explicit StageClock(std::vector<StageTiming>& out) : out_(out) {}

    template <typename F>
    auto run(const std::string& name, F&& fn) {
        const auto start = std::chrono::steady_clock::now();
        if constexpr (std::is_void_v<decltype(fn())>) {
            fn();
            out_.push_back({name, elapsed(start)});
        } else {
            auto result = fn();
            out_.push_back({name, elapsed(start)});
            return result;
        }
    }

private:
    static double elapsed(std::chrono::steady_clock::time_point start) {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
    std::vector<StageTiming>& out_;
};

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
}

/// Best-accuracy corpus row, ties to the lowest index; reference vector for
/// the noise-added baseline.
inline std::size_t best_original(const std::vector<PredictionRecord>& originals) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < originals.size(); ++i) {
        if (originals[i].accuracy > originals[best].accuracy) best = i;
    }
    return best;
}

inline std::string format_scale(double scale) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", scale);
    return buf;
}

}  // namespace detail_experiment

/// Runs train -> harvest -> autoencoder -> diffusion -> generate -> evaluate,
/// writing every artifact under out_dir. Rerunning with the same config and
/// seed reproduces all numeric outputs byte-for-byte.
inline RunReport run_pipeline(const ExperimentConfig& cfg, const std::filesystem::path& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    RunReport report;
    report.seed = cfg.seed;
    report.config_snapshot = cfg.to_json();
    const std::string snapshot_text = canonical_json(report.config_snapshot);
    report.config_hash = hash_hex(snapshot_text);
    detail_experiment::write_text(out_dir / "config.json", snapshot_text);
    report.artifacts["config"] = (out_dir / "config.json").string();

    detail_experiment::StageClock clock(report.timings);

    // train originals
    auto dataset = clock.run("dataset", [&] { return cfg.task.build(cfg.seed); });
    Classifier model(cfg.model, cfg.seed);
    TrainConfig train_cfg = cfg.train;
    train_cfg.seed = cfg.seed;
    clock.run("train", [&] {
        report.train_val_accuracy = train_to_convergence(model, dataset, train_cfg).val_accuracy;
    });
    save_classifier(out_dir / "model_trained.bin", model);
    report.artifacts["model_trained"] = (out_dir / "model_trained.bin").string();

    // harvest checkpoints
    nlohmann::json provenance{{"optimizer", to_string(train_cfg.optimizer)},
                              {"lr", train_cfg.lr},
                              {"finetune_lr", train_cfg.finetune_lr},
                              {"weight_decay", train_cfg.weight_decay},
                              {"epochs", train_cfg.epochs},
                              {"seed", cfg.seed},
                              {"created_at", ""}};
    nlohmann::json manifest{{"task", cfg.task.to_json()}, {"provenance", provenance}};
    auto harvest = clock.run("harvest", [&] {
        return finetune_and_harvest(model, dataset, train_cfg, cfg.selector, true, manifest);
    });
    report.harvest_accuracy = harvest.step_accuracy;
    harvest.corpus.save(out_dir / "corpus.bin");
    report.artifacts["corpus"] = (out_dir / "corpus.bin").string();
    save_classifier(out_dir / "model.bin", model);
    report.artifacts["model"] = (out_dir / "model.bin").string();

    const auto stats = harvest.corpus.stats();
    {
        double mean_std = 0.0;
        for (double s : stats.stddev) mean_std += s;
        mean_std /= static_cast<double>(stats.stddev.size());
        report.corpus_summary = {{"rows", harvest.corpus.rows()},
                                 {"cols", harvest.corpus.cols()},
                                 {"min", stats.min},
                                 {"max", stats.max},
                                 {"mean_stddev", mean_std}};
    }

    // autoencoder
    AutoencoderConfig ae_cfg = cfg.autoencoder;
    ae_cfg.input_dim = harvest.corpus.cols();
    ParamAutoencoder ae(ae_cfg, cfg.seed);
    clock.run("autoencoder", [&] { report.ae_loss = ae.train(harvest.corpus, cfg.seed); });
    ae.save(out_dir / "autoencoder.bin");
    report.artifacts["autoencoder"] = (out_dir / "autoencoder.bin").string();

    // latent diffusion
    const auto schedule = build_schedule(cfg.T, cfg.beta1, cfg.betaT);
    DenoiserConfig dn_cfg = cfg.diffusion;
    dn_cfg.latent_dim = ae.latent_dim();
    Denoiser denoiser(dn_cfg, cfg.seed);
    clock.run("diffusion", [&] {
        report.ddpm_loss = denoiser.train(ae.encode_all(harvest.corpus), schedule, cfg.seed);
    });
    denoiser.save(out_dir / "denoiser.bin");
    report.artifacts["denoiser"] = (out_dir / "denoiser.bin").string();

    // generate
    const std::uint64_t sample_seed = derive_seed(cfg.seed, "sample");
    auto generated = clock.run("generate", [&] {
        std::vector<std::uint64_t> chain_seeds(cfg.eval.n_generated);
        for (std::size_t i = 0; i < chain_seeds.size(); ++i) {
            chain_seeds[i] = derive_seed(sample_seed, "chain-" + std::to_string(i));
        }
        auto samples = sample_batch(denoiser, schedule, chain_seeds);
        std::vector<std::vector<double>> latents(samples.size());
        for (std::size_t i = 0; i < samples.size(); ++i) latents[i] = samples[i].latent;
        auto vectors = ae.decode_all(latents);
        for (auto& v : vectors) {
            for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
        }
        return vectors;
    });
    {
        CheckpointCorpus gen_box(harvest.corpus.cols(), nlohmann::json{{"role", "generated"}});
        for (const auto& v : generated) gen_box.append(v);
        if (gen_box.rows() > 0) {
            gen_box.save(out_dir / "generated.bin");
            report.artifacts["generated"] = (out_dir / "generated.bin").string();
        }
    }

    // evaluate: originals, ensemble, noise baselines, generated
    clock.run("evaluate", [&] {
        auto originals = eval_corpus_originals(model, dataset, cfg.selector, harvest.corpus);
        std::vector<PredictionRecord> extras;
        extras.push_back(eval_param_vector(model, dataset, cfg.selector,
                                           weight_ensemble(harvest.corpus).values, "ensemble-0",
                                           "ensemble"));
        const std::size_t ref = detail_experiment::best_original(originals);
        const auto ref_row = harvest.corpus.row(ref);
        Rng noise_rng(derive_seed(cfg.seed, "noise-baseline"));
        for (double scale : cfg.eval.noise_scales) {
            std::vector<double> sigma;
            if (cfg.eval.noise_scale_mode == "corpus-std") {
                sigma = stats.stddev;
                for (auto& s : sigma) s *= scale;
            } else if (cfg.eval.noise_scale_mode == "absolute") {
                sigma = {scale};
            } else {
                throw std::invalid_argument("unknown noise_scale_mode: " + cfg.eval.noise_scale_mode);
            }
            auto recs = noise_baseline(model, dataset, cfg.selector, ref_row, sigma,
                                       cfg.eval.noise_draws, noise_rng,
                                       "noise-" + detail_experiment::format_scale(scale));
            for (auto& r : recs) extras.push_back(std::move(r));
        }
        report.similarity = evaluate_generated(model, dataset, cfg.selector, generated,
                                               std::move(originals), std::move(extras));
    });

    // accuracy trajectories along the reverse chain
    if (cfg.eval.n_trajectories > 0) {
        clock.run("trajectories", [&] {
            std::vector<std::uint64_t> chain_seeds(cfg.eval.n_trajectories);
            for (std::size_t i = 0; i < chain_seeds.size(); ++i) {
                chain_seeds[i] = derive_seed(sample_seed, "trajectory-" + std::to_string(i));
            }
            auto samples = sample_batch(denoiser, schedule, chain_seeds, true,
                                        cfg.eval.trajectory_snapshots);
            for (const auto& smp : samples) {
                std::vector<std::vector<double>> latents;
                latents.reserve(smp.trajectory.size());
                for (const auto& [t, z] : smp.trajectory) latents.push_back(z);
                auto decoded = ae.decode_all(latents);
                std::vector<std::pair<std::size_t, double>> curve;
                for (std::size_t i = 0; i < decoded.size(); ++i) {
                    for (auto& x : decoded[i]) x = static_cast<double>(static_cast<float>(x));
                    auto rec = eval_param_vector(model, dataset, cfg.selector, decoded[i],
                                                 "traj", "generated");
                    curve.emplace_back(smp.trajectory[i].first, rec.accuracy);
                }
                report.trajectories.push_back(std::move(curve));
            }
        });
    }

    detail_experiment::write_text(out_dir / "similarity_report.json",
                                  canonical_json(report.similarity.to_json(cfg.eval.include_iou_matrix)));
    detail_experiment::write_text(out_dir / "similarity_report.csv", report.similarity.to_csv());
    detail_experiment::write_text(out_dir / "trajectories.json",
                                  canonical_json(report.trajectories_json()));
    detail_experiment::write_text(out_dir / "run_report.json",
                                  report.to_json(cfg.eval.include_iou_matrix).dump(2));
    report.artifacts["similarity_report"] = (out_dir / "similarity_report.json").string();
    report.artifacts["similarity_csv"] = (out_dir / "similarity_report.csv").string();
    report.artifacts["trajectories"] = (out_dir / "trajectories.json").string();
    report.artifacts["run_report"] = (out_dir / "run_report.json").string();
    return report;
}

/// Applies one ablation value to a copy of the base config.
inline ExperimentConfig apply_axis(const ExperimentConfig& base, const std::string& axis,
                                   const nlohmann::json& value) {
    ExperimentConfig cfg = base;
    if (axis == "sigma_v") {
        cfg.autoencoder.sigma_v = value.get<double>();
    } else if (axis == "sigma_z") {
        cfg.autoencoder.sigma_z = value.get<double>();
    } else if (axis == "noise-aug") {
        const std::string mode = value.get<std::string>();
        if (mode == "none") {
            cfg.autoencoder.sigma_v = 0.0;
            cfg.autoencoder.sigma_z = 0.0;
        } else if (mode == "parameter") {
            cfg.autoencoder.sigma_z = 0.0;
        } else if (mode == "latent") {
            cfg.autoencoder.sigma_v = 0.0;
        } else if (mode != "both") {
            throw std::invalid_argument("noise-aug value must be none|parameter|latent|both");
        }
    } else if (axis == "optimizer") {
        cfg.train.optimizer = optimizer_kind_from(value.get<std::string>());
    } else if (axis == "K") {
        cfg.train.finetune_steps = value.get<std::size_t>();
    } else if (axis == "selector") {
        if (value.is_object()) {
            cfg.selector = ParamSelector::from_json(value);
        } else {
            const std::string s = value.get<std::string>();
            if (s == "full") {
                cfg.selector = ParamSelector::full();
            } else {
                std::vector<std::pair<std::string, std::string>> entries;
                std::size_t pos = 0;
                while (pos <= s.size()) {
                    const std::size_t next = std::min(s.find('+', pos), s.size());
                    const std::string layer = s.substr(pos, next - pos);
                    bool known = false;
                    for (const auto& p : base.model.layer_table()) {
                        if (p.layer == layer) {
                            entries.emplace_back(p.layer, p.param);
                            known = true;
                        }
                    }
                    if (!known) throw std::invalid_argument("selector value names unknown layer: " + layer);
                    pos = next + 1;
                }
                cfg.selector = ParamSelector::subset(std::move(entries));
            }
        }
    } else if (axis == "finetune-lr") {
        cfg.train.finetune_lr = value.get<double>();
    } else if (axis == "epochs") {
        cfg.train.epochs = value.get<std::size_t>();
    } else if (axis == "T") {
        cfg.T = value.get<std::size_t>();
    } else {
        throw std::invalid_argument("unknown ablation axis: " + axis);
    }
    return cfg;
}

struct AblationResult {
    std::string axis;
    std::vector<nlohmann::json> values;
    std::vector<RunReport> reports;

    nlohmann::json comparison_table() const {
        auto rows = nlohmann::json::array();
        for (std::size_t i = 0; i < reports.size(); ++i) {
            const auto& rep = reports[i];
            nlohmann::json row{{"axis", axis}, {"value", values[i]}};
            for (const std::string tag : {"original", "generated"}) {
                if (const TagSummary* s = rep.similarity.summary(tag)) {
                    row[tag] = {{"best_accuracy", s->best_accuracy},
                                {"avg_accuracy", s->avg_accuracy},
                                {"max_similarity",
                                 {{"mean", s->maxsim_mean},
                                  {"min", s->maxsim_min},
                                  {"max", s->maxsim_max},
                                  {"q25", s->maxsim_q25},
                                  {"q75", s->maxsim_q75}}}};
                }
            }
            rows.push_back(std::move(row));
        }
        return rows;
    }
};

/// Runs the base config once per value along one axis; sibling runs differ in
/// nothing but that axis.
inline AblationResult run_ablation(const ExperimentConfig& base, const std::string& axis,
                                   const std::vector<nlohmann::json>& values,
                                   const std::filesystem::path& out_dir) {
    if (values.empty()) throw std::invalid_argument("ablation: no values given");
    AblationResult result;
    result.axis = axis;
    result.values = values;
    for (std::size_t i = 0; i < values.size(); ++i) {
        ExperimentConfig cfg = apply_axis(base, axis, values[i]);
        result.reports.push_back(run_pipeline(cfg, out_dir / ("value-" + std::to_string(i))));
    }
    detail_experiment::write_text(out_dir / "comparison.json",
                                  canonical_json(result.comparison_table()));
    return result;
}

/// One scatter row per model across all reports: accuracy against maximum
/// similarity, tagged by provenance.
inline std::string emit_scatter(const std::vector<const SimilarityReport*>& reports) {
    std::string out = "run,id,tag,accuracy,max_similarity\n";
    char buf[192];
    for (std::size_t r = 0; r < reports.size(); ++r) {
        const auto& rep = *reports[r];
        for (std::size_t i = 0; i < rep.records.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%zu,%s,%s,%.17g,%.17g\n", r, rep.records[i].id.c_str(),
                          rep.records[i].tag.c_str(), rep.records[i].accuracy, rep.max_sim[i]);
            out += buf;
        }
    }
    return out;
}

}  // namespace pdiff
