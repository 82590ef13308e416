// Command-line front end for the parameter-diffusion pipeline. Every
// subcommand reads one experiment config (JSON) plus an output directory and
// writes artifacts in the shared container format; `pipeline` chains all
// stages in memory.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "pdiff/experiment.hpp"

namespace fs = std::filesystem;
using namespace pdiff;

namespace {

struct CommonArgs {
    std::string config_path;
    std::string out_dir = "runs/out";
    std::optional<std::uint64_t> seed_override;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("-c,--config", args.config_path, "experiment config JSON");
    cmd->add_option("-o,--out", args.out_dir, "output directory");
    cmd->add_option("-s,--seed", args.seed_override, "override the config seed");
}

ExperimentConfig load_config(const CommonArgs& args) {
    ExperimentConfig cfg;
    if (!args.config_path.empty()) {
        std::ifstream in(args.config_path);
        if (!in) throw std::runtime_error("cannot open config " + args.config_path);
        cfg = ExperimentConfig::from_json(nlohmann::json::parse(in));
    }
    if (args.seed_override) cfg.seed = *args.seed_override;
    return cfg;
}

std::string timestamp_utc() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

int cmd_train_originals(const CommonArgs& args) {
    auto cfg = load_config(args);
    fs::create_directories(args.out_dir);
    auto dataset = cfg.task.build(cfg.seed);
    Classifier model(cfg.model, cfg.seed);
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    auto history = train_to_convergence(model, dataset, tc);
    save_classifier(fs::path(args.out_dir) / "model_trained.bin", model);
    write_text(fs::path(args.out_dir) / "train_history.json",
               canonical_json(nlohmann::json{{"val_accuracy", history.val_accuracy}}));
    std::printf("trained %s: final val accuracy %.4f\n", to_string(cfg.model.arch).c_str(),
                history.val_accuracy.empty() ? 0.0 : history.val_accuracy.back());
    return 0;
}

int cmd_harvest(const CommonArgs& args) {
    auto cfg = load_config(args);
    auto dataset = cfg.task.build(cfg.seed);
    Classifier model = load_classifier(fs::path(args.out_dir) / "model_trained.bin");
    TrainConfig tc = cfg.train;
    tc.seed = cfg.seed;
    nlohmann::json provenance{{"optimizer", to_string(tc.optimizer)},
                              {"lr", tc.lr},
                              {"finetune_lr", tc.finetune_lr},
                              {"weight_decay", tc.weight_decay},
                              {"epochs", tc.epochs},
                              {"seed", cfg.seed},
                              {"created_at", timestamp_utc()}};
    nlohmann::json manifest{{"task", cfg.task.to_json()}, {"provenance", provenance}};
    auto harvest = finetune_and_harvest(model, dataset, tc, cfg.selector, true, manifest);
    harvest.corpus.save(fs::path(args.out_dir) / "corpus.bin");
    save_classifier(fs::path(args.out_dir) / "model.bin", model);
    std::printf("harvested %zu checkpoints of dimension %zu\n", harvest.corpus.rows(),
                harvest.corpus.cols());
    return 0;
}

int cmd_train_ae(const CommonArgs& args) {
    auto cfg = load_config(args);
    auto corpus = CheckpointCorpus::load(fs::path(args.out_dir) / "corpus.bin");
    AutoencoderConfig ac = cfg.autoencoder;
    ac.input_dim = corpus.cols();
    ParamAutoencoder ae(ac, cfg.seed);
    auto history = ae.train(corpus, cfg.seed);
    ae.save(fs::path(args.out_dir) / "autoencoder.bin");
    std::printf("autoencoder: loss %.6g -> %.6g over %zu iterations\n", history.front(),
                history.back(), history.size());
    return 0;
}

int cmd_train_diffusion(const CommonArgs& args) {
    auto cfg = load_config(args);
    auto corpus = CheckpointCorpus::load(fs::path(args.out_dir) / "corpus.bin");
    auto ae = ParamAutoencoder::load(fs::path(args.out_dir) / "autoencoder.bin");
    DenoiserConfig dc = cfg.diffusion;
    dc.latent_dim = ae.latent_dim();
    Denoiser denoiser(dc, cfg.seed);
    auto schedule = build_schedule(cfg.T, cfg.beta1, cfg.betaT);
    auto history = denoiser.train(ae.encode_all(corpus), schedule, cfg.seed);
    denoiser.save(fs::path(args.out_dir) / "denoiser.bin");
    std::printf("denoiser: loss %.6g -> %.6g over %zu iterations\n", history.front(),
                history.back(), history.size());
    return 0;
}

int cmd_generate(const CommonArgs& args) {
    auto cfg = load_config(args);
    auto ae = ParamAutoencoder::load(fs::path(args.out_dir) / "autoencoder.bin");
    auto denoiser = Denoiser::load(fs::path(args.out_dir) / "denoiser.bin");
    auto schedule = build_schedule(cfg.T, cfg.beta1, cfg.betaT);
    const std::uint64_t sample_seed = derive_seed(cfg.seed, "sample");
    std::vector<std::uint64_t> chain_seeds(cfg.eval.n_generated);
    for (std::size_t i = 0; i < chain_seeds.size(); ++i) {
        chain_seeds[i] = derive_seed(sample_seed, "chain-" + std::to_string(i));
    }
    auto samples = sample_batch(denoiser, schedule, chain_seeds);
    std::vector<std::vector<double>> latents(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) latents[i] = samples[i].latent;
    auto vectors = ae.decode_all(latents);
    CheckpointCorpus out(ae.input_dim(), nlohmann::json{{"role", "generated"}});
    for (auto& v : vectors) {
        for (auto& x : v) x = static_cast<double>(static_cast<float>(x));
        out.append(v);
    }
    out.save(fs::path(args.out_dir) / "generated.bin");
    std::printf("generated %zu parameter vectors of dimension %zu\n", out.rows(), out.cols());
    return 0;
}

int cmd_evaluate(const CommonArgs& args) {
    auto cfg = load_config(args);
    auto dataset = cfg.task.build(cfg.seed);
    Classifier model = load_classifier(fs::path(args.out_dir) / "model.bin");
    auto corpus = CheckpointCorpus::load(fs::path(args.out_dir) / "corpus.bin");
    std::vector<std::vector<double>> generated;
    const fs::path gen_path = fs::path(args.out_dir) / "generated.bin";
    if (fs::exists(gen_path)) {
        auto gen = CheckpointCorpus::load(gen_path);
        for (std::size_t k = 0; k < gen.rows(); ++k) generated.push_back(gen.row(k));
    }

    auto originals = eval_corpus_originals(model, dataset, cfg.selector, corpus);
    std::vector<PredictionRecord> extras;
    extras.push_back(eval_param_vector(model, dataset, cfg.selector,
                                       weight_ensemble(corpus).values, "ensemble-0", "ensemble"));
    const auto stats = corpus.stats();
    std::size_t ref = 0;
    for (std::size_t i = 1; i < originals.size(); ++i) {
        if (originals[i].accuracy > originals[ref].accuracy) ref = i;
    }
    Rng noise_rng(derive_seed(cfg.seed, "noise-baseline"));
    for (double scale : cfg.eval.noise_scales) {
        std::vector<double> sigma;
        if (cfg.eval.noise_scale_mode == "corpus-std") {
            sigma = stats.stddev;
            for (auto& s : sigma) s *= scale;
        } else {
            sigma = {scale};
        }
        char label[48];
        std::snprintf(label, sizeof label, "noise-%g", scale);
        auto recs = noise_baseline(model, dataset, cfg.selector, corpus.row(ref), sigma,
                                   cfg.eval.noise_draws, noise_rng, label);
        for (auto& r : recs) extras.push_back(std::move(r));
    }
    auto report = evaluate_generated(model, dataset, cfg.selector, generated, std::move(originals),
                                     std::move(extras));
    write_text(fs::path(args.out_dir) / "similarity_report.json",
               canonical_json(report.to_json(cfg.eval.include_iou_matrix)));
    write_text(fs::path(args.out_dir) / "similarity_report.csv", report.to_csv());
    for (const auto& s : report.summaries) {
        std::printf("%-12s n=%-4zu best %.4f avg %.4f  max-sim mean %.3f range [%.3f, %.3f]\n",
                    s.tag.c_str(), s.count, s.best_accuracy, s.avg_accuracy, s.maxsim_mean,
                    s.maxsim_min, s.maxsim_max);
    }
    return 0;
}

int cmd_pipeline(const CommonArgs& args) {
    auto cfg = load_config(args);
    auto report = run_pipeline(cfg, args.out_dir);
    for (const auto& s : report.similarity.summaries) {
        std::printf("%-12s n=%-4zu best %.4f avg %.4f  max-sim mean %.3f range [%.3f, %.3f]\n",
                    s.tag.c_str(), s.count, s.best_accuracy, s.avg_accuracy, s.maxsim_mean,
                    s.maxsim_min, s.maxsim_max);
    }
    double total = 0.0;
    for (const auto& t : report.timings) total += t.seconds;
    std::printf("pipeline done in %.1fs; artifacts in %s\n", total, args.out_dir.c_str());
    return 0;
}

int cmd_ablate(const CommonArgs& args, const std::string& axis,
               const std::vector<std::string>& raw_values) {
    auto cfg = load_config(args);
    std::vector<nlohmann::json> values;
    for (const auto& raw : raw_values) {
        values.push_back(nlohmann::json::parse(raw, nullptr, false).is_discarded()
                             ? nlohmann::json(raw)
                             : nlohmann::json::parse(raw));
    }
    auto result = run_ablation(cfg, axis, values, args.out_dir);
    std::printf("%s\n", result.comparison_table().dump(2).c_str());
    return 0;
}

int cmd_scatter(const std::vector<std::string>& report_paths, const std::string& out_path) {
    std::vector<SimilarityReport> reports;
    for (const auto& p : report_paths) {
        std::ifstream in(p);
        if (!in) throw std::runtime_error("cannot open report " + p);
        auto j = nlohmann::json::parse(in);
        SimilarityReport rep;
        rep.n_val = j.value("n_val", 0ull);
        for (const auto& r : j.at("records")) {
            PredictionRecord rec;
            rec.id = r.at("id").get<std::string>();
            rec.tag = r.at("tag").get<std::string>();
            rec.accuracy = r.at("accuracy").get<double>();
            rec.finite = r.value("finite", true);
            rep.records.push_back(std::move(rec));
            rep.max_sim.push_back(r.at("max_similarity").get<double>());
        }
        reports.push_back(std::move(rep));
    }
    std::vector<const SimilarityReport*> ptrs;
    for (const auto& r : reports) ptrs.push_back(&r);
    const std::string csv = emit_scatter(ptrs);
    if (out_path.empty() || out_path == "-") {
        std::fputs(csv.c_str(), stdout);
    } else {
        write_text(out_path, csv);
        std::printf("wrote %s\n", out_path.c_str());
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"neural-network parameter diffusion at desk scale"};
    app.require_subcommand(1);

    CommonArgs args;
    std::string axis;
    std::vector<std::string> values;
    std::vector<std::string> report_paths;
    std::string scatter_out;

    add_common(app.add_subcommand("train-originals", "train the task model"), args);
    add_common(app.add_subcommand("harvest", "fine-tune and save checkpoints"), args);
    add_common(app.add_subcommand("train-ae", "train the parameter autoencoder"), args);
    add_common(app.add_subcommand("train-diffusion", "train the latent denoiser"), args);
    add_common(app.add_subcommand("generate", "sample new parameter vectors"), args);
    add_common(app.add_subcommand("evaluate", "evaluate and report similarity"), args);
    add_common(app.add_subcommand("pipeline", "run every stage end to end"), args);

    auto* ablate = app.add_subcommand("ablate", "run the pipeline along one axis");
    add_common(ablate, args);
    ablate->add_option("-a,--axis", axis, "one of sigma_v,sigma_z,noise-aug,optimizer,K,selector,finetune-lr,epochs,T")
        ->required();
    ablate->add_option("-v,--values", values, "axis values")->required();

    auto* scatter = app.add_subcommand("scatter", "merge similarity reports into scatter CSV");
    scatter->add_option("-r,--reports", report_paths, "similarity_report.json paths")->required();
    scatter->add_option("-o,--out", scatter_out, "output CSV path (default stdout)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand("train-originals")) return cmd_train_originals(args);
        if (app.got_subcommand("harvest")) return cmd_harvest(args);
        if (app.got_subcommand("train-ae")) return cmd_train_ae(args);
        if (app.got_subcommand("train-diffusion")) return cmd_train_diffusion(args);
        if (app.got_subcommand("generate")) return cmd_generate(args);
        if (app.got_subcommand("evaluate")) return cmd_evaluate(args);
        if (app.got_subcommand("pipeline")) return cmd_pipeline(args);
        if (app.got_subcommand("ablate")) return cmd_ablate(args, axis, values);
        if (app.got_subcommand("scatter")) return cmd_scatter(report_paths, scatter_out);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 1;
}
