#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pdiff/corpus.hpp"
#include "pdiff/rng.hpp"
#include "pdiff/tasks.hpp"

namespace pdiff {

struct PredictionRecord {
    std::string id;
    std::string tag;  // original | generated | noise-added | ensemble
    double accuracy = 0.0;
    std::vector<int> wrong_set;  // sorted indices of misclassified validation samples
    std::size_t n_val = 0;
    bool finite = true;  // false when the parameter vector had non-finite entries
};

inline PredictionRecord make_record(std::string id, std::string tag, const EvalResult& eval,
                                    const std::vector<int>& labels) {
    PredictionRecord r;
    r.id = std::move(id);
    r.tag = std::move(tag);
    r.n_val = labels.size();
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (eval.predictions[i] != labels[i]) r.wrong_set.push_back(static_cast<int>(i));
    }
    r.accuracy = eval.accuracy;
    return r;
}

/// IoU of the two wrong-prediction sets. Two perfect models count as
/// behaviorally identical (1); a perfect model against an imperfect one
/// scores 0.
inline double iou_similarity(const PredictionRecord& a, const PredictionRecord& b) {
    if (a.n_val != b.n_val) {
        throw std::invalid_argument("iou: records come from different validation splits (" +
                                    std::to_string(a.n_val) + " vs " + std::to_string(b.n_val) + ")");
    }
    if (a.wrong_set.empty() && b.wrong_set.empty()) return 1.0;
    if (a.wrong_set.empty() || b.wrong_set.empty()) return 0.0;
    std::size_t inter = 0, i = 0, j = 0;
    while (i < a.wrong_set.size() && j < b.wrong_set.size()) {
        if (a.wrong_set[i] == b.wrong_set[j]) {
            ++inter;
            ++i;
            ++j;
        } else if (a.wrong_set[i] < b.wrong_set[j]) {
            ++i;
        } else {
            ++j;
        }
    }
    const std::size_t uni = a.wrong_set.size() + b.wrong_set.size() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

/// Largest IoU against the original set; a record never scores against
/// itself (matched by id).
inline double max_similarity(const PredictionRecord& target,
                             const std::vector<PredictionRecord>& originals) {
    if (originals.empty()) throw std::invalid_argument("max_similarity: no originals");
    double best = -1.0;
    for (const auto& o : originals) {
        if (o.id == target.id) continue;
        best = std::max(best, iou_similarity(target, o));
    }
    if (best < 0.0) {
        throw std::invalid_argument("max_similarity: no eligible originals after self-exclusion");
    }
    return best;
}

/// Injects a parameter vector into the model and evaluates it. Non-finite
/// vectors are reported as invalid records instead of aborting the run.
inline PredictionRecord eval_param_vector(Classifier& model, const SyntheticDataset& ds,
                                          const ParamSelector& sel,
                                          const std::vector<double>& values, std::string id,
                                          std::string tag) {
    for (double v : values) {
        if (!std::isfinite(v)) {
            PredictionRecord r;
            r.id = std::move(id);
            r.tag = std::move(tag);
            r.n_val = ds.n_val();
            r.finite = false;
            return r;
        }
    }
    auto params = model.named_params();
    unflatten(values, params, sel);
    return make_record(std::move(id), std::move(tag), evaluate(model, ds), ds.val_y);
}

/// One record per corpus row, in harvest order.
inline std::vector<PredictionRecord> eval_corpus_originals(Classifier& model,
                                                           const SyntheticDataset& ds,
                                                           const ParamSelector& sel,
                                                           const CheckpointCorpus& corpus) {
    std::vector<PredictionRecord> out;
    out.reserve(corpus.rows());
    for (std::size_t k = 0; k < corpus.rows(); ++k) {
        out.push_back(eval_param_vector(model, ds, sel, corpus.row(k),
                                        "original-" + std::to_string(k), "original"));
    }
    return out;
}

/// Coordinate-wise mean of all corpus rows.
inline FlatParamVector weight_ensemble(const CheckpointCorpus& corpus) {
    if (corpus.rows() == 0) throw std::invalid_argument("ensemble: empty corpus");
    FlatParamVector v;
    v.values.assign(corpus.cols(), 0.0);
    for (std::size_t k = 0; k < corpus.rows(); ++k) {
        const auto row = corpus.row(k);
        for (std::size_t i = 0; i < corpus.cols(); ++i) v.values[i] += row[i];
    }
    for (auto& x : v.values) x /= static_cast<double>(corpus.rows());
    // parameter vectors are evaluated at storage precision
    for (auto& x : v.values) x = static_cast<double>(static_cast<float>(x));
    return v;
}

/// Gaussian perturbations of one reference vector: draws records at
/// per-dimension scale sigma (one sigma entry per coordinate, or a single
/// absolute scale broadcast over all of them).
inline std::vector<PredictionRecord> noise_baseline(Classifier& model, const SyntheticDataset& ds,
                                                    const ParamSelector& sel,
                                                    const std::vector<double>& origin,
                                                    const std::vector<double>& sigma,
                                                    std::size_t draws, Rng& rng,
                                                    const std::string& id_prefix) {
    if (sigma.size() != 1 && sigma.size() != origin.size()) {
        throw std::invalid_argument("noise_baseline: sigma must be scalar or per-dimension");
    }
    std::vector<PredictionRecord> out;
    out.reserve(draws);
    for (std::size_t d = 0; d < draws; ++d) {
        std::vector<double> noised(origin.size());
        for (std::size_t i = 0; i < origin.size(); ++i) {
            const double s = sigma.size() == 1 ? sigma[0] : sigma[i];
            noised[i] = origin[i] + s * rng.normal();
        }
        for (auto& x : noised) x = static_cast<double>(static_cast<float>(x));
        out.push_back(eval_param_vector(model, ds, sel, noised,
                                        id_prefix + "-" + std::to_string(d), "noise-added"));
    }
    return out;
}

struct TagSummary {
    std::string tag;
    std::size_t count = 0;
    double best_accuracy = 0.0;
    double avg_accuracy = 0.0;
    double maxsim_mean = 0.0;
    double maxsim_min = 0.0;
    double maxsim_max = 0.0;
    double maxsim_q25 = 0.0;
    double maxsim_q75 = 0.0;
};

struct SimilarityReport {
    std::size_t n_val = 0;
    std::vector<PredictionRecord> records;
    std::vector<double> max_sim;                   // aligned with records
    std::vector<std::vector<double>> iou_matrix;   // records x originals
    std::vector<std::size_t> original_indices;     // record indices tagged original
    std::vector<TagSummary> summaries;

    const TagSummary* summary(const std::string& tag) const {
        for (const auto& s : summaries) {
            if (s.tag == tag) return &s;
        }
        return nullptr;
    }

    nlohmann::json to_json(bool include_matrix = false) const {
        nlohmann::json j;
        j["n_val"] = n_val;
        auto recs = nlohmann::json::array();
        for (std::size_t i = 0; i < records.size(); ++i) {
            const auto& r = records[i];
            nlohmann::json e{{"id", r.id},
                             {"tag", r.tag},
                             {"accuracy", r.accuracy},
                             {"max_similarity", max_sim[i]},
                             {"wrong_count", r.wrong_set.size()},
                             {"finite", r.finite}};
            recs.push_back(std::move(e));
        }
        j["records"] = std::move(recs);
        auto sums = nlohmann::json::array();
        for (const auto& s : summaries) {
            sums.push_back({{"tag", s.tag},
                            {"count", s.count},
                            {"best_accuracy", s.best_accuracy},
                            {"avg_accuracy", s.avg_accuracy},
                            {"max_similarity",
                             {{"mean", s.maxsim_mean},
                              {"min", s.maxsim_min},
                              {"max", s.maxsim_max},
                              {"q25", s.maxsim_q25},
                              {"q75", s.maxsim_q75}}}});
        }
        j["summaries"] = std::move(sums);
        if (include_matrix) j["iou_matrix"] = iou_matrix;
        return j;
    }

    /// One row per model, stable column order.
    std::string to_csv() const {
        std::string out = "id,tag,accuracy,max_similarity\n";
        char buf[160];
        for (std::size_t i = 0; i < records.size(); ++i) {
            std::snprintf(buf, sizeof buf, "%s,%s,%.17g,%.17g\n", records[i].id.c_str(),
                          records[i].tag.c_str(), records[i].accuracy, max_sim[i]);
            out += buf;
        }
        return out;
    }
};

namespace detail_novelty {

inline double quantile(std::vector<double> sorted, double q) {
    if (sorted.empty()) return 0.0;
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

}  // namespace detail_novelty

/// Assembles the full report: wrong sets, IoU against every original,
/// per-record maximum similarity and per-tag summaries. `extra` carries
/// baseline records (ensemble, noise-added) evaluated elsewhere.
inline SimilarityReport evaluate_generated(Classifier& model, const SyntheticDataset& ds,
                                           const ParamSelector& sel,
                                           const std::vector<std::vector<double>>& generated,
                                           std::vector<PredictionRecord> originals,
                                           std::vector<PredictionRecord> extra = {}) {
    SimilarityReport rep;
    rep.n_val = ds.n_val();
    rep.records = std::move(originals);
    for (std::size_t g = 0; g < generated.size(); ++g) {
        rep.records.push_back(eval_param_vector(model, ds, sel, generated[g],
                                                "generated-" + std::to_string(g), "generated"));
    }
    for (auto& r : extra) rep.records.push_back(std::move(r));

    for (std::size_t i = 0; i < rep.records.size(); ++i) {
        if (rep.records[i].tag == "original") rep.original_indices.push_back(i);
    }

    rep.max_sim.assign(rep.records.size(), 0.0);
    rep.iou_matrix.assign(rep.records.size(),
                          std::vector<double>(rep.original_indices.size(), 0.0));
    for (std::size_t i = 0; i < rep.records.size(); ++i) {
        const auto& r = rep.records[i];
        double best = -1.0;
        for (std::size_t j = 0; j < rep.original_indices.size(); ++j) {
            const auto& o = rep.records[rep.original_indices[j]];
            if (!r.finite || !o.finite) continue;
            const double iou = iou_similarity(r, o);
            rep.iou_matrix[i][j] = iou;
            if (o.id != r.id) best = std::max(best, iou);
        }
        rep.max_sim[i] = std::max(best, 0.0);
    }

    for (const std::string tag : {"original", "generated", "noise-added", "ensemble"}) {
        TagSummary s;
        s.tag = tag;
        std::vector<double> sims;
        double acc_sum = 0.0;
        for (std::size_t i = 0; i < rep.records.size(); ++i) {
            const auto& r = rep.records[i];
            if (r.tag != tag || !r.finite) continue;
            ++s.count;
            acc_sum += r.accuracy;
            s.best_accuracy = std::max(s.best_accuracy, r.accuracy);
            sims.push_back(rep.max_sim[i]);
        }
        if (s.count == 0) continue;
        s.avg_accuracy = acc_sum / static_cast<double>(s.count);
        std::sort(sims.begin(), sims.end());
        s.maxsim_min = sims.front();
        s.maxsim_max = sims.back();
        s.maxsim_q25 = detail_novelty::quantile(sims, 0.25);
        s.maxsim_q75 = detail_novelty::quantile(sims, 0.75);
        double sum = 0.0;
        for (double v : sims) sum += v;
        s.maxsim_mean = sum / static_cast<double>(sims.size());
        rep.summaries.push_back(std::move(s));
    }
    return rep;
}

}  // namespace pdiff
