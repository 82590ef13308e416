#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "pdiff/container.hpp"
#include "pdiff/nn.hpp"

namespace pdiff {

/// Ordered (layer, parameter) pairs naming the subset to flatten. Flattening
/// concatenates in entry order, each tensor row-major; full mode takes every
/// trainable parameter in model order, weights before biases.
struct ParamSelector {
    enum class Mode { Subset, Full };

    Mode mode = Mode::Full;
    std::vector<std::pair<std::string, std::string>> entries;

    static ParamSelector full() { return {}; }

    static ParamSelector subset(std::vector<std::pair<std::string, std::string>> e) {
        ParamSelector s;
        s.mode = Mode::Subset;
        s.entries = std::move(e);
        return s;
    }

    /// Indices into the model's named parameter list, in selector order.
    std::vector<std::size_t> resolve(const std::vector<nn::NamedParam>& params) const {
        std::vector<std::size_t> out;
        if (mode == Mode::Full) {
            out.resize(params.size());
            for (std::size_t i = 0; i < params.size(); ++i) out[i] = i;
            return out;
        }
        if (entries.empty()) throw std::invalid_argument("selector: subset mode with no entries");
        for (const auto& [layer, param] : entries) {
            const std::string want = layer + "." + param;
            bool found = false;
            for (std::size_t i = 0; i < params.size(); ++i) {
                if (params[i].name == want) {
                    out.push_back(i);
                    found = true;
                    break;
                }
            }
            if (!found) throw std::invalid_argument("selector: no parameter named " + want);
        }
        return out;
    }

    std::size_t dimension(const std::vector<nn::NamedParam>& params) const {
        std::size_t d = 0;
        for (std::size_t i : resolve(params)) d += params[i].tensor.size();
        return d;
    }

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["mode"] = mode == Mode::Full ? "full" : "subset";
        if (mode == Mode::Subset) {
            auto arr = nlohmann::json::array();
            for (const auto& [l, p] : entries) arr.push_back({l, p});
            j["entries"] = arr;
        }
        return j;
    }

    static ParamSelector from_json(const nlohmann::json& j) {
        const std::string mode = j.at("mode").get<std::string>();
        if (mode == "full") return full();
        if (mode != "subset") throw std::invalid_argument("selector: unknown mode " + mode);
        std::vector<std::pair<std::string, std::string>> e;
        for (const auto& pair : j.at("entries")) {
            e.emplace_back(pair.at(0).get<std::string>(), pair.at(1).get<std::string>());
        }
        return subset(std::move(e));
    }
};

struct FlatParamVector {
    std::vector<double> values;

    std::size_t d() const { return values.size(); }
};

/// Concatenates the selected parameters into one row-major vector.
inline FlatParamVector flatten(const std::vector<nn::NamedParam>& params, const ParamSelector& sel) {
    FlatParamVector v;
    for (std::size_t i : sel.resolve(params)) {
        const auto& vals = params[i].tensor.values();
        v.values.insert(v.values.end(), vals.begin(), vals.end());
    }
    for (double x : v.values) {
        if (!std::isfinite(x)) throw std::runtime_error("flatten: non-finite parameter value");
    }
    return v;
}

/// Writes vector entries back into the selected parameters; everything not
/// named by the selector is untouched.
inline void unflatten(const std::vector<double>& values, std::vector<nn::NamedParam>& params,
                      const ParamSelector& sel) {
    const auto idx = sel.resolve(params);
    std::size_t need = 0;
    for (std::size_t i : idx) need += params[i].tensor.size();
    if (values.size() != need) {
        throw std::invalid_argument("unflatten: vector length " + std::to_string(values.size()) +
                                    " != selected dimension " + std::to_string(need));
    }
    std::size_t pos = 0;
    for (std::size_t i : idx) {
        auto& vals = params[i].tensor.values();
        std::copy(values.begin() + static_cast<std::ptrdiff_t>(pos),
                  values.begin() + static_cast<std::ptrdiff_t>(pos + vals.size()), vals.begin());
        pos += vals.size();
    }
}

struct CorpusStats {
    std::vector<double> mean;
    std::vector<double> stddev;  // sample standard deviation
    double min = 0.0;
    double max = 0.0;
};

/// K flattened checkpoints of dimension d plus their manifest. Rows are held
/// at 32-bit storage precision; compute widens to double on read.
class CheckpointCorpus {
public:
    CheckpointCorpus(std::size_t cols, nlohmann::json manifest)
        : cols_(cols), manifest_(std::move(manifest)) {
        if (cols_ == 0) throw std::invalid_argument("corpus: zero-dimensional rows");
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    const nlohmann::json& manifest() const { return manifest_; }
    nlohmann::json& manifest() { return manifest_; }
    const std::vector<float>& raw() const { return data_; }

    void append(const std::vector<double>& row) {
        if (row.size() != cols_) {
            throw std::invalid_argument("corpus: row length " + std::to_string(row.size()) +
                                        " != " + std::to_string(cols_));
        }
        for (double v : row) {
            if (!std::isfinite(v)) throw std::runtime_error("corpus: non-finite entry");
            data_.push_back(static_cast<float>(v));
        }
        ++rows_;
    }

    std::vector<double> row(std::size_t k) const {
        if (k >= rows_) throw std::out_of_range("corpus: row " + std::to_string(k));
        std::vector<double> out(cols_);
        const float* src = data_.data() + k * cols_;
        for (std::size_t i = 0; i < cols_; ++i) out[i] = static_cast<double>(src[i]);
        return out;
    }

    CorpusStats stats() const {
        if (rows_ < 2) {
            throw std::invalid_argument("corpus stats: need at least 2 rows, have " +
                                        std::to_string(rows_));
        }
        CorpusStats s;
        s.mean.assign(cols_, 0.0);
        s.stddev.assign(cols_, 0.0);
        s.min = std::numeric_limits<double>::infinity();
        s.max = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < rows_; ++k) {
            const float* r = data_.data() + k * cols_;
            for (std::size_t i = 0; i < cols_; ++i) {
                const double v = static_cast<double>(r[i]);
                s.mean[i] += v;
                s.min = std::min(s.min, v);
                s.max = std::max(s.max, v);
            }
        }
        for (auto& m : s.mean) m /= static_cast<double>(rows_);
        for (std::size_t k = 0; k < rows_; ++k) {
            const float* r = data_.data() + k * cols_;
            for (std::size_t i = 0; i < cols_; ++i) {
                const double d = static_cast<double>(r[i]) - s.mean[i];
                s.stddev[i] += d * d;
            }
        }
        for (auto& v : s.stddev) v = std::sqrt(v / static_cast<double>(rows_ - 1));
        return s;
    }

    void save(const std::filesystem::path& path) const {
        if (rows_ == 0) throw std::invalid_argument("corpus: nothing to save");
        nlohmann::json m = manifest_;
        m["kind"] = "corpus";
        m["rows"] = rows_;
        m["cols"] = cols_;
        save_container_f32(path, m, rows_, cols_, data_);
    }

    static CheckpointCorpus load(const std::filesystem::path& path) {
        Container c = load_container(path);
        if (c.manifest.value("kind", "") != "corpus") {
            throw std::runtime_error("corpus: container kind is '" +
                                     c.manifest.value("kind", std::string{}) + "'");
        }
        if (!c.is_f32()) throw std::runtime_error("corpus: expected f32 payload");
        if (c.manifest.at("rows").get<std::size_t>() != c.rows ||
            c.manifest.at("cols").get<std::size_t>() != c.cols) {
            throw std::runtime_error("corpus: manifest dimensions disagree with payload");
        }
        CheckpointCorpus corpus(c.cols, c.manifest);
        corpus.rows_ = c.rows;
        corpus.data_ = std::move(c.f32);
        return corpus;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_;
    std::vector<float> data_;
    nlohmann::json manifest_;
};

}  // namespace pdiff
