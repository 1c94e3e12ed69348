#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "aggdet/catalog.hpp"
#include "aggdet/errors.hpp"
#include "aggdet/linalg.hpp"
#include "aggdet/proposal_stage.hpp"
#include "aggdet/prototypes.hpp"

namespace aggdet {

/// Where a score table sits in the classification chain. Tables only ever
/// move forward through these stages.
enum class ScoreStage { raw_similarity = 0, aggregated_similarity = 1, calibrated = 2, regulated = 3 };

inline const char* to_string(ScoreStage s) noexcept {
    switch (s) {
        case ScoreStage::raw_similarity: return "raw_similarity";
        case ScoreStage::aggregated_similarity: return "aggregated_similarity";
        case ScoreStage::calibrated: return "calibrated";
        case ScoreStage::regulated: return "regulated";
    }
    return "?";
}

/// Row-major proposals x classes matrix tagged with its stage.
class ScoreTable {
public:
    ScoreTable() = default;
    ScoreTable(std::size_t rows, std::size_t cols, ScoreStage stage)
        : rows_(rows), cols_(cols), stage_(stage), values_(rows * cols, 0.0) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    ScoreStage stage() const noexcept { return stage_; }

    double operator()(std::size_t r, std::size_t c) const noexcept { return values_[r * cols_ + c]; }
    double& operator()(std::size_t r, std::size_t c) noexcept { return values_[r * cols_ + c]; }

    std::span<const double> row(std::size_t r) const noexcept { return {values_.data() + r * cols_, cols_}; }
    std::span<double> row(std::size_t r) noexcept { return {values_.data() + r * cols_, cols_}; }
    const std::vector<double>& values() const noexcept { return values_; }

    ScoreTable advanced(ScoreStage next) const {
        if (static_cast<int>(next) < static_cast<int>(stage_)) {
            throw ContractError(std::string("score table cannot move from ") + to_string(stage_) + " back to " +
                                to_string(next));
        }
        ScoreTable t = *this;
        t.stage_ = next;
        return t;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    ScoreStage stage_ = ScoreStage::raw_similarity;
    std::vector<double> values_;
};

namespace detail {

inline void require_stage(const ScoreTable& t, ScoreStage expected, const char* op) {
    if (t.stage() != expected) {
        throw ContractError(std::string(op) + ": expected a " + to_string(expected) + " table, got " +
                            to_string(t.stage()));
    }
}

}  // namespace detail

inline double sigmoid(double x) noexcept {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

/// Dot products of each feature with each class text embedding. Features and
/// embeddings are used as given; normalization is the caller's policy.
inline ScoreTable region_text_similarity(std::span<const Vector> features, const ClassCatalog& catalog) {
    ScoreTable t(features.size(), catalog.size(), ScoreStage::raw_similarity);
    for (std::size_t r = 0; r < features.size(); ++r) {
        if (features[r].size() != catalog.dim()) {
            throw ContractError("region_text_similarity: feature " + std::to_string(r) + " has dimension " +
                                std::to_string(features[r].size()) + ", catalog has " +
                                std::to_string(catalog.dim()));
        }
        for (std::size_t c = 0; c < catalog.size(); ++c) t(r, c) = dot_unchecked(features[r], catalog[c].text);
    }
    return t;
}

/// Feature-to-prototype dot products for novel columns; base columns stay 0.
inline ScoreTable prototype_similarity(std::span<const Vector> features, const ClassCatalog& catalog,
                                       const PrototypeBank& bank) {
    if (bank.dim != catalog.dim()) {
        throw ContractError("prototype bank dimension " + std::to_string(bank.dim) + " does not match catalog " +
                            std::to_string(catalog.dim()));
    }
    std::vector<const Vector*> protos;
    for (std::size_t c : catalog.novel_columns()) protos.push_back(&bank.novel(catalog[c].id));
    ScoreTable t(features.size(), catalog.size(), ScoreStage::raw_similarity);
    const auto& novel = catalog.novel_columns();
    std::vector<const double*> rows(features.size());
    std::vector<const double*> cols(protos.size());
    for (std::size_t r = 0; r < features.size(); ++r) {
        if (features[r].size() != catalog.dim()) {
            throw ContractError("prototype_similarity: feature " + std::to_string(r) + " has wrong dimension");
        }
        rows[r] = features[r].data();
    }
    for (std::size_t n = 0; n < protos.size(); ++n) cols[n] = protos[n]->data();
    std::vector<double> dots(rows.size() * cols.size());
    dot_table(rows, cols, catalog.dim(), dots.data());
    for (std::size_t r = 0; r < features.size(); ++r) {
        for (std::size_t n = 0; n < novel.size(); ++n) t(r, novel[n]) = dots[r * novel.size() + n];
    }
    return t;
}

/// Adds `alpha` times the prototype similarity to novel columns only. Base
/// columns are copied untouched.
inline ScoreTable aggregate_similarity(const ScoreTable& raw, const ScoreTable& proto_sim,
                                       const ClassCatalog& catalog, double alpha) {
    detail::require_stage(raw, ScoreStage::raw_similarity, "aggregate_similarity");
    if (!(alpha >= 0.0)) throw ContractError("aggregate_similarity: alpha must be >= 0");
    if (raw.rows() != proto_sim.rows() || raw.cols() != proto_sim.cols() || raw.cols() != catalog.size()) {
        throw ContractError("aggregate_similarity: table shapes disagree");
    }
    ScoreTable out = raw.advanced(ScoreStage::aggregated_similarity);
    for (std::size_t r = 0; r < out.rows(); ++r) {
        for (std::size_t c : catalog.novel_columns()) out(r, c) += alpha * proto_sim(r, c);
    }
    return out;
}

inline ScoreTable aggregate_similarity(const ScoreTable& raw, std::span<const Vector> features,
                                       const ClassCatalog& catalog, const PrototypeBank& bank, double alpha) {
    if (features.size() != raw.rows()) {
        throw ContractError("aggregate_similarity: " + std::to_string(features.size()) + " features for " +
                            std::to_string(raw.rows()) + " rows");
    }
    return aggregate_similarity(raw, prototype_similarity(features, catalog, bank), catalog, alpha);
}

/// Element-wise sigmoid(s / temperature).
inline ScoreTable calibrate(const ScoreTable& similarity, double temperature) {
    if (similarity.stage() != ScoreStage::raw_similarity && similarity.stage() != ScoreStage::aggregated_similarity) {
        throw ContractError(std::string("calibrate: expected a similarity table, got ") + to_string(similarity.stage()));
    }
    if (!(temperature > 0.0) || !std::isfinite(temperature)) {
        throw ContractError("calibrate: temperature must be positive");
    }
    ScoreTable out = similarity.advanced(ScoreStage::calibrated);
    for (std::size_t r = 0; r < out.rows(); ++r) {
        for (double& v : out.row(r)) v = sigmoid(v / temperature);
    }
    return out;
}

namespace detail {

// x^gamma for x >= 0. Exponents 1/2 and 3/4 go through square roots, which
// are exact identities there and monotone in x.
inline double pow_gamma(double x, double gamma) noexcept {
    if (gamma == 0.5) return std::sqrt(x);
    if (gamma == 0.75) {
        const double r = std::sqrt(x);
        return r * std::sqrt(r);
    }
    return std::pow(x, gamma);
}

inline void pow_gamma_scaled(std::span<double> v, double gamma, double scale) noexcept {
    if (gamma == 0.5) {
        for (double& x : v) x = std::sqrt(x) * scale;
    } else if (gamma == 0.75) {
        for (double& x : v) {
            const double r = std::sqrt(x);
            x = r * std::sqrt(r) * scale;
        }
    } else {
        for (double& x : v) x = std::pow(x, gamma) * scale;
    }
}

}  // namespace detail

/// Weighted geometric mean c^gamma * q^(1-gamma), row by row.
inline double regulate(double c, double q, double gamma) noexcept {
    if (gamma == 1.0) return c;
    return detail::pow_gamma(c, gamma) * detail::pow_gamma(q, 1.0 - gamma);
}

inline ScoreTable quality_regulate(const ScoreTable& calibrated, const QualityVector& q, double gamma) {
    detail::require_stage(calibrated, ScoreStage::calibrated, "quality_regulate");
    if (!(gamma > 0.0 && gamma <= 1.0)) throw ContractError("quality_regulate: gamma must lie in (0,1]");
    if (q.size() != calibrated.rows()) {
        throw ContractError("quality_regulate: " + std::to_string(q.size()) + " quality values for " +
                            std::to_string(calibrated.rows()) + " rows");
    }
    ScoreTable out = calibrated.advanced(ScoreStage::regulated);
    for (std::size_t r = 0; r < out.rows(); ++r) {
        const double qi = q.values[r];
        if (!(qi >= 0.0 && qi <= 1.0)) throw ContractError("quality_regulate: quality outside [0,1]");
        if (gamma == 1.0) continue;
        detail::pow_gamma_scaled(out.row(r), gamma, detail::pow_gamma(qi, 1.0 - gamma));
    }
    return out;
}

/// A raw table paired with its aggregated counterpart over the same proposals.
struct CalibrationPair {
    const ScoreTable* raw = nullptr;
    const ScoreTable* aggregated = nullptr;
};

/// Mean difference between aggregated and raw similarity over every novel
/// entry of the calibration tables.
inline double trivial_offset_calibrate(std::span<const CalibrationPair> pairs, const ClassCatalog& catalog) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& p : pairs) {
        if (p.raw == nullptr || p.aggregated == nullptr) throw ContractError("trivial_offset_calibrate: null table");
        detail::require_stage(*p.raw, ScoreStage::raw_similarity, "trivial_offset_calibrate");
        detail::require_stage(*p.aggregated, ScoreStage::aggregated_similarity, "trivial_offset_calibrate");
        if (p.raw->rows() != p.aggregated->rows() || p.raw->cols() != p.aggregated->cols() ||
            p.raw->cols() != catalog.size()) {
            throw ContractError("trivial_offset_calibrate: paired tables disagree in shape");
        }
        for (std::size_t r = 0; r < p.raw->rows(); ++r) {
            for (std::size_t c : catalog.novel_columns()) {
                sum += (*p.aggregated)(r, c) - (*p.raw)(r, c);
                ++count;
            }
        }
    }
    if (count == 0) throw ContractError("trivial_offset_calibrate: empty calibration set");
    return sum / static_cast<double>(count);
}

/// Shifts every novel column by `alpha0`.
inline ScoreTable apply_trivial_offset(const ScoreTable& raw, const ClassCatalog& catalog, double alpha0) {
    detail::require_stage(raw, ScoreStage::raw_similarity, "apply_trivial_offset");
    ScoreTable out = raw.advanced(ScoreStage::aggregated_similarity);
    for (std::size_t r = 0; r < out.rows(); ++r) {
        for (std::size_t c : catalog.novel_columns()) out(r, c) += alpha0;
    }
    return out;
}

}  // namespace aggdet
