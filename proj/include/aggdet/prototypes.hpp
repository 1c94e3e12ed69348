#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aggdet/catalog.hpp"
#include "aggdet/errors.hpp"
#include "aggdet/linalg.hpp"

namespace aggdet {

/// How base-class samples are chosen before averaging.
struct SamplingStrategy {
    enum class Kind { random_n, top_k };

    Kind kind = Kind::random_n;
    std::size_t count = 300;
    std::uint64_t seed = 0;

    static SamplingStrategy random_n(std::size_t n, std::uint64_t seed) { return {Kind::random_n, n, seed}; }
    static SamplingStrategy top_k(std::size_t k) { return {Kind::top_k, k, 0}; }

    std::string name() const { return kind == Kind::random_n ? "random" : "topk"; }
};

/// Region features gathered for one base class. `scores` is only needed by
/// the top-k strategy and must then align with `features`.
struct ClassSamples {
    int class_id = 0;
    std::vector<Vector> features;
    std::vector<double> scores;
};

struct PrototypeBank {
    std::size_t dim = 0;
    std::map<int, Vector> base_prototypes;
    std::map<int, Vector> novel_prototypes;
    Vector mean_base_prototype;
    Vector mean_base_text;
    SamplingStrategy strategy;

    const Vector& novel(int class_id) const {
        auto it = novel_prototypes.find(class_id);
        if (it == novel_prototypes.end()) {
            throw ContractError("prototype bank has no prototype for novel class " + std::to_string(class_id));
        }
        return it->second;
    }
};

namespace detail {

inline std::vector<std::size_t> choose_samples(const ClassSamples& s, const SamplingStrategy& strategy) {
    const std::size_t available = s.features.size();
    std::vector<std::size_t> all(available);
    std::iota(all.begin(), all.end(), std::size_t{0});
    if (strategy.kind == SamplingStrategy::Kind::top_k) {
        if (s.scores.size() != available) {
            throw ContractError("top-k sampling for class " + std::to_string(s.class_id) +
                                " needs one score per sample");
        }
        std::stable_sort(all.begin(), all.end(),
                         [&](std::size_t a, std::size_t b) { return s.scores[a] > s.scores[b]; });
        all.resize(std::min(strategy.count, available));
        return all;
    }
    if (strategy.count >= available) return all;
    std::seed_seq seq{static_cast<std::uint32_t>(strategy.seed), static_cast<std::uint32_t>(strategy.seed >> 32),
                      static_cast<std::uint32_t>(s.class_id)};
    std::mt19937_64 rng(seq);
    std::vector<std::size_t> picked;
    picked.reserve(strategy.count);
    std::sample(all.begin(), all.end(), std::back_inserter(picked), strategy.count, rng);
    return picked;
}

inline Vector mean_of(std::span<const Vector> vs, std::size_t dim) {
    Vector m(dim, 0.0);
    for (const auto& v : vs) {
        for (std::size_t i = 0; i < dim; ++i) m[i] += v[i];
    }
    const double n = static_cast<double>(vs.size());
    for (double& x : m) x /= n;
    return m;
}

}  // namespace detail

/// Mean of the selected sample features for every base class in `catalog`,
/// L2-normalized. Classes are keyed by id.
inline std::map<int, Vector> compute_base_prototypes(std::span<const ClassSamples> samples,
                                                     const ClassCatalog& catalog,
                                                     const SamplingStrategy& strategy) {
    if (strategy.count == 0) throw ContractError("sampling count must be positive");
    std::map<int, const ClassSamples*> by_id;
    for (const auto& s : samples) by_id[s.class_id] = &s;

    std::map<int, Vector> out;
    for (std::size_t col : catalog.base_columns()) {
        const int id = catalog[col].id;
        auto it = by_id.find(id);
        if (it == by_id.end() || it->second->features.empty()) {
            throw MissingSamplesError(id, "no samples for base class " + std::to_string(id) + " (" +
                                              catalog[col].name + ")");
        }
        const ClassSamples& s = *it->second;
        Vector acc(catalog.dim(), 0.0);
        const auto chosen = detail::choose_samples(s, strategy);
        for (std::size_t idx : chosen) {
            const Vector& f = s.features[idx];
            if (f.size() != catalog.dim()) {
                throw ContractError("sample for class " + std::to_string(id) + " has dimension " +
                                    std::to_string(f.size()) + ", expected " + std::to_string(catalog.dim()));
            }
            for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += f[i];
        }
        for (double& x : acc) x /= static_cast<double>(chosen.size());
        out.emplace(id, normalized(std::move(acc)));
    }
    return out;
}

/// Means of the base prototypes and base text embeddings, in catalog order.
inline std::pair<Vector, Vector> base_means(const std::map<int, Vector>& base_prototypes,
                                            const ClassCatalog& catalog) {
    std::vector<Vector> protos;
    std::vector<Vector> texts;
    for (std::size_t col : catalog.base_columns()) {
        const int id = catalog[col].id;
        auto it = base_prototypes.find(id);
        if (it == base_prototypes.end()) {
            throw ContractError("no prototype for base class " + std::to_string(id));
        }
        if (it->second.size() != catalog.dim()) {
            throw ContractError("prototype dimension " + std::to_string(it->second.size()) +
                                " does not match text dimension " + std::to_string(catalog.dim()));
        }
        protos.push_back(it->second);
        texts.push_back(catalog[col].text);
    }
    return {detail::mean_of(protos, catalog.dim()), detail::mean_of(texts, catalog.dim())};
}

/// Novel prototypes before normalization: mean base prototype shifted by the
/// class's text offset from the mean base text embedding.
inline std::map<int, Vector> extrapolate_unnormalized(const std::map<int, Vector>& base_prototypes,
                                                      const ClassCatalog& catalog) {
    const auto [p_mean, t_mean] = base_means(base_prototypes, catalog);
    std::map<int, Vector> out;
    for (std::size_t col : catalog.novel_columns()) {
        const Vector& t = catalog[col].text;
        Vector p(catalog.dim());
        for (std::size_t i = 0; i < p.size(); ++i) p[i] = p_mean[i] + (t[i] - t_mean[i]);
        out.emplace(catalog[col].id, std::move(p));
    }
    return out;
}

inline PrototypeBank extrapolate_novel_prototypes(std::map<int, Vector> base_prototypes, const ClassCatalog& catalog,
                                                  const SamplingStrategy& strategy = {}) {
    PrototypeBank bank;
    bank.dim = catalog.dim();
    auto [p_mean, t_mean] = base_means(base_prototypes, catalog);
    for (auto& [id, p] : extrapolate_unnormalized(base_prototypes, catalog)) {
        bank.novel_prototypes.emplace(id, normalized(std::move(p)));
    }
    bank.base_prototypes = std::move(base_prototypes);
    bank.mean_base_prototype = std::move(p_mean);
    bank.mean_base_text = std::move(t_mean);
    bank.strategy = strategy;
    return bank;
}

inline double region_prototype_similarity(std::span<const double> feature, std::span<const double> prototype) {
    return dot(feature, prototype);
}

}  // namespace aggdet
