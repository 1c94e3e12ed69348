#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "aggdet/catalog.hpp"
#include "aggdet/evaluation.hpp"
#include "aggdet/pipeline.hpp"
#include "aggdet/prototypes.hpp"
#include "aggdet/scoring.hpp"

namespace aggdet {

/// Gathers base-class region features for prototype construction.
///
/// With ground truth, a proposal is a sample of the base class whose object
/// it overlaps best (IoU >= 0.5). Without it, the detector's own prediction
/// is used: the base column with the highest similarity. Each sample is
/// scored by the detector's calibrated confidence for its class, which is
/// what top-k sampling ranks by.
inline std::vector<ClassSamples> collect_class_samples(std::span<const ImageRecord> records,
                                                       const ClassCatalog& catalog,
                                                       std::span<const GroundTruthRecord> ground_truth,
                                                       double temperature, bool normalize) {
    if (!ground_truth.empty() && ground_truth.size() != records.size()) {
        throw ContractError("collect_class_samples: ground truth must align with records");
    }
    const std::size_t nc = catalog.size();
    std::map<int, ClassSamples> by_class;
    for (std::size_t img = 0; img < records.size(); ++img) {
        const auto& rec = records[img];
        if (!ground_truth.empty() && ground_truth[img].image_id != rec.image_id) {
            throw ContractError("collect_class_samples: ground truth for '" + ground_truth[img].image_id +
                                "' is paired with image '" + rec.image_id + "'");
        }
        for (std::size_t i = 0; i < rec.proposals.size(); ++i) {
            const auto& p = rec.proposals[i];
            if (p.feature.size() != catalog.dim()) {
                throw DimensionError(rec.image_id, "image '" + rec.image_id + "': feature dimension mismatch");
            }
            const double inv = normalize ? 1.0 / std::max(l2_norm(p.feature), 1e-300) : 1.0;
            auto similarity = [&](std::size_t col) {
                return rec.has_logits() ? rec.raw_logits[i * nc + col]
                                        : dot_unchecked(p.feature, catalog[col].text) * inv;
            };

            std::optional<std::size_t> col;
            if (!ground_truth.empty()) {
                double best = 0.5;
                for (const auto& g : ground_truth[img].objects) {
                    const double v = iou(p.box, g.box);
                    if (v >= best && g.split == Split::base) {
                        const std::size_t c = catalog.require_column(g.class_id);
                        if (!col || v > best) col = c;
                        best = v;
                    }
                }
            } else {
                double best = 0.0;
                for (std::size_t c : catalog.base_columns()) {
                    const double s = similarity(c);
                    if (!col || s > best) {
                        col = c;
                        best = s;
                    }
                }
            }
            if (!col) continue;

            auto& bucket = by_class[catalog[*col].id];
            bucket.class_id = catalog[*col].id;
            Vector f = p.feature;
            if (normalize) normalize_in_place(f);
            bucket.features.push_back(std::move(f));
            bucket.scores.push_back(sigmoid(similarity(*col) / temperature));
        }
    }
    std::vector<ClassSamples> out;
    for (auto& [id, s] : by_class) out.push_back(std::move(s));
    return out;
}

/// Base prototypes from samples followed by novel extrapolation.
inline PrototypeBank build_bank(std::span<const ClassSamples> samples, const ClassCatalog& catalog,
                                const SamplingStrategy& strategy) {
    return extrapolate_novel_prototypes(compute_base_prototypes(samples, catalog, strategy), catalog, strategy);
}

}  // namespace aggdet
