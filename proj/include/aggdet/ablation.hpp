#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <iterator>
#include <numeric>
#include <thread>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "aggdet/evaluation.hpp"
#include "aggdet/pipeline.hpp"
#include "aggdet/scoring.hpp"

namespace aggdet {

struct AblationRow {
    AggregationSwitches switches;
    std::string label;
    EvalReport report;
};

inline std::string switches_label(const AggregationSwitches& s) {
    auto f = [](bool b) { return b ? "on" : "off"; };
    return std::string("arp_lq=") + f(s.arp_lq) + ",aoc_vs=" + f(s.aoc_vs) + ",aoc_lq=" + f(s.aoc_lq);
}

/// All eight switch combinations, baseline first and full aggregation last.
/// Stage-one localization quality is computed once per image and shared.
inline std::vector<AblationRow> ablation_matrix(std::span<const ImageRecord> records,
                                                std::span<const GroundTruthRecord> ground_truth,
                                                const ClassCatalog& catalog, const PrototypeBank& bank,
                                                const PipelineConfig& config, std::size_t workers = 1) {
    std::vector<AggregationSwitches> combos;
    for (int mask = 0; mask < 8; ++mask) combos.push_back({(mask & 1) != 0, (mask & 2) != 0, (mask & 4) != 0});

    std::vector<QualityVector> shared(records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
        std::vector<BoundingBox> boxes;
        boxes.reserve(records[i].proposals.size());
        for (const auto& p : records[i].proposals) boxes.push_back(p.box);
        if (!boxes.empty()) shared[i] = localization_quality(boxes, config.k);
    }

    std::vector<AblationRow> rows;
    for (const auto& sw : combos) {
        PipelineConfig c = config;
        c.switches = sw;
        c.trivial_offset.reset();
        const Pipeline pipe(catalog, &bank, c);
        std::vector<ImageResult> results(records.size());
        std::atomic<std::size_t> next{0};
        auto work = [&] {
            for (std::size_t i = next++; i < records.size(); i = next++) {
                results[i] = pipe.run_image(records[i], records[i].proposals.empty() ? nullptr : &shared[i]);
            }
        };
        const std::size_t n_threads = std::max<std::size_t>(1, std::min(workers, records.size()));
        if (n_threads == 1) {
            work();
        } else {
            std::vector<std::jthread> pool;
            for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work);
        }
        rows.push_back({sw, switches_label(sw),
                        evaluate(results, ground_truth, catalog, true, sw.arp_lq ? "aggregated_objectness" : "objectness")});
    }
    return rows;
}

/// Estimates the constant novel-column offset that matches prototype
/// aggregation on average over `sample_count` randomly selected samples.
/// With ground truth the sample pool is every proposal overlapping a base
/// object (IoU >= 0.5), the same kind of region prototypes are built from;
/// without it the pool is the stage-one survivors of every image.
inline double estimate_trivial_offset(std::span<const ImageRecord> records,
                                      std::span<const GroundTruthRecord> ground_truth, const ClassCatalog& catalog,
                                      const PrototypeBank& bank, const PipelineConfig& config,
                                      std::size_t sample_count, std::uint64_t seed) {
    if (!ground_truth.empty() && ground_truth.size() != records.size()) {
        throw ContractError("estimate_trivial_offset: ground truth must align with records");
    }
    struct Ref {
        std::size_t image;
        std::size_t proposal;
    };
    std::vector<Ref> pool;
    for (std::size_t img = 0; img < records.size(); ++img) {
        const auto& rec = records[img];
        if (rec.proposals.empty()) continue;
        if (!ground_truth.empty()) {
            for (std::size_t i = 0; i < rec.proposals.size(); ++i) {
                for (const auto& g : ground_truth[img].objects) {
                    if (g.split == Split::base && iou(rec.proposals[i].box, g.box) >= 0.5) {
                        pool.push_back({img, i});
                        break;
                    }
                }
            }
        } else {
            std::vector<BoundingBox> boxes;
            std::vector<double> obj;
            for (const auto& p : rec.proposals) {
                boxes.push_back(p.box);
                obj.push_back(p.objectness);
            }
            for (std::size_t k : select_proposals(boxes, obj, nullptr, config.proposal_nms_iou, config.proposal_keep_max).kept) {
                pool.push_back({img, k});
            }
        }
    }
    std::vector<Ref> picked;
    std::mt19937_64 rng(seed);
    std::sample(pool.begin(), pool.end(), std::back_inserter(picked), std::min(sample_count, pool.size()), rng);

    ClassCatalog cat = catalog;
    if (config.normalize_embeddings) cat = ClassCatalog(catalog.classes(), true);
    const std::size_t nc = cat.size();
    std::vector<Vector> feats;
    for (const auto& r : picked) {
        Vector f = records[r.image].proposals[r.proposal].feature;
        if (config.normalize_embeddings) normalize_in_place(f);
        feats.push_back(std::move(f));
    }
    ScoreTable raw = region_text_similarity(feats, cat);
    for (std::size_t k = 0; k < picked.size(); ++k) {
        const auto& rec = records[picked[k].image];
        if (!rec.has_logits()) continue;
        for (std::size_t c = 0; c < nc; ++c) raw(k, c) = rec.raw_logits[picked[k].proposal * nc + c];
    }
    const ScoreTable agg = aggregate_similarity(raw, feats, cat, bank, config.alpha);
    const CalibrationPair pair{&raw, &agg};
    return trivial_offset_calibrate(std::span<const CalibrationPair>(&pair, 1), cat);
}

}  // namespace aggdet
