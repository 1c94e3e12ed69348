#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "aggdet/catalog.hpp"
#include "aggdet/errors.hpp"
#include "aggdet/geometry.hpp"
#include "aggdet/pipeline.hpp"

namespace aggdet {

struct GroundTruthObject {
    BoundingBox box;
    int class_id = 0;
    Split split = Split::base;

    friend bool operator==(const GroundTruthObject&, const GroundTruthObject&) = default;
};

struct GroundTruthRecord {
    std::string image_id;
    std::vector<GroundTruthObject> objects;

    friend bool operator==(const GroundTruthRecord&, const GroundTruthRecord&) = default;
};

/// Greedy matching for one image: detections in descending score order (ties
/// by lower index) each take the highest-IoU unmatched ground truth of the
/// same class, provided IoU >= iou_threshold. Returns a TP flag per detection.
inline std::vector<bool> match_detections(std::span<const Detection> detections,
                                          std::span<const GroundTruthObject> ground_truth,
                                          const ClassCatalog& catalog, double iou_threshold = 0.5) {
    for (const auto& d : detections) catalog.require_column(d.class_id);
    for (const auto& g : ground_truth) catalog.require_column(g.class_id);

    std::vector<double> scores(detections.size());
    for (std::size_t i = 0; i < detections.size(); ++i) scores[i] = detections[i].score;
    const auto order = order_by_score(scores);

    std::vector<bool> tp(detections.size(), false);
    std::vector<char> taken(ground_truth.size(), 0);
    for (std::size_t di : order) {
        const Detection& d = detections[di];
        double best = -1.0;
        std::size_t best_g = ground_truth.size();
        for (std::size_t g = 0; g < ground_truth.size(); ++g) {
            if (taken[g] || ground_truth[g].class_id != d.class_id) continue;
            const double v = iou(d.box, ground_truth[g].box);
            if (v >= iou_threshold && v > best) {
                best = v;
                best_g = g;
            }
        }
        if (best_g < ground_truth.size()) {
            taken[best_g] = 1;
            tp[di] = true;
        }
    }
    return tp;
}

/// COCO-style 101-point interpolated AP, in [0,1]. `tp` and `scores` align;
/// ordering is by descending score with ties kept in input order. Returns 0
/// when there is no ground truth.
inline double average_precision_50(const std::vector<bool>& tp, std::span<const double> scores, std::size_t num_gt) {
    if (tp.size() != scores.size()) throw ContractError("average_precision_50: labels and scores differ in length");
    if (num_gt == 0 || tp.empty()) return 0.0;
    const auto order = order_by_score(scores);
    const std::size_t n = order.size();
    std::vector<double> precision(n);
    std::vector<double> recall(n);
    double tps = 0.0;
    double fps = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (tp[order[i]]) tps += 1.0;
        else fps += 1.0;
        recall[i] = tps / static_cast<double>(num_gt);
        precision[i] = tps / (tps + fps);
    }
    for (std::size_t i = n - 1; i > 0; --i) precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double sum = 0.0;
    for (int t = 0; t <= 100; ++t) {
        const double r = static_cast<double>(t) / 100.0;
        const auto it = std::lower_bound(recall.begin(), recall.end(), r);
        if (it != recall.end()) sum += precision[static_cast<std::size_t>(it - recall.begin())];
    }
    return sum / 101.0;
}

struct RecallSummary {
    double novel = 0.0;  ///< percent
    double base = 0.0;
    double all = 0.0;
    std::size_t covered_novel = 0;
    std::size_t covered_all = 0;
};

/// Share of ground-truth objects covered by at least one proposal whose
/// confidence exceeds `conf_floor` and whose IoU exceeds `iou_floor`.
inline RecallSummary max_recall(std::span<const std::vector<ScoredProposal>> proposals,
                                std::span<const GroundTruthRecord> ground_truth, double conf_floor = 0.1,
                                double iou_floor = 0.5) {
    if (proposals.size() != ground_truth.size()) {
        throw ContractError("max_recall: proposal and ground-truth image counts differ");
    }
    std::size_t n_novel = 0, n_base = 0, c_novel = 0, c_base = 0;
    for (std::size_t img = 0; img < ground_truth.size(); ++img) {
        for (const auto& g : ground_truth[img].objects) {
            bool covered = false;
            for (const auto& p : proposals[img]) {
                if (p.score > conf_floor && iou(p.box, g.box) > iou_floor) {
                    covered = true;
                    break;
                }
            }
            if (g.split == Split::novel) {
                ++n_novel;
                c_novel += covered;
            } else {
                ++n_base;
                c_base += covered;
            }
        }
    }
    auto pct = [](std::size_t c, std::size_t n) { return n == 0 ? 0.0 : 100.0 * static_cast<double>(c) / static_cast<double>(n); };
    RecallSummary s;
    s.novel = pct(c_novel, n_novel);
    s.base = pct(c_base, n_base);
    s.all = pct(c_novel + c_base, n_novel + n_base);
    s.covered_novel = c_novel;
    s.covered_all = c_novel + c_base;
    return s;
}

inline constexpr std::size_t kHistogramBins = 50;

struct ScoreHistogram {
    std::array<std::size_t, kHistogramBins> counts{};
    std::size_t total = 0;
    double mean = 0.0;
};

struct ScoreDistribution {
    ScoreHistogram novel;
    ScoreHistogram base;
};

inline std::size_t histogram_bin(double score) noexcept {
    const double clamped = std::clamp(score, 0.0, 1.0);
    return std::min(kHistogramBins - 1, static_cast<std::size_t>(clamped * static_cast<double>(kHistogramBins)));
}

/// Fixed 50-bin histograms over [0,1] and means of final scores, split by
/// the class partition of each detection.
inline ScoreDistribution score_distribution_stats(std::span<const Detection> detections, const ClassCatalog& catalog) {
    ScoreDistribution d;
    double sum_n = 0.0, sum_b = 0.0;
    for (const auto& det : detections) {
        const bool novel = catalog.is_novel(catalog.require_column(det.class_id));
        ScoreHistogram& h = novel ? d.novel : d.base;
        ++h.counts[histogram_bin(det.score)];
        ++h.total;
        (novel ? sum_n : sum_b) += det.score;
    }
    if (d.novel.total) d.novel.mean = sum_n / static_cast<double>(d.novel.total);
    if (d.base.total) d.base.mean = sum_b / static_cast<double>(d.base.total);
    return d;
}

struct ClassAp {
    int class_id = 0;
    Split split = Split::base;
    std::size_t num_gt = 0;
    std::size_t num_detections = 0;
    double ap50 = 0.0;  ///< percent
};

struct EvalReport {
    std::string score_stream;  ///< label of the confidence stream used for recall
    std::vector<ClassAp> per_class;
    double map_novel = 0.0;
    double map_base = 0.0;
    double map_all = 0.0;
    std::optional<RecallSummary> recall;
    ScoreDistribution all_scores;
    ScoreDistribution true_positive_scores;
    std::size_t images = 0;
    std::size_t detections = 0;
};

/// Box AP50 per class and split means. Classes without ground truth are
/// reported but left out of every mean. Results are matched to ground truth
/// by image id; images without results count as empty. With `with_recall`
/// the stage-one proposals of each result feed max recall.
inline EvalReport evaluate(std::span<const ImageResult> results, std::span<const GroundTruthRecord> ground_truth,
                           const ClassCatalog& catalog, bool with_recall = false,
                           std::string score_stream = "stage1") {
    std::unordered_map<std::string, std::size_t> gt_index;
    for (std::size_t i = 0; i < ground_truth.size(); ++i) {
        if (!gt_index.emplace(ground_truth[i].image_id, i).second) {
            throw ContractError("duplicate ground-truth image '" + ground_truth[i].image_id + "'");
        }
    }
    std::vector<const ImageResult*> by_gt(ground_truth.size(), nullptr);
    for (const auto& r : results) {
        auto it = gt_index.find(r.image_id);
        if (it == gt_index.end()) throw ContractError("detections for image '" + r.image_id + "' have no ground truth");
        if (by_gt[it->second] != nullptr) throw ContractError("duplicate detections for image '" + r.image_id + "'");
        by_gt[it->second] = &r;
    }

    const std::size_t nc = catalog.size();
    std::vector<std::vector<bool>> tp(nc);
    std::vector<std::vector<double>> sc(nc);
    std::vector<std::size_t> num_gt(nc, 0);
    std::vector<Detection> all_dets;
    std::vector<Detection> tp_dets;

    for (std::size_t img = 0; img < ground_truth.size(); ++img) {
        for (const auto& g : ground_truth[img].objects) {
            const std::size_t col = catalog.require_column(g.class_id);
            if (catalog[col].split != g.split) {
                throw ContractError("ground truth split for class " + std::to_string(g.class_id) +
                                    " disagrees with the catalog");
            }
            ++num_gt[col];
        }
        if (by_gt[img] == nullptr) continue;
        const auto& dets = by_gt[img]->detections;
        const auto labels = match_detections(dets, ground_truth[img].objects, catalog);
        for (std::size_t i = 0; i < dets.size(); ++i) {
            const std::size_t col = catalog.require_column(dets[i].class_id);
            tp[col].push_back(labels[i]);
            sc[col].push_back(dets[i].score);
            all_dets.push_back(dets[i]);
            if (labels[i]) tp_dets.push_back(dets[i]);
        }
    }

    EvalReport rep;
    rep.score_stream = std::move(score_stream);
    rep.images = ground_truth.size();
    rep.detections = all_dets.size();
    double sum_n = 0.0, sum_b = 0.0;
    std::size_t cnt_n = 0, cnt_b = 0;
    for (std::size_t c = 0; c < nc; ++c) {
        ClassAp a;
        a.class_id = catalog[c].id;
        a.split = catalog[c].split;
        a.num_gt = num_gt[c];
        a.num_detections = sc[c].size();
        a.ap50 = 100.0 * average_precision_50(tp[c], sc[c], num_gt[c]);
        if (num_gt[c] > 0) {
            if (a.split == Split::novel) {
                sum_n += a.ap50;
                ++cnt_n;
            } else {
                sum_b += a.ap50;
                ++cnt_b;
            }
        }
        rep.per_class.push_back(a);
    }
    rep.map_novel = cnt_n ? sum_n / static_cast<double>(cnt_n) : 0.0;
    rep.map_base = cnt_b ? sum_b / static_cast<double>(cnt_b) : 0.0;
    rep.map_all = (cnt_n + cnt_b) ? (sum_n + sum_b) / static_cast<double>(cnt_n + cnt_b) : 0.0;

    if (with_recall) {
        std::vector<std::vector<ScoredProposal>> props;
        props.reserve(by_gt.size());
        for (const auto* r : by_gt) props.push_back(r ? r->proposals : std::vector<ScoredProposal>{});
        rep.recall = max_recall(props, ground_truth);
    }
    rep.all_scores = score_distribution_stats(all_dets, catalog);
    rep.true_positive_scores = score_distribution_stats(tp_dets, catalog);
    return rep;
}

}  // namespace aggdet
