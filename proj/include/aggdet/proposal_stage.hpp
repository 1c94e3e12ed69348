#pragma once

#include <algorithm>
#include <cstring>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "aggdet/errors.hpp"
#include "aggdet/geometry.hpp"
#include "aggdet/linalg.hpp"

namespace aggdet {

struct RegionProposal {
    BoundingBox box;
    double objectness = 0.0;
    Vector feature;
};

/// Per-proposal class-agnostic localization quality, each entry in [0,1].
struct QualityVector {
    std::vector<double> values;

    std::size_t size() const noexcept { return values.size(); }
    double operator[](std::size_t i) const { return values[i]; }
};

namespace detail {

// Boxes sorted by x1 in structure-of-arrays form.
struct SweepBoxes {
    std::vector<double> x1, y1, x2, y2, ar;

    void reserve(std::size_t n) {
        for (auto* v : {&x1, &y1, &x2, &y2, &ar}) v->reserve(n);
    }
    void push_back(const BoundingBox& b, double area_b) {
        x1.push_back(b.x1), y1.push_back(b.y1), x2.push_back(b.x2), y2.push_back(b.y2), ar.push_back(area_b);
    }
    std::size_t size() const noexcept { return x1.size(); }
};

// One box broadcast across four lanes, compared against boxes [a, a+4) of a
// set with the arithmetic of iou(), written without branches. Lanes at or
// beyond `end` read as zero-area boxes and score 0.
struct LaneBox {
    Lanes x1, y1, x2, y2, ar;

    explicit LaneBox(const BoundingBox& b, double area_b) noexcept {
        const Lanes zero{};
        x1 = zero + b.x1, y1 = zero + b.y1, x2 = zero + b.x2, y2 = zero + b.y2, ar = zero + area_b;
    }

    void iou(const SweepBoxes& s, std::size_t a, std::size_t end, Lanes& out) const noexcept {
        Lanes lx1, ly1, lx2, ly2, lar;
        if (a + 4 <= end) {
            std::memcpy(&lx1, &s.x1[a], sizeof lx1);
            std::memcpy(&ly1, &s.y1[a], sizeof ly1);
            std::memcpy(&lx2, &s.x2[a], sizeof lx2);
            std::memcpy(&ly2, &s.y2[a], sizeof ly2);
            std::memcpy(&lar, &s.ar[a], sizeof lar);
        } else {
            lx1 = ly1 = lx2 = ly2 = lar = Lanes{};
            for (std::size_t i = 0; a + i < end; ++i) {
                lx1[i] = s.x1[a + i], ly1[i] = s.y1[a + i], lx2[i] = s.x2[a + i], ly2[i] = s.y2[a + i];
                lar[i] = s.ar[a + i];
            }
            // Padding lanes: empty intervals never overlap.
            for (std::size_t i = end - a; i < 4; ++i) lx1[i] = 1.0, lx2[i] = -1.0, ly1[i] = 1.0, ly2[i] = -1.0;
        }
        const Lanes zero{};
        const Lanes one = zero + 1.0;
        Lanes iw = (x2 < lx2 ? x2 : lx2) - (x1 > lx1 ? x1 : lx1);
        Lanes ih = (y2 < ly2 ? y2 : ly2) - (y1 > ly1 ? y1 : ly1);
        iw = iw > zero ? iw : zero;
        ih = ih > zero ? ih : zero;
        const Lanes inter = iw * ih;
        const Lanes uni = ar + lar - inter;
        const Lanes v = inter / (uni > zero ? uni : one);
        out = v < one ? v : one;
    }
};

// Sum of the K largest overlaps of one box, added largest first. Two
// interleaved lane-wise compare-exchange chains keep the running top K in
// registers; padding and non-overlapping boxes contribute zeros, which never
// change a sum of the K largest non-negative values.
template <std::size_t K>
double top_overlap_sum(const LaneBox& box, const SweepBoxes& before, const SweepBoxes& after, std::size_t from,
                       std::size_t to) noexcept {
    Lanes t[2][K] = {};
    std::size_t step = 0;
    Lanes x;
    auto push = [&] {
        Lanes* row = t[step++ & 1];
        for (std::size_t j = 0; j < K; ++j) {
            const Lanes keep = row[j] > x ? row[j] : x;
            x = row[j] > x ? x : row[j];
            row[j] = keep;
        }
    };
    for (std::size_t a = 0; a < before.size(); a += 4) box.iou(before, a, before.size(), x), push();
    for (std::size_t a = from; a < to; a += 4) box.iou(after, a, to, x), push();

    double all[8 * K];
    std::size_t n = 0;
    for (const auto& row : t) {
        for (const Lanes& l : row) {
            for (int i = 0; i < 4; ++i) all[n++] = l[i];
        }
    }
    std::partial_sort(all, all + K, all + n, std::greater<>());
    double s = 0.0;
    for (std::size_t j = 0; j < K; ++j) s += all[j];
    return s;
}

inline double top_overlap_sum_sorted(const LaneBox& box, const SweepBoxes& before, const SweepBoxes& after,
                                     std::size_t from, std::size_t to, std::size_t k, std::vector<double>& row) {
    row.clear();
    Lanes v;
    auto take = [&] {
        for (int i = 0; i < 4; ++i) row.push_back(v[i]);
    };
    for (std::size_t a = 0; a < before.size(); a += 4) box.iou(before, a, before.size(), v), take();
    for (std::size_t a = from; a < to; a += 4) box.iou(after, a, to, v), take();
    const std::size_t n = std::min(k, row.size());
    std::partial_sort(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(n), row.end(), std::greater<>());
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += row[j];
    return s;
}

}  // namespace detail

/// Mean of the k largest overlaps each box has with the other boxes. With
/// fewer than k other boxes the mean runs over all M-1 of them; a lone box
/// scores 0. Only pairs that overlap along x are visited, so clustered
/// proposal sets cost far less than the full M x M matrix.
inline QualityVector localization_quality(std::span<const BoundingBox> boxes, std::size_t k) {
    if (boxes.empty()) throw EmptyInputError("localization_quality: no boxes");
    if (k == 0) throw ContractError("localization_quality: k must be positive");
    const std::size_t m = boxes.size();
    QualityVector q{std::vector<double>(m, 0.0)};
    if (m == 1) return q;
    const std::size_t kk = std::min(k, m - 1);

    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return boxes[a].x1 < boxes[b].x1 || (boxes[a].x1 == boxes[b].x1 && a < b);
    });
    detail::SweepBoxes sorted;
    sorted.reserve(m);
    for (std::size_t i : order) sorted.push_back(boxes[i], area(boxes[i]));

    // Boxes earlier in x1 order that still reach past the sweep line. Stale
    // entries are dropped every few steps; until then they score 0.
    detail::SweepBoxes active;
    active.reserve(m);
    std::vector<double> row;
    const double denom = static_cast<double>(kk);
    std::size_t later_end = 0;

    for (std::size_t pos = 0; pos < m; ++pos) {
        const BoundingBox& b = boxes[order[pos]];
        if (pos % 16 == 0) {
            std::size_t n = 0;
            for (std::size_t a = 0; a < active.size(); ++a) {
                if (active.x2[a] <= b.x1) continue;
                active.x1[n] = active.x1[a], active.y1[n] = active.y1[a], active.x2[n] = active.x2[a];
                active.y2[n] = active.y2[a], active.ar[n] = active.ar[a];
                ++n;
            }
            for (auto* v : {&active.x1, &active.y1, &active.x2, &active.y2, &active.ar}) v->resize(n);
        }
        // Boxes after this one in x1 order that start before it ends.
        later_end = std::max(later_end, pos + 1);
        while (later_end < m && sorted.x1[later_end] < b.x2) ++later_end;

        const detail::LaneBox lane(b, sorted.ar[pos]);
        double sum = 0.0;
        switch (kk) {
            case 1: sum = detail::top_overlap_sum<1>(lane, active, sorted, pos + 1, later_end); break;
            case 2: sum = detail::top_overlap_sum<2>(lane, active, sorted, pos + 1, later_end); break;
            case 3: sum = detail::top_overlap_sum<3>(lane, active, sorted, pos + 1, later_end); break;
            case 4: sum = detail::top_overlap_sum<4>(lane, active, sorted, pos + 1, later_end); break;
            case 5: sum = detail::top_overlap_sum<5>(lane, active, sorted, pos + 1, later_end); break;
            case 6: sum = detail::top_overlap_sum<6>(lane, active, sorted, pos + 1, later_end); break;
            default: sum = detail::top_overlap_sum_sorted(lane, active, sorted, pos + 1, later_end, kk, row); break;
        }
        q.values[order[pos]] = sum / denom;

        if (b.x2 > b.x1) active.push_back(b, sorted.ar[pos]);
    }
    return q;
}

/// Element-wise arithmetic mean of objectness and localization quality.
inline std::vector<double> aggregate_objectness(std::span<const double> objectness, const QualityVector& q) {
    if (objectness.size() != q.size()) {
        throw ContractError("aggregate_objectness: " + std::to_string(objectness.size()) +
                            " objectness values but " + std::to_string(q.size()) + " quality values");
    }
    std::vector<double> out(objectness.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = 0.5 * (objectness[i] + q.values[i]);
    return out;
}

struct ProposalSelection {
    std::vector<std::size_t> kept;     ///< indices into the input, best first
    std::vector<double> kept_scores;   ///< the scores NMS ranked by
    QualityVector kept_quality;        ///< empty when quality was not computed
};

/// NMS over `scores` followed by truncation to `keep_max` survivors. When a
/// quality vector is supplied it is carried through for the kept indices.
inline ProposalSelection select_proposals(std::span<const BoundingBox> boxes, std::span<const double> scores,
                                          const QualityVector* quality, double nms_iou, std::size_t keep_max) {
    if (keep_max == 0) throw ContractError("select_proposals: keep_max must be positive");
    ProposalSelection sel;
    sel.kept = nms(boxes, scores, nms_iou, keep_max);
    sel.kept_scores.reserve(sel.kept.size());
    for (std::size_t i : sel.kept) sel.kept_scores.push_back(scores[i]);
    if (quality != nullptr) {
        sel.kept_quality.values.reserve(sel.kept.size());
        for (std::size_t i : sel.kept) sel.kept_quality.values.push_back(quality->values[i]);
    }
    return sel;
}

/// The aggregated proposal stage: quality on the full proposal set, fused
/// objectness, NMS, then the top `keep_max` survivors.
inline ProposalSelection aggregated_proposal_filter(std::span<const RegionProposal> proposals, std::size_t k,
                                                    double nms_iou, std::size_t keep_max) {
    if (proposals.empty()) throw EmptyInputError("aggregated_proposal_filter: no proposals");
    std::vector<BoundingBox> boxes;
    std::vector<double> objectness;
    boxes.reserve(proposals.size());
    objectness.reserve(proposals.size());
    for (const auto& p : proposals) {
        boxes.push_back(p.box);
        objectness.push_back(p.objectness);
    }
    const QualityVector q = localization_quality(boxes, k);
    const std::vector<double> fused = aggregate_objectness(objectness, q);
    return select_proposals(boxes, fused, &q, nms_iou, keep_max);
}

}  // namespace aggdet
