#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "aggdet/errors.hpp"

namespace aggdet {

/// Axis-aligned box in continuous pixel coordinates, corner form, origin at
/// the top-left. Zero-area boxes are valid; negative extents are not.
struct BoundingBox {
    double x1 = 0.0;
    double y1 = 0.0;
    double x2 = 0.0;
    double y2 = 0.0;

    BoundingBox() = default;

    BoundingBox(double x1_, double y1_, double x2_, double y2_) : x1(x1_), y1(y1_), x2(x2_), y2(y2_) {
        if (!std::isfinite(x1) || !std::isfinite(y1) || !std::isfinite(x2) || !std::isfinite(y2)) {
            throw ContractError("BoundingBox: non-finite coordinate");
        }
        if (x2 < x1 || y2 < y1) {
            throw ContractError("BoundingBox: negative extent (" + std::to_string(x1) + "," +
                                std::to_string(y1) + "," + std::to_string(x2) + "," +
                                std::to_string(y2) + ")");
        }
    }

    double width() const noexcept { return x2 - x1; }
    double height() const noexcept { return y2 - y1; }

    friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

inline double area(const BoundingBox& b) noexcept { return (b.x2 - b.x1) * (b.y2 - b.y1); }

/// Intersection over union. Zero when the union is empty, so zero-area boxes
/// never overlap anything (themselves included).
inline double iou(const BoundingBox& a, const BoundingBox& b) noexcept {
    const double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    const double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    const double inter = iw * ih;
    const double uni = area(a) + area(b) - inter;
    if (uni <= 0.0) return 0.0;
    return std::min(1.0, inter / uni);
}

/// Dense symmetric matrix of pairwise IoU values.
class IouMatrix {
public:
    IouMatrix() = default;
    explicit IouMatrix(std::size_t n) : n_(n), values_(n * n, 0.0) {}

    std::size_t size() const noexcept { return n_; }
    double operator()(std::size_t i, std::size_t j) const noexcept { return values_[i * n_ + j]; }
    double& operator()(std::size_t i, std::size_t j) noexcept { return values_[i * n_ + j]; }

    std::span<const double> row(std::size_t i) const noexcept {
        return {values_.data() + i * n_, n_};
    }

private:
    std::size_t n_ = 0;
    std::vector<double> values_;
};

inline IouMatrix iou_matrix(std::span<const BoundingBox> boxes) {
    if (boxes.empty()) throw EmptyInputError("iou_matrix: no boxes");
    const std::size_t n = boxes.size();
    IouMatrix m(n);
    for (std::size_t i = 0; i < n; ++i) {
        m(i, i) = iou(boxes[i], boxes[i]);
        for (std::size_t j = i + 1; j < n; ++j) {
            const double v = iou(boxes[i], boxes[j]);
            m(i, j) = v;
            m(j, i) = v;
        }
    }
    return m;
}

/// Indices sorted by descending score, ties broken by lower index.
inline std::vector<std::size_t> order_by_score(std::span<const double> scores) {
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    return order;
}

/// Greedy non-maximum suppression. A remaining box is discarded when its IoU
/// with an already kept box is strictly greater than `iou_threshold`.
/// Returns kept indices in descending score order. `max_keep` stops the scan
/// once that many boxes are kept; the prefix is unchanged by it.
inline std::vector<std::size_t> nms(std::span<const BoundingBox> boxes, std::span<const double> scores,
                                    double iou_threshold,
                                    std::size_t max_keep = std::numeric_limits<std::size_t>::max()) {
    if (boxes.size() != scores.size()) {
        throw ContractError("nms: " + std::to_string(boxes.size()) + " boxes but " +
                            std::to_string(scores.size()) + " scores");
    }
    if (!(iou_threshold > 0.0 && iou_threshold <= 1.0)) {
        throw ContractError("nms: iou_threshold must lie in (0,1]");
    }
    for (double s : scores) {
        if (!std::isfinite(s)) throw ContractError("nms: non-finite score");
    }

    const auto order = order_by_score(scores);
    std::vector<std::size_t> kept;
    std::vector<char> suppressed(boxes.size(), 0);
    for (std::size_t pos = 0; pos < order.size() && kept.size() < max_keep; ++pos) {
        const std::size_t i = order[pos];
        if (suppressed[i]) continue;
        kept.push_back(i);
        const BoundingBox& bi = boxes[i];
        for (std::size_t rest = pos + 1; rest < order.size(); ++rest) {
            const std::size_t j = order[rest];
            if (!suppressed[j] && iou(bi, boxes[j]) > iou_threshold) suppressed[j] = 1;
        }
    }
    return kept;
}

}  // namespace aggdet
