#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "aggdet/catalog.hpp"
#include "aggdet/errors.hpp"
#include "aggdet/geometry.hpp"
#include "aggdet/linalg.hpp"
#include "aggdet/proposal_stage.hpp"
#include "aggdet/prototypes.hpp"
#include "aggdet/scoring.hpp"

namespace aggdet {

enum class ArchitectureMode { dense, sparse };

inline const char* to_string(ArchitectureMode m) noexcept { return m == ArchitectureMode::dense ? "dense" : "sparse"; }

inline ArchitectureMode parse_mode(std::string_view s) {
    if (s == "dense") return ArchitectureMode::dense;
    if (s == "sparse") return ArchitectureMode::sparse;
    throw UsageError("unknown mode '" + std::string(s) + "' (expected dense|sparse)");
}

/// The three independently switchable aggregation techniques.
struct AggregationSwitches {
    bool arp_lq = true;  ///< localization quality fused into proposal objectness
    bool aoc_vs = true;  ///< prototype similarity added to novel class similarity
    bool aoc_lq = true;  ///< classification confidence regulated by localization quality

    static AggregationSwitches none() { return {false, false, false}; }
    static AggregationSwitches all() { return {true, true, true}; }
    bool any() const noexcept { return arp_lq || aoc_vs || aoc_lq; }

    friend bool operator==(const AggregationSwitches&, const AggregationSwitches&) = default;
};

struct PipelineConfig {
    std::size_t k = 3;
    double alpha = 0.05;
    double gamma = 0.75;
    double temperature = 1.0;
    double proposal_nms_iou = 0.7;
    double class_nms_iou = 0.5;
    std::size_t proposal_keep_max = 1000;
    std::size_t detections_per_image = 300;
    double score_threshold = 0.0;
    ArchitectureMode mode = ArchitectureMode::dense;
    AggregationSwitches switches;
    bool normalize_embeddings = true;
    /// When set, novel similarities are shifted by this constant instead of
    /// being aggregated with prototypes. Mutually exclusive with aoc_vs.
    std::optional<double> trivial_offset;

    void validate() const {
        if (k == 0) throw ContractError("config: k must be positive");
        if (!(alpha >= 0.0) || !std::isfinite(alpha)) throw ContractError("config: alpha must be >= 0");
        if (!(gamma > 0.0 && gamma <= 1.0)) throw ContractError("config: gamma must lie in (0,1]");
        if (!(temperature > 0.0) || !std::isfinite(temperature)) {
            throw ContractError("config: temperature must be positive");
        }
        if (!(proposal_nms_iou > 0.0 && proposal_nms_iou <= 1.0)) {
            throw ContractError("config: proposal_nms_iou must lie in (0,1]");
        }
        if (!(class_nms_iou > 0.0 && class_nms_iou <= 1.0)) {
            throw ContractError("config: class_nms_iou must lie in (0,1]");
        }
        if (proposal_keep_max == 0) throw ContractError("config: proposal_keep_max must be positive");
        if (detections_per_image == 0) throw ContractError("config: detections_per_image must be positive");
        if (!(score_threshold >= 0.0 && score_threshold < 1.0)) {
            throw ContractError("config: score_threshold must lie in [0,1)");
        }
        if (trivial_offset && switches.aoc_vs) {
            throw ContractError("config: trivial offset and prototype aggregation are mutually exclusive");
        }
    }

    /// Named hyper-parameter profiles. Only k, alpha and gamma differ.
    static PipelineConfig preset(std::string_view name) {
        PipelineConfig c;
        if (name == "coco") {
            c.k = 3;
            c.alpha = 0.05;
            c.gamma = 3.0 / 4.0;
        } else if (name == "lvis") {
            c.k = 3;
            c.alpha = 0.01;
            c.gamma = 2.0 / 3.0;
        } else {
            throw UsageError("unknown profile '" + std::string(name) + "' (expected coco|lvis)");
        }
        return c;
    }
};

/// Refined boxes from the detector's box head: none, one class-agnostic box
/// per proposal, or one box per proposal and class.
struct RefinedBoxes {
    std::size_t per_proposal = 0;
    std::vector<BoundingBox> boxes;

    bool empty() const noexcept { return per_proposal == 0; }
    const BoundingBox& at(std::size_t proposal, std::size_t column) const {
        return per_proposal == 1 ? boxes[proposal] : boxes[proposal * per_proposal + column];
    }
};

struct ImageRecord {
    std::string image_id;
    double width = 0.0;
    double height = 0.0;
    std::vector<RegionProposal> proposals;
    RefinedBoxes refined;
    /// Row-major M x C similarity logits, empty when the detector did not
    /// export them (they are then recomputed from features).
    std::vector<double> raw_logits;

    bool has_logits() const noexcept { return !raw_logits.empty(); }
};

/// Everything needed to replay a detection's score under a config.
struct Provenance {
    std::size_t proposal_index = 0;
    double objectness = 0.0;
    double quality = 0.0;  ///< quality used for regulation; 0 when never computed
    double raw_similarity = 0.0;
    double prototype_similarity = 0.0;  ///< 0 for base classes or without prototype aggregation
    double regulated_score = 0.0;

    friend bool operator==(const Provenance&, const Provenance&) = default;
};

struct Detection {
    BoundingBox box;
    int class_id = 0;
    double score = 0.0;
    Provenance provenance;

    friend bool operator==(const Detection&, const Detection&) = default;
};

/// A stage-one survivor with the confidence it was ranked by.
struct ScoredProposal {
    BoundingBox box;
    double score = 0.0;

    friend bool operator==(const ScoredProposal&, const ScoredProposal&) = default;
};

struct ImageResult {
    std::string image_id;
    std::vector<Detection> detections;
    std::vector<ScoredProposal> proposals;
    double aggregation_seconds = 0.0;  ///< time spent in aggregation-only steps
    double total_seconds = 0.0;
};

struct BatchResult {
    std::vector<ImageResult> images;
    double wall_seconds = 0.0;
};

/// Recomputes the final score from stored provenance.
inline double replay_score(const Provenance& p, bool novel, const PipelineConfig& config) {
    double s = p.raw_similarity;
    if (novel && config.switches.aoc_vs) s += config.alpha * p.prototype_similarity;
    if (novel && config.trivial_offset) s += *config.trivial_offset;
    const double c = sigmoid(s / config.temperature);
    return config.switches.aoc_lq ? regulate(c, p.quality, config.gamma) : c;
}

/// Worker count: explicit request, else AGGDET_WORKERS, else 1.
inline std::size_t resolve_workers(std::optional<std::size_t> requested = std::nullopt) {
    if (requested && *requested > 0) return *requested;
    if (const char* env = std::getenv("AGGDET_WORKERS")) {
        char* end = nullptr;
        const long v = std::strtol(env, &end, 10);
        if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
        throw UsageError(std::string("AGGDET_WORKERS must be a positive integer, got '") + env + "'");
    }
    return 1;
}

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Candidate {
    double score;
    std::uint32_t row;
    std::uint32_t col;
};

}  // namespace detail

/// Runs the two-stage post-processing with optional aggregation. Holds the
/// immutable catalog, prototypes and config; safe to share across threads.
class Pipeline {
public:
    Pipeline(ClassCatalog catalog, const PrototypeBank* bank, PipelineConfig config)
        : catalog_(std::move(catalog)), config_(config) {
        config_.validate();
        if (config_.normalize_embeddings) {
            std::vector<ClassEntry> entries = catalog_.classes();
            catalog_ = ClassCatalog(std::move(entries), true);
        }
        if (config_.switches.aoc_vs) {
            if (bank == nullptr) throw ContractError("prototype aggregation needs a prototype bank");
            if (bank->dim != catalog_.dim()) {
                throw ContractError("prototype bank dimension " + std::to_string(bank->dim) +
                                    " does not match catalog dimension " + std::to_string(catalog_.dim()));
            }
            for (std::size_t c : catalog_.novel_columns()) novel_protos_.push_back(bank->novel(catalog_[c].id));
        }
    }

    const ClassCatalog& catalog() const noexcept { return catalog_; }
    const PipelineConfig& config() const noexcept { return config_; }

    void validate_record(const ImageRecord& r) const {
        const std::size_t m = r.proposals.size();
        const std::size_t c = catalog_.size();
        for (std::size_t i = 0; i < m; ++i) {
            const auto& p = r.proposals[i];
            if (p.feature.size() != catalog_.dim()) {
                throw DimensionError(r.image_id, "image '" + r.image_id + "': proposal " + std::to_string(i) +
                                                     " has feature dimension " + std::to_string(p.feature.size()) +
                                                     ", catalog has " + std::to_string(catalog_.dim()));
            }
            if (!(p.objectness >= 0.0 && p.objectness <= 1.0)) {
                throw ContractError("image '" + r.image_id + "': objectness outside [0,1] at proposal " +
                                    std::to_string(i));
            }
        }
        if (r.has_logits() && r.raw_logits.size() != m * c) {
            throw DimensionError(r.image_id, "image '" + r.image_id + "': logits hold " +
                                                 std::to_string(r.raw_logits.size()) + " values, expected " +
                                                 std::to_string(m * c));
        }
        if (!r.refined.empty()) {
            if (r.refined.per_proposal != 1 && r.refined.per_proposal != c) {
                throw DimensionError(r.image_id, "image '" + r.image_id + "': refined boxes per proposal must be 1 or " +
                                                     std::to_string(c));
            }
            if (r.refined.boxes.size() != m * r.refined.per_proposal) {
                throw DimensionError(r.image_id, "image '" + r.image_id + "': refined box count does not match proposals");
            }
        }
    }

    /// `quality_hint`, when given, must be the stage-one localization quality
    /// of `record` under this config's k; it is reused instead of recomputed.
    ImageResult run_image(const ImageRecord& record, const QualityVector* quality_hint = nullptr) const {
        validate_record(record);
        const auto t_start = detail::Clock::now();
        ImageResult result;
        result.image_id = record.image_id;
        const std::size_t m = record.proposals.size();
        if (m == 0) return result;

        const auto& sw = config_.switches;
        const bool sparse = config_.mode == ArchitectureMode::sparse;
        double agg = 0.0;

        std::vector<BoundingBox> boxes(m);
        std::vector<double> objectness(m);
        for (std::size_t i = 0; i < m; ++i) {
            boxes[i] = record.proposals[i].box;
            objectness[i] = record.proposals[i].objectness;
        }

        // Stage one: proposal ranking and selection.
        QualityVector q_full;
        const bool need_q_full = sw.arp_lq || (sw.aoc_lq && sparse);
        std::vector<double> stage_scores;
        if (need_q_full) {
            const auto t0 = detail::Clock::now();
            if (quality_hint != nullptr) {
                if (quality_hint->size() != m) throw ContractError("run_image: quality hint has the wrong length");
                q_full = *quality_hint;
            } else {
                q_full = localization_quality(boxes, config_.k);
            }
            if (sw.arp_lq) stage_scores = aggregate_objectness(objectness, q_full);
            agg += detail::seconds_since(t0);
        }
        const std::vector<double>& rank_scores = sw.arp_lq ? stage_scores : objectness;
        const ProposalSelection sel = select_proposals(boxes, rank_scores, need_q_full ? &q_full : nullptr,
                                                       config_.proposal_nms_iou, config_.proposal_keep_max);
        const std::size_t kept = sel.kept.size();
        result.proposals.reserve(kept);
        for (std::size_t r = 0; r < kept; ++r) result.proposals.push_back({boxes[sel.kept[r]], sel.kept_scores[r]});

        // Stage two: classification.
        const std::size_t nc = catalog_.size();
        std::vector<double> inv_norm;
        if (!record.has_logits() || sw.aoc_vs) {
            inv_norm.resize(kept, 1.0);
            if (config_.normalize_embeddings) {
                for (std::size_t r = 0; r < kept; ++r) {
                    const double n = l2_norm(record.proposals[sel.kept[r]].feature);
                    inv_norm[r] = n > 0.0 ? 1.0 / n : 0.0;
                }
            }
        }

        ScoreTable raw(kept, nc, ScoreStage::raw_similarity);
        for (std::size_t r = 0; r < kept; ++r) {
            const std::size_t i = sel.kept[r];
            if (record.has_logits()) {
                for (std::size_t c = 0; c < nc; ++c) raw(r, c) = record.raw_logits[i * nc + c];
            } else {
                const Vector& f = record.proposals[i].feature;
                for (std::size_t c = 0; c < nc; ++c) raw(r, c) = dot_unchecked(f, catalog_[c].text) * inv_norm[r];
            }
        }

        ScoreTable proto(kept, nc, ScoreStage::raw_similarity);
        ScoreTable similarity = raw;
        if (sw.aoc_vs) {
            const auto t0 = detail::Clock::now();
            const auto& novel = catalog_.novel_columns();
            std::vector<const double*> rows(kept);
            std::vector<const double*> cols(novel.size());
            for (std::size_t r = 0; r < kept; ++r) rows[r] = record.proposals[sel.kept[r]].feature.data();
            for (std::size_t n = 0; n < novel.size(); ++n) cols[n] = novel_protos_[n].data();
            std::vector<double> dots(kept * novel.size());
            dot_table(rows, cols, catalog_.dim(), dots.data());
            for (std::size_t r = 0; r < kept; ++r) {
                for (std::size_t n = 0; n < novel.size(); ++n) proto(r, novel[n]) = dots[r * novel.size() + n] * inv_norm[r];
            }
            similarity = aggregate_similarity(raw, proto, catalog_, config_.alpha);
            agg += detail::seconds_since(t0);
        } else if (config_.trivial_offset) {
            similarity = apply_trivial_offset(raw, catalog_, *config_.trivial_offset);
        }

        ScoreTable scores = calibrate(similarity, config_.temperature);

        QualityVector q_used;
        if (sw.aoc_lq) {
            const auto t0 = detail::Clock::now();
            if (sparse) {
                q_used = sel.kept_quality;
            } else {
                std::vector<BoundingBox> refined(kept);
                for (std::size_t r = 0; r < kept; ++r) {
                    const std::size_t i = sel.kept[r];
                    if (record.refined.empty()) {
                        refined[r] = boxes[i];
                    } else if (record.refined.per_proposal == 1) {
                        refined[r] = record.refined.at(i, 0);
                    } else {
                        const auto row = scores.row(r);
                        const auto best = static_cast<std::size_t>(
                            std::distance(row.begin(), std::max_element(row.begin(), row.end())));
                        refined[r] = record.refined.at(i, best);
                    }
                }
                q_used = localization_quality(refined, config_.k);
            }
            scores = quality_regulate(scores, q_used, config_.gamma);
            agg += detail::seconds_since(t0);
        } else if (need_q_full) {
            q_used = sel.kept_quality;
        }

        // Selection: per-class NMS on refined boxes, then the global top-N.
        // Candidates are visited in global score order, so each class's kept
        // list at any moment holds exactly its higher-ranked survivors and the
        // first N kept are the global top N.
        std::vector<detail::Candidate> cand;
        cand.reserve(kept * nc);
        for (std::size_t r = 0; r < kept; ++r) {
            const auto row = scores.row(r);
            for (std::size_t c = 0; c < nc; ++c) {
                if (row[c] > config_.score_threshold) {
                    cand.push_back({row[c], static_cast<std::uint32_t>(r), static_cast<std::uint32_t>(c)});
                }
            }
        }
        std::sort(cand.begin(), cand.end(), [](const detail::Candidate& a, const detail::Candidate& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.row != b.row) return a.row < b.row;
            return a.col < b.col;
        });

        auto box_for = [&](std::size_t r, std::size_t c) -> const BoundingBox& {
            const std::size_t i = sel.kept[r];
            return record.refined.empty() ? boxes[i] : record.refined.at(i, c);
        };

        std::vector<std::vector<BoundingBox>> kept_per_class(nc);
        for (const auto& cd : cand) {
            if (result.detections.size() >= config_.detections_per_image) break;
            const BoundingBox& b = box_for(cd.row, cd.col);
            auto& kept_boxes = kept_per_class[cd.col];
            bool suppressed = false;
            for (const auto& kb : kept_boxes) {
                if (iou(kb, b) > config_.class_nms_iou) {
                    suppressed = true;
                    break;
                }
            }
            if (suppressed) continue;
            kept_boxes.push_back(b);

            Detection d;
            d.box = b;
            d.class_id = catalog_[cd.col].id;
            d.score = cd.score;
            d.provenance.proposal_index = sel.kept[cd.row];
            d.provenance.objectness = objectness[sel.kept[cd.row]];
            d.provenance.quality = q_used.size() == kept ? q_used.values[cd.row] : 0.0;
            d.provenance.raw_similarity = raw(cd.row, cd.col);
            d.provenance.prototype_similarity = proto(cd.row, cd.col);
            d.provenance.regulated_score = cd.score;
            result.detections.push_back(d);
        }

        result.aggregation_seconds = agg;
        result.total_seconds = detail::seconds_since(t_start);
        return result;
    }

    /// Order-preserving map of run_image over `records`, fanned out over
    /// `workers` threads. The first malformed record (in input order) aborts
    /// the batch with an error naming its image id.
    BatchResult run_batch(std::span<const ImageRecord> records, std::size_t workers = 1) const {
        BatchResult out;
        out.images.resize(records.size());
        const auto t0 = detail::Clock::now();
        for (const auto& r : records) validate_record(r);

        std::vector<std::exception_ptr> errors(records.size());
        auto work = [&](std::atomic<std::size_t>& next) {
            for (std::size_t i = next++; i < records.size(); i = next++) {
                try {
                    out.images[i] = run_image(records[i]);
                } catch (...) {
                    errors[i] = std::current_exception();
                }
            }
        };
        std::atomic<std::size_t> next{0};
        const std::size_t n_threads = std::max<std::size_t>(1, std::min(workers, records.size()));
        if (n_threads == 1) {
            work(next);
        } else {
            std::vector<std::jthread> pool;
            pool.reserve(n_threads);
            for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back([&] { work(next); });
        }
        for (auto& e : errors) {
            if (e) std::rethrow_exception(e);
        }
        out.wall_seconds = detail::seconds_since(t0);
        return out;
    }

private:
    ClassCatalog catalog_;
    PipelineConfig config_;
    std::vector<Vector> novel_protos_;
};

inline ImageResult run_image(const ImageRecord& record, const ClassCatalog& catalog, const PrototypeBank* bank,
                             const PipelineConfig& config) {
    return Pipeline(catalog, bank, config).run_image(record);
}

inline BatchResult run_batch(std::span<const ImageRecord> records, const ClassCatalog& catalog,
                             const PrototypeBank* bank, const PipelineConfig& config, std::size_t workers = 1) {
    return Pipeline(catalog, bank, config).run_batch(records, workers);
}

}  // namespace aggdet
