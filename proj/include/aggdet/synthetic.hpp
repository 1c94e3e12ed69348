#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <thread>
#include <vector>

#include "aggdet/catalog.hpp"
#include "aggdet/errors.hpp"
#include "aggdet/evaluation.hpp"
#include "aggdet/geometry.hpp"
#include "aggdet/linalg.hpp"
#include "aggdet/pipeline.hpp"

namespace aggdet {

/// Beta-shaped score distribution given by mean and concentration (a + b).
struct BetaShape {
    double mean = 0.5;
    double concentration = 10.0;
};

/// Parameters of a synthetic detector dump. Defaults are tuned so that both
/// biases are visible at desk scale; they are not measurements of any real
/// detector.
struct SceneSpec {
    std::uint64_t seed = 0;
    double image_width = 640.0;
    double image_height = 480.0;
    std::size_t objects_min = 2;
    std::size_t objects_max = 6;
    std::size_t proposals_per_object = 12;
    std::size_t clutter_proposals = 30;
    double box_jitter = 0.15;     ///< sd of centre / log-size jitter, as a fraction of object size
    double refine_shrink = 0.3;   ///< refined box keeps this fraction of the proposal's offset from the object
    double refine_jitter = 0.03;
    std::size_t dim = 64;
    std::size_t base_classes = 12;
    std::size_t novel_classes = 4;
    BetaShape base_objectness{0.8, 8.0};
    BetaShape novel_objectness{0.3, 4.0};
    BetaShape clutter_objectness{0.1, 6.0};
    double proposal_concentration = 30.0;  ///< spread of proposal objectness around its object's level
    double similarity_suppression = 2.0;   ///< mean novel logit reduction, in units of s / temperature
    double suppression_spread = 1.0;       ///< per-object reduction multiplier ~ U(1 - spread, 1 + spread)
    double temperature = 0.02;             ///< the synthetic detector's sigmoid temperature
    double logit_bias = 0.54;              ///< subtracted from every similarity logit
    double novel_alignment = 0.15;         ///< novel logits are this multiple of the base-style logit f . t - bias
    double alignment_noise = 1.0;          ///< sd of per-object novel logit noise, in units of s / temperature
    double base_alignment_noise = 0.0;     ///< sd of per-object base logit noise, in units of s / temperature
    double feature_noise = 1.0;            ///< norm scale of the isotropic feature noise
    double modality_gap = 1.0;             ///< norm of the offset between visual and text spaces

    void validate() const {
        if (dim < 2) throw ContractError("SceneSpec: dim must be at least 2");
        if (base_classes == 0) throw ContractError("SceneSpec: at least one base class is required");
        if (proposals_per_object == 0) throw ContractError("SceneSpec: proposals_per_object must be >= 1");
        if (objects_min > objects_max) throw ContractError("SceneSpec: objects_min > objects_max");
        if (!(image_width > 0.0 && image_height > 0.0)) throw ContractError("SceneSpec: image size must be positive");
        if (!(box_jitter > 0.0 && refine_jitter > 0.0 && feature_noise > 0.0 && temperature > 0.0)) {
            throw ContractError("SceneSpec: scales must be positive");
        }
        if (!(refine_shrink >= 0.0 && refine_shrink <= 1.0)) throw ContractError("SceneSpec: refine_shrink outside [0,1]");
        if (!(similarity_suppression >= 0.0)) throw ContractError("SceneSpec: similarity_suppression must be >= 0");
        if (!(suppression_spread >= 0.0 && suppression_spread <= 1.0)) {
            throw ContractError("SceneSpec: suppression_spread outside [0,1]");
        }
        if (!(modality_gap >= 0.0)) throw ContractError("SceneSpec: modality_gap must be >= 0");
        if (!(novel_alignment >= 0.0 && alignment_noise >= 0.0 && base_alignment_noise >= 0.0)) {
            throw ContractError("SceneSpec: novel_alignment and alignment_noise must be >= 0");
        }
        for (const BetaShape* b : {&base_objectness, &novel_objectness, &clutter_objectness}) {
            if (!(b->mean > 0.0 && b->mean < 1.0 && b->concentration > 0.0)) {
                throw ContractError("SceneSpec: objectness shape needs mean in (0,1) and positive concentration");
            }
        }
        if (!(proposal_concentration > 0.0)) throw ContractError("SceneSpec: proposal_concentration must be positive");
    }
};

struct SyntheticDataset {
    SceneSpec spec;
    ClassCatalog catalog;
    std::vector<ImageRecord> images;
    std::vector<GroundTruthRecord> ground_truth;
    /// Per image, the ground-truth object each proposal was drawn around, or
    /// -1 for clutter.
    std::vector<std::vector<int>> proposal_owner;
    /// Unnormalized visual prototypes t_c + v, keyed by class id. Test oracle only.
    std::map<int, Vector> true_prototypes;
    Vector modality_offset;
};

namespace detail {

inline std::mt19937_64 sub_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
    return std::mt19937_64(seq);
}

inline double draw_beta(std::mt19937_64& rng, double mean, double concentration) {
    const double a = std::max(mean * concentration, 1e-3);
    const double b = std::max((1.0 - mean) * concentration, 1e-3);
    std::gamma_distribution<double> ga(a, 1.0);
    std::gamma_distribution<double> gb(b, 1.0);
    const double x = ga(rng);
    const double y = gb(rng);
    const double s = x + y;
    return s > 0.0 ? x / s : mean;
}

inline Vector gaussian_vector(std::mt19937_64& rng, std::size_t dim, double sd) {
    std::normal_distribution<double> n(0.0, sd);
    Vector v(dim);
    for (double& x : v) x = n(rng);
    return v;
}

inline double to_f32(double x) { return static_cast<double>(static_cast<float>(x)); }

inline BoundingBox clip_box(double cx, double cy, double w, double h, double img_w, double img_h) {
    const double x1 = std::clamp(cx - 0.5 * w, 0.0, img_w);
    const double y1 = std::clamp(cy - 0.5 * h, 0.0, img_h);
    const double x2 = std::clamp(cx + 0.5 * w, x1, img_w);
    const double y2 = std::clamp(cy + 0.5 * h, y1, img_h);
    return {x1, y1, x2, y2};
}

inline BoundingBox jitter_box(std::mt19937_64& rng, const BoundingBox& b, double scale, double img_w, double img_h) {
    std::normal_distribution<double> n(0.0, scale);
    const double w = b.width();
    const double h = b.height();
    const double cx = 0.5 * (b.x1 + b.x2) + n(rng) * w;
    const double cy = 0.5 * (b.y1 + b.y2) + n(rng) * h;
    return clip_box(cx, cy, w * std::exp(n(rng)), h * std::exp(n(rng)), img_w, img_h);
}

struct ImageDraw {
    ImageRecord record;
    GroundTruthRecord gt;
    std::vector<int> owner;
};

inline ImageDraw draw_image(const SceneSpec& spec, const ClassCatalog& catalog,
                            const std::vector<Vector>& prototypes, const Vector& offset, std::size_t index) {
    auto rng = sub_rng(spec.seed, 0x1000 + index);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double W = spec.image_width;
    const double H = spec.image_height;
    const std::size_t nc = catalog.size();
    const std::size_t d = spec.dim;
    const double noise_sd = spec.feature_noise / std::sqrt(static_cast<double>(d));

    ImageDraw out;
    out.record.image_id = "img_" + std::to_string(index);
    out.record.width = W;
    out.record.height = H;
    out.gt.image_id = out.record.image_id;

    std::uniform_int_distribution<std::size_t> n_obj(spec.objects_min, spec.objects_max);
    std::uniform_int_distribution<std::size_t> pick_class(0, nc - 1);
    const std::size_t want = n_obj(rng);
    std::vector<std::size_t> obj_col;
    for (std::size_t o = 0, tries = 0; o < want && tries < 20 * (want + 1); ++tries) {
        const double w = (0.1 + 0.3 * unit(rng)) * W;
        const double h = (0.1 + 0.3 * unit(rng)) * H;
        const double x1 = unit(rng) * (W - w);
        const double y1 = unit(rng) * (H - h);
        const BoundingBox b(x1, y1, x1 + w, y1 + h);
        bool clash = false;
        for (const auto& g : out.gt.objects) clash = clash || iou(g.box, b) > 0.3;
        if (clash) continue;
        const std::size_t col = pick_class(rng);
        out.gt.objects.push_back({b, catalog[col].id, catalog[col].split});
        obj_col.push_back(col);
        ++o;
    }

    std::uniform_real_distribution<double> spread(1.0 - spec.suppression_spread, 1.0 + spec.suppression_spread);
    std::vector<double> suppression;  // per proposal, multiplier of the novel logit reduction

    auto add_proposal = [&](const BoundingBox& box, double objectness, Vector feature, const BoundingBox& refined,
                            int owner, double suppress) {
        normalize_in_place(feature);
        for (double& x : feature) x = to_f32(x);
        out.record.proposals.push_back({box, std::clamp(objectness, 0.0, 1.0), std::move(feature)});
        out.record.refined.boxes.push_back(refined);
        out.owner.push_back(owner);
        suppression.push_back(suppress);
    };

    for (std::size_t o = 0; o < out.gt.objects.size(); ++o) {
        const auto& g = out.gt.objects[o];
        const BetaShape& shape = g.split == Split::novel ? spec.novel_objectness : spec.base_objectness;
        const double level = draw_beta(rng, shape.mean, shape.concentration);
        const double suppress = spread(rng);
        for (std::size_t j = 0; j < spec.proposals_per_object; ++j) {
            BoundingBox box = jitter_box(rng, g.box, j == 0 ? 0.3 * spec.box_jitter : spec.box_jitter, W, H);
            if (j == 0 && iou(box, g.box) <= 0.5) box = g.box;
            const double overlap = iou(box, g.box);
            const double mean_o = std::clamp(level * (0.5 + 0.5 * overlap), 1e-3, 1.0 - 1e-3);
            const double o_score = draw_beta(rng, mean_o, spec.proposal_concentration);
            Vector f = gaussian_vector(rng, d, noise_sd * (2.0 - overlap));
            for (std::size_t i = 0; i < d; ++i) f[i] += prototypes[obj_col[o]][i];
            const BoundingBox pulled(g.box.x1 + spec.refine_shrink * (box.x1 - g.box.x1),
                                     g.box.y1 + spec.refine_shrink * (box.y1 - g.box.y1),
                                     std::max(g.box.x1 + spec.refine_shrink * (box.x1 - g.box.x1),
                                              g.box.x2 + spec.refine_shrink * (box.x2 - g.box.x2)),
                                     std::max(g.box.y1 + spec.refine_shrink * (box.y1 - g.box.y1),
                                              g.box.y2 + spec.refine_shrink * (box.y2 - g.box.y2)));
            const BoundingBox refined = jitter_box(rng, pulled, spec.refine_jitter, W, H);
            add_proposal(box, o_score, std::move(f), refined, static_cast<int>(o), suppress);
        }
    }

    for (std::size_t j = 0; j < spec.clutter_proposals; ++j) {
        const double w = (0.05 + 0.25 * unit(rng)) * W;
        const double h = (0.05 + 0.25 * unit(rng)) * H;
        const double x1 = unit(rng) * (W - w);
        const double y1 = unit(rng) * (H - h);
        const BoundingBox box(x1, y1, x1 + w, y1 + h);
        const double o_score = draw_beta(rng, spec.clutter_objectness.mean, spec.clutter_objectness.concentration);
        Vector f = gaussian_vector(rng, d, 2.0 * noise_sd);
        for (std::size_t i = 0; i < d; ++i) f[i] += offset[i];
        const BoundingBox refined = jitter_box(rng, box, spec.refine_jitter, W, H);
        add_proposal(box, o_score, std::move(f), refined, -1, spread(rng));
    }

    const std::size_t m = out.record.proposals.size();
    out.record.refined.per_proposal = m > 0 ? 1 : 0;
    if (m == 0) out.record.refined.boxes.clear();
    out.record.raw_logits.resize(m * nc);
    const double shift = spec.similarity_suppression * spec.temperature;
    auto noise_rng = sub_rng(spec.seed, 0x2000 + index);
    std::normal_distribution<double> eta(0.0, 1.0);
    const std::size_t n_obj_rows = out.gt.objects.size();
    std::vector<double> obj_noise(n_obj_rows * nc, 0.0);
    for (double& x : obj_noise) x = eta(noise_rng);
    std::vector<double> clutter_noise(nc);
    for (std::size_t i = 0; i < m; ++i) {
        const Vector& f = out.record.proposals[i].feature;
        const int o = out.owner[i];
        if (o < 0) {
            for (double& x : clutter_noise) x = eta(noise_rng);
        }
        for (std::size_t c = 0; c < nc; ++c) {
            const double a = dot_unchecked(f, catalog[c].text);
            const double z = o < 0 ? clutter_noise[c] : obj_noise[static_cast<std::size_t>(o) * nc + c];
            double s = 0.0;
            if (catalog.is_novel(c)) {
                s = spec.novel_alignment * (a - spec.logit_bias) - shift * suppression[i] -
                    spec.alignment_noise * spec.temperature * z;
            } else {
                s = a - spec.logit_bias - spec.base_alignment_noise * spec.temperature * z;
            }
            out.record.raw_logits[i * nc + c] = to_f32(s);
        }
    }
    return out;
}

}  // namespace detail

/// Class catalog, true prototypes and per-image draws for one scene spec.
/// Image `i` depends only on the spec and `i`.
class SyntheticGenerator {
public:
    explicit SyntheticGenerator(const SceneSpec& spec) : spec_(spec) {
        spec_.validate();
        auto rng = detail::sub_rng(spec_.seed, 0xC47A);
        const std::size_t nc = spec_.base_classes + spec_.novel_classes;
        std::vector<ClassEntry> entries;
        for (std::size_t c = 0; c < nc; ++c) {
            ClassEntry e;
            e.id = static_cast<int>(c + 1);
            e.split = c < spec_.base_classes ? Split::base : Split::novel;
            e.name = std::string(e.split == Split::base ? "base_" : "novel_") + std::to_string(c + 1);
            e.text = normalized(detail::gaussian_vector(rng, spec_.dim, 1.0));
            entries.push_back(std::move(e));
        }
        catalog_ = ClassCatalog(std::move(entries), false);
        offset_ = normalized(detail::gaussian_vector(rng, spec_.dim, 1.0));
        for (double& x : offset_) x *= spec_.modality_gap;
        for (const auto& e : catalog_.classes()) {
            Vector p(spec_.dim);
            for (std::size_t i = 0; i < spec_.dim; ++i) p[i] = e.text[i] + offset_[i];
            prototypes_.push_back(std::move(p));
        }
    }

    const SceneSpec& spec() const noexcept { return spec_; }
    const ClassCatalog& catalog() const noexcept { return catalog_; }
    const Vector& modality_offset() const noexcept { return offset_; }
    /// True visual prototype p_c = t_c + v, by catalog column.
    const std::vector<Vector>& prototypes() const noexcept { return prototypes_; }

    detail::ImageDraw draw(std::size_t index) const {
        return detail::draw_image(spec_, catalog_, prototypes_, offset_, index);
    }

private:
    SceneSpec spec_;
    ClassCatalog catalog_;
    Vector offset_;
    std::vector<Vector> prototypes_;
};

/// Deterministic synthetic dump plus ground truth. Images are drawn from
/// per-image sub-seeds, so the result does not depend on `workers`.
inline SyntheticDataset generate_dataset(const SceneSpec& spec, std::size_t num_images, std::size_t workers = 1) {
    const SyntheticGenerator gen(spec);
    SyntheticDataset ds;
    ds.spec = spec;
    ds.catalog = gen.catalog();
    ds.modality_offset = gen.modality_offset();
    for (std::size_t c = 0; c < ds.catalog.size(); ++c) ds.true_prototypes.emplace(ds.catalog[c].id, gen.prototypes()[c]);

    std::vector<detail::ImageDraw> draws(num_images);
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < num_images; i = next++) draws[i] = gen.draw(i);
    };
    const std::size_t n_threads = std::max<std::size_t>(1, std::min(workers, num_images));
    if (n_threads == 1) {
        work();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(work);
    }

    for (auto& dr : draws) {
        ds.images.push_back(std::move(dr.record));
        ds.ground_truth.push_back(std::move(dr.gt));
        ds.proposal_owner.push_back(std::move(dr.owner));
    }
    return ds;
}

/// Lowers novel-object proposal objectness by `objectness_delta` (clamped at
/// 0) and every novel logit by `similarity_delta` (in units of s/temperature).
inline SyntheticDataset inject_bias(SyntheticDataset ds, double objectness_delta, double similarity_delta) {
    if (!(objectness_delta >= 0.0 && similarity_delta >= 0.0)) throw ContractError("inject_bias: deltas must be >= 0");
    const std::size_t nc = ds.catalog.size();
    const double shift = similarity_delta * ds.spec.temperature;
    for (std::size_t img = 0; img < ds.images.size(); ++img) {
        auto& rec = ds.images[img];
        const auto& owner = ds.proposal_owner[img];
        for (std::size_t i = 0; i < rec.proposals.size(); ++i) {
            const int o = owner[i];
            if (o >= 0 && ds.ground_truth[img].objects[static_cast<std::size_t>(o)].split == Split::novel &&
                objectness_delta > 0.0) {
                rec.proposals[i].objectness = std::clamp(rec.proposals[i].objectness - objectness_delta, 0.0, 1.0);
            }
            if (shift > 0.0) {
                for (std::size_t c : ds.catalog.novel_columns()) {
                    double& s = rec.raw_logits[i * nc + c];
                    s = detail::to_f32(s - shift);
                }
            }
        }
    }
    return ds;
}

}  // namespace aggdet
