#pragma once

#include "aggdet/aggdet.hpp"

namespace fixture {

struct Scene {
    aggdet::SyntheticDataset data;
    aggdet::PrototypeBank bank;
};

inline aggdet::SceneSpec small_spec(std::uint64_t seed) {
    aggdet::SceneSpec s;
    s.seed = seed;
    s.dim = 32;
    s.base_classes = 6;
    s.novel_classes = 3;
    s.clutter_proposals = 20;
    s.proposals_per_object = 8;
    return s;
}

inline aggdet::PrototypeBank bank_for(const aggdet::SyntheticDataset& ds, bool with_gt = true) {
    const aggdet::ClassCatalog cat(ds.catalog.classes(), true);
    std::span<const aggdet::GroundTruthRecord> gt;
    if (with_gt) gt = ds.ground_truth;
    const auto samples = aggdet::collect_class_samples(ds.images, cat, gt, ds.spec.temperature, true);
    return aggdet::build_bank(samples, cat, aggdet::SamplingStrategy::random_n(300, 0));
}

// The bank is calibrated on at least 40 images of the same seed; the scene
// keeps the first `images` of them.
inline Scene make_scene(const aggdet::SceneSpec& spec, std::size_t images) {
    Scene s{aggdet::generate_dataset(spec, std::max<std::size_t>(images, 40)), {}};
    s.bank = bank_for(s.data);
    s.data.images.resize(images);
    s.data.ground_truth.resize(images);
    s.data.proposal_owner.resize(images);
    return s;
}

inline aggdet::PipelineConfig config_for(const aggdet::SyntheticDataset& ds, const char* profile = "coco") {
    auto c = aggdet::PipelineConfig::preset(profile);
    c.temperature = ds.spec.temperature;
    return c;
}

}  // namespace fixture
