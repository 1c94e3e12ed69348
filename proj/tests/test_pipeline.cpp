#include <gtest/gtest.h>

#include <cmath>

#include "aggdet/aggdet.hpp"
#include "fixtures.hpp"
#include "reference_baseline.hpp"

using namespace aggdet;

TEST(Pipeline, SwitchesOffMatchReferencePostProcessor) {
    const auto scene = fixture::make_scene(fixture::small_spec(21), 12);
    auto cfg = fixture::config_for(scene.data);
    cfg.switches = AggregationSwitches::none();
    for (std::size_t n : {300u, 7u}) {
        cfg.detections_per_image = n;
        const Pipeline pipe(scene.data.catalog, &scene.bank, cfg);
        for (const auto& rec : scene.data.images) {
            const auto got = pipe.run_image(rec);
            const auto want = oracle::baseline_postprocess(rec, scene.data.catalog, cfg);
            EXPECT_TRUE(oracle::same_detections(got.detections, want)) << rec.image_id << " N=" << n;
        }
    }
}

TEST(Pipeline, SwitchesOffWithoutBankOrRefinedBoxes) {
    auto scene = fixture::make_scene(fixture::small_spec(22), 4);
    auto cfg = fixture::config_for(scene.data);
    cfg.switches = AggregationSwitches::none();
    const Pipeline pipe(scene.data.catalog, nullptr, cfg);
    for (auto rec : scene.data.images) {
        rec.refined = {};
        EXPECT_TRUE(oracle::same_detections(pipe.run_image(rec).detections,
                                            oracle::baseline_postprocess(rec, scene.data.catalog, cfg)));
    }
}

TEST(Pipeline, AggregationRequiresABank) {
    const auto scene = fixture::make_scene(fixture::small_spec(23), 1);
    auto cfg = fixture::config_for(scene.data);
    EXPECT_THROW(Pipeline(scene.data.catalog, nullptr, cfg), ContractError);
}

namespace {

// One base class along e0 and one novel class along e1, with the bank
// built so that the novel prototype is exactly the novel text embedding.
struct TwoClass {
    ClassCatalog catalog{{{1, "base", Split::base, {1, 0, 0}}, {2, "novel", Split::novel, {0, 1, 0}}}, true};
    PrototypeBank bank = extrapolate_novel_prototypes({{1, {1, 0, 0}}}, catalog);
};

ImageRecord duplicates_of(const BoundingBox& b, std::size_t n, const Vector& feature) {
    ImageRecord r;
    r.image_id = "dup";
    for (std::size_t i = 0; i < n; ++i) r.proposals.push_back({b, 0.9, feature});
    return r;
}

}  // namespace

TEST(Pipeline, SinglePathScoreSparse) {
    const TwoClass tc;
    auto cfg = PipelineConfig::preset("coco");
    cfg.mode = ArchitectureMode::sparse;
    const auto rec = duplicates_of({10, 10, 50, 50}, 4, {0, 1, 0});
    const auto res = Pipeline(tc.catalog, &tc.bank, cfg).run_image(rec);
    ASSERT_FALSE(res.detections.empty());
    const auto& top = res.detections.front();
    EXPECT_EQ(top.class_id, 2);
    const double want = std::pow(sigmoid(1.0 + cfg.alpha), cfg.gamma) * std::pow(1.0, 1.0 - cfg.gamma);
    EXPECT_NEAR(top.score, want, 1e-15);
    EXPECT_EQ(top.provenance.quality, 1.0);
    EXPECT_EQ(top.provenance.prototype_similarity, 1.0);
    EXPECT_EQ(res.proposals.size(), 1u);
}

TEST(Pipeline, DenseSingleSurvivorHasZeroQuality) {
    const TwoClass tc;
    auto cfg = PipelineConfig::preset("coco");
    const auto rec = duplicates_of({10, 10, 50, 50}, 4, {0, 1, 0});
    const auto res = Pipeline(tc.catalog, &tc.bank, cfg).run_image(rec);
    EXPECT_TRUE(res.detections.empty());
    cfg.switches.aoc_lq = false;
    const auto plain = Pipeline(tc.catalog, &tc.bank, cfg).run_image(rec);
    ASSERT_EQ(plain.detections.size(), 2u);
    EXPECT_EQ(plain.detections[0].class_id, 2);
    EXPECT_NEAR(plain.detections[0].score, sigmoid(1.0 + cfg.alpha), 1e-15);
}

TEST(Pipeline, DenseRecomputesQualityOnRefinedBoxes) {
    const TwoClass tc;
    auto cfg = PipelineConfig::preset("coco");
    cfg.switches.arp_lq = false;
    ImageRecord rec;
    rec.image_id = "r";
    rec.proposals = {{{0, 0, 10, 10}, 0.9, {0, 1, 0}}, {{100, 100, 110, 110}, 0.8, {0, 1, 0}}};
    rec.refined.per_proposal = 1;
    rec.refined.boxes = {{0, 0, 10, 10}, {0, 5, 10, 15}};
    const auto res = Pipeline(tc.catalog, &tc.bank, cfg).run_image(rec);
    ASSERT_FALSE(res.detections.empty());
    for (const auto& d : res.detections) EXPECT_NEAR(d.provenance.quality, 1.0 / 3.0, 1e-15);
}

TEST(Pipeline, EmptyProposalsGiveEmptyResult) {
    const auto scene = fixture::make_scene(fixture::small_spec(24), 1);
    ImageRecord rec;
    rec.image_id = "empty";
    const auto res = Pipeline(scene.data.catalog, &scene.bank, fixture::config_for(scene.data)).run_image(rec);
    EXPECT_TRUE(res.detections.empty());
    EXPECT_TRUE(res.proposals.empty());
}

TEST(Pipeline, ProvenanceReplaysScores) {
    const auto scene = fixture::make_scene(fixture::small_spec(25), 6);
    auto cfg = fixture::config_for(scene.data);
    for (int mask = 0; mask < 8; ++mask) {
        cfg.switches = {(mask & 1) != 0, (mask & 2) != 0, (mask & 4) != 0};
        cfg.mode = mask % 2 ? ArchitectureMode::sparse : ArchitectureMode::dense;
        const Pipeline pipe(scene.data.catalog, &scene.bank, cfg);
        for (const auto& rec : scene.data.images) {
            const auto res = pipe.run_image(rec);
            EXPECT_LE(res.detections.size(), cfg.detections_per_image);
            for (const auto& d : res.detections) {
                const bool novel = scene.data.catalog.is_novel(scene.data.catalog.require_column(d.class_id));
                EXPECT_EQ(replay_score(d.provenance, novel, cfg), d.score);
                EXPECT_GE(d.score, 0.0);
                EXPECT_LE(d.score, 1.0);
            }
        }
    }
}

TEST(Pipeline, TrivialOffsetReplaysAndExcludesPrototypes) {
    const auto scene = fixture::make_scene(fixture::small_spec(26), 3);
    auto cfg = fixture::config_for(scene.data);
    cfg.trivial_offset = 0.01;
    EXPECT_THROW(cfg.validate(), ContractError);
    cfg.switches.aoc_vs = false;
    const Pipeline pipe(scene.data.catalog, &scene.bank, cfg);
    for (const auto& rec : scene.data.images) {
        for (const auto& d : pipe.run_image(rec).detections) {
            const bool novel = scene.data.catalog.is_novel(scene.data.catalog.require_column(d.class_id));
            EXPECT_EQ(replay_score(d.provenance, novel, cfg), d.score);
        }
    }
}

TEST(Pipeline, BatchIsOrderPreservingAndDeterministic) {
    const auto scene = fixture::make_scene(fixture::small_spec(27), 9);
    const auto cfg = fixture::config_for(scene.data);
    const Pipeline pipe(scene.data.catalog, &scene.bank, cfg);
    std::vector<ImageRecord> recs = scene.data.images;
    recs.push_back(recs.front());
    const auto one = pipe.run_batch(recs, 1);
    const auto four = pipe.run_batch(recs, 4);
    ASSERT_EQ(one.images.size(), recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) {
        EXPECT_EQ(one.images[i].image_id, recs[i].image_id);
        ASSERT_EQ(one.images[i].detections.size(), four.images[i].detections.size());
        for (std::size_t k = 0; k < one.images[i].detections.size(); ++k) {
            EXPECT_EQ(one.images[i].detections[k].score, four.images[i].detections[k].score);
            EXPECT_EQ(one.images[i].detections[k].class_id, four.images[i].detections[k].class_id);
        }
    }
    const auto& a = one.images.front().detections;
    const auto& b = one.images.back().detections;
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k].score, b[k].score);
    EXPECT_TRUE(pipe.run_batch(std::span<const ImageRecord>{}).images.empty());
}

TEST(Pipeline, MalformedRecordNamesImage) {
    const auto scene = fixture::make_scene(fixture::small_spec(28), 3);
    const Pipeline pipe(scene.data.catalog, &scene.bank, fixture::config_for(scene.data));
    auto recs = scene.data.images;
    recs[1].proposals[0].feature.pop_back();
    try {
        pipe.run_batch(recs, 2);
        FAIL() << "expected DimensionError";
    } catch (const DimensionError& e) {
        EXPECT_EQ(e.image_id(), recs[1].image_id);
    }
    recs = scene.data.images;
    recs[2].raw_logits.pop_back();
    EXPECT_THROW(pipe.run_batch(recs), DimensionError);
    recs = scene.data.images;
    recs[0].proposals[0].objectness = 1.5;
    EXPECT_THROW(pipe.run_batch(recs), ContractError);
}

TEST(PipelineConfig, ValidatesRangesAndProfiles) {
    PipelineConfig c;
    EXPECT_NO_THROW(c.validate());
    auto bad = [&](auto mutate) {
        PipelineConfig x;
        mutate(x);
        EXPECT_THROW(x.validate(), ContractError);
    };
    bad([](PipelineConfig& x) { x.k = 0; });
    bad([](PipelineConfig& x) { x.alpha = -0.1; });
    bad([](PipelineConfig& x) { x.gamma = 0.0; });
    bad([](PipelineConfig& x) { x.gamma = 1.01; });
    bad([](PipelineConfig& x) { x.temperature = 0.0; });
    bad([](PipelineConfig& x) { x.proposal_nms_iou = 0.0; });
    bad([](PipelineConfig& x) { x.class_nms_iou = 1.5; });
    bad([](PipelineConfig& x) { x.proposal_keep_max = 0; });
    bad([](PipelineConfig& x) { x.detections_per_image = 0; });
    bad([](PipelineConfig& x) { x.score_threshold = 1.0; });
    const auto coco = PipelineConfig::preset("coco");
    EXPECT_EQ(coco.k, 3u);
    EXPECT_EQ(coco.alpha, 0.05);
    EXPECT_EQ(coco.gamma, 0.75);
    const auto lvis = PipelineConfig::preset("lvis");
    EXPECT_EQ(lvis.alpha, 0.01);
    EXPECT_EQ(lvis.gamma, 2.0 / 3.0);
    EXPECT_THROW(PipelineConfig::preset("voc"), UsageError);
}

TEST(Ablation, EightRowsWithBaselineAndFullAtTheEnds) {
    const auto scene = fixture::make_scene(fixture::small_spec(29), 10);
    const auto cfg = fixture::config_for(scene.data);
    const auto rows = ablation_matrix(scene.data.images, scene.data.ground_truth, scene.data.catalog, scene.bank, cfg);
    ASSERT_EQ(rows.size(), 8u);
    EXPECT_FALSE(rows.front().switches.any());
    EXPECT_EQ(rows.back().switches, AggregationSwitches::all());

    auto eval_with = [&](AggregationSwitches sw) {
        auto c = cfg;
        c.switches = sw;
        const auto res = run_batch(scene.data.images, scene.data.catalog, &scene.bank, c);
        return evaluate(res.images, scene.data.ground_truth, scene.data.catalog, true);
    };
    const auto base = eval_with(AggregationSwitches::none());
    const auto full = eval_with(AggregationSwitches::all());
    EXPECT_EQ(rows.front().report.map_novel, base.map_novel);
    EXPECT_EQ(rows.front().report.map_base, base.map_base);
    EXPECT_EQ(rows.front().report.recall->all, base.recall->all);
    EXPECT_EQ(rows.back().report.map_novel, full.map_novel);
    EXPECT_EQ(rows.back().report.map_all, full.map_all);
    EXPECT_EQ(rows.back().report.recall->novel, full.recall->novel);
}

TEST(Ablation, SwitchOnRowsKeepNovelRecall) {
    for (std::uint64_t seed : {31u, 32u, 33u}) {
        auto spec = fixture::small_spec(seed);
        const auto scene = fixture::make_scene(spec, 20);
        const auto rows =
            ablation_matrix(scene.data.images, scene.data.ground_truth, scene.data.catalog, scene.bank,
                            fixture::config_for(scene.data), 2);
        for (const auto& r : rows) EXPECT_GE(r.report.recall->novel, rows.front().report.recall->novel) << r.label;
    }
}

TEST(TrivialOffsetEstimate, MatchesPrototypeAggregationOnAverage) {
    const auto scene = fixture::make_scene(fixture::small_spec(34), 8);
    const auto cfg = fixture::config_for(scene.data);
    const double a = estimate_trivial_offset(scene.data.images, scene.data.ground_truth, scene.data.catalog,
                                             scene.bank, cfg, 500, 3);
    const double b = estimate_trivial_offset(scene.data.images, scene.data.ground_truth, scene.data.catalog,
                                             scene.bank, cfg, 500, 3);
    EXPECT_EQ(a, b);
    EXPECT_GT(a, 0.0);
    EXPECT_LT(a, cfg.alpha);
    const double c = estimate_trivial_offset(scene.data.images, {}, scene.data.catalog, scene.bank, cfg, 500, 3);
    EXPECT_TRUE(std::isfinite(c));
}
