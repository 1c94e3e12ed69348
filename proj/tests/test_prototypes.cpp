#include <gtest/gtest.h>

#include <random>

#include "aggdet/prototypes.hpp"
#include "aggdet/synthetic.hpp"

using namespace aggdet;

namespace {

Vector random_vector(std::mt19937_64& rng, std::size_t d) {
    std::normal_distribution<double> n(0.0, 1.0);
    Vector v(d);
    for (double& x : v) x = n(rng);
    return v;
}

ClassCatalog random_catalog(std::mt19937_64& rng, std::size_t base, std::size_t novel, std::size_t d,
                            bool normalize = true) {
    std::vector<ClassEntry> e;
    for (std::size_t c = 0; c < base + novel; ++c) {
        e.push_back({static_cast<int>(10 + c), "c" + std::to_string(c), c < base ? Split::base : Split::novel,
                     random_vector(rng, d)});
    }
    return ClassCatalog(std::move(e), normalize);
}

}  // namespace

TEST(ComputeBasePrototypes, OneSampleGivesThatSampleNormalized) {
    std::mt19937_64 rng(1);
    const auto cat = random_catalog(rng, 3, 1, 8);
    std::vector<ClassSamples> samples;
    for (std::size_t col : cat.base_columns()) samples.push_back({cat[col].id, {random_vector(rng, 8)}, {}});
    const auto protos = compute_base_prototypes(samples, cat, SamplingStrategy::random_n(300, 0));
    for (const auto& s : samples) {
        const Vector expect = normalized(s.features[0]);
        const Vector& got = protos.at(s.class_id);
        for (std::size_t i = 0; i < 8; ++i) EXPECT_NEAR(got[i], expect[i], 1e-15);
    }
}

TEST(ComputeBasePrototypes, CountAboveAvailableUsesFullMean) {
    std::mt19937_64 rng(2);
    const auto cat = random_catalog(rng, 2, 1, 6);
    std::vector<ClassSamples> samples;
    for (std::size_t col : cat.base_columns()) {
        ClassSamples s{cat[col].id, {}, {}};
        for (int i = 0; i < 7; ++i) s.features.push_back(random_vector(rng, 6));
        samples.push_back(std::move(s));
    }
    const auto a = compute_base_prototypes(samples, cat, SamplingStrategy::random_n(300, 9));
    const auto b = compute_base_prototypes(samples, cat, SamplingStrategy::random_n(7, 4));
    for (const auto& s : samples) {
        Vector m(6, 0.0);
        for (const auto& f : s.features) {
            for (std::size_t i = 0; i < 6; ++i) m[i] += f[i] / 7.0;
        }
        m = normalized(m);
        for (std::size_t i = 0; i < 6; ++i) {
            EXPECT_NEAR(a.at(s.class_id)[i], m[i], 1e-12);
            EXPECT_EQ(a.at(s.class_id)[i], b.at(s.class_id)[i]);
        }
    }
}

TEST(ComputeBasePrototypes, RandomSelectionIsSeededAndSubsetSized) {
    std::mt19937_64 rng(3);
    ClassSamples s{1, {}, {}};
    for (int i = 0; i < 50; ++i) s.features.push_back(random_vector(rng, 4));
    const auto a = detail::choose_samples(s, SamplingStrategy::random_n(10, 5));
    const auto b = detail::choose_samples(s, SamplingStrategy::random_n(10, 5));
    const auto c = detail::choose_samples(s, SamplingStrategy::random_n(10, 6));
    EXPECT_EQ(a.size(), 10u);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, c);
}

TEST(ComputeBasePrototypes, TopKTakesHighestScoresWithIndexTieBreak) {
    ClassSamples s{1, {}, {0.5, 0.9, 0.9, 0.1, 0.7}};
    for (int i = 0; i < 5; ++i) s.features.push_back({double(i), 1.0});
    EXPECT_EQ(detail::choose_samples(s, SamplingStrategy::top_k(3)), (std::vector<std::size_t>{1, 2, 4}));
    s.scores.pop_back();
    EXPECT_THROW(detail::choose_samples(s, SamplingStrategy::top_k(3)), ContractError);
}

TEST(ComputeBasePrototypes, TopKIsPermutationInvariant) {
    std::mt19937_64 rng(4);
    const auto cat = random_catalog(rng, 1, 1, 5);
    ClassSamples s{cat[0].id, {}, {}};
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 40; ++i) {
        s.features.push_back(random_vector(rng, 5));
        s.scores.push_back(u(rng));
    }
    ClassSamples r = s;
    std::reverse(r.features.begin(), r.features.end());
    std::reverse(r.scores.begin(), r.scores.end());
    const auto a = compute_base_prototypes(std::vector<ClassSamples>{s}, cat, SamplingStrategy::top_k(12));
    const auto b = compute_base_prototypes(std::vector<ClassSamples>{r}, cat, SamplingStrategy::top_k(12));
    for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(a.at(cat[0].id)[i], b.at(cat[0].id)[i], 1e-14);
}

TEST(ComputeBasePrototypes, MissingClassNamesIt) {
    std::mt19937_64 rng(5);
    const auto cat = random_catalog(rng, 2, 1, 4);
    std::vector<ClassSamples> samples{{cat[0].id, {random_vector(rng, 4)}, {}}, {cat[1].id, {}, {}}};
    try {
        compute_base_prototypes(samples, cat, SamplingStrategy::random_n(3, 0));
        FAIL() << "expected MissingSamplesError";
    } catch (const MissingSamplesError& e) {
        EXPECT_EQ(e.class_id(), cat[1].id);
        EXPECT_NE(std::string(e.what()).find(std::to_string(cat[1].id)), std::string::npos);
    }
}

TEST(ComputeBasePrototypes, RandomNApproachesClusterCentre) {
    std::mt19937_64 rng(6);
    const std::size_t d = 32;
    const auto cat = random_catalog(rng, 1, 1, d);
    const Vector centre = normalized(random_vector(rng, d));
    std::normal_distribution<double> n(0.0, 0.3 / std::sqrt(double(d)));
    ClassSamples s{cat[0].id, {}, {}};
    for (int i = 0; i < 2000; ++i) {
        Vector f = centre;
        for (double& x : f) x += n(rng);
        s.features.push_back(std::move(f));
    }
    for (std::size_t count : {100u, 300u}) {
        const auto p = compute_base_prototypes(std::vector<ClassSamples>{s}, cat, SamplingStrategy::random_n(count, 1));
        EXPECT_GT(dot(p.at(cat[0].id), centre), 0.99) << count;
    }
}

TEST(Extrapolation, ZeroDeltaGivesNormalizedMeanPrototype) {
    std::mt19937_64 rng(7);
    std::vector<ClassEntry> e;
    e.push_back({1, "a", Split::base, {1.0, 0.0, 0.0}});
    e.push_back({2, "b", Split::base, {0.0, 1.0, 0.0}});
    e.push_back({3, "n", Split::novel, {0.5, 0.5, 0.0}});
    const ClassCatalog cat(std::move(e), false);
    std::map<int, Vector> base{{1, normalized(random_vector(rng, 3))}, {2, normalized(random_vector(rng, 3))}};
    const auto bank = extrapolate_novel_prototypes(base, cat);
    Vector m(3);
    for (std::size_t i = 0; i < 3; ++i) m[i] = 0.5 * (base[1][i] + base[2][i]);
    m = normalized(m);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(bank.novel(3)[i], m[i], 1e-15);
}

TEST(Extrapolation, SingleBaseClassCollapsesMeans) {
    std::mt19937_64 rng(8);
    const auto cat = random_catalog(rng, 1, 3, 6);
    std::map<int, Vector> base{{cat[0].id, normalized(random_vector(rng, 6))}};
    const auto bank = extrapolate_novel_prototypes(base, cat);
    for (std::size_t col : cat.novel_columns()) {
        Vector want(6);
        for (std::size_t i = 0; i < 6; ++i) want[i] = base[cat[0].id][i] + cat[col].text[i] - cat[0].text[i];
        want = normalized(want);
        for (std::size_t i = 0; i < 6; ++i) EXPECT_NEAR(bank.novel(cat[col].id)[i], want[i], 1e-14);
    }
}

TEST(Extrapolation, BankMeansAreExactMeans) {
    std::mt19937_64 rng(9);
    const auto cat = random_catalog(rng, 5, 2, 7);
    std::map<int, Vector> base;
    for (std::size_t col : cat.base_columns()) base[cat[col].id] = normalized(random_vector(rng, 7));
    const auto bank = extrapolate_novel_prototypes(base, cat);
    for (std::size_t i = 0; i < 7; ++i) {
        double p = 0.0;
        double t = 0.0;
        for (std::size_t col : cat.base_columns()) {
            p += base[cat[col].id][i];
            t += cat[col].text[i];
        }
        EXPECT_NEAR(bank.mean_base_prototype[i], p / 5.0, 1e-15);
        EXPECT_NEAR(bank.mean_base_text[i], t / 5.0, 1e-15);
    }
    EXPECT_EQ(bank.novel_prototypes.size(), 2u);
    EXPECT_EQ(bank.base_prototypes.size(), 5u);
}

TEST(Extrapolation, RecoversTruePrototypesInDeltaConsistentSpace) {
    for (std::uint64_t seed = 0; seed < 25; ++seed) {
        SceneSpec spec;
        spec.seed = seed;
        spec.dim = 16 + seed % 5 * 16;
        spec.base_classes = 1 + seed % 7;
        spec.novel_classes = 1 + seed % 4;
        const SyntheticGenerator gen(spec);
        const auto& cat = gen.catalog();
        std::map<int, Vector> base;
        for (std::size_t col : cat.base_columns()) base[cat[col].id] = gen.prototypes()[col];
        const auto raw = extrapolate_unnormalized(base, cat);
        for (std::size_t col : cat.novel_columns()) {
            const Vector& got = raw.at(cat[col].id);
            for (std::size_t i = 0; i < spec.dim; ++i) EXPECT_NEAR(got[i], gen.prototypes()[col][i], 1e-9);
        }
    }
}

TEST(Extrapolation, TranslatingAllTextsLeavesPrototypesUnchanged) {
    std::mt19937_64 rng(10);
    auto cat = random_catalog(rng, 4, 3, 5, false);
    std::map<int, Vector> base;
    for (std::size_t col : cat.base_columns()) base[cat[col].id] = random_vector(rng, 5);
    const Vector u = random_vector(rng, 5);
    std::vector<ClassEntry> shifted = cat.classes();
    for (auto& e : shifted) {
        for (std::size_t i = 0; i < 5; ++i) e.text[i] += u[i];
    }
    const ClassCatalog cat2(std::move(shifted), false);
    const auto a = extrapolate_unnormalized(base, cat);
    const auto b = extrapolate_unnormalized(base, cat2);
    for (const auto& [id, v] : a) {
        for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(v[i], b.at(id)[i], 1e-12);
    }
}

TEST(RegionPrototypeSimilarity, MatchesScalarLoop) {
    std::mt19937_64 rng(11);
    for (int t = 0; t < 200; ++t) {
        const std::size_t d = 1 + t % 37;
        const Vector a = random_vector(rng, d);
        const Vector b = random_vector(rng, d);
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) s += a[i] * b[i];
        EXPECT_NEAR(region_prototype_similarity(a, b), s, 1e-12);
    }
    EXPECT_DOUBLE_EQ(region_prototype_similarity(Vector{1, 0}, Vector{0, 1}), 0.0);
    EXPECT_DOUBLE_EQ(region_prototype_similarity(Vector{0.6, 0.8}, Vector{0.6, 0.8}), 1.0);
    EXPECT_THROW(region_prototype_similarity(Vector{1, 0}, Vector{1}), ContractError);
}

TEST(Catalog, RequiresABaseClassAndConsistentDimension) {
    EXPECT_THROW(ClassCatalog({{1, "n", Split::novel, {1.0, 0.0}}}, true), ContractError);
    EXPECT_THROW(ClassCatalog({{1, "a", Split::base, {1.0, 0.0}}, {2, "b", Split::base, {1.0}}}, true),
                 ContractError);
    EXPECT_THROW(ClassCatalog({{1, "a", Split::base, {1.0}}, {1, "b", Split::base, {1.0}}}, true), ContractError);
    const ClassCatalog cat({{1, "a", Split::base, {3.0, 4.0}}}, true);
    EXPECT_NEAR(l2_norm(cat[0].text), 1.0, 1e-15);
}
