#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <random>

#include "aggdet/scoring.hpp"

using namespace aggdet;

namespace {

Vector random_vector(std::mt19937_64& rng, std::size_t d) {
    std::normal_distribution<double> n(0.0, 1.0);
    Vector v(d);
    for (double& x : v) x = n(rng);
    return v;
}

struct Fixture {
    ClassCatalog catalog;
    PrototypeBank bank;
    std::vector<Vector> features;
};

Fixture make_fixture(std::uint64_t seed, std::size_t base, std::size_t novel, std::size_t d, std::size_t rows) {
    std::mt19937_64 rng(seed);
    std::vector<ClassEntry> e;
    for (std::size_t c = 0; c < base + novel; ++c) {
        e.push_back({static_cast<int>(c), "c", c < base ? Split::base : Split::novel, random_vector(rng, d)});
    }
    Fixture f{ClassCatalog(std::move(e), true), {}, {}};
    std::map<int, Vector> protos;
    for (std::size_t col : f.catalog.base_columns()) protos[f.catalog[col].id] = normalized(random_vector(rng, d));
    f.bank = extrapolate_novel_prototypes(protos, f.catalog);
    for (std::size_t r = 0; r < rows; ++r) f.features.push_back(normalized(random_vector(rng, d)));
    return f;
}

ScoreTable table_from(std::size_t rows, std::size_t cols, ScoreStage stage, std::mt19937_64& rng, double lo,
                      double hi) {
    std::uniform_real_distribution<double> u(lo, hi);
    ScoreTable t(rows, cols, stage);
    for (std::size_t r = 0; r < rows; ++r) {
        for (double& v : t.row(r)) v = u(rng);
    }
    return t;
}

}  // namespace

TEST(RegionTextSimilarity, UnitAndOrthogonalCases) {
    const ClassCatalog cat({{1, "a", Split::base, {1, 0, 0}}, {2, "b", Split::novel, {0, 1, 0}}}, true);
    const auto t = region_text_similarity(std::vector<Vector>{{0, 0, 1}, {1, 0, 0}}, cat);
    EXPECT_EQ(t(0, 0), 0.0);
    EXPECT_EQ(t(0, 1), 0.0);
    EXPECT_EQ(t(1, 0), 1.0);
    EXPECT_THROW(region_text_similarity(std::vector<Vector>{{1, 0}}, cat), ContractError);
}

TEST(RegionTextSimilarity, MatchesScalarLoop) {
    const auto f = make_fixture(1, 5, 3, 17, 40);
    const auto t = region_text_similarity(f.features, f.catalog);
    for (std::size_t r = 0; r < 40; ++r) {
        for (std::size_t c = 0; c < 8; ++c) {
            double s = 0.0;
            for (std::size_t i = 0; i < 17; ++i) s += f.features[r][i] * f.catalog[c].text[i];
            EXPECT_NEAR(t(r, c), s, 1e-10);
        }
    }
}

TEST(AggregateSimilarity, AlphaZeroIsIdentity) {
    const auto f = make_fixture(2, 4, 4, 9, 20);
    const auto raw = region_text_similarity(f.features, f.catalog);
    const auto agg = aggregate_similarity(raw, f.features, f.catalog, f.bank, 0.0);
    EXPECT_EQ(agg.values(), raw.values());
    EXPECT_EQ(agg.stage(), ScoreStage::aggregated_similarity);
}

TEST(AggregateSimilarity, BaseColumnsAreBitIdentical) {
    const auto f = make_fixture(3, 6, 3, 12, 60);
    const auto raw = region_text_similarity(f.features, f.catalog);
    for (double alpha : {0.01, 0.05, 0.7}) {
        const auto agg = aggregate_similarity(raw, f.features, f.catalog, f.bank, alpha);
        for (std::size_t r = 0; r < raw.rows(); ++r) {
            for (std::size_t c : f.catalog.base_columns()) {
                const double a = agg(r, c), b = raw(r, c);
                EXPECT_EQ(std::memcmp(&a, &b, sizeof(double)), 0);
            }
            for (std::size_t c : f.catalog.novel_columns()) {
                const double want = raw(r, c) + alpha * dot(f.features[r], f.bank.novel(f.catalog[c].id));
                EXPECT_NEAR(agg(r, c), want, 1e-15);
            }
        }
    }
}

TEST(AggregateSimilarity, DirectSubstitution) {
    const ClassCatalog cat({{1, "a", Split::base, {1, 0}}, {2, "n", Split::novel, {1, 0}}}, false);
    PrototypeBank bank;
    bank.dim = 2;
    bank.novel_prototypes[2] = {0, 1};
    ScoreTable raw(1, 2, ScoreStage::raw_similarity);
    const auto agg = aggregate_similarity(raw, std::vector<Vector>{{0, 1}}, cat, bank, 0.05);
    EXPECT_EQ(agg(0, 0), 0.0);
    EXPECT_DOUBLE_EQ(agg(0, 1), 0.05);
}

TEST(AggregateSimilarity, MonotoneInAlphaForNonNegativePrototypeSimilarity) {
    const auto f = make_fixture(4, 3, 5, 8, 50);
    const auto raw = region_text_similarity(f.features, f.catalog);
    const auto proto = prototype_similarity(f.features, f.catalog, f.bank);
    ScoreTable prev = aggregate_similarity(raw, proto, f.catalog, 0.0);
    for (double alpha : {0.01, 0.05, 0.2, 1.0}) {
        const auto cur = aggregate_similarity(raw, proto, f.catalog, alpha);
        for (std::size_t r = 0; r < raw.rows(); ++r) {
            for (std::size_t c : f.catalog.novel_columns()) {
                if (proto(r, c) >= 0.0) {
                    EXPECT_GE(cur(r, c), prev(r, c));
                }
            }
        }
        prev = cur;
    }
}

TEST(AggregateSimilarity, RejectsMissingNovelPrototypeAndBadInputs) {
    auto f = make_fixture(5, 2, 2, 4, 3);
    const auto raw = region_text_similarity(f.features, f.catalog);
    EXPECT_THROW(aggregate_similarity(raw, f.features, f.catalog, f.bank, -0.1), ContractError);
    f.bank.novel_prototypes.erase(f.bank.novel_prototypes.begin());
    EXPECT_THROW(aggregate_similarity(raw, f.features, f.catalog, f.bank, 0.05), ContractError);
    const auto agg = aggregate_similarity(raw, raw, f.catalog, 0.0);
    EXPECT_THROW(aggregate_similarity(agg, raw, f.catalog, 0.0), ContractError);
}

TEST(Calibrate, ClosedForms) {
    ScoreTable s(1, 3, ScoreStage::aggregated_similarity);
    s(0, 0) = 0.0;
    s(0, 1) = 0.05;
    s(0, 2) = 1000.0;
    const auto c = calibrate(s, 1.0);
    EXPECT_EQ(c(0, 0), 0.5);
    EXPECT_NEAR(c(0, 1), 0.51250, 5e-6);
    EXPECT_NEAR(c(0, 1), 1.0 / (1.0 + std::exp(-0.05)), 1e-15);
    EXPECT_EQ(c(0, 2), 1.0);
    EXPECT_EQ(calibrate(s, 0.5)(0, 1), sigmoid(0.1));
    EXPECT_THROW(calibrate(s, 0.0), ContractError);
    EXPECT_THROW(calibrate(c, 1.0), ContractError);
}

TEST(Calibrate, StableAtExtremesAndStrictlyMonotone) {
    EXPECT_EQ(sigmoid(-1000.0), 0.0);
    EXPECT_GT(sigmoid(-700.0), 0.0);
    EXPECT_TRUE(std::isfinite(sigmoid(-1e308)));
    double prev = sigmoid(-30.0);
    for (double x = -29.9; x < 30.0; x += 0.1) {
        const double v = sigmoid(x);
        EXPECT_GT(v, prev);
        prev = v;
    }
}

TEST(QualityRegulate, ClosedFormsAndIdentities) {
    ScoreTable c(2, 2, ScoreStage::calibrated);
    c(0, 0) = 0.25;
    c(0, 1) = 0.6;
    c(1, 0) = 0.3;
    c(1, 1) = 0.9;
    const QualityVector q{{1.0, 0.0}};
    const auto r = quality_regulate(c, q, 0.75);
    EXPECT_NEAR(r(0, 0), 0.35355, 5e-6);
    EXPECT_NEAR(r(0, 0), std::pow(2.0, -1.5), 1e-15);
    EXPECT_EQ(r(1, 0), 0.0);
    EXPECT_EQ(r(1, 1), 0.0);
    EXPECT_EQ(quality_regulate(c, q, 1.0).values(), c.values());

    ScoreTable same(1, 1, ScoreStage::calibrated);
    same(0, 0) = 0.42;
    EXPECT_NEAR(quality_regulate(same, QualityVector{{0.42}}, 2.0 / 3.0)(0, 0), 0.42, 1e-15);

    EXPECT_THROW(quality_regulate(c, q, 0.0), ContractError);
    EXPECT_THROW(quality_regulate(c, q, 1.5), ContractError);
    EXPECT_THROW(quality_regulate(c, QualityVector{{1.0}}, 0.75), ContractError);
    EXPECT_THROW(quality_regulate(c, QualityVector{{1.0, 1.2}}, 0.75), ContractError);
    EXPECT_EQ(regulate(0.0, 0.5, 0.75), 0.0);
}

TEST(QualityRegulate, PreservesWithinRowRanking) {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(1e-6, 1.0);
    const auto c = table_from(5000, 12, ScoreStage::calibrated, rng, 1e-9, 1.0);
    QualityVector q;
    for (std::size_t r = 0; r < c.rows(); ++r) q.values.push_back(u(rng));
    for (double gamma : {0.75, 2.0 / 3.0, 0.1}) {
        const auto out = quality_regulate(c, q, gamma);
        for (std::size_t r = 0; r < c.rows(); ++r) {
            for (std::size_t a = 0; a < c.cols(); ++a) {
                for (std::size_t b = a + 1; b < c.cols(); ++b) {
                    if (c(r, a) < c(r, b)) {
                        ASSERT_LE(out(r, a), out(r, b));
                    }
                    if (c(r, a) > c(r, b)) {
                        ASSERT_GE(out(r, a), out(r, b));
                    }
                }
            }
        }
    }
}

TEST(TrivialOffset, CalibrationMatchesAccumulation) {
    const ClassCatalog cat({{1, "a", Split::base, {1}}, {2, "b", Split::novel, {1}}, {3, "c", Split::novel, {1}}},
                           false);
    std::mt19937_64 rng(7);
    const auto raw = table_from(30, 3, ScoreStage::raw_similarity, rng, -1.0, 1.0);
    auto agg = raw.advanced(ScoreStage::aggregated_similarity);
    const CalibrationPair same{&raw, &agg};
    EXPECT_EQ(trivial_offset_calibrate(std::span(&same, 1), cat), 0.0);

    for (std::size_t r = 0; r < 30; ++r) {
        agg(r, 1) += 0.1;
        agg(r, 2) += 0.1;
        agg(r, 0) += 5.0;
    }
    EXPECT_NEAR(trivial_offset_calibrate(std::span(&same, 1), cat), 0.1, 1e-15);

    const auto raw2 = table_from(17, 3, ScoreStage::raw_similarity, rng, -1.0, 1.0);
    const auto agg2 = table_from(17, 3, ScoreStage::aggregated_similarity, rng, -1.0, 1.0);
    const std::vector<CalibrationPair> pairs{{&raw, &agg}, {&raw2, &agg2}};
    double sum = 0.0;
    int n = 0;
    for (const auto& p : pairs) {
        for (std::size_t r = 0; r < p.raw->rows(); ++r) {
            for (std::size_t c = 1; c < 3; ++c) {
                sum += (*p.aggregated)(r, c) - (*p.raw)(r, c);
                ++n;
            }
        }
    }
    EXPECT_NEAR(trivial_offset_calibrate(pairs, cat), sum / n, 1e-12);
    EXPECT_THROW(trivial_offset_calibrate(std::span<const CalibrationPair>{}, cat), ContractError);
}

TEST(TrivialOffset, ShiftsNovelColumnsOnly) {
    const ClassCatalog cat({{1, "a", Split::base, {1}}, {2, "b", Split::novel, {1}}}, false);
    ScoreTable raw(2, 2, ScoreStage::raw_similarity);
    raw(0, 0) = 0.7;
    raw(0, 1) = 0.2;
    raw(1, 0) = -0.3;
    raw(1, 1) = -0.4;
    const auto zero = apply_trivial_offset(raw, cat, 0.0);
    EXPECT_EQ(zero.values(), raw.values());
    const auto shifted = apply_trivial_offset(raw, cat, 0.1);
    EXPECT_NEAR(shifted(0, 1), 0.3, 1e-15);
    EXPECT_EQ(shifted(0, 0), 0.7);
    EXPECT_EQ(shifted(1, 0), -0.3);
    EXPECT_EQ(shifted.stage(), ScoreStage::aggregated_similarity);
}

TEST(ScoreTable, StagesOnlyMoveForward) {
    ScoreTable t(1, 1, ScoreStage::calibrated);
    EXPECT_THROW(t.advanced(ScoreStage::raw_similarity), ContractError);
    EXPECT_NO_THROW(t.advanced(ScoreStage::regulated));
}
