#include "support.hpp"

#include "zsad/metrics.hpp"

#include <gtest/gtest.h>

namespace zsad {
namespace {

struct Instance {
    std::vector<double> scores;
    std::vector<int> labels;
};

/// 2..12 samples with both classes; every other instance draws scores from
/// a five-value set so ties are common.
Instance random_instance(std::mt19937_64& rng, int trial)
{
    std::uniform_int_distribution<int> size(2, 12);
    std::uniform_int_distribution<int> level(0, 4);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::bernoulli_distribution coin(0.5);
    Instance in;
    const int n = size(rng);
    for (int i = 0; i < n; ++i) {
        in.scores.push_back(trial % 2 ? level(rng) / 4.0 : u(rng));
        in.labels.push_back(coin(rng) ? 1 : 0);
    }
    in.labels[0] = 1;
    in.labels[1] = 0;
    std::shuffle(in.labels.begin(), in.labels.end(), rng);
    return in;
}

TEST(Auroc, Examples)
{
    EXPECT_DOUBLE_EQ(auroc(std::vector<double>{0.1, 0.2, 0.8, 0.9}, std::vector<int>{0, 0, 1, 1}), 1.0);
    EXPECT_DOUBLE_EQ(auroc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}), 0.75);
    EXPECT_DOUBLE_EQ(auroc(std::vector<double>(6, 0.3), std::vector<int>{0, 1, 0, 1, 1, 0}), 0.5);
    EXPECT_THROW(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{1, 1}), UndefinedMetric);
    EXPECT_THROW(auroc(std::vector<double>{0.1, 0.2}, std::vector<int>{0, 0}), UndefinedMetric);
    EXPECT_THROW(auroc(std::vector<double>{0.1}, std::vector<int>{0, 1}), ConfigError);
}

TEST(AveragePrecision, Examples)
{
    EXPECT_DOUBLE_EQ(average_precision(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 0}), 1.0);
    EXPECT_DOUBLE_EQ(average_precision(std::vector<double>{0.9, 0.1}, std::vector<int>{0, 1}), 0.5);
    EXPECT_THROW(average_precision(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 1}), UndefinedMetric);
}

TEST(F1Max, Examples)
{
    EXPECT_DOUBLE_EQ(f1_max(std::vector<double>{0.9, 0.8, 0.1}, std::vector<int>{1, 1, 0}), 1.0);
    EXPECT_NEAR(f1_max(std::vector<double>{0.9, 0.8, 0.1}, std::vector<int>{1, 0, 1}), 0.8, 1e-15);
    // All scores equal, half positive: F1 of predicting everything positive.
    EXPECT_NEAR(f1_max(std::vector<double>(4, 0.5), std::vector<int>{1, 0, 1, 0}), 2.0 / 3.0, 1e-15);
    EXPECT_THROW(f1_max(std::vector<double>{0.9, 0.1}, std::vector<int>{0, 0}), UndefinedMetric);
    EXPECT_DOUBLE_EQ(f1_max(std::vector<double>{0.9, 0.1}, std::vector<int>{1, 1}), 1.0);
}

TEST(BinaryMetrics, MatchBruteForceOracles)
{
    std::mt19937_64 rng(11);
    for (int trial = 0; trial < 1000; ++trial) {
        const Instance in = random_instance(rng, trial);
        EXPECT_NEAR(auroc(in.scores, in.labels), testing::brute_auroc(in.scores, in.labels), 1e-9);
        EXPECT_NEAR(average_precision(in.scores, in.labels), testing::brute_ap(in.scores, in.labels), 1e-9);
        EXPECT_NEAR(f1_max(in.scores, in.labels), testing::brute_f1(in.scores, in.labels), 1e-9);
    }
}

TEST(BinaryMetrics, InvariantUnderMonotoneTransforms)
{
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 200; ++trial) {
        const Instance in = random_instance(rng, trial);
        std::vector<double> t;
        for (double s : in.scores) {
            t.push_back(std::exp(3.0 * s) + s * s * s);
        }
        EXPECT_NEAR(auroc(in.scores, in.labels), auroc(t, in.labels), 1e-12);
        EXPECT_NEAR(average_precision(in.scores, in.labels), average_precision(t, in.labels), 1e-12);
        EXPECT_NEAR(f1_max(in.scores, in.labels), f1_max(t, in.labels), 1e-12);
    }
}

TEST(BinaryMetrics, FloatInputsAccepted)
{
    const std::vector<float> s{0.1f, 0.4f, 0.35f, 0.8f};
    const std::vector<std::uint8_t> y{0, 0, 1, 1};
    EXPECT_DOUBLE_EQ(auroc(s, y), 0.75);
}

/// 8x8 mask with two disjoint rectangles.
Matrix two_region_mask(std::mt19937_64& rng)
{
    std::uniform_int_distribution<int> pos(0, 2);
    std::uniform_int_distribution<int> len(1, 2);
    Matrix m = Matrix::Zero(8, 8);
    m.block(pos(rng), pos(rng), len(rng), len(rng)).setOnes();
    m.block(5 + pos(rng) / 2, 4 + pos(rng), len(rng), len(rng)).setOnes();
    return m;
}

Matrix random_map(std::mt19937_64& rng, const Matrix& mask, bool quantised)
{
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Matrix m(8, 8);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        double v = 0.6 * u(rng) + 0.4 * mask.data()[i] * u(rng);
        m.data()[i] = quantised ? std::round(v * 6.0) / 6.0 : v;
    }
    return m;
}

TEST(Aupro, MatchesExhaustiveThresholdOracle)
{
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 200; ++trial) {
        const int images = 1 + trial % 2;
        std::vector<Matrix> maps, masks;
        for (int k = 0; k < images; ++k) {
            masks.push_back(two_region_mask(rng));
            maps.push_back(random_map(rng, masks.back(), trial % 3 == 0));
        }
        for (double limit : {0.3, 1.0}) {
            AuproOptions opt;
            opt.fpr_limit = limit;
            EXPECT_NEAR(aupro(maps, masks, opt), testing::brute_aupro(maps, masks, limit), 1e-6);
        }
    }
}

TEST(Aupro, PerfectAndAdversarialMaps)
{
    std::mt19937_64 rng(14);
    const Matrix mask = two_region_mask(rng);
    EXPECT_NEAR(aupro(std::vector<Matrix>{mask}, std::vector<Matrix>{mask}), 1.0, 1e-12);
    const Matrix inverse = (1.0 - mask.array()).matrix();
    EXPECT_NEAR(aupro(std::vector<Matrix>{inverse}, std::vector<Matrix>{mask}), 0.0, 1e-12);
}

TEST(Aupro, MonotoneInFprLimit)
{
    std::mt19937_64 rng(15);
    const Matrix mask = two_region_mask(rng);
    const Matrix map = random_map(rng, mask, false);
    double prev = 0.0;
    for (double limit = 0.05; limit <= 1.0; limit += 0.05) {
        AuproOptions opt;
        opt.fpr_limit = limit;
        const double v = aupro(std::vector<Matrix>{map}, std::vector<Matrix>{mask}, opt);
        EXPECT_GE(v, prev - 1e-12);
        prev = v;
    }
}

TEST(Aupro, InvariantUnderMonotoneTransform)
{
    std::mt19937_64 rng(16);
    const Matrix mask = two_region_mask(rng);
    const Matrix map = random_map(rng, mask, true);
    const Matrix t = (map.array() * 5.0).exp().matrix();
    EXPECT_NEAR(aupro(std::vector<Matrix>{map}, std::vector<Matrix>{mask}),
                aupro(std::vector<Matrix>{t}, std::vector<Matrix>{mask}), 1e-12);
}

TEST(Aupro, UndefinedWithoutAnomalies)
{
    EXPECT_THROW(aupro(std::vector<Matrix>{Matrix::Ones(4, 4)}, std::vector<Matrix>{Matrix::Zero(4, 4)}),
                 UndefinedMetric);
    AuproOptions bad;
    bad.fpr_limit = 0.0;
    EXPECT_THROW(aupro(std::vector<Matrix>{Matrix::Ones(4, 4)}, std::vector<Matrix>{Matrix::Ones(4, 4)}, bad),
                 ConfigError);
}

TEST(ConnectedComponents, DiagonalNeighboursJoinUnderEight)
{
    Matrix m = Matrix::Zero(3, 3);
    m(0, 0) = m(1, 1) = m(2, 2) = 1.0;
    EXPECT_EQ(connected_components(m, 8).second, 1);
    EXPECT_EQ(connected_components(m, 4).second, 3);
    EXPECT_THROW(connected_components(m, 6), ConfigError);
}

EvalRecord image_record(const std::string& cat, std::vector<double> s, std::vector<int> y)
{
    EvalRecord r;
    r.dataset = "ds";
    r.category = cat;
    r.image_scores = std::move(s);
    r.image_labels = std::move(y);
    r.pixel_metrics = false;
    return r;
}

TEST(Aggregate, MeanOfCategories)
{
    const auto a = image_record("a", {0.1, 0.2, 0.3, 0.4, 0.9, 0.5}, {0, 0, 0, 0, 0, 1});
    const auto b = image_record("b", {0.1, 0.9}, {0, 1});
    const auto reports = aggregate_report({a, b});
    ASSERT_EQ(reports.size(), 1u);
    EXPECT_NEAR(*reports[0].categories[0].cells.at("image_auroc").value, 0.8, 1e-15);
    EXPECT_NEAR(*reports[0].mean.at("image_auroc").value, 0.9, 1e-15);

    const auto one = aggregate_report({a});
    EXPECT_DOUBLE_EQ(*one[0].mean.at("image_auroc").value, *one[0].categories[0].cells.at("image_auroc").value);
}

TEST(Aggregate, SingleClassCategoryIsExcludedWithFootnote)
{
    const auto good = image_record("good", {0.1, 0.9}, {0, 1});
    const auto bad = image_record("allpos", {0.1, 0.9}, {1, 1});
    const auto reports = aggregate_report({good, bad});
    const auto& cell = reports[0].categories[1].cells.at("image_auroc");
    EXPECT_FALSE(cell.value.has_value());
    EXPECT_FALSE(cell.note.empty());
    EXPECT_DOUBLE_EQ(*reports[0].mean.at("image_auroc").value, 1.0);
    bool found = false;
    for (const auto& f : reports[0].footnotes) {
        found = found || (f.find("image_auroc") != std::string::npos && f.find("allpos") != std::string::npos);
    }
    EXPECT_TRUE(found);
    EXPECT_FALSE(reports[0].mean.at("pixel_auroc").value.has_value());
}

TEST(Aggregate, PixelMetricsFromMaps)
{
    EvalRecord r = image_record("c", {0.1, 0.9}, {0, 1});
    r.pixel_metrics = true;
    MapF mask = MapF::Zero(4, 4);
    mask.block(1, 1, 2, 2).setOnes();
    r.maps = {MapF::Zero(4, 4), mask};
    r.masks = {MapF::Zero(4, 4), mask};
    const CategoryMetrics m = evaluate_record(r);
    for (const auto& name : metric_names()) {
        ASSERT_TRUE(m.cells.at(name).value.has_value()) << name;
        EXPECT_NEAR(*m.cells.at(name).value, 1.0, 1e-12) << name;
    }
}

TEST(Aggregate, LocalizationOnlyDisablesImageMetrics)
{
    EvalRecord r = image_record("lesions", {0.3, 0.7}, {1, 1});
    r.image_metrics = false;
    const CategoryMetrics m = evaluate_record(r);
    EXPECT_FALSE(m.cells.at("image_auroc").value.has_value());
    EXPECT_EQ(m.cells.at("image_auroc").note, "image-level metrics disabled");
}

}  // namespace
}  // namespace zsad
