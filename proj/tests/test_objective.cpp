#include "dfm/grad_check.hpp"
#include "dfm/objective.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace dfm;

namespace {

double oll_value(const std::vector<double>& probs, std::size_t k, std::vector<int> labels, ClassWeights w) {
    auto t = oll_loss(Tensor64::from({labels.size(), k}, probs), std::span<const int>(labels), w);
    return t.item();
}

double ce_value(const std::vector<double>& probs, std::size_t k, std::vector<int> labels, ClassWeights w) {
    auto t = weighted_ce_loss(Tensor64::from({labels.size(), k}, probs), std::span<const int>(labels), w);
    return t.item();
}

std::vector<double> random_simplex(std::size_t k, std::mt19937_64& rng) {
    std::exponential_distribution<double> e(1.0);
    std::vector<double> p(k);
    double s = 0.0;
    for (auto& v : p) s += (v = e(rng));
    for (auto& v : p) v /= s;
    return p;
}

}  // namespace

TEST(Ratings, IndexMapping) {
    EXPECT_EQ(rating_to_index(1.0), 1);
    EXPECT_EQ(rating_to_index(4.0), 7);
    EXPECT_EQ(rating_to_index(2.5), 4);
    for (double r : kRatings) EXPECT_EQ(index_to_rating(rating_to_index(r)), r);
    for (int j = 1; j <= 7; ++j) EXPECT_EQ(rating_to_index(index_to_rating(j)), j);
    EXPECT_THROW(rating_to_index(2.25), DataError);
    EXPECT_THROW(rating_to_index(0.5), DataError);
    EXPECT_THROW(rating_to_index(4.5), DataError);
    EXPECT_THROW(index_to_rating(0), DataError);
    EXPECT_THROW(index_to_rating(8), DataError);
}

TEST(Ratings, RoundToRating) {
    EXPECT_EQ(round_to_rating(2.74), 2.5);
    EXPECT_EQ(round_to_rating(5.2), 4.0);
    EXPECT_EQ(round_to_rating(2.75), 3.0);
    EXPECT_EQ(round_to_rating(-3.0), 1.0);
    EXPECT_EQ(round_to_rating(1.24), 1.0);
    EXPECT_EQ(round_to_rating(1.25), 1.5);
    EXPECT_EQ(round_to_rating(3.9), 4.0);
    EXPECT_THROW(round_to_rating(NAN), NumericError);
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(-1, 6);
    for (int i = 0; i < 1000; ++i) {
        double x = u(rng), r = round_to_rating(x);
        EXPECT_TRUE(is_rating(r));
        double clamped = std::clamp(x, 1.0, 4.0);
        for (double other : kRatings) EXPECT_LE(std::abs(clamped - r), std::abs(clamped - other) + 1e-12);
    }
}

TEST(ClassWeights, Examples) {
    std::vector<int> equal;
    for (int j = 1; j <= 7; ++j)
        for (int n = 0; n < 10; ++n) equal.push_back(j);
    for (double w : class_weights(equal)) EXPECT_NEAR(w, 1.0, 1e-12);

    std::vector<int> two(10, 1);
    two.insert(two.end(), 5, 2);
    auto w = class_weights(two);
    EXPECT_NEAR(w[0], 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(w[1], 4.0 / 3.0, 1e-12);
    for (int j = 2; j < 7; ++j) EXPECT_NEAR(w[j], 4.0 / 3.0, 1e-12);
    EXPECT_THROW(class_weights(std::vector<int>{}), UsageError);
}

TEST(ClassWeights, MeanOneAndDuplicationInvariant) {
    std::mt19937_64 rng(2);
    std::uniform_int_distribution<int> cls(1, 7);
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<int> labels(1 + rng() % 40);
        for (auto& y : labels) y = cls(rng);
        auto w = class_weights(labels);
        std::vector<bool> present(7, false);
        for (int y : labels) present[y - 1] = true;
        double s = 0.0, mx = 0.0;
        int n = 0;
        for (int j = 0; j < 7; ++j) {
            EXPECT_GT(w[j], 0.0);
            if (present[j]) {
                s += w[j];
                ++n;
                mx = std::max(mx, w[j]);
            }
        }
        EXPECT_NEAR(s / n, 1.0, 1e-12);
        for (int j = 0; j < 7; ++j)
            if (!present[j]) EXPECT_EQ(w[j], mx);
        auto doubled = labels;
        doubled.insert(doubled.end(), labels.begin(), labels.end());
        auto w2 = class_weights(doubled);
        for (int j = 0; j < 7; ++j) EXPECT_NEAR(w2[j], w[j], 1e-12);
    }
}

TEST(Oll, OneHotCorrectIsZero) {
    for (int y = 1; y <= 7; ++y) {
        std::vector<double> p(7, 0.0);
        p[y - 1] = 1.0;
        EXPECT_EQ(oll_value(p, 7, {y}, ClassWeights(7, 1.0)), 0.0);
    }
}

TEST(Oll, UniformThreeClassExample) {
    double v = oll_value({1.0 / 3, 1.0 / 3, 1.0 / 3}, 3, {1}, ClassWeights(3, 1.0));
    EXPECT_NEAR(v, 3.0 * std::log(1.5), 1e-9);
    EXPECT_NEAR(v, 1.2164, 1e-4);
}

TEST(Oll, WeightsAndBatchMean) {
    // two samples, weights 2 and 0.5
    std::vector<double> p = {0.5, 0.5, 0.0, 0.2, 0.3, 0.5};
    ClassWeights w = {2.0, 0.5, 1.0};
    double a = -std::log(0.5) * 1 * 2.0;
    // second sample true class 2: distances 1, 0, 1
    double b = -(std::log(0.8) * 1 + std::log(0.5) * 1) * 0.5;
    EXPECT_NEAR(oll_value(p, 3, {1, 2}, w), (a + b) / 2.0, 1e-12);
}

TEST(Oll, LogClampAvoidsInfinity) {
    std::vector<double> p = {0.0, 1.0, 0.0};
    double v = oll_value(p, 3, {1}, ClassWeights(3, 1.0));
    EXPECT_NEAR(v, -std::log(kLogClamp), 1e-6);
}

// Same misplaced mass moved to a farther class always costs more.
TEST(Oll, DistanceMonotonicityOverRandomPairs) {
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> mass(0.01, 0.99);
    int checked = 0;
    while (checked < 1000) {
        int y = 1 + int(rng() % 7);
        int j1 = 1 + int(rng() % 7), j2 = 1 + int(rng() % 7);
        int d1 = std::abs(j1 - y), d2 = std::abs(j2 - y);
        if (d1 >= d2) continue;
        double m = mass(rng);
        double w = 0.1 + mass(rng) * 3.0;
        std::vector<double> near(7, 0.0), far(7, 0.0);
        near[y - 1] = far[y - 1] = 1.0 - m;
        near[j1 - 1] += m;
        far[j2 - 1] += m;
        ClassWeights cw(7, w);
        EXPECT_LT(oll_value(near, 7, {y}, cw), oll_value(far, 7, {y}, cw)) << y << " " << j1 << " " << j2;
        ++checked;
    }
}

TEST(Oll, SensitiveToMassAmongWrongClasses) {
    std::vector<double> a = {0.4, 0.3, 0.1, 0.1, 0.05, 0.03, 0.02};
    std::vector<double> b = {0.4, 0.02, 0.1, 0.1, 0.05, 0.03, 0.3};
    ClassWeights w(7, 1.0);
    EXPECT_NE(oll_value(a, 7, {1}, w), oll_value(b, 7, {1}, w));
    EXPECT_NEAR(ce_value(a, 7, {1}, w), ce_value(b, 7, {1}, w), 1e-15);
}

TEST(Ce, Examples) {
    ClassWeights w(7, 1.0);
    std::vector<double> onehot(7, 0.0);
    onehot[3] = 1.0;
    EXPECT_EQ(ce_value(onehot, 7, {4}, w), 0.0);
    EXPECT_NEAR(ce_value(std::vector<double>(7, 1.0 / 7), 7, {2}, w), std::log(7.0), 1e-12);
    EXPECT_NEAR(std::log(7.0), 1.9459, 1e-4);
    std::mt19937_64 rng(4);
    for (int i = 0; i < 100; ++i) {
        auto p = random_simplex(7, rng);
        auto q = p;
        std::shuffle(q.begin() + 1, q.end(), rng);
        EXPECT_NEAR(ce_value(p, 7, {1}, w), ce_value(q, 7, {1}, w), 1e-12);
    }
}

TEST(L1, Examples) {
    ClassWeights w(7, 1.0);
    auto l1 = [&](std::vector<double> pred, std::vector<double> truth) {
        return l1_loss(Tensor64::from({pred.size()}, pred), std::span<const double>(truth), w).item();
    };
    EXPECT_EQ(l1({1.0, 2.5, 4.0}, {1.0, 2.5, 4.0}), 0.0);
    EXPECT_NEAR(l1({2.0}, {3.0}), 1.0, 1e-15);
    // |a - b| symmetric in its arguments (b on the scale both ways)
    EXPECT_NEAR(l1({1.5}, {3.0}), l1({3.0}, {1.5}), 1e-15);
    // batch mean with class weights by true rating
    ClassWeights cw(7, 1.0);
    cw[rating_to_index(3.0) - 1] = 2.0;
    auto v = l1_loss(Tensor64::from({2, 1}, {2.0, 1.0}), std::span<const double>(std::vector<double>{3.0, 1.5}), cw);
    EXPECT_NEAR(v.item(), (2.0 * 1.0 + 0.5) / 2.0, 1e-15);
}

TEST(MultiTask, Total) {
    std::map<Component, double> losses = {
        {Component::Nature, 1.0}, {Component::Questioning, 2.0}, {Component::Explanations, 3.0}};
    EXPECT_EQ(multitask_total(losses), 6.0);
    TaskWeights only = {{Component::Nature, 1.0}, {Component::Questioning, 0.0}, {Component::Explanations, 0.0}};
    EXPECT_EQ(multitask_total(losses, only), 1.0);
    auto doubled = losses;
    for (auto& [c, v] : doubled) v *= 2.0;
    EXPECT_EQ(multitask_total(doubled), 2.0 * multitask_total(losses));
    TaskWeights negative = {{Component::Nature, -1.0}};
    EXPECT_THROW(multitask_total(losses, negative), UsageError);

    std::map<Component, Tensor64> t = {{Component::Nature, Tensor64::scalar(1.0)},
                                       {Component::Questioning, Tensor64::scalar(2.0)},
                                       {Component::Explanations, Tensor64::scalar(3.0)}};
    EXPECT_EQ(multitask_total(t).item(), 6.0);
    EXPECT_EQ(multitask_total(t, only).item(), 1.0);
}

TEST(Oll, GradientThroughSoftmaxPasses) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> n;
    std::vector<double> logits(4 * 7);
    for (auto& v : logits) v = n(rng);
    std::vector<int> labels = {1, 4, 7, 3};
    ClassWeights w = {0.5, 1.0, 1.5, 0.8, 1.2, 1.0, 2.0};
    auto rep = grad_check(
        [&](const std::vector<Tensor64>& in) { return oll_loss(softmax(in[0], 1), std::span<const int>(labels), w); },
        {Tensor64::from({4, 7}, logits)}, 1e-5);
    EXPECT_TRUE(rep.passed) << rep.max_rel_err;
}

TEST(Components, Keys) {
    EXPECT_EQ(component_key(Component::Nature), "nature");
    EXPECT_EQ(parse_component("questioning"), Component::Questioning);
    EXPECT_EQ(parse_component("e"), Component::Explanations);
    EXPECT_THROW(parse_component("bogus"), UsageError);
}
