#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "tss/grad_check.hpp"
#include "tss/matching.hpp"
#include "tss/metrics.hpp"

using namespace tss;

TEST(FrameSimilarities, SelfSimilarityIsOne) {
    Tensor q = Tensor::from({0.3, -1.2, 0.5}, {3});
    std::vector<double> frames;
    for (int t = 0; t < 4; ++t) frames.insert(frames.end(), q.value().begin(), q.value().end());
    Tensor s = frame_similarities(q, Tensor::from(frames, {4, 3}));
    for (double v : s.value()) EXPECT_NEAR(v, 1.0, 1e-12);
}

TEST(FrameSimilarities, OrthogonalIsZero) {
    Tensor q = Tensor::from({1, 0}, {2});
    Tensor v = Tensor::from({0, 5}, {1, 2});
    EXPECT_NEAR(frame_similarities(q, v).value()[0], 0.0, 1e-12);
}

TEST(FrameSimilarities, DirectEvaluation) {
    Tensor q = Tensor::from({1, 0}, {2});
    Tensor v = Tensor::from({1, 1}, {1, 2});
    EXPECT_NEAR(frame_similarities(q, v).value()[0], 1.0 / std::sqrt(2.0), 1e-12);
    EXPECT_NEAR(frame_similarities(q, v).value()[0], 0.70711, 1e-5);
}

TEST(FrameSimilarities, ZeroNormGuarded) {
    Tensor q = Tensor::zeros({3});
    Tensor v = Tensor::from({1, 0, 0}, {1, 3});
    EXPECT_THROW(frame_similarities(q, v), NumericError);
    EXPECT_THROW(frame_similarities(Tensor::from({1, 0, 0}, {3}), Tensor::zeros({2, 3})), NumericError);
}

TEST(AggregateSimilarity, LambdaZeroIsMean) {
    Tensor s = Tensor::from({0.2, 0.8}, {2});
    EXPECT_DOUBLE_EQ(aggregate_similarity(s, 0.0).item(), 0.5);
    Tensor s3 = Tensor::from({0.1, 0.4, 0.7}, {3});
    EXPECT_NEAR(aggregate_similarity(s3, 0.0).item(), (0.1 + 0.4 + 0.7) / 3.0, 1e-15);
}

TEST(AggregateSimilarity, ConstantInputsPassThrough) {
    for (double lambda : {0.0, 1.0, 4.0, 16.0}) {
        Tensor s = Tensor::full({4}, 0.37);
        EXPECT_NEAR(aggregate_similarity(s, lambda).item(), 0.37, 1e-15);
    }
}

TEST(AggregateSimilarity, DirectEvaluation) {
    // Oracle: w = softmax(4 * [0.2, 0.8]); s = w . [0.2, 0.8].
    double e0 = std::exp(4 * 0.2), e1 = std::exp(4 * 0.8);
    double expect = (e0 * 0.2 + e1 * 0.8) / (e0 + e1);
    Tensor s = Tensor::from({0.2, 0.8}, {2});
    EXPECT_NEAR(aggregate_similarity(s, 4.0).item(), expect, 1e-12);
    EXPECT_NEAR(aggregate_similarity(s, 4.0).item(), 0.7501, 1e-4);
    EXPECT_THROW(aggregate_similarity(s, -1.0), ArgumentError);
}

// The softmax-weighted mean is NOT globally monotone: raising a coordinate
// far below the aggregate can lower the score (its weight grows faster than
// its value; e.g. s=[0,1], lambda=16, raising s_0 to 0.2). Monotonicity does
// hold at lambda=0, when bumping the maximum coordinate, and whenever
// lambda * spread <= 1.
TEST(AggregateSimilarity, MonotoneInRestrictedRegimes) {
    CounterRng rng(100, 0);
    uint64_t c = 0;
    for (double lambda : {0.0, 1.0, 4.0, 16.0})
        for (int rep = 0; rep < 20; ++rep) {
            std::vector<double> base(5);
            for (auto& v : base) v = 2.0 * rng.uniform(c++) - 1.0;
            double s0 = aggregate_similarity(Tensor::from(base, {5}), lambda).item();
            // Bumping the argmax coordinate never decreases the aggregate.
            size_t jmax = 0;
            for (size_t j = 1; j < base.size(); ++j)
                if (base[j] > base[jmax]) jmax = j;
            auto bumped = base;
            bumped[jmax] += 0.2;
            double s1 = aggregate_similarity(Tensor::from(bumped, {5}), lambda).item();
            EXPECT_GE(s1, s0 - 1e-12);
            if (lambda == 0.0) {  // mean: monotone in every coordinate
                auto any = base;
                any[rng.below(c++, 5)] += 0.2;
                EXPECT_GE(aggregate_similarity(Tensor::from(any, {5}), 0.0).item(), s0 - 1e-12);
            }
        }
    // Small-spread regime: lambda * (max - min) <= 1 keeps every partial
    // derivative nonnegative.
    for (int rep = 0; rep < 20; ++rep) {
        std::vector<double> base(4);
        for (auto& v : base) v = 0.1 * rng.uniform(c++);
        double s0 = aggregate_similarity(Tensor::from(base, {4}), 4.0).item();
        size_t j = rng.below(c++, 4);
        auto bumped = base;
        bumped[j] += 0.01;
        EXPECT_GE(aggregate_similarity(Tensor::from(bumped, {4}), 4.0).item(), s0 - 1e-12);
    }
}

TEST(AggregateSimilarity, NonMonotoneCounterexample) {
    // Documented deviation: raising a low coordinate can decrease the score.
    double before = aggregate_similarity(Tensor::from({0.0, 1.0}, {2}), 16.0).item();
    double after = aggregate_similarity(Tensor::from({0.2, 1.0}, {2}), 16.0).item();
    EXPECT_LT(after, before);
}

TEST(AggregateSimilarity, LargeLambdaApproachesMax) {
    Tensor s = Tensor::from({0.1, 0.65, 0.3, 0.55}, {4});  // gap 0.1 between top-2
    EXPECT_LT(std::abs(aggregate_similarity(s, 64.0).item() - 0.65), 1e-2);
}

TEST(SimilarityMatrix, SinglePairMatchesDirectScore) {
    CounterRng rng(101, 0);
    Tensor q = Tensor::randn({1, 6}, rng.derive(0));
    Tensor v = Tensor::randn({1, 3, 6}, rng.derive(1));
    Tensor m = similarity_matrix(q, v, 4.0);
    Tensor qs = reshape(q, {6});
    Tensor vs = reshape(v, {3, 6});
    double direct = aggregate_similarity(frame_similarities(qs, vs), 4.0).item();
    EXPECT_EQ(m.shape(), (Shape{1, 1}));
    EXPECT_NEAR(m.item(), direct, 1e-12);
}

TEST(SimilarityMatrix, DuplicatedVideoDuplicatesColumn) {
    CounterRng rng(102, 0);
    Tensor q = Tensor::randn({3, 6}, rng.derive(0));
    Tensor v1 = Tensor::randn({3, 6}, rng.derive(1));
    Tensor v2 = Tensor::randn({3, 6}, rng.derive(2));
    std::vector<double> stacked;
    for (const Tensor* t : {&v1, &v2, &v2})
        stacked.insert(stacked.end(), t->value().begin(), t->value().end());
    Tensor m = similarity_matrix(q, Tensor::from(stacked, {3, 3, 6}), 4.0);
    for (int64_t i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(m.at({i, 1}), m.at({i, 2}));
}

TEST(SimilarityMatrix, MatchesEntrywiseLoopOracle) {
    CounterRng rng(103, 0);
    const int64_t b = 4, t = 3, c = 6;
    Tensor q = Tensor::randn({b, c}, rng.derive(0));
    Tensor v = Tensor::randn({b, t, c}, rng.derive(1));
    Tensor m = similarity_matrix(q, v, 4.0);
    for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < b; ++j) {
            std::vector<double> qi(q.value().begin() + i * c, q.value().begin() + (i + 1) * c);
            std::vector<double> vj(v.value().begin() + j * t * c, v.value().begin() + (j + 1) * t * c);
            double expect =
                aggregate_similarity(frame_similarities(Tensor::from(qi, {c}), Tensor::from(vj, {t, c})), 4.0)
                    .item();
            EXPECT_NEAR(m.at({i, j}), expect, 1e-12);
        }
}

TEST(SymmetricCeLoss, SingleElementBatchIsZero) {
    LossState state = LossState::init(1.0);
    Tensor sim = Tensor::from({0.42}, {1, 1});
    EXPECT_DOUBLE_EQ(symmetric_ce_loss(sim, state).item(), 0.0);
}

TEST(SymmetricCeLoss, TwoByTwoIdentityClosedForm) {
    LossState state = LossState::init(1.0);
    Tensor sim = Tensor::from({1, 0, 0, 1}, {2, 2});
    double loss = symmetric_ce_loss(sim, state).item();
    EXPECT_NEAR(loss, std::log(1.0 + std::exp(-1.0)), 1e-12);
    EXPECT_NEAR(loss, 0.31326, 1e-5);
}

TEST(SymmetricCeLoss, ShiftInvariance) {
    CounterRng rng(104, 0);
    LossState state = LossState::init();
    Tensor sim = Tensor::randn({4, 4}, rng);
    Tensor shifted = sim.clone(false);
    for (auto& v : shifted.mutable_value()) v += 0.37;
    EXPECT_NEAR(symmetric_ce_loss(sim, state).item(), symmetric_ce_loss(shifted, state).item(), 1e-12);
}

TEST(SymmetricCeLoss, PermutationConsistency) {
    CounterRng rng(105, 0);
    LossState state = LossState::init();
    const int64_t b = 5;
    Tensor sim = Tensor::randn({b, b}, rng);
    std::vector<int64_t> perm = {3, 0, 4, 1, 2};
    Tensor permuted = Tensor::zeros({b, b});
    for (int64_t i = 0; i < b; ++i)
        for (int64_t j = 0; j < b; ++j)
            permuted.mutable_value()[i * b + j] = sim.at({perm[i], perm[j]});
    EXPECT_NEAR(symmetric_ce_loss(sim, state).item(), symmetric_ce_loss(permuted, state).item(), 1e-12);
}

TEST(SymmetricCeLoss, NonSquareRejected) {
    EXPECT_THROW(symmetric_ce_loss(Tensor::zeros({2, 3}), LossState::init()), ArgumentError);
}

TEST(SymmetricCeLoss, GradCheckIncludingTau) {
    CounterRng rng(106, 0);
    Tensor sim = Tensor::randn({3, 3}, rng, 0.5);
    Tensor log_tau = Tensor::from({std::log(1.0 / 0.07)}, {1});
    auto fn = [](const std::vector<Tensor>& in) {
        LossState st;
        st.log_tau = in[1];
        return symmetric_ce_loss(in[0], st);
    };
    auto report = grad_check("symmetric_ce_loss", fn, {sim, log_tau}, 1e-5);
    EXPECT_TRUE(report.passed) << report.max_rel_error;
}

TEST(LossState, TauClampedToRange) {
    LossState s;
    s.log_tau = Tensor::from({10.0}, {1});
    EXPECT_DOUBLE_EQ(s.tau_value(), 100.0);
    s.log_tau = Tensor::from({-3.0}, {1});
    EXPECT_DOUBLE_EQ(s.tau_value(), 1.0);
    EXPECT_NEAR(LossState::init().tau_value(), 1.0 / 0.07, 1e-9);
}

TEST(InvertedSoftmax, SingleQueryUnchanged) {
    Tensor sim = Tensor::from({0.3, 0.9, 0.5}, {1, 3});
    Tensor out = inverted_softmax(sim, 20.0);
    EXPECT_EQ(out.value(), sim.value());
    EXPECT_THROW(inverted_softmax(sim, 0.0), ArgumentError);
}

TEST(InvertedSoftmax, DiagonalDominantKeepsArgmax) {
    std::vector<double> vals(9, 0.1);
    for (int i = 0; i < 3; ++i) vals[static_cast<size_t>(i * 3 + i)] = 1.0;  // 0.9*I + 0.1
    Tensor out = inverted_softmax(Tensor::from(vals, {3, 3}), 20.0);
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j < 3; ++j)
            if (j != i) EXPECT_GT(out.at({i, i}), out.at({i, j}));
}

TEST(InvertedSoftmax, HubColumnDemoted) {
    // Column 2 hubs: it outranks every query's true candidate in the raw scores.
    Tensor sim = Tensor::from({0.50, 0.20, 0.90,
                               0.20, 0.50, 0.95,
                               0.10, 0.30, 0.85},
                              {3, 3});
    EXPECT_EQ(rank_of_truth({0.50, 0.20, 0.90}, 0), 2);  // raw: hub beats the pair
    Tensor out = inverted_softmax(sim, 20.0);
    std::vector<double> row0 = {out.at({0, 0}), out.at({0, 1}), out.at({0, 2})};
    EXPECT_EQ(rank_of_truth(row0, 0), 1);  // hub suppressed, pair restored
    // The hub column's score dropped in rank for a non-paired query.
    EXPECT_LT(out.at({0, 2}), out.at({0, 0}));
}

TEST(InvertedSoftmax, IdenticalColumnProfilesPreserveRanking) {
    // Every column has the same profile across queries: no hub, arg-ranking kept.
    Tensor sim = Tensor::from({0.9, 0.5, 0.1,
                               0.8, 0.4, 0.0,
                               0.7, 0.3, -0.1},
                              {3, 3});
    Tensor out = inverted_softmax(sim, 20.0);
    for (int64_t i = 0; i < 3; ++i) {
        EXPECT_GT(out.at({i, 0}), out.at({i, 1}));
        EXPECT_GT(out.at({i, 1}), out.at({i, 2}));
    }
}
