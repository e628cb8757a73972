#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracle.hpp"
#include "r2d/numeric.hpp"

using namespace r2d;

TEST(Sigmoid, Examples) {
    EXPECT_EQ(sigmoid(0.0), 0.5);
    EXPECT_NEAR(sigmoid(100.0), 1.0, 1e-12);
    EXPECT_NEAR(sigmoid(1.2) + sigmoid(-1.2), 1.0, 1e-12);
    EXPECT_NEAR(sigmoid(2.0), 0.880797, 5e-7);
    EXPECT_NEAR(sigmoid(-4.0), 0.017986, 5e-7);
}

TEST(Sigmoid, MatchesOracleAndStaysFiniteAtExtremes) {
    for (double x = -40.0; x <= 40.0; x += 0.37) {
        EXPECT_NEAR(sigmoid(x), static_cast<double>(oracle::sigmoid(x)), 1e-15);
    }
    EXPECT_GE(sigmoid(-800.0), 0.0);
    EXPECT_EQ(sigmoid(800.0), 1.0);
}

TEST(Softmax, Examples) {
    for (double t : {0.1, 1.0, 7.0}) {
        const Vec p = softmax(std::vector<double>{4.0, 4.0, 4.0}, t);
        for (double v : p) {
            EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
        }
    }
    const Vec p = softmax(std::vector<double>{std::log(2.0), 0.0});
    EXPECT_NEAR(p[0], 2.0 / 3.0, 1e-15);
    EXPECT_NEAR(p[1], 1.0 / 3.0, 1e-15);
    const Vec hot = softmax(std::vector<double>{3.0, 1.0}, 1e6);
    EXPECT_NEAR(hot[0], 0.5, 1e-6);
    EXPECT_NEAR(hot[1], 0.5, 1e-6);
}

TEST(Softmax, Errors) {
    EXPECT_THROW(softmax(std::vector<double>{}), Error);
    EXPECT_THROW(softmax(std::vector<double>{1.0}, 0.0), Error);
    EXPECT_THROW(softmax(std::vector<double>{1.0}, -1.0), Error);
}

TEST(Softmax, PropertyValidDistributionAndOracle) {
    std::mt19937_64 gen(11);
    std::normal_distribution<double> nd(0.0, 30.0);
    std::uniform_real_distribution<double> tdist(0.05, 50.0);
    std::uniform_int_distribution<int> len(1, 24);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> z(static_cast<std::size_t>(len(gen)));
        for (double& v : z) {
            v = nd(gen);
        }
        const double t = tdist(gen);
        const Vec p = softmax(z, t);
        EXPECT_TRUE(is_prob_vector(p));
        const auto ref = oracle::softmax(z, t);
        for (std::size_t i = 0; i < z.size(); ++i) {
            EXPECT_NEAR(p[i], static_cast<double>(ref[i]), 1e-13);
        }
    }
}

TEST(Softmax, InfiniteTemperatureLimit) {
    std::mt19937_64 gen(3);
    std::normal_distribution<double> nd(0.0, 10.0);
    std::vector<double> z(17);
    for (double& v : z) {
        v = nd(gen);
    }
    for (double v : softmax(z, 1e8)) {
        EXPECT_LT(std::abs(v - 1.0 / 17.0), 1e-6);
    }
}

TEST(EntropyBits, Examples) {
    EXPECT_EQ(entropy_bits(std::vector<double>{0.0, 1.0, 0.0}), 0.0);
    EXPECT_NEAR(entropy_bits(Vec(16, 1.0 / 16.0)), 4.0, 1e-12);
    EXPECT_NEAR(entropy_bits(std::vector<double>{0.5, 0.25, 0.25}), 1.5, 1e-15);
}

TEST(EntropyBits, PermutationInvariantAndUniformIsMaximal) {
    std::mt19937_64 gen(5);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int trial = 0; trial < 200; ++trial) {
        Vec p(9);
        double s = 0.0;
        for (double& v : p) {
            v = u(gen);
            s += v;
        }
        for (double& v : p) {
            v /= s;
        }
        const double h = entropy_bits(p);
        Vec q = p;
        std::shuffle(q.begin(), q.end(), gen);
        EXPECT_NEAR(entropy_bits(q), h, 1e-12);
        EXPECT_LE(h, std::log2(9.0) + 1e-12);
        std::vector<long double> pl(p.begin(), p.end());
        EXPECT_NEAR(h, static_cast<double>(oracle::entropy_bits(pl)), 1e-12);
    }
}

TEST(KlDivergence, Examples) {
    EXPECT_EQ(kl_divergence(std::vector<double>{0.3, 0.7}, std::vector<double>{0.3, 0.7}), 0.0);
    EXPECT_NEAR(kl_divergence(std::vector<double>{1.0, 0.0}, std::vector<double>{0.5, 0.5}), std::log(2.0), 1e-15);
    const double expected = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);
    EXPECT_NEAR(kl_divergence(std::vector<double>{0.5, 0.5}, std::vector<double>{0.25, 0.75}), expected, 1e-15);
    EXPECT_NEAR(expected, 0.143841, 5e-7);
}

TEST(KlDivergence, Errors) {
    EXPECT_THROW(kl_divergence(std::vector<double>{0.5, 0.5}, std::vector<double>{1.0, 0.0}), Error);
    EXPECT_THROW(kl_divergence(std::vector<double>{1.0}, std::vector<double>{0.5, 0.5}), Error);
}

TEST(KlDivergence, PropertyNonnegativeAndZeroOnlyAtIdentity) {
    std::mt19937_64 gen(17);
    std::normal_distribution<double> nd(0.0, 2.0);
    for (int trial = 0; trial < 500; ++trial) {
        std::vector<double> a(6);
        std::vector<double> b(6);
        for (std::size_t i = 0; i < a.size(); ++i) {
            a[i] = nd(gen);
            b[i] = nd(gen);
        }
        const Vec p = softmax(a);
        const Vec q = softmax(b);
        const double d = kl_divergence(p, q);
        EXPECT_GE(d, 0.0);
        EXPECT_LT(kl_divergence(p, p), 1e-12);
        double gap = 0.0;
        for (std::size_t i = 0; i < p.size(); ++i) {
            gap = std::max(gap, std::abs(p[i] - q[i]));
        }
        if (gap >= 1e-12) {
            EXPECT_GT(d, 0.0);
        }
        const auto pl = oracle::softmax(a);
        const auto ql = oracle::softmax(b);
        EXPECT_NEAR(d, static_cast<double>(oracle::kl(pl, ql)), 1e-13);
    }
}

TEST(L1Distance, Examples) {
    EXPECT_EQ(l1_distance(std::vector<double>{1.0, -2.0}, std::vector<double>{1.0, -2.0}), 0.0);
    EXPECT_EQ(l1_distance(std::vector<double>{1.0, 2.0}, std::vector<double>{0.0, 0.0}), 3.0);
    EXPECT_THROW(l1_distance(std::vector<double>{1.0}, std::vector<double>{}), Error);
}

TEST(L1Distance, RandomPairMatchesBruteForce) {
    std::mt19937_64 gen(23);
    std::normal_distribution<double> nd(0.0, 5.0);
    std::vector<double> a(64);
    std::vector<double> b(64);
    long double ref = 0.0L;
    for (std::size_t i = 0; i < 64; ++i) {
        a[i] = nd(gen);
        b[i] = nd(gen);
        ref += std::abs(static_cast<long double>(a[i]) - b[i]);
    }
    EXPECT_NEAR(l1_distance(a, b), static_cast<double>(ref), 1e-12);
}

TEST(PairwiseSum, MatchesLongDoubleSum) {
    std::mt19937_64 gen(29);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (std::size_t n : {0U, 1U, 7U, 8U, 9U, 100U, 1001U}) {
        std::vector<double> v(n);
        long double ref = 0.0L;
        for (double& x : v) {
            x = u(gen);
            ref += x;
        }
        EXPECT_NEAR(pairwise_sum(v), static_cast<double>(ref), 1e-12);
    }
}

TEST(IsProbVector, Basic) {
    EXPECT_TRUE(is_prob_vector(std::vector<double>{0.25, 0.75}));
    EXPECT_FALSE(is_prob_vector(std::vector<double>{0.5, 0.6}));
    EXPECT_FALSE(is_prob_vector(std::vector<double>{-0.1, 1.1}));
    EXPECT_FALSE(is_prob_vector(std::vector<double>{}));
}
