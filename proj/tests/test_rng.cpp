#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "dermfuse/rng.hpp"

using dermfuse::SeededRng;

TEST_CASE("identical seed yields identical stream") {
    SeededRng a(7), b(7);
    for (int i = 0; i < 1000; ++i) REQUIRE(a.next_u64() == b.next_u64());
    SeededRng c(7), d(7);
    for (int i = 0; i < 1000; ++i) {
        REQUIRE(c.uniform01() == d.uniform01());
        REQUIRE(c.normal(0.0, 1.0) == d.normal(0.0, 1.0));
    }
}

TEST_CASE("different seeds diverge") {
    SeededRng a(1), b(2);
    int same = 0;
    for (int i = 0; i < 64; ++i)
        if (a.next_u64() == b.next_u64()) ++same;
    REQUIRE(same == 0);
}

TEST_CASE("uniform01 stays in [0,1)") {
    SeededRng rng(42);
    for (int i = 0; i < 100000; ++i) {
        const double v = rng.uniform01();
        REQUIRE(v >= 0.0);
        REQUIRE(v < 1.0);
    }
}

TEST_CASE("uniform(a,b) respects bounds and validates them") {
    SeededRng rng(3);
    for (int i = 0; i < 10000; ++i) {
        const double v = rng.uniform(-2.5, 1.5);
        REQUIRE(v >= -2.5);
        REQUIRE(v < 1.5);
    }
    REQUIRE_THROWS_AS(rng.uniform(1.0, 1.0), dermfuse::ConfigError);
    REQUIRE_THROWS_AS(rng.uniform(2.0, -1.0), dermfuse::ConfigError);
}

TEST_CASE("uniform sample moments approach the analytic values") {
    SeededRng rng(11);
    const int n = 200000;
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double v = rng.uniform01();
        sum += v;
        sumsq += v * v;
    }
    const double mean = sum / n;
    const double var = sumsq / n - mean * mean;
    REQUIRE(std::fabs(mean - 0.5) < 0.005);        // E = 1/2
    REQUIRE(std::fabs(var - 1.0 / 12.0) < 0.005);  // Var = 1/12
}

TEST_CASE("normal sample moments approach mean and stddev") {
    SeededRng rng(13);
    const int n = 200000;
    double sum = 0.0, sumsq = 0.0;
    for (int i = 0; i < n; ++i) {
        const double v = rng.normal(3.0, 2.0);
        sum += v;
        sumsq += v * v;
    }
    const double mean = sum / n;
    const double var = sumsq / n - mean * mean;
    REQUIRE(std::fabs(mean - 3.0) < 0.02);
    REQUIRE(std::fabs(std::sqrt(var) - 2.0) < 0.02);
}

TEST_CASE("bernoulli hit rate approaches p") {
    SeededRng rng(17);
    const int n = 100000;
    int hits = 0;
    for (int i = 0; i < n; ++i)
        if (rng.bernoulli(0.3)) ++hits;
    REQUIRE(std::fabs(double(hits) / n - 0.3) < 0.01);
    SeededRng r2(5);
    for (int i = 0; i < 100; ++i) {
        REQUIRE_FALSE(r2.bernoulli(0.0));
        REQUIRE(r2.bernoulli(1.0));
    }
}

TEST_CASE("next_below is bounded and unbiased enough") {
    SeededRng rng(19);
    std::vector<int> counts(10, 0);
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const uint64_t v = rng.next_below(10);
        REQUIRE(v < 10);
        ++counts[size_t(v)];
    }
    for (int c : counts) REQUIRE(std::fabs(double(c) / n - 0.1) < 0.01);
}

TEST_CASE("shuffle produces a permutation, deterministically") {
    std::vector<int> v(50);
    std::iota(v.begin(), v.end(), 0);
    std::vector<int> w = v;
    SeededRng a(23), b(23);
    a.shuffle(v);
    b.shuffle(w);
    REQUIRE(v == w);
    std::vector<int> sorted = v;
    std::sort(sorted.begin(), sorted.end());
    std::vector<int> expect(50);
    std::iota(expect.begin(), expect.end(), 0);
    REQUIRE(sorted == expect);
}

TEST_CASE("state round-trip resumes the exact stream") {
    SeededRng rng(29);
    for (int i = 0; i < 37; ++i) rng.next_u64();
    rng.normal(0.0, 1.0);  // leaves a cached Box-Muller variate pending
    const SeededRng::State snap = rng.state();

    std::vector<double> ahead;
    for (int i = 0; i < 20; ++i) ahead.push_back(rng.normal(0.0, 1.0));

    SeededRng other(999);
    other.set_state(snap);
    for (int i = 0; i < 20; ++i) REQUIRE(other.normal(0.0, 1.0) == ahead[size_t(i)]);
}
