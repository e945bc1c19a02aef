#include <doctest.h>

#include <random>

#include "tal/domain.hpp"
#include "tal/error.hpp"

using namespace tal;

TEST_CASE("tiou worked examples")
{
    CHECK(tiou({0.2, 0.6}, {0.2, 0.6}) == doctest::Approx(1.0));
    CHECK(tiou({0.0, 0.4}, {0.6, 1.0}) == 0.0);
    CHECK(tiou({0.0, 0.4}, {0.2, 0.6}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(tiou({0.0, 0.5}, {0.5, 1.0}) == 0.0);  // touching
}

TEST_CASE("tiou rejects degenerate intervals")
{
    CHECK_THROWS_AS(tiou({0.5, 0.5}, {0.0, 1.0}), InputError);
    CHECK_THROWS_AS(tiou({0.0, 1.0}, {0.7, 0.2}), InputError);
}

TEST_CASE("tiou symmetry and bounds on random pairs")
{
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 10000; ++i) {
        double a0 = u(rng), a1 = u(rng), b0 = u(rng), b1 = u(rng);
        if (a0 > a1) std::swap(a0, a1);
        if (b0 > b1) std::swap(b0, b1);
        if (a1 - a0 < 1e-9 || b1 - b0 < 1e-9)
            continue;
        const Interval a{a0, a1}, b{b0, b1};
        const double ab = tiou(a, b);
        REQUIRE(ab == tiou(b, a));
        REQUIRE(ab >= 0.0);
        REQUIRE(ab <= 1.0);
        REQUIRE(tiou(a, a) == 1.0);
        if (a1 <= b0 || b1 <= a0)
            REQUIRE(ab == 0.0);
    }
}

TEST_CASE("stage names round-trip")
{
    for (Stage s : {Stage::BMN, Stage::TBR1, Stage::TBR2, Stage::TBR3})
        CHECK(stage_from_string(to_string(s)) == s);
    CHECK_THROWS_AS(stage_from_string("TBR4"), InputError);
}

TEST_CASE("bm grid small cases")
{
    SUBCASE("T=4, D=2")
    {
        const auto e = bm_grid_entries({4, 2});
        CHECK(e.size() == 8);
        CHECK(std::count_if(e.begin(), e.end(), [](const GridEntry& g) { return g.valid; }) == 7);
        CHECK(bm_valid_count({4, 2}) == 7);
    }
    SUBCASE("T=1, D=1")
    {
        const auto e = bm_grid_entries({1, 1});
        REQUIRE(e.size() == 1);
        CHECK(e[0].valid);
        CHECK(e[0].start == 0.0);
        CHECK(e[0].end == 1.0);
    }
    SUBCASE("T=200, D=200")
    {
        const auto e = bm_grid_entries({200, 200});
        CHECK(std::count_if(e.begin(), e.end(), [](const GridEntry& g) { return g.valid; }) == 20100);
        CHECK(bm_valid_count({200, 200}) == 20100);
    }
}

TEST_CASE("bm grid entry layout and spans")
{
    const auto e = bm_grid_entries({10, 4});
    for (std::size_t i = 0; i < e.size(); ++i) {
        const int d = static_cast<int>(i / 10) + 1;
        const int t = static_cast<int>(i % 10);
        CHECK(e[i].d == d);
        CHECK(e[i].t == t);
        CHECK(e[i].valid == (t + d <= 10));
        if (e[i].valid) {
            CHECK(e[i].start == doctest::Approx(t / 10.0));
            CHECK(e[i].end == doctest::Approx((t + d) / 10.0));
        }
    }
}

TEST_CASE("bm grid valid count matches closed form exhaustively")
{
    for (int T = 1; T <= 64; ++T)
        for (int D = 1; D <= T; ++D) {
            const auto e = bm_grid_entries({T, D});
            std::int64_t valid = 0;
            for (const auto& g : e) {
                if (!g.valid)
                    continue;
                ++valid;
                REQUIRE(g.start >= 0.0);
                REQUIRE(g.start < g.end);
                REQUIRE(g.end <= 1.0);
            }
            REQUIRE(valid == static_cast<std::int64_t>(D) * (T + 1) - static_cast<std::int64_t>(D) * (D + 1) / 2);
            REQUIRE(valid == bm_valid_count({T, D}));
        }
}

TEST_CASE("bm grid spec validation")
{
    CHECK_THROWS(bm_grid_entries({0, 0}));
    CHECK_THROWS(bm_grid_entries({4, 5}));
    CHECK_THROWS(bm_grid_entries({4, 0}));
}
