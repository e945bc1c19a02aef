#include <doctest.h>

#include <random>

#include "tal/error.hpp"
#include "tal/postproc.hpp"

using namespace tal;

namespace {

std::vector<Proposal> random_proposals(std::mt19937_64& rng, int n)
{
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Proposal> out;
    while (static_cast<int>(out.size()) < n) {
        double a = u(rng), b = u(rng);
        if (a > b) std::swap(a, b);
        if (b - a < 1e-3) continue;
        out.push_back({a, b, u(rng), Stage::BMN});
    }
    return out;
}

}  // namespace

TEST_CASE("threshold grows with proposal width")
{
    const SoftNMSParams p;
    CHECK(p.threshold(0.0) == doctest::Approx(0.25));
    CHECK(p.threshold(1.0) == doctest::Approx(0.9));
    CHECK(p.threshold(0.4) == doctest::Approx(0.51));
}

TEST_CASE("soft-nms worked examples")
{
    SoftNMSParams p;
    SUBCASE("single proposal is unchanged")
    {
        const auto out = soft_nms({{0.1, 0.5, 0.7, Stage::TBR3}}, p);
        REQUIRE(out.size() == 1);
        CHECK(out[0].score == 0.7);
        CHECK(out[0].stage == Stage::TBR3);
    }
    SUBCASE("disjoint proposals keep their scores")
    {
        const auto out = soft_nms({{0.0, 0.2, 0.9, Stage::BMN}, {0.5, 0.7, 0.8, Stage::BMN}}, p);
        CHECK(out[0].score == 0.9);
        CHECK(out[1].score == 0.8);
    }
    SUBCASE("overlap below the width threshold is untouched")
    {
        // Width 0.4 gives threshold 0.51, tIoU is 1/3.
        const auto out = soft_nms({{0.0, 0.4, 0.9, Stage::BMN}, {0.2, 0.6, 0.8, Stage::BMN}}, p);
        CHECK(out[1].score == doctest::Approx(0.8));
    }
    SUBCASE("overlap above the threshold decays")
    {
        // Width 0.2 gives threshold 0.38; [0.0,0.2] vs [0.05,0.2] has tIoU 0.75.
        const auto out = soft_nms({{0.0, 0.2, 0.9, Stage::BMN}, {0.05, 0.2, 0.8, Stage::BMN}}, p);
        CHECK(out[1].score == doctest::Approx(0.8 * std::exp(-0.75 * 0.75 / 0.4)));
    }
    SUBCASE("tIoU 0.6 against threshold 0.51")
    {
        // [0.0,0.4] vs [0.0,0.24] overlap with tIoU 0.6.
        const auto out = soft_nms({{0.0, 0.4, 0.9, Stage::BMN}, {0.0, 0.24, 0.8, Stage::BMN}}, p);
        CHECK(out[1].score == doctest::Approx(0.8 * std::exp(-0.36 / 0.4)));
        CHECK(std::abs(out[1].score - 0.325) <= 1e-3);
    }
    CHECK(soft_nms({}, p).empty());
}

TEST_CASE("soft-nms properties on random inputs")
{
    std::mt19937_64 rng(2);
    SoftNMSParams p;
    p.max_out = 30;
    for (int trial = 0; trial < 200; ++trial) {
        const auto in = random_proposals(rng, 1 + trial % 60);
        const auto out = soft_nms(in, p);
        REQUIRE(out.size() == std::min<std::size_t>(in.size(), 30));
        const auto top = *std::max_element(in.begin(), in.end(),
                                           [](const Proposal& a, const Proposal& b) { return a.score < b.score; });
        REQUIRE(out[0].start == top.start);
        REQUIRE(out[0].score == top.score);
        for (std::size_t i = 0; i < out.size(); ++i) {
            if (i > 0) REQUIRE(out[i].score <= out[i - 1].score);
            // Every output is an input with a score no larger than before.
            const auto src = std::find_if(in.begin(), in.end(), [&](const Proposal& q) {
                return q.start == out[i].start && q.end == out[i].end;
            });
            REQUIRE(src != in.end());
            REQUIRE(out[i].score <= src->score);
        }
    }
}

TEST_CASE("huge alpha makes soft-nms a sort")
{
    std::mt19937_64 rng(3);
    SoftNMSParams p;
    p.alpha = 1e9;
    const auto in = random_proposals(rng, 40);
    const auto out = soft_nms(in, p);
    auto sorted = in;
    std::stable_sort(sorted.begin(), sorted.end(), [](const Proposal& a, const Proposal& b) { return a.score > b.score; });
    REQUIRE(out.size() == sorted.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        CHECK(out[i].start == sorted[i].start);
        CHECK(out[i].score == doctest::Approx(sorted[i].score).epsilon(1e-8));
    }
}

TEST_CASE("soft-nms validation")
{
    SoftNMSParams p;
    p.low = 0.95;
    CHECK_THROWS_AS(soft_nms({}, p), ConfigError);
    CHECK_THROWS_AS(soft_nms({{0.5, 0.5, 1.0, Stage::BMN}}, SoftNMSParams{}), InputError);
}

TEST_CASE("score fusion")
{
    // Foreground probabilities 0.5, 0.3, 0.2 after dropping background.
    const ClassScores s{Eigen::Vector4d(0.25, 0.15, 0.1, 0.5)};
    const std::vector<Proposal> props{{0.1, 0.3, 0.8, Stage::TBR3}};
    const auto d = fuse_scores(props, s, 2, 50.0);
    REQUIRE(d.size() == 2);
    CHECK(d[0].label == 0);
    CHECK(d[0].score == doctest::Approx(0.4));
    CHECK(d[1].label == 1);
    CHECK(d[1].score == doctest::Approx(0.24));
    CHECK(d[0].start == doctest::Approx(5.0));
    CHECK(d[0].end == doctest::Approx(15.0));

    CHECK(fuse_scores(props, s, 10, 50.0).size() == 3);

    const ClassScores certain{Eigen::Vector3d(1.0, 0.0, 0.0)};
    CHECK(fuse_scores(props, certain, 1, 1.0)[0].score == doctest::Approx(0.8));
    const std::vector<Proposal> dead{{0.1, 0.3, 0.0, Stage::TBR3}};
    for (const auto& x : fuse_scores(dead, s, 3, 1.0))
        CHECK(x.score == 0.0);

    CHECK(fuse_scores({}, s, 2, 1.0).empty());
    CHECK_THROWS_AS(fuse_scores(props, s, 0, 1.0), InputError);
}

TEST_CASE("detection assembly caps and orders output")
{
    std::mt19937_64 rng(4);
    PostprocConfig c;
    c.max_detections = 25;
    const ClassScores s{Eigen::Vector4d(0.25, 0.15, 0.1, 0.5)};
    const auto d = assemble_detections(random_proposals(rng, 50), s, 30.0, c);
    REQUIRE(d.size() == 25);
    for (std::size_t i = 1; i < d.size(); ++i)
        CHECK(d[i].score <= d[i - 1].score);
    for (const auto& x : d) {
        CHECK(x.start >= 0.0);
        CHECK(x.end <= 30.0);
    }
    PostprocConfig bad;
    bad.top_classes = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
}
