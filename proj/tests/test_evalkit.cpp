#include <doctest.h>

#include <random>

#include "tal/error.hpp"
#include "tal/evalkit.hpp"
#include "tal/featio.hpp"

using namespace tal;

namespace {

struct Instance {
    std::vector<VideoDetection> dets;
    std::vector<VideoGroundTruth> gts;
};

// Small multi-video instance on a coarse grid so ties in score and tIoU occur.
Instance random_instance(std::mt19937_64& rng)
{
    std::uniform_int_distribution<int> videos(1, 3), ngt(0, 3), ndet(0, 6), pos(0, 19), len(1, 8), label(0, 2),
        score(0, 9);
    Instance out;
    const int V = videos(rng);
    for (int v = 0; v < V; ++v) {
        const std::string id = "v" + std::to_string(v);
        for (int i = ngt(rng); i > 0; --i) {
            const double s = pos(rng);
            out.gts.push_back({id, {s, s + len(rng), label(rng)}});
        }
        for (int i = ndet(rng); i > 0; --i) {
            const double s = pos(rng);
            out.dets.push_back({id, {s, s + len(rng), label(rng), score(rng) / 10.0}});
        }
    }
    return out;
}

}  // namespace

TEST_CASE("perfect and empty detections")
{
    const std::vector<SegmentAnnotation> gts{{0, 10, 0}, {20, 30, 0}, {40, 45, 1}};
    std::vector<DetectionResult> perfect;
    for (const auto& g : gts)
        perfect.push_back({g.start_sec, g.end_sec, g.label, 0.5});
    for (double thr : {0.5, 0.75, 0.95}) {
        CHECK(*average_precision(perfect, gts, 0, thr) == doctest::Approx(1.0));
        CHECK(*average_precision(perfect, gts, 1, thr) == doctest::Approx(1.0));
        CHECK(*average_precision({}, gts, 0, thr) == 0.0);
    }
    CHECK_FALSE(average_precision(perfect, gts, 5, 0.5).has_value());
}

TEST_CASE("three detections against two ground truths")
{
    const std::vector<SegmentAnnotation> gts{{0, 10, 0}, {20, 30, 0}};
    const std::vector<DetectionResult> dets{{0, 10, 0, 0.9}, {40, 50, 0, 0.8}, {20, 30, 0, 0.7}};
    // Precision 1, 1/2, 2/3 at recall 1/2, 1/2, 1.
    const double expected = 0.5 * 1.0 + 0.5 * (2.0 / 3.0);
    CHECK(*average_precision(dets, gts, 0, 0.5) == doctest::Approx(expected).epsilon(1e-12));

    std::vector<VideoDetection> vd;
    std::vector<VideoGroundTruth> vg;
    for (const auto& d : dets) vd.push_back({"a", d});
    for (const auto& g : gts) vg.push_back({"a", g});
    CHECK(*oracle_average_precision(vd, vg, 0, 0.5) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("a duplicate detection counts as a false positive")
{
    const std::vector<SegmentAnnotation> gts{{0, 10, 0}};
    const std::vector<DetectionResult> dets{{0, 10, 0, 0.9}, {0, 10, 0, 0.8}};
    CHECK(*average_precision(dets, gts, 0, 0.5) == doctest::Approx(1.0));
    const std::vector<DetectionResult> flipped{{0, 10, 0, 0.8}, {0, 10, 0, 0.9}};
    CHECK(*average_precision(flipped, gts, 0, 0.5) == doctest::Approx(1.0));
}

TEST_CASE("detections match within their own video only")
{
    const std::vector<VideoGroundTruth> gts{{"a", {0, 10, 0}}};
    const std::vector<VideoDetection> dets{{"b", {0, 10, 0, 0.9}}};
    CHECK(*average_precision(dets, gts, 0, 0.5) == 0.0);
}

TEST_CASE("fast evaluator agrees with the brute-force oracle")
{
    std::mt19937_64 rng(1);
    int compared = 0;
    for (int i = 0; i < 500; ++i) {
        const Instance in = random_instance(rng);
        for (int label = 0; label < 3; ++label)
            for (double thr : {0.3, 0.5, 0.7}) {
                const auto fast = average_precision(in.dets, in.gts, label, thr);
                const auto slow = oracle_average_precision(in.dets, in.gts, label, thr);
                REQUIRE(fast.has_value() == slow.has_value());
                if (fast) {
                    REQUIRE(*fast == doctest::Approx(*slow).epsilon(1e-9));
                    ++compared;
                }
            }
    }
    CHECK(compared > 1000);
}

TEST_CASE("oracle refuses large instances")
{
    std::vector<VideoDetection> dets(kOracleMaxDetections + 1, {"a", {0, 1, 0, 0.5}});
    const std::vector<VideoGroundTruth> gts{{"a", {0, 1, 0}}};
    CHECK_THROWS_AS(oracle_average_precision(dets, gts, 0, 0.5), InputError);
    const std::vector<VideoGroundTruth> many(kOracleMaxGroundTruths + 1, {"a", {0, 1, 0}});
    CHECK_THROWS_AS(oracle_average_precision({}, many, 0, 0.5), InputError);
}

TEST_CASE("ap depends only on the ranking")
{
    std::mt19937_64 rng(2);
    for (int i = 0; i < 200; ++i) {
        Instance in = random_instance(rng);
        for (auto& d : in.dets)
            d.det.score += 0.001 * static_cast<double>(&d - in.dets.data());  // break ties
        auto squashed = in.dets;
        for (auto& d : squashed)
            d.det.score = std::exp(3.0 * d.det.score) - 7.0;
        for (int label = 0; label < 3; ++label) {
            const auto a = average_precision(in.dets, in.gts, label, 0.5);
            const auto b = average_precision(squashed, in.gts, label, 0.5);
            REQUIRE(a.has_value() == b.has_value());
            if (a) REQUIRE(*a == doctest::Approx(*b).epsilon(1e-12));
        }
    }
}

TEST_CASE("ap does not increase with the threshold")
{
    std::mt19937_64 rng(3);
    for (int i = 0; i < 300; ++i) {
        const Instance in = random_instance(rng);
        for (int label = 0; label < 3; ++label) {
            std::optional<double> prev;
            for (double thr = 0.1; thr < 1.0; thr += 0.1) {
                const auto ap = average_precision(in.dets, in.gts, label, thr);
                if (prev && ap)
                    REQUIRE(*ap <= *prev + 1e-12);
                prev = ap;
            }
        }
    }
}

TEST_CASE("mean ap aggregates thresholds and classes")
{
    std::mt19937_64 rng(4);
    for (int i = 0; i < 100; ++i) {
        const Instance in = random_instance(rng);
        if (in.gts.empty()) continue;
        const auto r = mean_ap(in.dets, in.gts);
        REQUIRE(r.per_threshold.size() == 10);
        const auto [lo, hi] = std::minmax_element(r.per_threshold.begin(), r.per_threshold.end());
        REQUIRE(r.average >= *lo - 1e-12);
        REQUIRE(r.average <= *hi + 1e-12);
        for (const auto& [label, ap] : r.per_class)
            REQUIRE(std::any_of(in.gts.begin(), in.gts.end(), [&](const auto& g) { return g.gt.label == label; }));
    }
}

TEST_CASE("classes without ground truth are skipped")
{
    const std::vector<VideoGroundTruth> gts{{"a", {0, 10, 0}}};
    const std::vector<VideoDetection> dets{{"a", {0, 10, 0, 0.9}}, {"a", {20, 30, 4, 0.95}}};
    const auto r = mean_ap(dets, gts);
    CHECK(r.average == doctest::Approx(1.0));
    CHECK(r.per_class.size() == 1);
    CHECK_THROWS_AS(mean_ap(dets, {}), InputError);
}

TEST_CASE("per-video detection cap")
{
    const std::vector<VideoGroundTruth> gts{{"a", {0, 10, 0}}};
    std::vector<VideoDetection> dets;
    for (int i = 0; i < 5; ++i)
        dets.push_back({"a", {50.0 + i, 60.0 + i, 0, 0.9}});
    dets.push_back({"a", {0, 10, 0, 0.1}});
    EvalProtocol p;
    CHECK(mean_ap(dets, gts, p).average > 0.0);
    p.max_detections_per_video = 5;
    CHECK(mean_ap(dets, gts, p).average == 0.0);
}

TEST_CASE("random detections score low")
{
    SynthSpec s;
    s.num_videos = 10;
    s.seed = 5;
    const auto videos = synthesize_dataset(s);
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> label(0, s.foreground_classes() - 1);
    std::vector<VideoDetection> dets;
    std::vector<VideoGroundTruth> gts;
    for (const auto& v : videos) {
        for (const auto& a : v.annotations)
            gts.push_back({v.id, a});
        for (int i = 0; i < 100; ++i) {
            double a = u(rng) * v.duration_sec, b = u(rng) * v.duration_sec;
            if (a > b) std::swap(a, b);
            if (b - a < 0.1) continue;
            dets.push_back({v.id, {a, b, label(rng), u(rng)}});
        }
    }
    CHECK(mean_ap(dets, gts).average < 0.1);
}

TEST_CASE("top-1 accuracy")
{
    const ClassScores a{Eigen::Vector3d(0.7, 0.2, 0.1)};
    const ClassScores b{Eigen::Vector3d(0.1, 0.8, 0.1)};
    CHECK(top1_accuracy({a, b}, {0, 1}) == 1.0);
    CHECK(top1_accuracy({a, b}, {2, 2}) == 0.0);
    CHECK(top1_accuracy({a, b, a, b}, {0, 1, 0, 0}) == 0.75);
    CHECK_THROWS_AS(top1_accuracy({a}, {0, 1}), InputError);
    CHECK_THROWS_AS(top1_accuracy({}, {}), InputError);
}

TEST_CASE("protocol validation")
{
    EvalProtocol p;
    p.tiou_thresholds = {};
    CHECK_THROWS_AS(p.validate(), ConfigError);
    p.tiou_thresholds = {0.5, 1.5};
    CHECK_THROWS_AS(p.validate(), ConfigError);
    p = {};
    p.max_detections_per_video = 0;
    CHECK_THROWS_AS(p.validate(), ConfigError);
}
