#include <doctest.h>

#include <random>

#include "tal/classifier.hpp"
#include "tal/error.hpp"
#include "tal/evalkit.hpp"

using namespace tal;

namespace {

std::vector<VideoRecord> synth(int n, double noise, std::uint64_t seed)
{
    SynthSpec s;
    s.num_videos = n;
    s.noise_sigma = noise;
    s.seed = seed;
    return synthesize_dataset(s);
}

double accuracy(const VideoClassifier& m, const std::vector<VideoRecord>& videos)
{
    std::vector<ClassScores> preds;
    std::vector<int> labels;
    for (const auto& v : videos) {
        preds.push_back(predict_video(m, v));
        labels.push_back(v.video_label());
    }
    return top1_accuracy(preds, labels);
}

}  // namespace

TEST_CASE("softmax is a distribution")
{
    std::mt19937_64 rng(1);
    std::normal_distribution<double> n(0.0, 30.0);
    for (int i = 0; i < 200; ++i) {
        Eigen::VectorXd z(11);
        for (auto& x : z) x = n(rng);
        const auto s = softmax(z);
        REQUIRE(s.probs.sum() == doctest::Approx(1.0).epsilon(1e-12));
        REQUIRE((s.probs.array() >= 0.0).all());
        const auto shifted = softmax(z.array() + 500.0);
        REQUIRE(shifted.probs.isApprox(s.probs, 1e-12));
    }
    const auto u = softmax(Eigen::VectorXd::Constant(4, 3.0));
    for (double p : u.probs)
        CHECK(p == doctest::Approx(0.25));
}

TEST_CASE("foreground renormalization drops background")
{
    ClassScores s{Eigen::Vector3d(0.2, 0.2, 0.6)};
    const auto fg = s.foreground();
    REQUIRE(fg.size() == 2);
    CHECK(fg(0) == doctest::Approx(0.5));
    CHECK(fg(1) == doctest::Approx(0.5));
}

TEST_CASE("untrained classifier is near chance")
{
    const auto videos = synth(200, 0.2, 3);
    const VideoClassifier m(ClassifierConfig{});
    CHECK(accuracy(m, videos) < 0.3);
}

TEST_CASE("noise-free features are classified perfectly")
{
    const auto videos = synth(100, 0.0, 4);
    VideoClassifier m(ClassifierConfig{});
    const auto r = train_classifier(m, videos);
    CHECK(r.loss.back() < r.loss.front());
    CHECK(accuracy(m, videos) == 1.0);
}

TEST_CASE("low-noise features generalize to held-out videos")
{
    const auto videos = synth(250, 0.1, 5);
    const std::vector<VideoRecord> train(videos.begin(), videos.begin() + 200);
    const std::vector<VideoRecord> val(videos.begin() + 200, videos.end());
    VideoClassifier m(ClassifierConfig{});
    train_classifier(m, train);
    CHECK(accuracy(m, val) >= 0.9);
}

TEST_CASE("single-class training warns")
{
    auto videos = synth(30, 0.2, 6);
    const int label = videos.front().video_label();
    std::erase_if(videos, [&](const VideoRecord& v) { return v.video_label() != label; });
    REQUIRE_FALSE(videos.empty());
    std::vector<std::string> lines;
    VideoClassifier m(ClassifierConfig{});
    train_classifier(m, videos, {.log = [&](const std::string& s) { lines.push_back(s); }});
    CHECK(std::any_of(lines.begin(), lines.end(),
                      [](const std::string& s) { return s.find("single class") != std::string::npos; }));
}

TEST_CASE("channel mismatch and bad configs")
{
    ClassifierConfig c;
    c.C_in = 7;
    VideoClassifier m(c);
    const auto videos = synth(2, 0.2, 7);
    CHECK_THROWS_AS(m.predict(videos[0]), ShapeError);
    CHECK_THROWS_AS(train_classifier(m, videos), ShapeError);
    CHECK_THROWS_AS(train_classifier(m, {}), TrainingError);

    ClassifierConfig bad;
    bad.num_classes = 1;
    CHECK_THROWS_AS(VideoClassifier{bad}, ConfigError);
}
