#include <doctest.h>

#include <fstream>
#include <sstream>

#include "tal/error.hpp"
#include "tal/pipeline.hpp"

using namespace tal;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path fresh_dir(const std::string& name)
{
    const fs::path dir = fs::temp_directory_path() / name;
    fs::remove_all(dir);
    return dir;
}

PipelineConfig tiny_config(const fs::path& workdir)
{
    PipelineConfig c = PipelineConfig::desk();
    c.synth.num_videos = 10;
    c.val_videos = 3;
    c.synth.min_duration_sec = 10.0;
    c.synth.max_duration_sec = 20.0;
    c.bmn.L = 16;
    c.bmn.C_hidden = 8;
    c.bmn.K = 4;
    c.bmn.pem_channels = 4;
    c.bmn.map_channels = 4;
    c.bmn.epochs = 1;
    c.tcanet.C_hidden = 8;
    c.tcanet.tbr_hidden = 8;
    c.tcanet.region_samples = 3;
    c.tcanet.epochs = 1;
    c.tcanet.train_proposals = 8;
    c.classifier.epochs = 20;
    c.candidates = 20;
    c.workdir = workdir;
    c.propagate();
    return c;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

template <class F>
void expect_config_error(F&& f, const std::string& section, const std::string& field)
{
    try {
        f();
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(e.section() == section);
        CHECK(e.field() == field);
    }
}

}  // namespace

TEST_CASE("config json round-trip")
{
    PipelineConfig c = PipelineConfig::desk();
    c.seed = 7;
    c.synth.noise_sigma = 0.15;
    c.bmn.epochs = 3;
    c.tcanet.lr_policy = "constant";
    c.softnms.alpha = 0.3;
    c.eval.tiou_thresholds = {0.3, 0.5};
    c.workdir = "elsewhere";
    c.propagate();
    const auto j = to_json(c);
    const PipelineConfig back = config_from_json(json::parse(j.dump()));
    CHECK(to_json(back).dump() == j.dump());
    CHECK(back.bmn.seed == 7);
    CHECK(back.classifier.C_in == c.synth.channels);
    CHECK(back.postproc.softnms.alpha == 0.3);
}

TEST_CASE("desk and reference profiles")
{
    const PipelineConfig desk = PipelineConfig::desk();
    CHECK(desk.bmn.batch_size == 8);
    const PipelineConfig ref;
    CHECK(ref.bmn.batch_size == 128);
    CHECK(ref.bmn.optimizer.lr == 0.001);
    CHECK(ref.tcanet.batch_size == 64);
}

TEST_CASE("strict config parsing names the offending field")
{
    expect_config_error([] { config_from_json(json{{"bmn", {{"bogus", 1}}}}); }, "bmn", "bogus");
    expect_config_error([] { config_from_json(json{{"synth", {{"num_videos", "many"}}}}); }, "synth", "num_videos");
    expect_config_error([] { config_from_json(json{{"nonsense", 1}}); }, "config", "nonsense");
    expect_config_error([] { config_from_json(json{{"synth", {{"val_videos", 0}}}}); }, "synth", "val_videos");
}

TEST_CASE("overrides")
{
    json doc = json::parse(to_json(PipelineConfig::desk()).dump());
    apply_override(doc, "bmn.epochs=4");
    apply_override(doc, "tcanet.lr_policy=constant");
    apply_override(doc, "paths.workdir=\"/tmp/x\"");
    apply_override(doc, "seed=9");
    const PipelineConfig c = config_from_json(doc);
    CHECK(c.bmn.epochs == 4);
    CHECK(c.tcanet.lr_policy == "constant");
    CHECK(c.workdir == fs::path("/tmp/x"));
    CHECK(c.seed == 9);
    CHECK(c.tcanet.seed == 9);

    expect_config_error([&] { apply_override(doc, "bmn.bogus=1"); }, "bmn", "bogus");
    CHECK_THROWS_AS(apply_override(doc, "no-equals-sign"), ConfigError);

    const fs::path dir = fresh_dir("tal_cfg_file");
    fs::create_directories(dir);
    {
        std::ofstream out(dir / "c.json");
        out << R"({"bmn": {"epochs": 2}, "synth": {"noise_sigma": 0.1}})";
    }
    const PipelineConfig f = load_config(dir / "c.json", {"bmn.epochs=5"});
    CHECK(f.bmn.epochs == 5);
    CHECK(f.synth.noise_sigma == 0.1);
    CHECK(f.bmn.batch_size == 8);
    {
        std::ofstream out(dir / "bad.json");
        out << R"({"classifier": {"lr": "fast"}})";
    }
    expect_config_error([&] { load_config(dir / "bad.json", {}); }, "classifier", "lr");
}

TEST_CASE("missing artifacts name the stage to run")
{
    const PipelineConfig c = tiny_config(fresh_dir("tal_missing"));
    std::ostringstream log;
    try {
        cmd_train(c, "bmn", log);
        FAIL("expected MissingArtifactError");
    } catch (const MissingArtifactError& e) {
        CHECK(e.stage() == "synth");
        CHECK(std::string(e.what()).find("synth") != std::string::npos);
    }
    cmd_synth(c, log);
    try {
        cmd_infer(c, "val", log);
        FAIL("expected MissingArtifactError");
    } catch (const MissingArtifactError& e) {
        CHECK(e.stage().rfind("train", 0) == 0);
    }
    CHECK_THROWS_AS(cmd_eval(c, "val", log), MissingArtifactError);
    CHECK_THROWS_AS(cmd_train(c, "tcanet", log), MissingArtifactError);
    CHECK_THROWS_AS(cmd_train(c, "nothing", log), std::exception);
}

TEST_CASE("dump formats round-trip")
{
    const fs::path dir = fresh_dir("tal_dumps");
    fs::create_directories(dir);
    const std::vector<std::pair<std::string, std::vector<Proposal>>> props{
        {"v1", {{0.1, 0.4, 0.9, Stage::TBR3}, {0.5, 0.6, 0.25, Stage::BMN}}}, {"v2", {}}};
    write_proposals(dir / "p.jsonl", props);
    const auto back = read_proposals(dir / "p.jsonl");
    // One line per proposal, so a video without proposals leaves no trace.
    REQUIRE(back.size() == 1);
    CHECK(back[0].first == "v1");
    REQUIRE(back[0].second.size() == 2);
    CHECK(back[0].second[0].start == 0.1);
    CHECK(back[0].second[0].stage == Stage::TBR3);
    CHECK(back[0].second[1].score == 0.25);

    const std::vector<std::pair<std::string, std::vector<DetectionResult>>> dets{{"v1", {{1.5, 3.0, 2, 0.75}}}};
    const auto vd = detections_from_json(json::parse(detections_json(dets).dump()));
    REQUIRE(vd.size() == 1);
    CHECK(vd[0].video_id == "v1");
    CHECK(vd[0].det.start == 1.5);
    CHECK(vd[0].det.label == 2);
    CHECK(vd[0].det.score == 0.75);

    {
        std::ofstream out(dir / "h.bin", std::ios::binary);
        out << "a";
    }
    CHECK(fnv1a_file(dir / "h.bin") == "af63dc4c8601ec8c");
}

TEST_CASE("tiny end-to-end run is reproducible")
{
    const fs::path dir = fresh_dir("tal_e2e");
    const PipelineConfig c = tiny_config(dir);
    std::ostringstream log;
    cmd_synth(c, log);
    cmd_train(c, "bmn", log);
    cmd_train(c, "classifier", log);
    cmd_infer(c, "val", log);
    CHECK(log.str().find("BMN-only") != std::string::npos);
    const Workdir wd{dir};
    CHECK(fs::exists(wd.detections("val", "bmn")));
    CHECK_FALSE(fs::exists(wd.detections("val", "bmn_tcanet")));

    cmd_train(c, "tcanet", log);
    cmd_infer(c, "val", log);
    const auto first = cmd_eval(c, "val", log);
    CHECK(first.contains("bmn"));
    CHECK(first.contains("bmn_tcanet"));
    const std::string report = slurp(wd.report("val", "bmn_tcanet"));
    cmd_eval(c, "val", log);
    CHECK(slurp(wd.report("val", "bmn_tcanet")) == report);

    const auto r = json::parse(report);
    CHECK(r.at("per_threshold").size() == 10);
    CHECK(r.at("average").get<double>() >= 0.0);
    CHECK(r.at("average").get<double>() <= 1.0);

    // Checkpoints carry their configs and reload.
    CHECK(fs::exists(wd.checkpoint("bmn")));
    CHECK(fs::exists(wd.loss_log("tcanet")));

    // A second repro in a fresh directory produces the same reports.
    PipelineConfig c2 = tiny_config(fresh_dir("tal_e2e_b"));
    std::ostringstream log2;
    const ReproSummary s2 = cmd_repro(c2, log2);
    PipelineConfig c3 = tiny_config(fresh_dir("tal_e2e_c"));
    std::ostringstream log3;
    const ReproSummary s3 = cmd_repro(c3, log3);
    CHECK(slurp(Workdir{c2.workdir}.report("val", "bmn_tcanet")) ==
          slurp(Workdir{c3.workdir}.report("val", "bmn_tcanet")));
    CHECK(s2.bmn.average == s3.bmn.average);
    CHECK(fs::exists(Workdir{c2.workdir}.manifest()));
    CHECK(log2.str().find("BMN + TCANet") != std::string::npos);
}

TEST_CASE("reference profile logs the reference hyperparameters")
{
    PipelineConfig c;  // struct defaults, not the desk profile
    c.synth.num_videos = 6;
    c.val_videos = 2;
    c.synth.min_duration_sec = 10.0;
    c.synth.max_duration_sec = 12.0;
    c.bmn.L = 16;
    c.bmn.epochs = 1;
    c.workdir = fresh_dir("tal_ref");
    c.propagate();
    std::ostringstream log;
    cmd_synth(c, log);
    cmd_train(c, "bmn", log);
    CHECK(log.str().find("batch=128") != std::string::npos);
    CHECK(log.str().find("lr=0.001") != std::string::npos);
}

TEST_CASE("shipped configs parse")
{
    const fs::path dir = fs::path(TAL_SOURCE_DIR) / "configs";
    const PipelineConfig desk = load_config(dir / "default.json", {});
    CHECK(to_json(desk).dump() == to_json(PipelineConfig::desk()).dump());
    const PipelineConfig ref = load_config(dir / "reference.json", {});
    CHECK(ref.bmn.batch_size == 128);
}
