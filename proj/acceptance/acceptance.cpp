// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include <CLI11.hpp>

#include "support.hpp"
#include "tal/domain.hpp"
#include "tal/error.hpp"
#include "tal/evalkit.hpp"
#include "tal/featio.hpp"
#include "tal/pipeline.hpp"
#include "tal/postproc.hpp"

using namespace tal;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0)
{
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

struct Outcome {
    bool pass = true;
    std::ostringstream detail;

    void require(bool ok, const std::string& what)
    {
        if (!ok) {
            pass = false;
            detail << "[failed: " << what << "] ";
        }
    }
};

std::string read_bytes(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

// ---------------------------------------------------------------------------
// 1-6, 10: fast property checks

Outcome oracle_equivalence()
{
    Outcome o;
    const auto t0 = Clock::now();
    std::mt19937_64 rng(2024);
    std::uniform_int_distribution<int> nvid(1, 3), pos(0, 29), len(1, 10), label(0, 2), score(0, 19);
    int instances = 0, compared = 0;
    double worst = 0.0;
    while (instances < 600) {
        std::vector<VideoDetection> dets;
        std::vector<VideoGroundTruth> gts;
        const int V = nvid(rng);
        const int G = std::uniform_int_distribution<int>(1, static_cast<int>(kOracleMaxGroundTruths))(rng);
        const int N = std::uniform_int_distribution<int>(0, static_cast<int>(kOracleMaxDetections))(rng);
        for (int i = 0; i < G; ++i) {
            const double s = pos(rng);
            gts.push_back({"v" + std::to_string(i % V), {s, s + len(rng), label(rng)}});
        }
        for (int i = 0; i < N; ++i) {
            const double s = pos(rng);
            dets.push_back({"v" + std::to_string(i % V), {s, s + len(rng), label(rng), score(rng) / 20.0}});
        }
        ++instances;
        for (int c = 0; c < 3; ++c)
            for (double thr : {0.3, 0.5, 0.7, 0.95}) {
                const auto fast = average_precision(dets, gts, c, thr);
                const auto slow = oracle_average_precision(dets, gts, c, thr);
                if (fast.has_value() != slow.has_value()) {
                    o.require(false, "class presence disagrees");
                    continue;
                }
                if (fast) {
                    worst = std::max(worst, std::abs(*fast - *slow));
                    ++compared;
                }
            }
    }
    const double t = seconds_since(t0);
    o.require(worst <= 1e-9, "max |fast - oracle| <= 1e-9");
    o.require(t < 30.0, "runtime < 30 s");
    o.detail << instances << " instances, " << compared << " APs compared, max diff " << worst << ", " << t << " s";
    return o;
}

Outcome geometry_exactness()
{
    Outcome o;
    long grids = 0;
    for (int T = 1; T <= 64; ++T)
        for (int D = 1; D <= T; ++D) {
            const auto e = bm_grid_entries({T, D});
            const long valid = std::count_if(e.begin(), e.end(), [](const GridEntry& g) { return g.valid; });
            o.require(valid == static_cast<long>(D) * (T + 1) - static_cast<long>(D) * (D + 1) / 2,
                      "valid count T=" + std::to_string(T) + " D=" + std::to_string(D));
            ++grids;
        }
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    int pairs = 0;
    while (pairs < 10000) {
        double a0 = u(rng), a1 = u(rng), b0 = u(rng), b1 = u(rng);
        if (a0 > a1) std::swap(a0, a1);
        if (b0 > b1) std::swap(b0, b1);
        if (a1 - a0 < 1e-9 || b1 - b0 < 1e-9)
            continue;
        const double ab = tiou({a0, a1}, {b0, b1});
        o.require(ab == tiou({b0, b1}, {a0, a1}) && ab >= 0.0 && ab <= 1.0, "tiou symmetry and bounds");
        ++pairs;
    }
    o.detail << grids << " grids, " << pairs << " tiou pairs";
    return o;
}

Outcome clip_schedule_step()
{
    Outcome o;
    const ClipSchedule s = clip_schedule(240, 8, 30.0);
    o.require(std::abs(s.step_sec - 0.2667) <= 1e-4, "step 0.2667 +- 1e-4");
    o.require(s.num_clips == 30, "30 clips for 240 frames");
    o.detail << "step " << s.step_sec << " s, " << s.num_clips << " clips";
    return o;
}

Outcome softnms_contracts()
{
    Outcome o;
    SoftNMSParams p;
    const auto single = soft_nms({{0.1, 0.5, 0.7, Stage::BMN}}, p);
    o.require(single.size() == 1 && single[0].score == 0.7 && single[0].start == 0.1, "single-proposal identity");

    const auto kept = soft_nms({{0.0, 0.4, 0.9, Stage::BMN}, {0.2, 0.6, 0.8, Stage::BMN}}, p);
    o.require(kept[1].score == 0.8, "tiou 1/3 below threshold 0.51 leaves 0.8");
    const auto decayed = soft_nms({{0.0, 0.4, 0.9, Stage::BMN}, {0.0, 0.24, 0.8, Stage::BMN}}, p);
    o.require(std::abs(decayed[1].score - 0.325) <= 1e-3, "tiou 0.6 decays 0.8 to 0.325");
    o.require(std::abs(p.threshold(0.4) - 0.51) <= 1e-12, "threshold 0.51 at width 0.4");

    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    SoftNMSParams wide = p;
    wide.alpha = 1e9;
    double identity_gap = 0.0;
    for (int trial = 0; trial < 300; ++trial) {
        std::vector<Proposal> in;
        const int n = 1 + trial % 50;
        while (static_cast<int>(in.size()) < n) {
            double a = u(rng), b = u(rng);
            if (a > b) std::swap(a, b);
            if (b - a > 1e-3) in.push_back({a, b, u(rng), Stage::BMN});
        }
        const auto out = soft_nms(in, p);
        const auto top = std::max_element(in.begin(), in.end(),
                                          [](const Proposal& a, const Proposal& b) { return a.score < b.score; });
        o.require(out[0].start == top->start && out[0].end == top->end && out[0].score == top->score,
                  "argmax preserved");
        for (const auto& r : out) {
            const auto src = std::find_if(in.begin(), in.end(),
                                          [&](const Proposal& q) { return q.start == r.start && q.end == r.end; });
            o.require(src != in.end() && r.score <= src->score, "scores never increase");
        }
        auto sorted = in;
        std::stable_sort(sorted.begin(), sorted.end(),
                         [](const Proposal& a, const Proposal& b) { return a.score > b.score; });
        const auto same = soft_nms(in, wide);
        for (std::size_t i = 0; i < same.size(); ++i)
            identity_gap = std::max(identity_gap, std::abs(same[i].score - sorted[i].score));
    }
    o.require(identity_gap <= 1e-6, "alpha=1e9 within 1e-6 of identity");
    o.detail << "decayed score " << decayed[1].score << ", alpha=1e9 max gap " << identity_gap;
    return o;
}

Outcome fusion_exactness()
{
    Outcome o;
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    long checked = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        Eigen::VectorXd logits(6);
        for (auto& x : logits) x = 4.0 * u(rng) - 2.0;
        const ClassScores cs = softmax(logits);
        const Eigen::VectorXd fg = cs.foreground();
        double a = u(rng), b = u(rng);
        if (a > b) std::swap(a, b);
        const Proposal p{a, b + 1e-3 > 1.0 ? 1.0 : b + 1e-3, u(rng), Stage::TBR3};
        for (const auto& d : fuse_scores({p}, cs, 5, 60.0)) {
            o.require(d.score == p.score * fg(d.label), "product of proposal and class score");
            ++checked;
        }
    }
    const Proposal p{0.1, 0.3, 0.8, Stage::TBR3};
    const ClassScores one{Eigen::Vector3d(1.0, 0.0, 0.0)};
    o.require(fuse_scores({p}, one, 1, 1.0)[0].score == 0.8, "unit class score is an identity");
    const ClassScores mixed{Eigen::Vector3d(0.3, 0.2, 0.5)};
    for (const auto& d : fuse_scores({{0.1, 0.3, 0.0, Stage::TBR3}}, mixed, 2, 1.0))
        o.require(d.score == 0.0, "zero proposal score annihilates");
    o.require(fuse_scores({{0.1, 0.3, 1.0, Stage::TBR3}}, mixed, 1, 1.0)[0].score == mixed.foreground()(0),
              "unit proposal score is an identity");
    o.detail << checked << " fused scores checked exactly";
    return o;
}

Outcome gradient_checks()
{
    Outcome o;
    const auto t0 = Clock::now();
    SynthSpec s;
    s.num_videos = 3;
    s.seed = 31;
    const auto videos = synthesize_dataset(s);
    std::mt19937_64 rng(17);
    double worst_bmn = 0.0, worst_tbr = 0.0;

    const BMNConfig bc;  // reference architecture
    for (int point = 0; point < 3; ++point) {
        BMNConfig pc = bc;
        pc.seed = 200 + point;
        BMN m(pc);
        const VideoRecord& v = videos[point];
        const Eigen::MatrixXd x = resize_temporal(v.features, bc.L);
        const BMNTargets tg = bmn_targets(v.annotations, bc, v.duration_sec);
        auto loss = [&](bool backprop) {
            BMN::Cache cache;
            BMN::OutputGrad g;
            const BMNOutput out = m.forward(x, backprop ? &cache : nullptr);
            const BMNLoss l = bmn_loss(out, tg, bc, backprop ? &g : nullptr);
            if (backprop)
                m.backward(g, cache);
            return l.total;
        };
        worst_bmn = std::max(worst_bmn, testing::check_gradients(m.parameters(), loss, 12, rng).worst_rel);
    }

    for (int point = 0; point < 3; ++point) {
        TCANetConfig tc;
        tc.seed = 300 + point;
        TCANet m(tc);
        const VideoRecord& v = videos[point];
        std::uniform_real_distribution<double> jitter(-0.3, 0.3);
        std::vector<Proposal> props;
        for (const auto& a : v.annotations) {
            const double st = a.start_sec / v.duration_sec, en = a.end_sec / v.duration_sec, l = en - st;
            for (int k = 0; k < 4; ++k)
                props.push_back({std::clamp(st + jitter(rng) * l, 0.0, 0.98),
                                 std::clamp(en + jitter(rng) * l, 0.02, 1.0), 0.9, Stage::BMN});
        }
        std::erase_if(props, [](const Proposal& p) { return p.end - p.start < 0.01; });
        auto loss = [&](bool backprop) { return tbr_stage1_loss(m, v, props, backprop); };
        worst_tbr = std::max(worst_tbr, testing::check_gradients(m.parameters(), loss, 12, rng).worst_rel);
    }
    const double t = seconds_since(t0);
    o.require(worst_bmn <= 1e-4, "BMN loss within 1e-4");
    o.require(worst_tbr <= 1e-4, "TBR stage-1 loss within 1e-4");
    o.require(t < 120.0, "runtime < 2 min");
    o.detail << "worst relative error BMN " << worst_bmn << ", TBR1 " << worst_tbr << ", " << t << " s";
    return o;
}

Outcome classifier_accuracy()
{
    Outcome o;
    struct Accuracy {
        double train = 0.0;
        double val = 0.0;
    };
    auto run = [](double noise) {
        SynthSpec s;
        s.noise_sigma = noise;
        s.seed = 41;
        const auto all = synthesize_dataset(s);
        const std::vector<VideoRecord> train(all.begin(), all.begin() + 200), val(all.begin() + 200, all.end());
        ClassifierConfig c;
        c.C_in = s.channels;
        c.num_classes = s.num_classes;
        VideoClassifier m(c);
        train_classifier(m, train);
        auto top1 = [&](const std::vector<VideoRecord>& videos) {
            std::vector<ClassScores> preds;
            std::vector<int> labels;
            for (const auto& v : videos) {
                preds.push_back(predict_video(m, v));
                labels.push_back(v.video_label());
            }
            return top1_accuracy(preds, labels);
        };
        return Accuracy{top1(train), top1(val)};
    };
    const Accuracy noisy = run(0.1), clean = run(0.0);
    o.require(noisy.val >= 0.9, "held-out top-1 >= 0.9 at noise 0.1");
    o.require(clean.train == 1.0, "training top-1 == 1 at noise 0");
    o.detail << "held-out top-1 " << noisy.val << " at noise 0.1; training top-1 " << clean.train
             << " at noise 0 (held-out " << clean.val << ", informational)";
    return o;
}

// ---------------------------------------------------------------------------
// 7-9, 11, 12: trained pipelines on the default configuration

struct Detector {
    std::function<std::vector<Proposal>(const VideoRecord&)> proposals;
    const VideoClassifier* classifier;
};

MeanAPResult evaluate(const Detector& d, const std::vector<VideoRecord>& videos, const PipelineConfig& cfg)
{
    std::vector<VideoDetection> dets;
    std::vector<VideoGroundTruth> gts;
    for (const auto& v : videos) {
        for (const auto& x : assemble_detections(d.proposals(v), predict_video(*d.classifier, v), v.duration_sec,
                                                 cfg.postproc))
            dets.push_back({v.id, x});
        for (const auto& a : v.annotations)
            gts.push_back({v.id, a});
    }
    return mean_ap(dets, gts, cfg.eval);
}

struct SeedRun {
    std::uint64_t seed = 0;
    double repro_sec = 0.0;
    ReproSummary summary;
    double untrained = 0.0;        // mAP@0.5, untrained BMN and classifier
    double untrained_bmn = 0.0;    // mAP@0.5, untrained BMN, trained classifier
    std::vector<double> members;   // average mAP of each ensemble member
    double ensemble = 0.0;
    bool tem_invariant = true;
    long tem_scores = 0;
};

SeedRun run_seed(std::uint64_t seed, const fs::path& root, bool extras, std::ostream& log)
{
    SeedRun r;
    r.seed = seed;
    PipelineConfig cfg = PipelineConfig::desk();
    cfg.seed = seed;
    cfg.workdir = root / ("seed_" + std::to_string(seed));
    cfg.propagate();

    const auto t0 = Clock::now();
    r.summary = cmd_repro(cfg, log);
    r.repro_sec = seconds_since(t0);
    if (!extras)
        return r;

    const Workdir wd{cfg.workdir};
    const auto train = load_split(wd, "train");
    const auto val = load_split(wd, "val");
    const VideoClassifier trained_cls = load_classifier(wd);

    const BMN fresh(cfg.bmn);
    const VideoClassifier fresh_cls(cfg.classifier);
    auto fresh_props = [&](const VideoRecord& v) { return infer_proposals(fresh, v, cfg.candidates); };
    r.untrained = evaluate({fresh_props, &fresh_cls}, val, cfg).per_threshold.front();
    r.untrained_bmn = evaluate({fresh_props, &trained_cls}, val, cfg).per_threshold.front();

    // Ensemble of the pipeline's BMN and two more trained with other seeds.
    std::vector<BMN> members;
    members.push_back(load_bmn(wd));
    for (std::uint64_t offset : {1000u, 2000u}) {
        BMNConfig bc = cfg.bmn;
        bc.seed = seed + offset;
        BMN m(bc);
        train_bmn(m, train);
        members.push_back(std::move(m));
    }
    for (const auto& m : members) {
        auto props = [&](const VideoRecord& v) { return infer_proposals(m, v, cfg.candidates); };
        r.members.push_back(evaluate({props, &trained_cls}, val, cfg).average);
    }
    auto ens_props = [&](const VideoRecord& v) {
        std::vector<BMConfidenceMap> maps;
        for (const auto& m : members)
            maps.push_back(predict_map(m, v));
        return proposals_from_map(ensemble_maps(maps), cfg.candidates);
    };
    r.ensemble = evaluate({ens_props, &trained_cls}, val, cfg).average;

    // Scores must not depend on the boundary-probability heads.
    BMN scrambled = load_bmn(wd);
    const BMN reference = load_bmn(wd);
    nn::Rng rng(seed + 77);
    for (auto* p : scrambled.tem_parameters())
        nn::init_uniform(*p, rng, 5.0);
    for (const auto& v : val) {
        const auto a = infer_proposals(reference, v, cfg.candidates);
        const auto b = infer_proposals(scrambled, v, cfg.candidates);
        if (a.size() != b.size()) {
            r.tem_invariant = false;
            continue;
        }
        for (std::size_t i = 0; i < a.size(); ++i) {
            r.tem_invariant = r.tem_invariant && a[i].score == b[i].score && a[i].start == b[i].start &&
                              a[i].end == b[i].end;
            ++r.tem_scores;
        }
    }
    return r;
}

// Writes every line to stdout and, when open, to the report file.
struct Report {
    std::ofstream file;

    void line(const std::string& s)
    {
        std::cout << s << std::endl;
        if (file.is_open())
            file << s << '\n' << std::flush;
    }
};

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Acceptance criteria for the localization pipeline"};
    int seeds = 5;
    std::string workdir = (fs::temp_directory_path() / "tal_acceptance").string();
    bool verbose = false;
    std::string report_path;
    app.add_option("--seeds", seeds, "Seeds for the end-to-end criteria")->check(CLI::Range(1, 50));
    app.add_option("--workdir", workdir, "Scratch directory for pipeline runs");
    app.add_option("--report", report_path, "Also write the result lines to this file");
    app.add_flag("--verbose", verbose, "Stream pipeline logs to stderr");
    CLI11_PARSE(app, argc, argv);

    const fs::path root(workdir);
    fs::remove_all(root);
    fs::create_directories(root);
    std::ostringstream sink;
    std::ostream& log = verbose ? std::cerr : static_cast<std::ostream&>(sink);

    Report out;
    if (!report_path.empty())
        out.file.open(report_path);
    int failures = 0;
    auto record = [&](int id, const std::string& name, const Outcome& o) {
        out.line(std::string(o.pass ? "PASS" : "FAIL") + " " + std::to_string(id) + " " + name + ": " +
                 o.detail.str());
        failures += o.pass ? 0 : 1;
    };

    record(1, "oracle equivalence", oracle_equivalence());
    record(2, "geometry exactness", geometry_exactness());
    record(3, "clip schedule", clip_schedule_step());
    record(4, "soft-nms contracts", softnms_contracts());
    record(5, "fusion exactness", fusion_exactness());
    record(6, "gradient checks", gradient_checks());

    std::vector<SeedRun> runs;
    for (int s = 1; s <= seeds; ++s) {
        runs.push_back(run_seed(static_cast<std::uint64_t>(s), root, true, log));
        const SeedRun& r = runs.back();
        std::ostringstream line;
        line << "  seed " << s << ": repro " << r.repro_sec << " s, mAP@0.5 BMN "
                  << r.summary.bmn.per_threshold.front() << ", average BMN " << r.summary.bmn.average
                  << " / BMN+TCANet " << r.summary.bmn_tcanet.average << ", untrained " << r.untrained
                  << " (untrained BMN with trained classifier " << r.untrained_bmn << "), ensemble "
                  << r.ensemble << " vs members";
        for (double m : r.members)
            line << " " << m;
        out.line(line.str());
    }
    const double n = static_cast<double>(runs.size());
    const int majority = std::max(1, static_cast<int>(std::ceil(0.8 * n)));

    {
        Outcome o;
        double trained = 0.0, untrained = 0.0, slowest = 0.0;
        for (const auto& r : runs) {
            trained += r.summary.bmn.per_threshold.front() / n;
            untrained += r.untrained / n;
            slowest = std::max(slowest, r.repro_sec);
        }
        o.require(trained >= 0.5, "trained mAP@0.5 >= 0.5");
        o.require(untrained < 0.1, "untrained mAP@0.5 < 0.1");
        o.require(slowest <= 900.0, "repro <= 15 min");
        o.detail << "mean mAP@0.5 trained " << trained << ", untrained " << untrained << "; slowest repro "
                 << slowest << " s";
        record(7, "end-to-end detection", o);
    }
    {
        Outcome o;
        int wins = 0;
        for (const auto& r : runs)
            wins += r.summary.bmn_tcanet.average >= r.summary.bmn.average ? 1 : 0;
        o.require(wins >= majority, "refinement helps in enough seeds");
        o.detail << "BMN+TCANet >= BMN in " << wins << "/" << runs.size() << " seeds";
        record(8, "refinement direction", o);
    }
    {
        Outcome o;
        int wins = 0;
        for (const auto& r : runs) {
            const double mean = std::accumulate(r.members.begin(), r.members.end(), 0.0) /
                                static_cast<double>(r.members.size());
            wins += r.ensemble >= mean ? 1 : 0;
        }
        o.require(wins >= majority, "ensemble helps in enough seeds");
        o.detail << "ensemble >= member mean in " << wins << "/" << runs.size() << " seeds";
        record(9, "ensemble direction", o);
    }
    record(10, "classifier accuracy", classifier_accuracy());
    {
        Outcome o;
        long scores = 0;
        bool same = true;
        for (const auto& r : runs) {
            same = same && r.tem_invariant;
            scores += r.tem_scores;
        }
        o.require(same && scores > 0, "bit-exact scores after randomizing boundary heads");
        o.detail << scores << " proposal scores compared";
        record(11, "proposal-map-only scoring", o);
    }
    {
        Outcome o;
        const SeedRun again = run_seed(1, root / "rerun", false, log);
        const Workdir a{root / "seed_1"}, b{root / "rerun" / "seed_1"};
        int files = 0;
        for (const char* variant : {"bmn", "bmn_tcanet"}) {
            const std::string x = read_bytes(a.report("val", variant)), y = read_bytes(b.report("val", variant));
            o.require(!x.empty() && x == y, std::string("identical ") + variant + " report");
            ++files;
        }
        o.detail << files << " reports compared byte for byte (rerun " << again.repro_sec << " s)";
        record(12, "reproducibility", o);
    }

    out.line(failures == 0 ? "ALL PASS" : std::to_string(failures) + " FAILED");
    return failures == 0 ? 0 : 1;
}
