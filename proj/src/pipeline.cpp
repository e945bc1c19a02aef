#include "tal/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <ostream>
#include <set>
#include <sstream>

#include "tal/error.hpp"
#include "tal/nn/checkpoint.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using ojson = nlohmann::ordered_json;

namespace tal {

// ---------------------------------------------------------------------------
// Config (de)serialization

namespace {

// Reads typed fields out of one JSON object and rejects whatever is left over.
class Section {
public:
    Section(const json& j, std::string section, std::string prefix = "")
        : j_(j), section_(std::move(section)), prefix_(std::move(prefix))
    {
        if (!j_.is_object())
            throw ConfigError(section_, prefix_.empty() ? "*" : prefix_, "expected an object");
    }

    template <class T>
    void get(const char* key, T& out)
    {
        const auto it = j_.find(key);
        if (it == j_.end())
            return;
        seen_.insert(key);
        const json& v = *it;
        if constexpr (std::is_same_v<T, bool>) {
            if (!v.is_boolean()) fail(key, "expected a boolean");
            out = v.get<bool>();
        } else if constexpr (std::is_integral_v<T>) {
            if (!v.is_number_integer()) fail(key, "expected an integer");
            if (std::is_unsigned_v<T> && v.get<std::int64_t>() < 0 && !v.is_number_unsigned())
                fail(key, "expected a non-negative integer");
            out = v.get<T>();
        } else if constexpr (std::is_floating_point_v<T>) {
            if (!v.is_number()) fail(key, "expected a number");
            out = v.get<T>();
        } else if constexpr (std::is_same_v<T, std::string>) {
            if (!v.is_string()) fail(key, "expected a string");
            out = v.get<std::string>();
        } else if constexpr (std::is_same_v<T, std::vector<double>>) {
            if (!v.is_array()) fail(key, "expected an array of numbers");
            out.clear();
            for (const auto& x : v) {
                if (!x.is_number()) fail(key, "expected an array of numbers");
                out.push_back(x.get<double>());
            }
        } else {
            static_assert(sizeof(T) == 0, "unsupported config field type");
        }
    }

    const json* child(const char* key)
    {
        const auto it = j_.find(key);
        if (it == j_.end())
            return nullptr;
        seen_.insert(key);
        return &*it;
    }

    void finish() const
    {
        for (const auto& [k, v] : j_.items())
            if (!seen_.count(k))
                fail(k, "unknown key");
    }

    [[noreturn]] void fail(const std::string& key, const std::string& msg) const
    {
        throw ConfigError(section_, prefix_.empty() ? key : prefix_ + "." + key, msg);
    }

private:
    const json& j_;
    std::string section_;
    std::string prefix_;
    std::set<std::string> seen_;
};

ojson optimizer_json(const OptimizerConfig& o)
{
    return ojson{{"name", o.name}, {"lr", o.lr}, {"weight_decay", o.weight_decay}};
}

void read_optimizer(Section& parent, const std::string& section, OptimizerConfig& o)
{
    if (const json* j = parent.child("optimizer")) {
        Section s(*j, section, "optimizer");
        s.get("name", o.name);
        s.get("lr", o.lr);
        s.get("weight_decay", o.weight_decay);
        s.finish();
    }
}

// Model sections exclude the sizes and seed that come from elsewhere in the
// pipeline config; checkpoint echoes include them.
ojson bmn_section(const BMNConfig& c)
{
    return ojson{{"L", c.L},
                 {"D", c.D},
                 {"C_hidden", c.C_hidden},
                 {"num_lgte", c.num_lgte},
                 {"lgte_heads", c.lgte_heads},
                 {"lgte_window", c.lgte_window},
                 {"K", c.K},
                 {"pem_channels", c.pem_channels},
                 {"map_channels", c.map_channels},
                 {"pos_threshold", c.pos_threshold},
                 {"w_cls", c.w_cls},
                 {"w_reg", c.w_reg},
                 {"w_tem", c.w_tem},
                 {"optimizer", optimizer_json(c.optimizer)},
                 {"batch_size", c.batch_size},
                 {"epochs", c.epochs}};
}

void read_bmn(Section& s, BMNConfig& c)
{
    s.get("L", c.L);
    s.get("D", c.D);
    s.get("C_hidden", c.C_hidden);
    s.get("num_lgte", c.num_lgte);
    s.get("lgte_heads", c.lgte_heads);
    s.get("lgte_window", c.lgte_window);
    s.get("K", c.K);
    s.get("pem_channels", c.pem_channels);
    s.get("map_channels", c.map_channels);
    s.get("pos_threshold", c.pos_threshold);
    s.get("w_cls", c.w_cls);
    s.get("w_reg", c.w_reg);
    s.get("w_tem", c.w_tem);
    read_optimizer(s, "bmn", c.optimizer);
    s.get("batch_size", c.batch_size);
    s.get("epochs", c.epochs);
}

ojson tcanet_section(const TCANetConfig& c)
{
    return ojson{{"C_hidden", c.C_hidden},
                 {"num_lgte", c.num_lgte},
                 {"lgte_heads", c.lgte_heads},
                 {"num_tbr", c.num_tbr},
                 {"region_samples", c.region_samples},
                 {"tbr_hidden", c.tbr_hidden},
                 {"region_ratio", c.region_ratio},
                 {"optimizer", optimizer_json(c.optimizer)},
                 {"batch_size", c.batch_size},
                 {"epochs", c.epochs},
                 {"lr_policy", c.lr_policy},
                 {"match_threshold", c.match_threshold},
                 {"augment_per_proposal", c.augment_per_proposal},
                 {"augment_jitter", c.augment_jitter},
                 {"train_proposals", c.train_proposals},
                 {"w_offset", c.w_offset},
                 {"w_quality", c.w_quality}};
}

void read_tcanet(Section& s, TCANetConfig& c)
{
    s.get("C_hidden", c.C_hidden);
    s.get("num_lgte", c.num_lgte);
    s.get("lgte_heads", c.lgte_heads);
    s.get("num_tbr", c.num_tbr);
    s.get("region_samples", c.region_samples);
    s.get("tbr_hidden", c.tbr_hidden);
    s.get("region_ratio", c.region_ratio);
    read_optimizer(s, "tcanet", c.optimizer);
    s.get("batch_size", c.batch_size);
    s.get("epochs", c.epochs);
    s.get("lr_policy", c.lr_policy);
    s.get("match_threshold", c.match_threshold);
    s.get("augment_per_proposal", c.augment_per_proposal);
    s.get("augment_jitter", c.augment_jitter);
    s.get("train_proposals", c.train_proposals);
    s.get("w_offset", c.w_offset);
    s.get("w_quality", c.w_quality);
}

ojson classifier_section(const ClassifierConfig& c)
{
    return ojson{{"lr", c.lr}, {"weight_decay", c.weight_decay}, {"epochs", c.epochs}};
}

void read_classifier(Section& s, ClassifierConfig& c)
{
    s.get("lr", c.lr);
    s.get("weight_decay", c.weight_decay);
    s.get("epochs", c.epochs);
}

}  // namespace

ojson bmn_config_json(const BMNConfig& c)
{
    ojson j = bmn_section(c);
    j["C_in"] = c.C_in;
    j["seed"] = c.seed;
    return j;
}

BMNConfig bmn_config_from_json(const json& j)
{
    BMNConfig c;
    Section s(j, "bmn");
    read_bmn(s, c);
    s.get("C_in", c.C_in);
    s.get("seed", c.seed);
    s.finish();
    c.validate();
    return c;
}

ojson tcanet_config_json(const TCANetConfig& c)
{
    ojson j = tcanet_section(c);
    j["C_in"] = c.C_in;
    j["seed"] = c.seed;
    return j;
}

TCANetConfig tcanet_config_from_json(const json& j)
{
    TCANetConfig c;
    Section s(j, "tcanet");
    read_tcanet(s, c);
    s.get("C_in", c.C_in);
    s.get("seed", c.seed);
    s.finish();
    c.validate();
    return c;
}

ojson classifier_config_json(const ClassifierConfig& c)
{
    ojson j = classifier_section(c);
    j["C_in"] = c.C_in;
    j["num_classes"] = c.num_classes;
    j["seed"] = c.seed;
    return j;
}

ClassifierConfig classifier_config_from_json(const json& j)
{
    ClassifierConfig c;
    Section s(j, "classifier");
    read_classifier(s, c);
    s.get("C_in", c.C_in);
    s.get("num_classes", c.num_classes);
    s.get("seed", c.seed);
    s.finish();
    c.validate();
    return c;
}

PipelineConfig PipelineConfig::desk()
{
    PipelineConfig c;
    // 200 training videos make only two optimizer steps per epoch at the
    // reference batch of 128, far too few to learn the map.
    c.bmn.batch_size = 8;
    c.propagate();
    return c;
}

void PipelineConfig::propagate()
{
    synth.seed = seed;
    bmn.C_in = synth.channels;
    bmn.seed = seed;
    tcanet.C_in = synth.channels;
    tcanet.seed = seed;
    classifier.C_in = synth.channels;
    classifier.num_classes = synth.num_classes;
    classifier.seed = seed;
    postproc.softnms = softnms;
}

void PipelineConfig::validate() const
{
    synth.validate();
    if (val_videos < 1 || val_videos >= synth.num_videos)
        throw ConfigError("synth", "val_videos", "must be in [1, num_videos)");
    bmn.validate();
    tcanet.validate();
    classifier.validate();
    softnms.validate();
    postproc.validate();
    if (candidates < 1)
        throw ConfigError("postproc", "candidates", "must be >= 1");
    eval.validate();
    if (workdir.empty())
        throw ConfigError("paths", "workdir", "must not be empty");
}

ojson to_json(const PipelineConfig& cfg)
{
    const SynthSpec& s = cfg.synth;
    ojson j;
    j["seed"] = cfg.seed;
    j["synth"] = ojson{{"num_videos", s.num_videos},
                       {"val_videos", cfg.val_videos},
                       {"channels", s.channels},
                       {"num_classes", s.num_classes},
                       {"min_duration_sec", s.min_duration_sec},
                       {"max_duration_sec", s.max_duration_sec},
                       {"noise_sigma", s.noise_sigma},
                       {"fps", s.fps},
                       {"stride", s.stride},
                       {"prototype_margin", s.prototype_margin},
                       {"min_segments", s.min_segments},
                       {"max_segments", s.max_segments},
                       {"min_segment_fraction", s.min_segment_fraction},
                       {"max_segment_fraction", s.max_segment_fraction},
                       {"min_gap_sec", s.min_gap_sec},
                       {"resolution", {s.resolution.height, s.resolution.width}},
                       {"id_prefix", s.id_prefix}};
    j["bmn"] = bmn_section(cfg.bmn);
    j["tcanet"] = tcanet_section(cfg.tcanet);
    j["classifier"] = classifier_section(cfg.classifier);
    j["softnms"] = ojson{{"low", cfg.softnms.low},
                         {"high", cfg.softnms.high},
                         {"alpha", cfg.softnms.alpha},
                         {"max_out", cfg.softnms.max_out}};
    j["postproc"] = ojson{{"top_classes", cfg.postproc.top_classes},
                          {"max_detections", cfg.postproc.max_detections},
                          {"candidates", cfg.candidates}};
    j["eval"] = ojson{{"tiou_thresholds", cfg.eval.tiou_thresholds},
                      {"max_detections_per_video", cfg.eval.max_detections_per_video}};
    j["paths"] = ojson{{"workdir", cfg.workdir.generic_string()}};
    return j;
}

PipelineConfig config_from_json(const json& doc)
{
    PipelineConfig cfg = PipelineConfig::desk();
    Section top(doc, "config");
    top.get("seed", cfg.seed);

    if (const json* j = top.child("synth")) {
        Section s(*j, "synth");
        SynthSpec& sp = cfg.synth;
        s.get("num_videos", sp.num_videos);
        s.get("val_videos", cfg.val_videos);
        s.get("channels", sp.channels);
        s.get("num_classes", sp.num_classes);
        s.get("min_duration_sec", sp.min_duration_sec);
        s.get("max_duration_sec", sp.max_duration_sec);
        s.get("noise_sigma", sp.noise_sigma);
        s.get("fps", sp.fps);
        s.get("stride", sp.stride);
        s.get("prototype_margin", sp.prototype_margin);
        s.get("min_segments", sp.min_segments);
        s.get("max_segments", sp.max_segments);
        s.get("min_segment_fraction", sp.min_segment_fraction);
        s.get("max_segment_fraction", sp.max_segment_fraction);
        s.get("min_gap_sec", sp.min_gap_sec);
        if (const json* r = s.child("resolution")) {
            if (!r->is_array() || r->size() != 2 || !(*r)[0].is_number_integer() || !(*r)[1].is_number_integer())
                s.fail("resolution", "expected [height, width]");
            sp.resolution = {(*r)[0].get<int>(), (*r)[1].get<int>()};
        }
        s.get("id_prefix", sp.id_prefix);
        s.finish();
    }
    if (const json* j = top.child("bmn")) {
        Section s(*j, "bmn");
        read_bmn(s, cfg.bmn);
        s.finish();
    }
    if (const json* j = top.child("tcanet")) {
        Section s(*j, "tcanet");
        read_tcanet(s, cfg.tcanet);
        s.finish();
    }
    if (const json* j = top.child("classifier")) {
        Section s(*j, "classifier");
        read_classifier(s, cfg.classifier);
        s.finish();
    }
    if (const json* j = top.child("softnms")) {
        Section s(*j, "softnms");
        s.get("low", cfg.softnms.low);
        s.get("high", cfg.softnms.high);
        s.get("alpha", cfg.softnms.alpha);
        s.get("max_out", cfg.softnms.max_out);
        s.finish();
    }
    if (const json* j = top.child("postproc")) {
        Section s(*j, "postproc");
        s.get("top_classes", cfg.postproc.top_classes);
        s.get("max_detections", cfg.postproc.max_detections);
        s.get("candidates", cfg.candidates);
        s.finish();
    }
    if (const json* j = top.child("eval")) {
        Section s(*j, "eval");
        s.get("tiou_thresholds", cfg.eval.tiou_thresholds);
        s.get("max_detections_per_video", cfg.eval.max_detections_per_video);
        s.finish();
    }
    if (const json* j = top.child("paths")) {
        Section s(*j, "paths");
        std::string wd = cfg.workdir.string();
        s.get("workdir", wd);
        cfg.workdir = wd;
        s.finish();
    }
    top.finish();

    cfg.propagate();
    cfg.validate();
    return cfg;
}

void apply_override(json& doc, const std::string& assignment)
{
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw ConfigError("config", assignment, "override must look like section.key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);

    std::vector<std::string> parts;
    std::stringstream ss(key);
    for (std::string p; std::getline(ss, p, '.');)
        parts.push_back(p);
    const std::string section = parts.size() > 1 ? parts.front() : "config";
    const std::string field = parts.size() > 1 ? key.substr(section.size() + 1) : key;

    json* node = &doc;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (!node->is_object() || !node->contains(parts[i]))
            throw ConfigError(section, field, "unknown key");
        node = &(*node)[parts[i]];
    }
    json value = json::parse(raw, nullptr, /*allow_exceptions=*/false);
    if (value.is_discarded())
        value = raw;
    *node = value;
}

PipelineConfig load_config(const fs::path& file, const std::vector<std::string>& overrides)
{
    json doc = to_json(PipelineConfig::desk());
    if (!file.empty()) {
        std::ifstream in(file);
        if (!in)
            throw ConfigError("config", file.string(), "cannot open config file");
        json user = json::parse(in, nullptr, false);
        if (user.is_discarded() || !user.is_object())
            throw ConfigError("config", file.string(), "not a JSON object");
        // Unknown keys survive the merge and are rejected by the strict parse.
        doc.merge_patch(user);
    }
    for (const auto& o : overrides)
        apply_override(doc, o);
    return config_from_json(doc);
}

// ---------------------------------------------------------------------------
// Work directory and dump formats

MissingArtifactError::MissingArtifactError(const std::string& stage, const fs::path& path)
    : std::runtime_error("missing " + path.string() + ": run `" + stage + "` first"), stage_(stage)
{
}

fs::path Workdir::checkpoint(const std::string& target) const { return root / "checkpoints" / (target + ".talc"); }
fs::path Workdir::loss_log(const std::string& target) const { return root / "checkpoints" / (target + "_loss.json"); }
fs::path Workdir::proposals(const std::string& split, const std::string& variant) const
{
    return root / "proposals" / (split + "_" + variant + ".jsonl");
}
fs::path Workdir::detections(const std::string& split, const std::string& variant) const
{
    return root / "detections" / (split + "_" + variant + ".json");
}
fs::path Workdir::class_scores(const std::string& split) const
{
    return root / "detections" / (split + "_class_scores.json");
}
fs::path Workdir::report(const std::string& split, const std::string& variant) const
{
    return root / "reports" / (split + "_" + variant + ".json");
}
fs::path Workdir::manifest() const { return root / "reports" / "manifest.json"; }

namespace {

void write_text(const fs::path& file, const std::string& text)
{
    fs::create_directories(file.parent_path());
    std::ofstream out(file, std::ios::binary);
    out << text;
    if (!out)
        throw std::runtime_error("cannot write " + file.string());
}

json read_json_file(const fs::path& file)
{
    std::ifstream in(file);
    if (!in)
        throw std::runtime_error("cannot open " + file.string());
    return json::parse(in);
}

}  // namespace

void write_proposals(const fs::path& file, const std::vector<std::pair<std::string, std::vector<Proposal>>>& per_video)
{
    std::ostringstream os;
    for (const auto& [id, props] : per_video)
        for (const auto& p : props)
            os << ojson{{"video_id", id},
                        {"start", p.start},
                        {"end", p.end},
                        {"score", p.score},
                        {"stage", std::string(to_string(p.stage))}}
                      .dump()
               << '\n';
    write_text(file, os.str());
}

std::vector<std::pair<std::string, std::vector<Proposal>>> read_proposals(const fs::path& file)
{
    std::ifstream in(file);
    if (!in)
        throw std::runtime_error("cannot open " + file.string());
    std::vector<std::pair<std::string, std::vector<Proposal>>> out;
    for (std::string line; std::getline(in, line);) {
        if (line.empty())
            continue;
        const json j = json::parse(line);
        const std::string id = j.at("video_id").get<std::string>();
        if (out.empty() || out.back().first != id)
            out.push_back({id, {}});
        out.back().second.push_back({j.at("start").get<double>(), j.at("end").get<double>(),
                                     j.at("score").get<double>(), stage_from_string(j.at("stage").get<std::string>())});
    }
    return out;
}

ojson detections_json(const std::vector<std::pair<std::string, std::vector<DetectionResult>>>& per_video)
{
    ojson j = ojson::object();
    for (const auto& [id, dets] : per_video) {
        ojson arr = ojson::array();
        for (const auto& d : dets)
            arr.push_back(ojson{{"label", d.label}, {"score", d.score}, {"segment", {d.start, d.end}}});
        j[id] = std::move(arr);
    }
    return j;
}

std::vector<VideoDetection> detections_from_json(const json& j)
{
    std::vector<VideoDetection> out;
    for (const auto& [id, arr] : j.items())
        for (const auto& d : arr) {
            const auto& seg = d.at("segment");
            out.push_back({id, {seg.at(0).get<double>(), seg.at(1).get<double>(), d.at("label").get<int>(),
                                d.at("score").get<double>()}});
        }
    return out;
}

ojson report_json(const MeanAPResult& r, const EvalProtocol& protocol, double top1)
{
    ojson per_thr = ojson::array();
    for (std::size_t i = 0; i < r.per_threshold.size(); ++i)
        per_thr.push_back(ojson{{"tiou", protocol.tiou_thresholds[i]}, {"mAP", r.per_threshold[i]}});
    ojson per_class = ojson::object();
    for (const auto& [c, ap] : r.per_class)
        per_class[std::to_string(c)] = ap;
    return ojson{{"per_threshold", per_thr}, {"average", r.average}, {"per_class", per_class}, {"top1", top1}};
}

std::string fnv1a_file(const fs::path& file)
{
    std::ifstream in(file, std::ios::binary);
    if (!in)
        throw std::runtime_error("cannot open " + file.string());
    std::uint64_t h = 0xcbf29ce484222325ULL;
    char buf[1 << 16];
    while (in) {
        in.read(buf, sizeof buf);
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 0x100000001b3ULL;
        }
    }
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(h));
    return hex;
}

// ---------------------------------------------------------------------------
// Commands

namespace {

const char* const kSplits[] = {"train", "val"};
const char* const kVariants[] = {"bmn", "bmn_tcanet"};

void require(const fs::path& p, const std::string& stage)
{
    if (!fs::exists(p))
        throw MissingArtifactError(stage, p);
}

TrainOptions logger(std::ostream& log)
{
    TrainOptions o;
    o.log = [&log](const std::string& s) { log << s << '\n'; };
    return o;
}

void write_loss_log(const fs::path& file, const ojson& j) { write_text(file, j.dump(2) + "\n"); }

struct SplitEval {
    std::map<std::string, MeanAPResult> variants;
    double top1 = 0.0;
};

SplitEval evaluate_split(const PipelineConfig& cfg, const std::string& split, std::ostream& log)
{
    const Workdir wd{cfg.workdir};
    require(wd.root / "annotations.json", "synth");
    std::vector<VideoGroundTruth> gts;
    std::map<std::string, int> labels;
    for (const auto& e : read_annotation_index(wd.root)) {
        if (e.subset != split)
            continue;
        for (const auto& s : e.segments)
            gts.push_back({e.id, s});
        if (!e.segments.empty())
            labels[e.id] = e.segments.front().label;
    }
    if (gts.empty())
        throw MissingArtifactError("synth", wd.root / "annotations.json");

    require(wd.class_scores(split), "infer");
    std::vector<ClassScores> preds;
    std::vector<int> truth;
    const json score_doc = read_json_file(wd.class_scores(split));
    for (const auto& [id, arr] : score_doc.items()) {
        const auto it = labels.find(id);
        if (it == labels.end())
            continue;
        ClassScores s;
        s.probs.resize(static_cast<Eigen::Index>(arr.size()));
        for (std::size_t i = 0; i < arr.size(); ++i)
            s.probs(static_cast<Eigen::Index>(i)) = arr[i].get<double>();
        preds.push_back(std::move(s));
        truth.push_back(it->second);
    }

    SplitEval out;
    out.top1 = top1_accuracy(preds, truth);
    for (const char* variant : kVariants) {
        const fs::path file = wd.detections(split, variant);
        if (!fs::exists(file))
            continue;
        const auto dets = detections_from_json(read_json_file(file));
        out.variants[variant] = mean_ap(dets, gts, cfg.eval);
        write_text(wd.report(split, variant), report_json(out.variants[variant], cfg.eval, out.top1).dump(2) + "\n");
        log << "eval: " << split << " " << variant << " average mAP=" << out.variants[variant].average << '\n';
    }
    if (out.variants.empty())
        throw MissingArtifactError("infer", wd.detections(split, kVariants[0]));
    return out;
}

}  // namespace

std::vector<VideoRecord> load_split(const Workdir& wd, const std::string& split)
{
    if (std::find(std::begin(kSplits), std::end(kSplits), split) == std::end(kSplits))
        throw InputError("unknown split '" + split + "' (expected train or val)");
    require(wd.root / "annotations.json", "synth");
    auto videos = read_dataset(wd.root, split);
    if (videos.empty())
        throw MissingArtifactError("synth", wd.root / "annotations.json");
    return videos;
}

BMN load_bmn(const Workdir& wd)
{
    const fs::path file = wd.checkpoint("bmn");
    require(file, "train bmn");
    const auto ckpt = nn::read_checkpoint(file);
    BMN m(bmn_config_from_json(ckpt.config));
    nn::load_params(ckpt, m.parameters());
    return m;
}

TCANet load_tcanet(const Workdir& wd)
{
    const fs::path file = wd.checkpoint("tcanet");
    require(file, "train tcanet");
    const auto ckpt = nn::read_checkpoint(file);
    TCANet m(tcanet_config_from_json(ckpt.config));
    nn::load_params(ckpt, m.parameters());
    return m;
}

VideoClassifier load_classifier(const Workdir& wd)
{
    const fs::path file = wd.checkpoint("classifier");
    require(file, "train classifier");
    const auto ckpt = nn::read_checkpoint(file);
    VideoClassifier m(classifier_config_from_json(ckpt.config));
    nn::load_params(ckpt, m.parameters());
    return m;
}

void cmd_synth(const PipelineConfig& cfg, std::ostream& log)
{
    cfg.validate();
    const auto videos = synthesize_dataset(cfg.synth);
    std::vector<std::string> subsets(videos.size(), "train");
    for (std::size_t i = videos.size() - static_cast<std::size_t>(cfg.val_videos); i < videos.size(); ++i)
        subsets[i] = "val";
    fs::create_directories(cfg.workdir);
    if (fs::exists(cfg.workdir / "features"))
        fs::remove_all(cfg.workdir / "features");
    write_dataset(videos, cfg.workdir, subsets);
    log << "synth: " << videos.size() << " videos (" << cfg.val_videos << " val) -> " << cfg.workdir.string() << '\n';
}

void cmd_train(const PipelineConfig& cfg, const std::string& target, std::ostream& log)
{
    cfg.validate();
    const Workdir wd{cfg.workdir};
    if (target == "bmn") {
        const auto train = load_split(wd, "train");
        BMN model(cfg.bmn);
        const auto r = train_bmn(model, train, logger(log));
        fs::create_directories(wd.root / "checkpoints");
        nn::save_checkpoint(wd.checkpoint("bmn"), bmn_config_json(cfg.bmn), model.parameters());
        write_loss_log(wd.loss_log("bmn"), ojson{{"epoch_loss", r.epoch_loss}, {"steps", r.steps}});
    } else if (target == "tcanet") {
        const auto train = load_split(wd, "train");
        const BMN bmn = load_bmn(wd);
        std::vector<std::vector<Proposal>> props;
        props.reserve(train.size());
        for (const auto& v : train)
            props.push_back(infer_proposals(bmn, v, cfg.tcanet.train_proposals));
        TCANet model(cfg.tcanet);
        const auto r = train_tcanet(model, train, props, logger(log));
        fs::create_directories(wd.root / "checkpoints");
        nn::save_checkpoint(wd.checkpoint("tcanet"), tcanet_config_json(cfg.tcanet), model.parameters());
        write_loss_log(wd.loss_log("tcanet"), ojson{{"epoch_loss", r.epoch_loss},
                                                    {"epoch_offset_loss", r.epoch_offset_loss},
                                                    {"epoch_lr", r.epoch_lr},
                                                    {"steps", r.steps},
                                                    {"skipped_batches", r.skipped_batches}});
    } else if (target == "classifier") {
        const auto train = load_split(wd, "train");
        VideoClassifier model(cfg.classifier);
        const auto r = train_classifier(model, train, logger(log));
        fs::create_directories(wd.root / "checkpoints");
        nn::save_checkpoint(wd.checkpoint("classifier"), classifier_config_json(cfg.classifier),
                            model.parameters());
        write_loss_log(wd.loss_log("classifier"), ojson{{"loss", r.loss}});
    } else {
        throw InputError("unknown training target '" + target + "' (expected bmn, tcanet or classifier)");
    }
    log << "train: " << target << " checkpoint -> " << wd.checkpoint(target).string() << '\n';
}

void cmd_infer(const PipelineConfig& cfg, const std::string& split, std::ostream& log)
{
    cfg.validate();
    const Workdir wd{cfg.workdir};
    const auto videos = load_split(wd, split);
    const BMN bmn = load_bmn(wd);
    const VideoClassifier classifier = load_classifier(wd);
    const bool refine = fs::exists(wd.checkpoint("tcanet"));
    std::optional<TCANet> tcanet;
    if (refine)
        tcanet.emplace(load_tcanet(wd));

    using PerVideoProps = std::vector<std::pair<std::string, std::vector<Proposal>>>;
    using PerVideoDets = std::vector<std::pair<std::string, std::vector<DetectionResult>>>;
    PerVideoProps bmn_props, tca_props;
    PerVideoDets bmn_dets, tca_dets;
    ojson scores = ojson::object();
    for (const auto& v : videos) {
        const ClassScores cs = predict_video(classifier, v);
        scores[v.id] = std::vector<double>(cs.probs.data(), cs.probs.data() + cs.probs.size());

        const auto props = infer_proposals(bmn, v, cfg.candidates);
        bmn_props.push_back({v.id, props});
        bmn_dets.push_back({v.id, assemble_detections(props, cs, v.duration_sec, cfg.postproc)});
        if (refine) {
            const auto refined = refine_video(*tcanet, v, props);
            tca_props.push_back({v.id, refined});
            tca_dets.push_back({v.id, assemble_detections(refined, cs, v.duration_sec, cfg.postproc)});
        }
    }

    write_text(wd.class_scores(split), scores.dump() + "\n");
    write_proposals(wd.proposals(split, "bmn"), bmn_props);
    write_text(wd.detections(split, "bmn"), detections_json(bmn_dets).dump() + "\n");
    if (refine) {
        write_proposals(wd.proposals(split, "bmn_tcanet"), tca_props);
        write_text(wd.detections(split, "bmn_tcanet"), detections_json(tca_dets).dump() + "\n");
    } else {
        log << "infer: no TCANet checkpoint, writing BMN-only detections\n";
    }
    log << "infer: " << split << " " << videos.size() << " videos\n";
}

ojson cmd_eval(const PipelineConfig& cfg, const std::string& split, std::ostream& log)
{
    cfg.validate();
    const SplitEval r = evaluate_split(cfg, split, log);
    ojson out = ojson::object();
    for (const auto& [variant, m] : r.variants)
        out[variant] = report_json(m, cfg.eval, r.top1);
    return out;
}

std::string format_summary_table(const ReproSummary& s, const EvalProtocol& protocol)
{
    std::ostringstream os;
    os << std::fixed << std::setprecision(4);
    const auto& t = protocol.tiou_thresholds;
    // Show the loosest, middle and strictest thresholds plus the average.
    std::vector<std::size_t> cols{0};
    if (t.size() > 2)
        cols.push_back(t.size() / 2);
    if (t.size() > 1)
        cols.push_back(t.size() - 1);

    os << std::left << std::setw(16) << "method";
    for (std::size_t c : cols) {
        std::ostringstream h;
        h << "mAP@" << std::setprecision(2) << std::fixed << t[c];
        os << std::right << std::setw(10) << h.str();
    }
    os << std::right << std::setw(10) << "average" << '\n';
    auto row = [&](const char* name, const MeanAPResult& m) {
        os << std::left << std::setw(16) << name;
        for (std::size_t c : cols)
            os << std::right << std::setw(10) << m.per_threshold[c];
        os << std::right << std::setw(10) << m.average << '\n';
    };
    row("BMN", s.bmn);
    row("BMN + TCANet", s.bmn_tcanet);
    os << "classifier top-1: " << s.top1 << '\n';
    return os.str();
}

ReproSummary cmd_repro(const PipelineConfig& cfg, std::ostream& log)
{
    cfg.validate();
    const Workdir wd{cfg.workdir};
    for (const char* sub : {"checkpoints", "proposals", "detections", "reports"})
        if (fs::exists(wd.root / sub))
            fs::remove_all(wd.root / sub);

    cmd_synth(cfg, log);
    cmd_train(cfg, "bmn", log);
    cmd_train(cfg, "classifier", log);
    cmd_train(cfg, "tcanet", log);
    cmd_infer(cfg, "val", log);
    const SplitEval ev = evaluate_split(cfg, "val", log);

    ReproSummary s;
    s.bmn = ev.variants.at("bmn");
    s.bmn_tcanet = ev.variants.at("bmn_tcanet");
    s.top1 = ev.top1;
    log << format_summary_table(s, cfg.eval);

    ojson artifacts = ojson::object();
    std::vector<fs::path> files{wd.root / "annotations.json"};
    for (const char* sub : {"features", "checkpoints", "proposals", "detections", "reports"})
        for (const auto& e : fs::recursive_directory_iterator(wd.root / sub))
            if (e.is_regular_file() && e.path() != wd.manifest())
                files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files)
        artifacts[fs::relative(f, wd.root).generic_string()] = fnv1a_file(f);
    const ojson manifest{{"config", to_json(cfg)}, {"artifacts", artifacts}};
    write_text(wd.manifest(), manifest.dump(2) + "\n");
    return s;
}

}  // namespace tal
