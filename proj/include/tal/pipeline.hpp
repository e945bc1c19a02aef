#pragma once

// Config-driven orchestration of the whole pipeline on a work directory:
//
//   <workdir>/features/         per-video feature files
//   <workdir>/annotations.json  annotation index with train/val subsets
//   <workdir>/checkpoints/      bmn.talc, tcanet.talc, classifier.talc + loss logs
//   <workdir>/proposals/        <split>_<variant>.jsonl
//   <workdir>/detections/       <split>_<variant>.json, <split>_class_scores.json
//   <workdir>/reports/          <split>_<variant>.json, manifest.json

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "tal/classifier.hpp"
#include "tal/evalkit.hpp"
#include "tal/featio.hpp"
#include "tal/postproc.hpp"
#include "tal/proposal_net.hpp"
#include "tal/refine_net.hpp"

namespace tal {

/// Sizes shared by several sections (channels, class count) live only in
/// `synth`; the model configs pick them up from there. `seed` likewise seeds
/// every stage.
struct PipelineConfig {
    SynthSpec synth;
    int val_videos = 50;
    BMNConfig bmn;
    TCANetConfig tcanet;
    ClassifierConfig classifier;
    SoftNMSParams softnms;
    PostprocConfig postproc;
    int candidates = 1000;  // BMN proposals per video passed on to refinement / Soft-NMS
    EvalProtocol eval;
    std::filesystem::path workdir = "work";
    std::uint64_t seed = 1;

    /// Defaults sized for a CPU run on the synthetic benchmark.
    static PipelineConfig desk();

    /// Copies shared sizes and the seed into the sub-configs.
    void propagate();
    void validate() const;
};

nlohmann::ordered_json to_json(const PipelineConfig& cfg);
/// Strict: unknown keys and ill-typed values raise ConfigError(section, field).
PipelineConfig config_from_json(const nlohmann::json& doc);

/// Applies "a.b.c=value" to a config document. The value is parsed as JSON
/// when possible and taken as a string otherwise; the key must already exist.
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Defaults, then the file (if any), then the overrides in order.
PipelineConfig load_config(const std::filesystem::path& file, const std::vector<std::string>& overrides);

nlohmann::ordered_json bmn_config_json(const BMNConfig& c);
BMNConfig bmn_config_from_json(const nlohmann::json& j);
nlohmann::ordered_json tcanet_config_json(const TCANetConfig& c);
TCANetConfig tcanet_config_from_json(const nlohmann::json& j);
nlohmann::ordered_json classifier_config_json(const ClassifierConfig& c);
ClassifierConfig classifier_config_from_json(const nlohmann::json& j);

/// Raised when a command needs an artifact that an earlier stage produces.
class MissingArtifactError : public std::runtime_error {
public:
    MissingArtifactError(const std::string& stage, const std::filesystem::path& path);
    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

struct Workdir {
    std::filesystem::path root;

    std::filesystem::path checkpoint(const std::string& target) const;
    std::filesystem::path loss_log(const std::string& target) const;
    std::filesystem::path proposals(const std::string& split, const std::string& variant) const;
    std::filesystem::path detections(const std::string& split, const std::string& variant) const;
    std::filesystem::path class_scores(const std::string& split) const;
    std::filesystem::path report(const std::string& split, const std::string& variant) const;
    std::filesystem::path manifest() const;
};

// Dump formats.
void write_proposals(const std::filesystem::path& file,
                     const std::vector<std::pair<std::string, std::vector<Proposal>>>& per_video);
std::vector<std::pair<std::string, std::vector<Proposal>>> read_proposals(const std::filesystem::path& file);
nlohmann::ordered_json detections_json(const std::vector<std::pair<std::string, std::vector<DetectionResult>>>& per_video);
std::vector<VideoDetection> detections_from_json(const nlohmann::json& j);
nlohmann::ordered_json report_json(const MeanAPResult& r, const EvalProtocol& protocol, double top1);

/// 64-bit FNV-1a of a file's bytes, as 16 hex digits.
std::string fnv1a_file(const std::filesystem::path& file);

/// Videos of one subset ("train" or "val") of a synthesized work directory.
std::vector<VideoRecord> load_split(const Workdir& wd, const std::string& split);
/// Models rebuilt from their checkpoints (configs come from the checkpoint).
BMN load_bmn(const Workdir& wd);
TCANet load_tcanet(const Workdir& wd);
VideoClassifier load_classifier(const Workdir& wd);

void cmd_synth(const PipelineConfig& cfg, std::ostream& log);
/// target: bmn | tcanet | classifier.
void cmd_train(const PipelineConfig& cfg, const std::string& target, std::ostream& log);
/// Writes BMN-only dumps, plus BMN+TCANet dumps when a TCANet checkpoint exists.
void cmd_infer(const PipelineConfig& cfg, const std::string& split, std::ostream& log);
/// Returns {variant -> report} for every variant with detections on disk.
nlohmann::ordered_json cmd_eval(const PipelineConfig& cfg, const std::string& split, std::ostream& log);

struct ReproSummary {
    MeanAPResult bmn;
    MeanAPResult bmn_tcanet;
    double top1 = 0.0;
};

/// synth -> train all -> infer val -> eval val, then a comparison table and
/// a manifest (config echo + artifact hashes).
ReproSummary cmd_repro(const PipelineConfig& cfg, std::ostream& log);

std::string format_summary_table(const ReproSummary& s, const EvalProtocol& protocol);

}  // namespace tal
