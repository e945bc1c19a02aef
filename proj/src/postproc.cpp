#include "tal/postproc.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "tal/error.hpp"

namespace tal {

void SoftNMSParams::validate() const
{
    auto fail = [](const char* field, const std::string& msg) { throw ConfigError("softnms", field, msg); };
    if (!(low >= 0.0 && low <= high && high <= 1.0)) fail("low", "need 0 <= low <= high <= 1");
    if (!(alpha > 0.0)) fail("alpha", "must be > 0");
    if (max_out < 1) fail("max_out", "must be >= 1");
}

std::vector<Proposal> soft_nms(const std::vector<Proposal>& proposals, const SoftNMSParams& params)
{
    params.validate();
    std::vector<Proposal> remaining = proposals;
    for (const auto& p : remaining)
        if (!(p.end > p.start))
            throw InputError("soft_nms: malformed proposal");

    std::vector<Proposal> kept;
    while (!remaining.empty() && kept.size() < static_cast<std::size_t>(params.max_out)) {
        const auto best = std::max_element(remaining.begin(), remaining.end(),
                                           [](const Proposal& a, const Proposal& b) { return a.score < b.score; });
        const Proposal sel = *best;
        remaining.erase(best);
        kept.push_back(sel);

        const double theta = params.threshold(sel.end - sel.start);
        for (auto& r : remaining) {
            const double iou = tiou(sel.interval(), r.interval());
            if (iou > theta)
                r.score *= std::exp(-iou * iou / params.alpha);
        }
    }
    std::stable_sort(kept.begin(), kept.end(), [](const Proposal& a, const Proposal& b) { return a.score > b.score; });
    return kept;
}

std::vector<DetectionResult> fuse_scores(const std::vector<Proposal>& proposals, const ClassScores& scores,
                                         int top_classes, double duration_sec)
{
    if (scores.probs.size() < 2)
        throw InputError("fuse_scores: need at least one foreground class plus background");
    if (top_classes < 1)
        throw InputError("fuse_scores: top_classes must be >= 1");
    const Eigen::VectorXd fg = scores.foreground();
    const int C = static_cast<int>(fg.size());
    top_classes = std::min(top_classes, C);

    std::vector<int> classes(C);
    std::iota(classes.begin(), classes.end(), 0);
    std::stable_sort(classes.begin(), classes.end(), [&](int a, int b) { return fg(a) > fg(b); });
    classes.resize(static_cast<std::size_t>(top_classes));

    std::vector<DetectionResult> out;
    out.reserve(proposals.size() * classes.size());
    for (const auto& p : proposals)
        for (int c : classes)
            out.push_back({p.start * duration_sec, p.end * duration_sec, c, p.score * fg(c)});
    return out;
}

void PostprocConfig::validate() const
{
    softnms.validate();
    if (top_classes < 1) throw ConfigError("postproc", "top_classes", "must be >= 1");
    if (max_detections < 1) throw ConfigError("postproc", "max_detections", "must be >= 1");
}

std::vector<DetectionResult> assemble_detections(const std::vector<Proposal>& proposals, const ClassScores& scores,
                                                 double duration_sec, const PostprocConfig& cfg)
{
    auto dets = fuse_scores(soft_nms(proposals, cfg.softnms), scores, cfg.top_classes, duration_sec);
    std::stable_sort(dets.begin(), dets.end(),
                     [](const DetectionResult& a, const DetectionResult& b) { return a.score > b.score; });
    if (dets.size() > static_cast<std::size_t>(cfg.max_detections))
        dets.resize(static_cast<std::size_t>(cfg.max_detections));
    return dets;
}

}  // namespace tal
