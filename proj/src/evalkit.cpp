#include "tal/evalkit.hpp"

#include <algorithm>
#include <numeric>
#include <unordered_map>

#include "tal/error.hpp"

namespace tal {

void EvalProtocol::validate() const
{
    if (tiou_thresholds.empty())
        throw ConfigError("eval", "tiou_thresholds", "must not be empty");
    for (std::size_t i = 0; i < tiou_thresholds.size(); ++i) {
        const double t = tiou_thresholds[i];
        if (!(t > 0.0 && t <= 1.0))
            throw ConfigError("eval", "tiou_thresholds", "each threshold must lie in (0, 1]");
        if (i > 0 && !(t > tiou_thresholds[i - 1]))
            throw ConfigError("eval", "tiou_thresholds", "must be strictly increasing");
    }
    if (max_detections_per_video < 1)
        throw ConfigError("eval", "max_detections_per_video", "must be >= 1");
}

namespace {

std::vector<const VideoDetection*> ranked_for_class(const std::vector<VideoDetection>& dets, int label)
{
    std::vector<const VideoDetection*> out;
    for (const auto& d : dets)
        if (d.det.label == label)
            out.push_back(&d);
    std::stable_sort(out.begin(), out.end(),
                     [](const VideoDetection* a, const VideoDetection* b) { return a->det.score > b->det.score; });
    return out;
}

std::vector<const VideoGroundTruth*> gts_for_class(const std::vector<VideoGroundTruth>& gts, int label)
{
    std::vector<const VideoGroundTruth*> out;
    for (const auto& g : gts)
        if (g.gt.label == label)
            out.push_back(&g);
    return out;
}

std::vector<VideoDetection> tag(const std::vector<DetectionResult>& dets)
{
    std::vector<VideoDetection> out;
    out.reserve(dets.size());
    for (const auto& d : dets)
        out.push_back({"", d});
    return out;
}

std::vector<VideoGroundTruth> tag(const std::vector<SegmentAnnotation>& gts)
{
    std::vector<VideoGroundTruth> out;
    out.reserve(gts.size());
    for (const auto& g : gts)
        out.push_back({"", g});
    return out;
}

}  // namespace

std::optional<double> average_precision(const std::vector<VideoDetection>& dets,
                                        const std::vector<VideoGroundTruth>& gts, int label, double tiou_thr)
{
    const auto cls_gts = gts_for_class(gts, label);
    if (cls_gts.empty())
        return std::nullopt;
    const auto ranked = ranked_for_class(dets, label);

    std::unordered_map<std::string, std::vector<std::size_t>> by_video;
    for (std::size_t g = 0; g < cls_gts.size(); ++g)
        by_video[cls_gts[g]->video_id].push_back(g);
    std::vector<char> taken(cls_gts.size(), 0);

    const std::size_t n = ranked.size();
    std::vector<double> precision(n), recall(n);
    double tp = 0.0;
    const double total = static_cast<double>(cls_gts.size());
    for (std::size_t i = 0; i < n; ++i) {
        const auto it = by_video.find(ranked[i]->video_id);
        std::ptrdiff_t best = -1;
        double best_iou = -1.0;
        if (it != by_video.end()) {
            for (std::size_t g : it->second) {
                if (taken[g])
                    continue;
                const double iou = tiou(ranked[i]->det.interval(), cls_gts[g]->gt.interval());
                if (iou >= tiou_thr && iou > best_iou) {
                    best_iou = iou;
                    best = static_cast<std::ptrdiff_t>(g);
                }
            }
        }
        if (best >= 0) {
            taken[static_cast<std::size_t>(best)] = 1;
            tp += 1.0;
        }
        precision[i] = tp / static_cast<double>(i + 1);
        recall[i] = tp / total;
    }

    // All-point interpolation: integrate the precision envelope over recall.
    for (std::size_t i = n; i-- > 1;)
        precision[i - 1] = std::max(precision[i - 1], precision[i]);
    double ap = 0.0;
    double prev_recall = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        ap += (recall[i] - prev_recall) * precision[i];
        prev_recall = recall[i];
    }
    return ap;
}

std::optional<double> average_precision(const std::vector<DetectionResult>& dets,
                                        const std::vector<SegmentAnnotation>& gts, int label, double tiou_thr)
{
    return average_precision(tag(dets), tag(gts), label, tiou_thr);
}

std::optional<double> oracle_average_precision(const std::vector<VideoDetection>& dets,
                                               const std::vector<VideoGroundTruth>& gts, int label,
                                               double tiou_thr)
{
    if (dets.size() > kOracleMaxDetections || gts.size() > kOracleMaxGroundTruths)
        throw InputError("oracle_average_precision: instance too large for brute force");

    std::vector<VideoDetection> cls_dets;
    for (const auto& d : dets)
        if (d.det.label == label)
            cls_dets.push_back(d);
    std::vector<VideoGroundTruth> cls_gts;
    for (const auto& g : gts)
        if (g.gt.label == label)
            cls_gts.push_back(g);
    if (cls_gts.empty())
        return std::nullopt;

    // Rank by selection: repeatedly pick the earliest highest-scoring remaining
    // detection.
    std::vector<VideoDetection> order;
    std::vector<bool> used(cls_dets.size(), false);
    for (std::size_t k = 0; k < cls_dets.size(); ++k) {
        std::size_t pick = cls_dets.size();
        for (std::size_t j = 0; j < cls_dets.size(); ++j)
            if (!used[j] && (pick == cls_dets.size() || cls_dets[j].det.score > cls_dets[pick].det.score))
                pick = j;
        used[pick] = true;
        order.push_back(cls_dets[pick]);
    }

    // Replay the matching from scratch for each prefix length; the outcome of
    // the last detection in the prefix tells whether it is a true positive.
    auto prefix_hits = [&](std::size_t len) {
        std::vector<bool> matched(cls_gts.size(), false);
        std::vector<bool> hit(len, false);
        for (std::size_t i = 0; i < len; ++i) {
            int best = -1;
            for (std::size_t g = 0; g < cls_gts.size(); ++g) {
                if (matched[g] || cls_gts[g].video_id != order[i].video_id)
                    continue;
                const double o = tiou(order[i].det.interval(), cls_gts[g].gt.interval());
                if (o < tiou_thr)
                    continue;
                if (best < 0 || o > tiou(order[i].det.interval(), cls_gts[static_cast<std::size_t>(best)].gt.interval()))
                    best = static_cast<int>(g);
            }
            if (best >= 0) {
                matched[static_cast<std::size_t>(best)] = true;
                hit[i] = true;
            }
        }
        return hit;
    };

    const std::size_t n = order.size();
    std::vector<double> prec(n);
    std::vector<bool> is_tp(n);
    for (std::size_t len = 1; len <= n; ++len) {
        const auto hit = prefix_hits(len);
        const auto hits = std::count(hit.begin(), hit.end(), true);
        prec[len - 1] = static_cast<double>(hits) / static_cast<double>(len);
        is_tp[len - 1] = hit[len - 1];
    }

    double ap = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (!is_tp[i])
            continue;
        double best = 0.0;
        for (std::size_t j = i; j < n; ++j)
            best = std::max(best, prec[j]);
        ap += best / static_cast<double>(cls_gts.size());
    }
    return ap;
}

MeanAPResult mean_ap(const std::vector<VideoDetection>& dets, const std::vector<VideoGroundTruth>& gts,
                     const EvalProtocol& protocol)
{
    protocol.validate();
    if (gts.empty())
        throw InputError("mean_ap: empty ground-truth set");

    // Keep only the top-scoring detections of each video.
    std::vector<std::size_t> idx(dets.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return dets[a].det.score > dets[b].det.score; });
    std::unordered_map<std::string, int> per_video;
    std::vector<char> keep(dets.size(), 0);
    for (std::size_t i : idx)
        if (per_video[dets[i].video_id]++ < protocol.max_detections_per_video)
            keep[i] = 1;
    std::vector<VideoDetection> kept;
    for (std::size_t i = 0; i < dets.size(); ++i)
        if (keep[i])
            kept.push_back(dets[i]);

    std::vector<int> labels;
    for (const auto& g : gts)
        labels.push_back(g.gt.label);
    std::sort(labels.begin(), labels.end());
    labels.erase(std::unique(labels.begin(), labels.end()), labels.end());

    MeanAPResult r;
    for (int c : labels)
        r.per_class[c] = 0.0;
    for (double thr : protocol.tiou_thresholds) {
        double sum = 0.0;
        for (int c : labels) {
            const double ap = *average_precision(kept, gts, c, thr);
            sum += ap;
            r.per_class[c] += ap;
        }
        r.per_threshold.push_back(sum / static_cast<double>(labels.size()));
    }
    const double nt = static_cast<double>(protocol.tiou_thresholds.size());
    for (auto& [c, v] : r.per_class)
        v /= nt;
    r.average = std::accumulate(r.per_threshold.begin(), r.per_threshold.end(), 0.0) / nt;
    return r;
}

double top1_accuracy(const std::vector<ClassScores>& preds, const std::vector<int>& labels)
{
    if (preds.size() != labels.size())
        throw InputError("top1_accuracy: predictions and labels differ in length");
    if (preds.empty())
        throw InputError("top1_accuracy: empty input");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i].argmax() == labels[i])
            ++correct;
    return static_cast<double>(correct) / static_cast<double>(preds.size());
}

}  // namespace tal
