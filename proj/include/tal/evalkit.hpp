#pragma once

// Detection metrics: interpolated AP with greedy matching, mAP over tIoU
// thresholds, top-1 accuracy, and a brute-force AP used to certify the fast
// evaluator.

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tal/classifier.hpp"
#include "tal/domain.hpp"

namespace tal {

struct EvalProtocol {
    std::vector<double> tiou_thresholds = {0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95};
    int max_detections_per_video = 100;

    void validate() const;
};

struct VideoDetection {
    std::string video_id;
    DetectionResult det;
};

struct VideoGroundTruth {
    std::string video_id;
    SegmentAnnotation gt;
};

/// AP of one class at one threshold. Detections are ranked by score (stable);
/// each takes the unmatched ground truth of its video with the highest tIoU
/// >= tiou_thr. Returns nullopt when the class has no ground truth.
std::optional<double> average_precision(const std::vector<VideoDetection>& dets,
                                        const std::vector<VideoGroundTruth>& gts, int label, double tiou_thr);

/// Single-video convenience overload.
std::optional<double> average_precision(const std::vector<DetectionResult>& dets,
                                        const std::vector<SegmentAnnotation>& gts, int label, double tiou_thr);

inline constexpr std::size_t kOracleMaxDetections = 20;
inline constexpr std::size_t kOracleMaxGroundTruths = 10;

/// Definitional AP: replays the matching for every ranked prefix and sums,
/// over true positives, the best precision reachable at that recall or later.
/// Refuses instances larger than the limits above with InputError.
std::optional<double> oracle_average_precision(const std::vector<VideoDetection>& dets,
                                               const std::vector<VideoGroundTruth>& gts, int label,
                                               double tiou_thr);

struct MeanAPResult {
    std::vector<double> per_threshold;
    double average = 0.0;
    std::map<int, double> per_class;  // averaged over thresholds
};

/// Throws InputError if gts is empty.
MeanAPResult mean_ap(const std::vector<VideoDetection>& dets, const std::vector<VideoGroundTruth>& gts,
                     const EvalProtocol& protocol = {});

double top1_accuracy(const std::vector<ClassScores>& preds, const std::vector<int>& labels);

}  // namespace tal
