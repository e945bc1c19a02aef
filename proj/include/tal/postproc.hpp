#pragma once

// Gaussian Soft-NMS, proposal x class score fusion and per-video detection
// assembly.

#include <vector>

#include "tal/classifier.hpp"
#include "tal/domain.hpp"

namespace tal {

/// Decay kicks in when tIoU with the selected proposal exceeds
/// low + (high - low) * (selected proposal's normalized length).
struct SoftNMSParams {
    double low = 0.25;
    double high = 0.9;
    double alpha = 0.4;
    int max_out = 100;

    void validate() const;
    double threshold(double width) const noexcept { return low + (high - low) * width; }
};

std::vector<Proposal> soft_nms(const std::vector<Proposal>& proposals, const SoftNMSParams& params);

/// One detection per (proposal, class) for the top_classes most probable
/// foreground classes, score = proposal score * class score, times in seconds.
std::vector<DetectionResult> fuse_scores(const std::vector<Proposal>& proposals, const ClassScores& scores,
                                         int top_classes, double duration_sec);

struct PostprocConfig {
    SoftNMSParams softnms;
    int top_classes = 2;
    int max_detections = 100;

    void validate() const;
};

/// soft_nms -> fuse_scores -> keep the max_detections best.
std::vector<DetectionResult> assemble_detections(const std::vector<Proposal>& proposals, const ClassScores& scores,
                                                 double duration_sec, const PostprocConfig& cfg);

}  // namespace tal
