#pragma once

// TCANet-style refinement: a projection conv plus LGTE blocks encode the
// features at their native length N, then three Temporal Boundary Regressors
// refine proposals in cascade. Nothing in this module resamples features
// to a fixed length.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tal/domain.hpp"
#include "tal/featio.hpp"
#include "tal/nn/layers.hpp"
#include "tal/nn/lgte.hpp"
#include "tal/proposal_net.hpp"

namespace tal {

struct TCANetConfig {
    int C_in = 20;
    int C_hidden = 32;
    int num_lgte = 2;
    int lgte_heads = 4;
    int num_tbr = 3;
    int region_samples = 8;
    int tbr_hidden = 64;
    double region_ratio = 0.25;
    OptimizerConfig optimizer{"Adam", 0.0016, 1e-5};
    int batch_size = 64;
    int epochs = 10;
    std::string lr_policy = "cosine";
    double match_threshold = 0.5;
    int augment_per_proposal = 1;
    double augment_jitter = 0.1;
    int train_proposals = 64;  // BMN proposals kept per training video
    double w_offset = 1.0;
    double w_quality = 1.0;
    std::uint64_t seed = 1;

    void validate() const;
};

/// Smallest sequence the encoder accepts.
inline constexpr int kMinEncodeLength = 4;

struct TBROutput {
    double d_start = 0.0;  // fraction of proposal length
    double d_end = 0.0;
    double quality = 0.0;  // predicted tIoU
};

/// Start, centre and end regions of a proposal, clamped to [0, 1].
struct TBRRegions {
    Interval start;
    Interval center;
    Interval end;
};

TBRRegions tbr_regions(const Proposal& p, double ratio);

/// Shifts boundaries by offsets * length, clamps to [0, 1] and keeps at least
/// min(min_length, original length).
Proposal apply_offsets(const Proposal& p, const TBROutput& o, double min_length);

/// Records the temporal length of every intermediate the encoder produces.
struct ShapeTrace {
    std::vector<std::pair<std::string, int>> steps;
};

class TCANet {
public:
    struct EncoderCache {
        nn::Conv1d::Cache proj;
        Eigen::MatrixXd proj_out;
        std::vector<nn::LGTE::Cache> lgte;
    };

    struct TBRCache {
        int length = 0;
        std::vector<int> lo;
        std::vector<double> frac;  // per (proposal, region, sample)
        nn::Conv1d::Cache fc1;
        Eigen::MatrixXd hidden;
        nn::Conv1d::Cache offset, quality;
        Eigen::MatrixXd quality_out;
    };

    explicit TCANet(const TCANetConfig& cfg);

    /// features: C_in x N, N >= kMinEncodeLength. Returns C_hidden x N.
    Eigen::MatrixXd encode(const Eigen::MatrixXd& features, EncoderCache* cache, ShapeTrace* trace = nullptr) const;
    Eigen::MatrixXd encode_backward(const Eigen::MatrixXd& grad, EncoderCache& cache);

    std::vector<TBROutput> tbr_forward(int stage, const Eigen::MatrixXd& encoded, const std::vector<Proposal>& props,
                                       TBRCache* cache) const;
    /// d_offsets: 2 x n, d_quality: n. Returns the gradient w.r.t. the encoding.
    Eigen::MatrixXd tbr_backward(int stage, const Eigen::MatrixXd& d_offsets, const Eigen::VectorXd& d_quality,
                                 TBRCache& cache);

    nn::ParamList parameters();
    nn::ParamList encoder_parameters();
    nn::ParamList stage_parameters(int stage);
    /// Regression (offset) head of one stage.
    nn::ParamList offset_head_parameters(int stage);

    const TCANetConfig& config() const noexcept { return cfg_; }

private:
    struct Stage {
        nn::Conv1d fc1;
        nn::Conv1d offset;
        nn::Conv1d quality;
    };

    TCANetConfig cfg_;
    nn::Conv1d proj_;
    std::vector<nn::LGTE> lgte_;
    std::vector<Stage> stages_;
};

Eigen::MatrixXd encode_sequence(const TCANet& model, const FeatureSequence& features, ShapeTrace* trace = nullptr);

TBROutput tbr_forward(const TCANet& model, int stage, const Eigen::MatrixXd& encoded, const Proposal& p);

/// TBR1 -> TBR2 -> TBR3; each stage re-samples the encoding at the current
/// boundaries. Final score = input score * TBR3 quality.
std::vector<Proposal> refine_cascade(const TCANet& model, const Eigen::MatrixXd& encoded,
                                     const std::vector<Proposal>& proposals);

std::vector<Proposal> refine_video(const TCANet& model, const VideoRecord& video, const std::vector<Proposal>& proposals);

/// Originals followed by TBR1-refined copies; for per_proposal > 1, further
/// refined copies with boundaries jittered uniformly within +-jitter*length.
std::vector<Proposal> augment_with_tbr1(const TCANet& model, const Eigen::MatrixXd& encoded,
                                        const std::vector<Proposal>& proposals, int per_proposal, nn::Rng& rng);

struct TCATrainResult {
    std::vector<double> epoch_loss;
    std::vector<double> epoch_offset_loss;  // stage-1 smooth-L1, matched proposals
    std::vector<double> epoch_lr;
    long steps = 0;
    long skipped_batches = 0;
};

/// bmn_proposals[i] are the proposals of dataset[i].
TCATrainResult train_tcanet(TCANet& model, const std::vector<VideoRecord>& dataset,
                            const std::vector<std::vector<Proposal>>& bmn_proposals, const TrainOptions& opts = {});


/// Per-proposal supervision: best-matching ground truth (normalized time),
/// its tIoU, and normalized offsets towards it.
struct TBRTargets {
    std::vector<double> iou;
    std::vector<bool> matched;  // iou >= match_threshold
    Eigen::MatrixXd offsets;    // 2 x n
};

TBRTargets tbr_targets(const std::vector<Proposal>& props, const std::vector<Interval>& gts, double match_threshold);

/// Stage-1 loss (smooth-L1 offsets on matched proposals + quality MSE) of a
/// single video. With backprop, gradients accumulate into the parameters.
double tbr_stage1_loss(TCANet& model, const VideoRecord& video, const std::vector<Proposal>& props, bool backprop);

}  // namespace tal
