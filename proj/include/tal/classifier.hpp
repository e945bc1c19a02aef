#pragma once

// Video-level classifier: temporal mean pooling + linear layer + softmax over
// foreground classes and background (last index).

#include <cstdint>
#include <vector>

#include <Eigen/Dense>

#include "tal/featio.hpp"
#include "tal/nn/layers.hpp"
#include "tal/proposal_net.hpp"

namespace tal {

struct ClassifierConfig {
    int C_in = 20;
    int num_classes = 11;  // including background
    double lr = 0.05;
    double weight_decay = 0.0;
    int epochs = 300;      // full-batch Adam steps
    std::uint64_t seed = 1;

    void validate() const;
};

struct ClassScores {
    Eigen::VectorXd probs;

    int argmax() const;
    /// Foreground probabilities renormalized to sum to one (background dropped).
    Eigen::VectorXd foreground() const;
};

/// Numerically stable softmax.
ClassScores softmax(const Eigen::VectorXd& logits);

class VideoClassifier {
public:
    explicit VideoClassifier(const ClassifierConfig& cfg);

    Eigen::VectorXd logits(const Eigen::VectorXd& pooled) const;
    ClassScores predict(const VideoRecord& v) const;

    nn::ParamList parameters() { return {&weight_, &bias_}; }
    const ClassifierConfig& config() const noexcept { return cfg_; }

private:
    ClassifierConfig cfg_;
    nn::Param weight_;  // num_classes x C_in
    nn::Param bias_;    // num_classes x 1
};

Eigen::VectorXd mean_pool(const FeatureSequence& f);

struct ClassifierTrainResult {
    std::vector<double> loss;  // per step
};

ClassifierTrainResult train_classifier(VideoClassifier& model, const std::vector<VideoRecord>& dataset,
                                       const TrainOptions& opts = {});

ClassScores predict_video(const VideoClassifier& model, const VideoRecord& v);

}  // namespace tal
