#pragma once

// BMN-style dense proposal generator.
//
//   base:  conv3(C_in->H) relu [LGTE] conv3(H->H) relu [LGTE] ...
//   TEM:   conv3(H->H) relu conv1(H->2) sigmoid            -> start/end probabilities
//   PEM:   conv3(H->Hp) relu -> BM sampler (K points per grid entry, learned
//          Hp*K -> P reduction) relu -> conv1(P->P) relu -> conv1(P->2) sigmoid
//
// Only PEM feeds proposal scores; TEM is trained as an auxiliary task.

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tal/domain.hpp"
#include "tal/featio.hpp"
#include "tal/nn/layers.hpp"
#include "tal/nn/lgte.hpp"

namespace tal {

struct OptimizerConfig {
    std::string name;
    double lr = 0.0;
    double weight_decay = 0.0;
};

struct BMNConfig {
    int L = 200;
    int D = 0;  // 0 -> L / 2
    int C_in = 20;
    int C_hidden = 32;
    int num_lgte = 2;
    int lgte_heads = 4;
    int lgte_window = 0;  // 0 -> ceil(L / 10)
    int K = 32;
    int pem_channels = 16;
    int map_channels = 16;
    double pos_threshold = 0.7;
    double w_cls = 1.0;
    double w_reg = 10.0;
    double w_tem = 1.0;
    OptimizerConfig optimizer{"AdamW", 1e-3, 1e-5};
    int batch_size = 128;
    int epochs = 10;
    std::uint64_t seed = 1;

    int max_duration() const noexcept { return D > 0 ? D : std::max(1, L / 2); }
    int window() const noexcept { return lgte_window > 0 ? lgte_window : (L + 9) / 10; }
    BMGridSpec grid() const noexcept { return {L, max_duration()}; }
    void validate() const;
};

/// D x T maps; row d-1 holds duration d.
struct BMConfidenceMap {
    Eigen::MatrixXd cls;
    Eigen::MatrixXd reg;
    Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> valid;

    int durations() const noexcept { return static_cast<int>(cls.rows()); }
    int positions() const noexcept { return static_cast<int>(cls.cols()); }
};

struct TEMOutput {
    Eigen::VectorXd start_prob;
    Eigen::VectorXd end_prob;
};

struct BMNOutput {
    TEMOutput tem;
    BMConfidenceMap map;
};

/// Precomputed interpolation taps for the boundary-matching sampler. Valid
/// entries are ordered duration-major; point k of entry (d, t) sits at clip
/// coordinate t - 0.5 + d * (k + 0.5) / K (clip i centred at i).
struct BMSampler {
    int T = 0;
    int D = 0;
    int K = 0;
    std::vector<int> entry_d;
    std::vector<int> entry_t;
    std::vector<int> lo;        // E*K, entry-major
    std::vector<double> frac;   // weight of lo + 1

    static BMSampler build(BMGridSpec grid, int K);
    int entries() const noexcept { return static_cast<int>(entry_d.size()); }
};

class BMN {
public:
    struct Cache {
        Eigen::MatrixXd input;
        std::vector<nn::Conv1d::Cache> conv;
        std::vector<nn::LGTE::Cache> lgte;
        std::vector<Eigen::MatrixXd> relu_out;
        Eigen::MatrixXd tem_hidden;
        nn::Conv1d::Cache tem1, tem2;
        Eigen::MatrixXd tem_out;
        nn::Conv1d::Cache pem1;
        Eigen::MatrixXd pem_feat;   // Hp x T
        Eigen::MatrixXd sampled;    // P x E, post-ReLU
        nn::Conv1d::Cache map1, map2;
        Eigen::MatrixXd map_hidden; // P x E, post-ReLU
        Eigen::MatrixXd map_out;    // 2 x E, post-sigmoid
    };

    /// Gradient of a scalar loss w.r.t. the outputs.
    struct OutputGrad {
        Eigen::VectorXd cls;    // E, valid-entry order
        Eigen::VectorXd reg;    // E
        Eigen::VectorXd start;  // T
        Eigen::VectorXd end;    // T
    };

    explicit BMN(const BMNConfig& cfg);

    /// x is C_in x L (already resized).
    BMNOutput forward(const Eigen::MatrixXd& x, Cache* cache) const;
    void backward(const OutputGrad& g, Cache& cache);

    nn::ParamList parameters();
    nn::ParamList tem_parameters();

    const BMNConfig& config() const noexcept { return cfg_; }
    const BMSampler& sampler() const noexcept { return sampler_; }
    std::size_t parameter_count() { return nn::parameter_count(parameters()); }

private:
    BMNConfig cfg_;
    BMSampler sampler_;
    std::vector<nn::Conv1d> base_;
    std::vector<nn::LGTE> lgte_;
    std::vector<int> lgte_after_;  // base conv index each LGTE follows
    nn::Conv1d tem1_, tem2_;
    nn::Conv1d pem1_;
    nn::Param sample_w_;  // P x (Hp * K), block k multiplies tap k
    nn::Param sample_b_;  // P x 1
    nn::Conv1d map1_, map2_;
};

/// Dense IoU supervision: entry (d, t) = max over segments of tiou with
/// [t/T, (t+d)/T]; zero outside the validity mask or without annotations.
Eigen::MatrixXd bm_label_map(const std::vector<SegmentAnnotation>& annotations, BMGridSpec grid,
                             double duration_sec);

/// Boundary targets for TEM: overlap ratio of each position's anchor
/// [(t-0.5)/T, (t+0.5)/T] with a 3-position region around every start / end.
TEMOutput tem_labels(const std::vector<SegmentAnnotation>& annotations, int T, double duration_sec);

struct BMNTargets {
    Eigen::MatrixXd iou;  // D x T
    TEMOutput boundary;
};

BMNTargets bmn_targets(const std::vector<SegmentAnnotation>& annotations, const BMNConfig& cfg,
                       double duration_sec);

struct BMNLoss {
    double cls = 0.0;
    double reg = 0.0;
    double tem = 0.0;
    double total = 0.0;
};

/// Weighted loss of one video; fills `grad` (scaled by `grad_scale`) when given.
BMNLoss bmn_loss(const BMNOutput& out, const BMNTargets& targets, const BMNConfig& cfg,
                 BMN::OutputGrad* grad = nullptr, double grad_scale = 1.0);

struct TrainOptions {
    bool freeze = false;  // run everything but the optimizer update
    std::function<void(const std::string&)> log;
};

struct TrainResult {
    std::vector<double> epoch_loss;  // mean per-sample loss
    long steps = 0;
    long skipped_batches = 0;
};

/// Minibatch AdamW over whole videos resized to cfg.L.
TrainResult train_bmn(BMN& model, const std::vector<VideoRecord>& dataset, const TrainOptions& opts = {});

BMConfidenceMap predict_map(const BMN& model, const VideoRecord& video);

/// Valid entries scored cls * reg, sorted descending (stable), first top_k.
std::vector<Proposal> proposals_from_map(const BMConfidenceMap& map, int top_k);

std::vector<Proposal> infer_proposals(const BMN& model, const VideoRecord& video, int top_k);

/// Element-wise mean of cls and reg; shapes and validity masks must agree.
BMConfidenceMap ensemble_maps(const std::vector<BMConfidenceMap>& maps);

}  // namespace tal
