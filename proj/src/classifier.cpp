#include "tal/classifier.hpp"

#include <cmath>
#include <set>
#include <sstream>

#include "tal/error.hpp"
#include "tal/nn/optim.hpp"

namespace tal {

using Eigen::MatrixXd;
using Eigen::VectorXd;

void ClassifierConfig::validate() const
{
    auto fail = [](const char* field, const std::string& msg) { throw ConfigError("classifier", field, msg); };
    if (C_in < 1) fail("C_in", "must be >= 1");
    if (num_classes < 2) fail("num_classes", "must be >= 2");
    if (!(lr > 0.0)) fail("lr", "must be > 0");
    if (weight_decay < 0.0) fail("weight_decay", "must be >= 0");
    if (epochs < 0) fail("epochs", "must be >= 0");
}

int ClassScores::argmax() const
{
    Eigen::Index i = 0;
    probs.maxCoeff(&i);
    return static_cast<int>(i);
}

VectorXd ClassScores::foreground() const
{
    VectorXd fg = probs.head(probs.size() - 1);
    const double s = fg.sum();
    if (s > 0.0)
        fg /= s;
    else
        fg.setConstant(1.0 / static_cast<double>(fg.size()));
    return fg;
}

ClassScores softmax(const VectorXd& logits)
{
    const double m = logits.maxCoeff();
    VectorXd e = (logits.array() - m).exp();
    return {e / e.sum()};
}

VideoClassifier::VideoClassifier(const ClassifierConfig& cfg)
    : cfg_(cfg), weight_("cls.weight", cfg.num_classes, cfg.C_in), bias_("cls.bias", cfg.num_classes, 1)
{
    cfg_.validate();
    nn::Rng rng(cfg_.seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg_.C_in));
    nn::init_uniform(weight_, rng, bound);
    nn::init_uniform(bias_, rng, bound);
}

VectorXd VideoClassifier::logits(const VectorXd& pooled) const
{
    if (pooled.size() != cfg_.C_in)
        throw ShapeError("classifier: expected " + std::to_string(cfg_.C_in) + " channels, got " +
                         std::to_string(pooled.size()));
    return weight_.value * pooled + bias_.value.col(0);
}

ClassScores VideoClassifier::predict(const VideoRecord& v) const
{
    return softmax(logits(mean_pool(v.features)));
}

VectorXd mean_pool(const FeatureSequence& f)
{
    if (f.length() == 0)
        throw InputError("mean_pool: empty feature sequence");
    return f.data.cast<double>().rowwise().mean();
}

ClassifierTrainResult train_classifier(VideoClassifier& model, const std::vector<VideoRecord>& dataset,
                                       const TrainOptions& opts)
{
    if (dataset.empty())
        throw TrainingError("train_classifier: empty dataset");
    const ClassifierConfig& cfg = model.config();
    const auto n = static_cast<Eigen::Index>(dataset.size());

    MatrixXd X(cfg.C_in, n);
    std::vector<int> labels;
    std::set<int> distinct;
    for (Eigen::Index i = 0; i < n; ++i) {
        const VideoRecord& v = dataset[static_cast<std::size_t>(i)];
        if (v.features.channels() != cfg.C_in)
            throw ShapeError("train_classifier: video " + v.id + " has " + std::to_string(v.features.channels()) +
                             " channels");
        X.col(i) = mean_pool(v.features);
        const int y = v.video_label();
        if (y < 0 || y >= cfg.num_classes)
            throw InputError("train_classifier: label out of range in " + v.id);
        labels.push_back(y);
        distinct.insert(y);
    }
    if (distinct.size() == 1 && opts.log)
        opts.log("classifier: warning: training set holds a single class");

    nn::ParamList params = model.parameters();
    nn::Param& W = *params[0];
    nn::Param& b = *params[1];
    nn::Adam adam(params, {.lr = cfg.lr, .weight_decay = cfg.weight_decay, .decoupled = true});
    ClassifierTrainResult result;

    for (int step = 0; step < cfg.epochs; ++step) {
        MatrixXd logits = W.value * X;
        logits.colwise() += b.value.col(0);
        MatrixXd grad(logits.rows(), logits.cols());
        double loss = 0.0;
        for (Eigen::Index i = 0; i < n; ++i) {
            const ClassScores s = softmax(logits.col(i));
            const int y = labels[static_cast<std::size_t>(i)];
            loss -= std::log(std::max(s.probs(y), 1e-300));
            grad.col(i) = s.probs;
            grad(y, i) -= 1.0;
        }
        grad /= static_cast<double>(n);
        loss /= static_cast<double>(n);
        result.loss.push_back(loss);
        if (!std::isfinite(loss))
            throw TrainingError("train_classifier: non-finite loss at step " + std::to_string(step));
        W.grad = grad * X.transpose();
        b.grad = grad.rowwise().sum();
        if (!opts.freeze)
            adam.step();
    }
    if (opts.log && !result.loss.empty()) {
        std::ostringstream os;
        os << "classifier: " << cfg.epochs << " steps, final loss=" << result.loss.back();
        opts.log(os.str());
    }
    return result;
}

ClassScores predict_video(const VideoClassifier& model, const VideoRecord& v)
{
    return model.predict(v);
}

}  // namespace tal
