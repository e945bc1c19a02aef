#pragma once

#include "tal/nn/layers.hpp"

namespace tal::nn {

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    /// true: AdamW (decay applied to the weights directly);
    /// false: classic Adam (decay folded into the gradient as L2).
    bool decoupled = false;
};

class Adam {
public:
    Adam(ParamList params, AdamOptions opts);

    /// One update with the given learning rate; gradients are left untouched.
    void step(double lr);
    void step() { step(opts_.lr); }

    const AdamOptions& options() const noexcept { return opts_; }
    long steps_taken() const noexcept { return t_; }

private:
    ParamList params_;
    AdamOptions opts_;
    std::vector<Mat> m_;
    std::vector<Mat> v_;
    long t_ = 0;
};

/// Per-epoch cosine decay: base * (1 + cos(pi * epoch / epochs)) / 2.
double cosine_lr(double base, int epoch, int epochs);

}  // namespace tal::nn
