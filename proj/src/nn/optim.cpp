#include "tal/nn/optim.hpp"

#include <cmath>
#include <numbers>

namespace tal::nn {

Adam::Adam(ParamList params, AdamOptions opts) : params_(std::move(params)), opts_(opts)
{
    for (const Param* p : params_) {
        m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
        v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    }
}

void Adam::step(double lr)
{
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Param& p = *params_[i];
        Mat g = p.grad;
        if (opts_.weight_decay != 0.0) {
            if (opts_.decoupled)
                p.value *= 1.0 - lr * opts_.weight_decay;
            else
                g += opts_.weight_decay * p.value;
        }
        m_[i] = opts_.beta1 * m_[i] + (1.0 - opts_.beta1) * g;
        v_[i] = opts_.beta2 * v_[i] + (1.0 - opts_.beta2) * g.cwiseProduct(g);
        p.value.array() -= lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + opts_.eps);
    }
}

double cosine_lr(double base, int epoch, int epochs)
{
    if (epochs <= 0)
        return base;
    return base * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / epochs));
}

}  // namespace tal::nn
