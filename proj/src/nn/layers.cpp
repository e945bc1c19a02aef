#include "tal/nn/layers.hpp"

#include <cmath>

#include "tal/error.hpp"

namespace tal::nn {

void zero_grads(const ParamList& params)
{
    for (Param* p : params)
        p->zero_grad();
}

std::size_t parameter_count(const ParamList& params)
{
    std::size_t n = 0;
    for (const Param* p : params)
        n += static_cast<std::size_t>(p->value.size());
    return n;
}

void init_uniform(Param& p, Rng& rng, double bound)
{
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index j = 0; j < p.value.cols(); ++j)
        for (Eigen::Index i = 0; i < p.value.rows(); ++i)
            p.value(i, j) = u(rng);
}

// ---------------------------------------------------------------------------

Conv1d::Conv1d(const std::string& name, int in, int out, int kernel)
    : weight(name + ".weight", out, static_cast<Eigen::Index>(in) * kernel),
      bias(name + ".bias", out, 1),
      in_(in),
      out_(out),
      kernel_(kernel)
{
    if (in < 1 || out < 1 || kernel < 1 || kernel % 2 == 0)
        throw InputError("Conv1d " + name + ": need positive channels and an odd kernel");
}

void Conv1d::init(Rng& rng)
{
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_) * kernel_);
    init_uniform(weight, rng, bound);
    init_uniform(bias, rng, bound);
}

void Conv1d::collect(ParamList& out)
{
    out.push_back(&weight);
    out.push_back(&bias);
}

Mat Conv1d::forward(const Mat& x, Cache* cache) const
{
    if (x.rows() != in_)
        throw ShapeError(weight.name + ": expected " + std::to_string(in_) + " input channels, got " +
                         std::to_string(x.rows()));
    const Eigen::Index T = x.cols();
    Mat y;
    if (kernel_ == 1) {
        y = weight.value * x;
        if (cache)
            cache->cols = x;
    } else {
        const int pad = kernel_ / 2;
        Mat cols = Mat::Zero(static_cast<Eigen::Index>(in_) * kernel_, T);
        for (int k = 0; k < kernel_; ++k) {
            const int shift = k - pad;
            const Eigen::Index t0 = std::max<Eigen::Index>(0, -shift);
            const Eigen::Index t1 = std::min<Eigen::Index>(T, T - shift);
            if (t1 > t0)
                cols.block(static_cast<Eigen::Index>(k) * in_, t0, in_, t1 - t0) = x.middleCols(t0 + shift, t1 - t0);
        }
        y = weight.value * cols;
        if (cache)
            cache->cols = std::move(cols);
    }
    y.colwise() += bias.value.col(0);
    return y;
}

Mat Conv1d::backward(const Mat& gy, const Cache& cache)
{
    weight.grad.noalias() += gy * cache.cols.transpose();
    bias.grad.col(0) += gy.rowwise().sum().transpose();
    Mat dcols = weight.value.transpose() * gy;
    if (kernel_ == 1)
        return dcols;

    const Eigen::Index T = gy.cols();
    const int pad = kernel_ / 2;
    Mat dx = Mat::Zero(in_, T);
    for (int k = 0; k < kernel_; ++k) {
        const int shift = k - pad;
        const Eigen::Index t0 = std::max<Eigen::Index>(0, -shift);
        const Eigen::Index t1 = std::min<Eigen::Index>(T, T - shift);
        if (t1 > t0)
            dx.middleCols(t0 + shift, t1 - t0) += dcols.block(static_cast<Eigen::Index>(k) * in_, t0, in_, t1 - t0);
    }
    return dx;
}

// ---------------------------------------------------------------------------

LayerNorm::LayerNorm(const std::string& name, int channels, double eps)
    : gamma(name + ".gamma", channels, 1), beta(name + ".beta", channels, 1), eps_(eps)
{
    gamma.value.setOnes();
}

void LayerNorm::collect(ParamList& out)
{
    out.push_back(&gamma);
    out.push_back(&beta);
}

Mat LayerNorm::forward(const Mat& x, Cache* cache) const
{
    const double c = static_cast<double>(x.rows());
    const Eigen::RowVectorXd mean = x.colwise().sum() / c;
    Mat xhat = x.rowwise() - mean;
    const Eigen::RowVectorXd var = xhat.array().square().colwise().sum() / c;
    const Eigen::RowVectorXd inv_std = (var.array() + eps_).rsqrt();
    xhat.array().rowwise() *= inv_std.array();
    Mat y = (xhat.array().colwise() * gamma.value.col(0).array()).colwise() + beta.value.col(0).array();
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->inv_std = inv_std;
    }
    return y;
}

Mat LayerNorm::backward(const Mat& gy, const Cache& cache)
{
    const Mat& xhat = cache.xhat;
    gamma.grad.col(0) += (gy.array() * xhat.array()).rowwise().sum().matrix();
    beta.grad.col(0) += gy.rowwise().sum();

    const double c = static_cast<double>(gy.rows());
    const Mat dxhat = gy.array().colwise() * gamma.value.col(0).array();
    const Eigen::RowVectorXd sum_d = dxhat.colwise().sum();
    const Eigen::RowVectorXd sum_dx = (dxhat.array() * xhat.array()).colwise().sum();
    Mat dx = (c * dxhat.array()).matrix();
    dx.rowwise() -= sum_d;
    dx.array() -= xhat.array().rowwise() * sum_dx.array();
    dx.array().rowwise() *= (cache.inv_std.array() / c);
    return dx;
}

// ---------------------------------------------------------------------------

Mat relu(const Mat& x)
{
    return x.cwiseMax(0.0);
}

Mat relu_backward(const Mat& gy, const Mat& y)
{
    return (y.array() > 0.0).select(gy, 0.0);
}

Mat sigmoid(const Mat& x)
{
    return x.unaryExpr([](double v) {
        // split on sign so exp never overflows
        if (v >= 0.0)
            return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
    });
}

Mat sigmoid_backward(const Mat& gy, const Mat& y)
{
    return (gy.array() * y.array() * (1.0 - y.array())).matrix();
}

Mat sinusoidal_positions(int channels, int length)
{
    Mat pe(channels, length);
    for (int c = 0; c < channels; ++c) {
        const double freq = std::pow(10000.0, -static_cast<double>(c - c % 2) / channels);
        for (int t = 0; t < length; ++t)
            pe(c, t) = c % 2 == 0 ? std::sin(t * freq) : std::cos(t * freq);
    }
    return pe;
}

}  // namespace tal::nn
