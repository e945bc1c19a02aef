#pragma once

// Minimal reverse-mode building blocks over C x T matrices (channels x time).
//
// Layers are const during forward; anything backward needs is written into a
// caller-owned Cache, so one model can serve concurrent read-only inference.
// backward() accumulates into Param::grad and returns the input gradient.

#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace tal::nn {

using Mat = Eigen::MatrixXd;
using Rng = std::mt19937_64;

struct Param {
    std::string name;
    Mat value;
    Mat grad;

    Param() = default;
    Param(std::string n, Eigen::Index rows, Eigen::Index cols)
        : name(std::move(n)), value(Mat::Zero(rows, cols)), grad(Mat::Zero(rows, cols)) {}

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

using ParamList = std::vector<Param*>;

void zero_grads(const ParamList& params);
std::size_t parameter_count(const ParamList& params);

/// Uniform(-bound, bound) entries.
void init_uniform(Param& p, Rng& rng, double bound);

/// 1-D convolution along time with zero "same" padding (odd kernel).
class Conv1d {
public:
    struct Cache {
        Mat cols;  // (in * kernel) x T, or the raw input when kernel == 1
    };

    Conv1d() = default;
    Conv1d(const std::string& name, int in, int out, int kernel);

    Mat forward(const Mat& x, Cache* cache) const;
    Mat backward(const Mat& gy, const Cache& cache);

    /// PyTorch-style default: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
    void init(Rng& rng);
    void collect(ParamList& out);

    int in_channels() const noexcept { return in_; }
    int out_channels() const noexcept { return out_; }
    int kernel() const noexcept { return kernel_; }

    Param weight;  // out x (in * kernel), column block k multiplies tap k
    Param bias;    // out x 1

private:
    int in_ = 0;
    int out_ = 0;
    int kernel_ = 1;
};

/// Normalizes every column (time step) across channels.
class LayerNorm {
public:
    struct Cache {
        Mat xhat;
        Eigen::RowVectorXd inv_std;
    };

    LayerNorm() = default;
    LayerNorm(const std::string& name, int channels, double eps = 1e-5);

    Mat forward(const Mat& x, Cache* cache) const;
    Mat backward(const Mat& gy, const Cache& cache);
    void collect(ParamList& out);

    Param gamma;
    Param beta;

private:
    double eps_ = 1e-5;
};

Mat relu(const Mat& x);
Mat relu_backward(const Mat& gy, const Mat& y);
Mat sigmoid(const Mat& x);
Mat sigmoid_backward(const Mat& gy, const Mat& y);

/// Fixed sinusoidal position code, channels x length.
Mat sinusoidal_positions(int channels, int length);

}  // namespace tal::nn
