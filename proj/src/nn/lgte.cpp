#include "tal/nn/lgte.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tal/error.hpp"

namespace tal::nn {

LGTE::LGTE(const std::string& name, int channels, int heads, int ffn_mult)
    : channels_(channels),
      heads_(heads),
      qkv_(name + ".qkv", channels, 3 * channels, 1),
      proj_(name + ".proj", channels, channels, 1),
      norm1_(name + ".norm1", channels),
      ffn1_(name + ".ffn1", channels, ffn_mult * channels, 1),
      ffn2_(name + ".ffn2", ffn_mult * channels, channels, 1),
      norm2_(name + ".norm2", channels)
{
    if (heads < 1 || channels % heads != 0)
        throw ConfigError("lgte", "heads", "channels (" + std::to_string(channels) +
                                               ") must be divisible by heads (" + std::to_string(heads) + ")");
}

void LGTE::init(Rng& rng)
{
    qkv_.init(rng);
    proj_.init(rng);
    ffn1_.init(rng);
    ffn2_.init(rng);
}

void LGTE::collect(ParamList& out)
{
    qkv_.collect(out);
    proj_.collect(out);
    norm1_.collect(out);
    ffn1_.collect(out);
    ffn2_.collect(out);
    norm2_.collect(out);
}

int LGTE::window_start(int query, int window, int T) noexcept
{
    const int w = std::clamp(window, 1, T);
    return std::clamp(query - w / 2, 0, T - w);
}

Mat LGTE::forward(const Mat& x, int local_window, Cache* cache) const
{
    if (x.rows() != channels_)
        throw ShapeError("LGTE: expected " + std::to_string(channels_) + " channels, got " + std::to_string(x.rows()));
    if (local_window < 1)
        throw InputError("LGTE: local window must be >= 1");
    const int T = static_cast<int>(x.cols());
    const int hd = channels_ / heads_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    const Mat xp = x + sinusoidal_positions(channels_, T);
    Mat qkv = qkv_.forward(xp, cache ? &cache->qkv : nullptr);

    Mat attended(channels_, T);
    std::vector<Mat> attn(cache ? heads_ : 0);
    for (int h = 0; h < heads_; ++h) {
        const auto q = qkv.middleRows(static_cast<Eigen::Index>(h) * hd, hd);
        const auto k = qkv.middleRows(static_cast<Eigen::Index>(channels_) + h * hd, hd);
        const auto v = qkv.middleRows(2 * static_cast<Eigen::Index>(channels_) + h * hd, hd);
        Mat a = (q.transpose() * k) * scale;  // T x T
        const bool local = h < local_heads();
        for (int i = 0; i < T; ++i) {
            int lo = 0, hi = T;
            if (local) {
                lo = window_start(i, local_window, T);
                hi = lo + std::min(local_window, T);
            }
            const double mx = a.row(i).segment(lo, hi - lo).maxCoeff();
            double sum = 0.0;
            for (int j = 0; j < T; ++j) {
                const double e = (j >= lo && j < hi) ? std::exp(a(i, j) - mx) : 0.0;
                a(i, j) = e;
                sum += e;
            }
            a.row(i) /= sum;
        }
        attended.middleRows(static_cast<Eigen::Index>(h) * hd, hd).noalias() = v * a.transpose();
        if (cache)
            attn[h] = std::move(a);
    }

    const Mat z1 = x + proj_.forward(attended, cache ? &cache->proj : nullptr);
    const Mat n1 = norm1_.forward(z1, cache ? &cache->norm1 : nullptr);
    Mat hidden = relu(ffn1_.forward(n1, cache ? &cache->ffn1 : nullptr));
    const Mat z2 = n1 + ffn2_.forward(hidden, cache ? &cache->ffn2 : nullptr);
    Mat out = norm2_.forward(z2, cache ? &cache->norm2 : nullptr);

    if (cache) {
        cache->window = local_window;
        cache->qkv_out = std::move(qkv);
        cache->attention = std::move(attn);
        cache->ffn_hidden = std::move(hidden);
    }
    return out;
}

Mat LGTE::backward(const Mat& gy, Cache& cache)
{
    const int T = static_cast<int>(gy.cols());
    const int hd = channels_ / heads_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

    const Mat dz2 = norm2_.backward(gy, cache.norm2);
    const Mat dhidden = relu_backward(ffn2_.backward(dz2, cache.ffn2), cache.ffn_hidden);
    const Mat dn1 = dz2 + ffn1_.backward(dhidden, cache.ffn1);
    const Mat dz1 = norm1_.backward(dn1, cache.norm1);
    const Mat dattended = proj_.backward(dz1, cache.proj);

    const Mat& qkv = cache.qkv_out;
    Mat dqkv(3 * channels_, T);
    for (int h = 0; h < heads_; ++h) {
        const auto q = qkv.middleRows(static_cast<Eigen::Index>(h) * hd, hd);
        const auto k = qkv.middleRows(static_cast<Eigen::Index>(channels_) + h * hd, hd);
        const auto v = qkv.middleRows(2 * static_cast<Eigen::Index>(channels_) + h * hd, hd);
        const Mat& a = cache.attention[h];
        const auto dy = dattended.middleRows(static_cast<Eigen::Index>(h) * hd, hd);

        dqkv.middleRows(2 * static_cast<Eigen::Index>(channels_) + h * hd, hd).noalias() = dy * a;
        Mat ds = dy.transpose() * v;  // dA, T x T
        const Eigen::VectorXd row_dot = (ds.array() * a.array()).rowwise().sum();
        ds = (a.array() * (ds.array().colwise() - row_dot.array())).matrix();
        dqkv.middleRows(static_cast<Eigen::Index>(h) * hd, hd).noalias() = scale * (k * ds.transpose());
        dqkv.middleRows(static_cast<Eigen::Index>(channels_) + h * hd, hd).noalias() = scale * (q * ds);
    }
    return dz1 + qkv_.backward(dqkv, cache.qkv);
}

}  // namespace tal::nn
