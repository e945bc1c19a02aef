#pragma once

#include <string>
#include <vector>

#include "tal/nn/layers.hpp"

namespace tal::nn {

/// Local-Global Temporal Encoder block.
///
/// Channels are split into `heads` groups. The first heads/2 groups attend
/// inside a window of `local_window` positions centred on the query (shifted
/// at the sequence borders so it always holds min(window, T) positions); the
/// remaining groups attend over the whole sequence. Queries/keys/values see
/// the input plus a sinusoidal position code. Post-norm residual layout:
///
///   z = LN1(x + Wo * attn(x + pe));  out = LN2(z + FFN(z))
class LGTE {
public:
    struct Cache {
        int window = 0;
        Conv1d::Cache qkv;
        Mat qkv_out;                 // 3C x T
        std::vector<Mat> attention;  // heads x (T x T), row = query
        Conv1d::Cache proj;
        LayerNorm::Cache norm1;
        Conv1d::Cache ffn1;
        Mat ffn_hidden;              // post-ReLU
        Conv1d::Cache ffn2;
        LayerNorm::Cache norm2;
    };

    LGTE() = default;
    LGTE(const std::string& name, int channels, int heads, int ffn_mult = 2);

    Mat forward(const Mat& x, int local_window, Cache* cache) const;
    Mat backward(const Mat& gy, Cache& cache);

    void init(Rng& rng);
    void collect(ParamList& out);

    int channels() const noexcept { return channels_; }
    int heads() const noexcept { return heads_; }
    int local_heads() const noexcept { return heads_ / 2; }

    /// First key position visible to `query` for a window of `window` on a
    /// length-T sequence.
    static int window_start(int query, int window, int T) noexcept;

private:
    int channels_ = 0;
    int heads_ = 1;
    Conv1d qkv_;
    Conv1d proj_;
    LayerNorm norm1_;
    Conv1d ffn1_;
    Conv1d ffn2_;
    LayerNorm norm2_;
};

}  // namespace tal::nn
