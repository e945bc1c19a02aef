#include "tal/refine_net.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "tal/error.hpp"
#include "tal/nn/optim.hpp"

namespace tal {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using nn::Mat;

void TCANetConfig::validate() const
{
    auto fail = [](const char* field, const std::string& msg) { throw ConfigError("tcanet", field, msg); };
    if (C_in < 1) fail("C_in", "must be >= 1");
    if (C_hidden < 1) fail("C_hidden", "must be >= 1");
    if (num_lgte < 0) fail("num_lgte", "must be >= 0");
    if (lgte_heads < 1 || C_hidden % lgte_heads != 0) fail("lgte_heads", "must divide C_hidden");
    if (num_tbr != 3) fail("num_tbr", "the cascade has exactly 3 stages");
    if (region_samples < 1) fail("region_samples", "must be >= 1");
    if (tbr_hidden < 1) fail("tbr_hidden", "must be >= 1");
    if (!(region_ratio > 0.0)) fail("region_ratio", "must be > 0");
    if (optimizer.name != "Adam" && optimizer.name != "AdamW") fail("optimizer", "name must be Adam or AdamW");
    if (!(optimizer.lr > 0.0)) fail("optimizer", "lr must be > 0");
    if (optimizer.weight_decay < 0.0) fail("optimizer", "weight_decay must be >= 0");
    if (batch_size < 1) fail("batch_size", "must be >= 1");
    if (epochs < 0) fail("epochs", "must be >= 0");
    if (lr_policy != "cosine" && lr_policy != "constant") fail("lr_policy", "must be cosine or constant");
    if (!(match_threshold > 0.0 && match_threshold <= 1.0)) fail("match_threshold", "must be in (0, 1]");
    if (augment_per_proposal < 1) fail("augment_per_proposal", "must be >= 1");
    if (augment_jitter < 0.0) fail("augment_jitter", "must be >= 0");
    if (train_proposals < 1) fail("train_proposals", "must be >= 1");
}

TBRRegions tbr_regions(const Proposal& p, double ratio)
{
    const double ext = ratio * (p.end - p.start);
    auto clamp01 = [](double lo, double hi) { return Interval{std::clamp(lo, 0.0, 1.0), std::clamp(hi, 0.0, 1.0)}; };
    return {clamp01(p.start - ext, p.start + ext), clamp01(p.start, p.end), clamp01(p.end - ext, p.end + ext)};
}

Proposal apply_offsets(const Proposal& p, const TBROutput& o, double min_length)
{
    const double len = p.end - p.start;
    Proposal r = p;
    r.start = std::clamp(p.start + o.d_start * len, 0.0, 1.0);
    r.end = std::clamp(p.end + o.d_end * len, 0.0, 1.0);
    const double floor_len = std::min(min_length, len);
    if (r.end - r.start < floor_len) {
        const double centre = std::clamp(0.5 * (r.start + r.end), 0.5 * floor_len, 1.0 - 0.5 * floor_len);
        r.start = centre - 0.5 * floor_len;
        r.end = centre + 0.5 * floor_len;
    }
    return r;
}

// ---------------------------------------------------------------------------

TCANet::TCANet(const TCANetConfig& cfg) : cfg_(cfg)
{
    cfg_.validate();
    const int H = cfg_.C_hidden;
    proj_ = nn::Conv1d("tca.proj", cfg_.C_in, H, 3);
    for (int i = 0; i < cfg_.num_lgte; ++i)
        lgte_.emplace_back("tca.lgte" + std::to_string(i), H, cfg_.lgte_heads);
    const int in = 3 * cfg_.region_samples * H;
    for (int s = 0; s < cfg_.num_tbr; ++s) {
        const std::string n = "tca.tbr" + std::to_string(s + 1);
        stages_.push_back({nn::Conv1d(n + ".fc1", in, cfg_.tbr_hidden, 1), nn::Conv1d(n + ".offset", cfg_.tbr_hidden, 2, 1),
                           nn::Conv1d(n + ".quality", cfg_.tbr_hidden, 1, 1)});
    }

    nn::Rng rng(cfg_.seed);
    proj_.init(rng);
    for (auto& l : lgte_) l.init(rng);
    for (auto& st : stages_) {
        st.fc1.init(rng);
        st.offset.init(rng);
        st.quality.init(rng);
        // start every regressor at the identity
        st.offset.weight.value *= 0.1;
        st.offset.bias.value.setZero();
    }
}

nn::ParamList TCANet::encoder_parameters()
{
    nn::ParamList out;
    proj_.collect(out);
    for (auto& l : lgte_) l.collect(out);
    return out;
}

nn::ParamList TCANet::stage_parameters(int stage)
{
    nn::ParamList out;
    auto& st = stages_.at(static_cast<std::size_t>(stage));
    st.fc1.collect(out);
    st.offset.collect(out);
    st.quality.collect(out);
    return out;
}

nn::ParamList TCANet::offset_head_parameters(int stage)
{
    nn::ParamList out;
    stages_.at(static_cast<std::size_t>(stage)).offset.collect(out);
    return out;
}

nn::ParamList TCANet::parameters()
{
    nn::ParamList out = encoder_parameters();
    for (int s = 0; s < cfg_.num_tbr; ++s) {
        const auto st = stage_parameters(s);
        out.insert(out.end(), st.begin(), st.end());
    }
    return out;
}

MatrixXd TCANet::encode(const MatrixXd& features, EncoderCache* cache, ShapeTrace* trace) const
{
    const int N = static_cast<int>(features.cols());
    if (N < kMinEncodeLength)
        throw InputError("TCANet: sequence too short (" + std::to_string(N) + " < " +
                         std::to_string(kMinEncodeLength) + " clips)");
    if (features.rows() != cfg_.C_in)
        throw ShapeError("TCANet: expected " + std::to_string(cfg_.C_in) + " channels, got " +
                         std::to_string(features.rows()));
    auto record = [&](const char* step, const Mat& m) {
        if (trace)
            trace->steps.emplace_back(step, static_cast<int>(m.cols()));
    };
    record("input", features);
    Mat h = nn::relu(proj_.forward(features, cache ? &cache->proj : nullptr));
    record("proj", h);
    if (cache) {
        cache->proj_out = h;
        cache->lgte.assign(lgte_.size(), {});
    }
    const int window = (N + 9) / 10;
    for (std::size_t i = 0; i < lgte_.size(); ++i) {
        h = lgte_[i].forward(h, window, cache ? &cache->lgte[i] : nullptr);
        record("lgte", h);
    }
    return h;
}

MatrixXd TCANet::encode_backward(const MatrixXd& grad, EncoderCache& cache)
{
    Mat g = grad;
    for (int i = static_cast<int>(lgte_.size()) - 1; i >= 0; --i)
        g = lgte_[static_cast<std::size_t>(i)].backward(g, cache.lgte[static_cast<std::size_t>(i)]);
    return proj_.backward(nn::relu_backward(g, cache.proj_out), cache.proj);
}

std::vector<TBROutput> TCANet::tbr_forward(int stage, const MatrixXd& encoded, const std::vector<Proposal>& props,
                                           TBRCache* cache) const
{
    const auto& st = stages_.at(static_cast<std::size_t>(stage));
    const int N = static_cast<int>(encoded.cols());
    const int H = static_cast<int>(encoded.rows());
    const int R = cfg_.region_samples;
    const auto n = static_cast<Eigen::Index>(props.size());
    if (n == 0)
        return {};

    Mat x(3 * R * H, n);
    std::vector<int> lo_idx;
    std::vector<double> fracs;
    lo_idx.reserve(static_cast<std::size_t>(n) * 3 * R);
    fracs.reserve(lo_idx.capacity());
    for (Eigen::Index i = 0; i < n; ++i) {
        const Proposal& p = props[static_cast<std::size_t>(i)];
        if (!(p.end > p.start))
            throw InputError("tbr_forward: malformed proposal");
        const TBRRegions reg = tbr_regions(p, cfg_.region_ratio);
        const Interval regions[3] = {reg.start, reg.center, reg.end};
        for (int r = 0; r < 3; ++r) {
            for (int s = 0; s < R; ++s) {
                const double u = regions[r].start + (regions[r].end - regions[r].start) * (s + 0.5) / R;
                const double pos = std::clamp(u * N - 0.5, 0.0, N - 1.0);
                const int lo = std::min(static_cast<int>(std::floor(pos)), N - 2);
                const double f = pos - lo;
                lo_idx.push_back(lo);
                fracs.push_back(f);
                x.block(static_cast<Eigen::Index>(r * R + s) * H, i, H, 1) =
                    (1.0 - f) * encoded.col(lo) + f * encoded.col(lo + 1);
            }
        }
    }

    Mat hidden = nn::relu(st.fc1.forward(x, cache ? &cache->fc1 : nullptr));
    const Mat off = st.offset.forward(hidden, cache ? &cache->offset : nullptr);
    Mat q = nn::sigmoid(st.quality.forward(hidden, cache ? &cache->quality : nullptr));

    std::vector<TBROutput> out(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i)
        out[static_cast<std::size_t>(i)] = {off(0, i), off(1, i), q(0, i)};
    if (cache) {
        cache->length = N;
        cache->lo = std::move(lo_idx);
        cache->frac = std::move(fracs);
        cache->hidden = std::move(hidden);
        cache->quality_out = std::move(q);
    }
    return out;
}

MatrixXd TCANet::tbr_backward(int stage, const MatrixXd& d_offsets, const VectorXd& d_quality, TBRCache& cache)
{
    auto& st = stages_.at(static_cast<std::size_t>(stage));
    const int H = cfg_.C_hidden;
    const int R = cfg_.region_samples;
    const Eigen::Index n = d_offsets.cols();

    Mat dhidden = st.offset.backward(d_offsets, cache.offset);
    dhidden += st.quality.backward(nn::sigmoid_backward(d_quality.transpose(), cache.quality_out), cache.quality);
    const Mat dx = st.fc1.backward(nn::relu_backward(dhidden, cache.hidden), cache.fc1);

    Mat denc = Mat::Zero(H, cache.length);
    std::size_t idx = 0;
    for (Eigen::Index i = 0; i < n; ++i)
        for (int rs = 0; rs < 3 * R; ++rs, ++idx) {
            const int lo = cache.lo[idx];
            const double f = cache.frac[idx];
            const auto g = dx.block(static_cast<Eigen::Index>(rs) * H, i, H, 1);
            denc.col(lo) += (1.0 - f) * g;
            denc.col(lo + 1) += f * g;
        }
    return denc;
}

// ---------------------------------------------------------------------------

MatrixXd encode_sequence(const TCANet& model, const FeatureSequence& features, ShapeTrace* trace)
{
    return model.encode(features.data.cast<double>(), nullptr, trace);
}

TBROutput tbr_forward(const TCANet& model, int stage, const MatrixXd& encoded, const Proposal& p)
{
    return model.tbr_forward(stage, encoded, {p}, nullptr).front();
}

namespace {

std::vector<Proposal> apply_stage(const std::vector<Proposal>& props, const std::vector<TBROutput>& outs,
                                  double min_length, Stage tag)
{
    std::vector<Proposal> r;
    r.reserve(props.size());
    for (std::size_t i = 0; i < props.size(); ++i) {
        Proposal p = apply_offsets(props[i], outs[i], min_length);
        p.stage = tag;
        r.push_back(p);
    }
    return r;
}

constexpr Stage kStageTags[3] = {Stage::TBR1, Stage::TBR2, Stage::TBR3};

}  // namespace

std::vector<Proposal> refine_cascade(const TCANet& model, const MatrixXd& encoded, const std::vector<Proposal>& proposals)
{
    if (proposals.empty())
        return {};
    const double min_len = 1.0 / static_cast<double>(encoded.cols());
    std::vector<Proposal> cur = proposals;
    std::vector<TBROutput> outs;
    for (int s = 0; s < model.config().num_tbr; ++s) {
        outs = model.tbr_forward(s, encoded, cur, nullptr);
        cur = apply_stage(cur, outs, min_len, kStageTags[s]);
    }
    for (std::size_t i = 0; i < cur.size(); ++i)
        cur[i].score = proposals[i].score * outs[i].quality;
    return cur;
}

std::vector<Proposal> refine_video(const TCANet& model, const VideoRecord& video, const std::vector<Proposal>& proposals)
{
    if (proposals.empty())
        return {};
    return refine_cascade(model, encode_sequence(model, video.features), proposals);
}

namespace {

std::vector<Proposal> augment_from_outputs(const std::vector<Proposal>& proposals, const std::vector<TBROutput>& outs,
                                           int per_proposal, double jitter, double min_len, nn::Rng& rng)
{
    if (per_proposal < 1)
        throw InputError("augment_with_tbr1: per_proposal must be >= 1");
    std::vector<Proposal> out = proposals;
    const std::vector<Proposal> refined = apply_stage(proposals, outs, min_len, Stage::TBR1);
    out.insert(out.end(), refined.begin(), refined.end());
    std::uniform_real_distribution<double> u(-jitter, jitter);
    for (int rep = 1; rep < per_proposal; ++rep)
        for (const Proposal& p : refined) {
            Proposal j = apply_offsets(p, TBROutput{u(rng), u(rng), 0.0}, min_len);
            j.stage = Stage::TBR1;
            out.push_back(j);
        }
    return out;
}

}  // namespace

std::vector<Proposal> augment_with_tbr1(const TCANet& model, const MatrixXd& encoded, const std::vector<Proposal>& proposals,
                                        int per_proposal, nn::Rng& rng)
{
    if (per_proposal < 1)
        throw InputError("augment_with_tbr1: per_proposal must be >= 1");
    if (proposals.empty())
        return {};
    const auto outs = model.tbr_forward(0, encoded, proposals, nullptr);
    return augment_from_outputs(proposals, outs, per_proposal, model.config().augment_jitter,
                                1.0 / static_cast<double>(encoded.cols()), rng);
}

// ---------------------------------------------------------------------------
// Training

TBRTargets tbr_targets(const std::vector<Proposal>& props, const std::vector<Interval>& gts, double match_threshold)
{
    TBRTargets t;
    const auto n = static_cast<Eigen::Index>(props.size());
    t.iou.assign(props.size(), 0.0);
    t.matched.assign(props.size(), false);
    t.offsets = MatrixXd::Zero(2, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const Proposal& p = props[static_cast<std::size_t>(i)];
        double best = 0.0;
        const Interval* match = nullptr;
        for (const auto& g : gts) {
            const double v = tiou(p.interval(), g);
            if (v > best) {
                best = v;
                match = &g;
            }
        }
        t.iou[static_cast<std::size_t>(i)] = best;
        if (match && best >= match_threshold) {
            const double len = p.end - p.start;
            t.matched[static_cast<std::size_t>(i)] = true;
            t.offsets(0, i) = (match->start - p.start) / len;
            t.offsets(1, i) = (match->end - p.end) / len;
        }
    }
    return t;
}

namespace {

std::vector<Interval> normalized_gts(const VideoRecord& v)
{
    std::vector<Interval> g;
    for (const auto& a : v.annotations)
        g.push_back({std::clamp(a.start_sec / v.duration_sec, 0.0, 1.0), std::clamp(a.end_sec / v.duration_sec, 0.0, 1.0)});
    return g;
}

double smooth_l1(double x, double* grad)
{
    const double ax = std::abs(x);
    if (ax < 1.0) {
        if (grad) *grad = x;
        return 0.5 * x * x;
    }
    if (grad) *grad = x > 0 ? 1.0 : -1.0;
    return ax - 0.5;
}

struct StageLoss {
    double offset = 0.0;   // sum over matched proposals
    double quality = 0.0;  // sum over all proposals
    long matched = 0;
    long count = 0;
};

/// Sums (not means) so callers can normalize over a whole batch. Gradients
/// are scaled by offset_scale / quality_scale.
StageLoss stage_loss(const std::vector<TBROutput>& outs, const TBRTargets& tg, double offset_scale,
                     double quality_scale, MatrixXd* d_off, VectorXd* d_q)
{
    StageLoss L;
    const auto n = static_cast<Eigen::Index>(outs.size());
    if (d_off) *d_off = MatrixXd::Zero(2, n);
    if (d_q) *d_q = VectorXd::Zero(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& o = outs[static_cast<std::size_t>(i)];
        const double qd = o.quality - tg.iou[static_cast<std::size_t>(i)];
        L.quality += qd * qd;
        if (d_q) (*d_q)(i) = quality_scale * 2.0 * qd;
        ++L.count;
        if (!tg.matched[static_cast<std::size_t>(i)])
            continue;
        ++L.matched;
        double gs = 0.0, ge = 0.0;
        L.offset += smooth_l1(o.d_start - tg.offsets(0, i), &gs) + smooth_l1(o.d_end - tg.offsets(1, i), &ge);
        if (d_off) {
            (*d_off)(0, i) = offset_scale * gs;
            (*d_off)(1, i) = offset_scale * ge;
        }
    }
    return L;
}

}  // namespace

double tbr_stage1_loss(TCANet& model, const VideoRecord& video, const std::vector<Proposal>& props, bool backprop)
{
    const TCANetConfig& cfg = model.config();
    TCANet::EncoderCache ecache;
    TCANet::TBRCache tcache;
    const MatrixXd enc = model.encode(video.features.data.cast<double>(), backprop ? &ecache : nullptr);
    const auto outs = model.tbr_forward(0, enc, props, backprop ? &tcache : nullptr);
    const TBRTargets tg = tbr_targets(props, normalized_gts(video), cfg.match_threshold);

    long matched = std::count(tg.matched.begin(), tg.matched.end(), true);
    const double off_scale = matched > 0 ? cfg.w_offset / static_cast<double>(matched) : 0.0;
    const double q_scale = cfg.w_quality / static_cast<double>(props.size());
    MatrixXd d_off;
    VectorXd d_q;
    const StageLoss L = stage_loss(outs, tg, off_scale, q_scale, backprop ? &d_off : nullptr, backprop ? &d_q : nullptr);
    if (backprop)
        model.encode_backward(model.tbr_backward(0, d_off, d_q, tcache), ecache);
    return off_scale * L.offset + q_scale * L.quality;
}

TCATrainResult train_tcanet(TCANet& model, const std::vector<VideoRecord>& dataset,
                            const std::vector<std::vector<Proposal>>& bmn_proposals, const TrainOptions& opts)
{
    if (dataset.empty())
        throw TrainingError("train_tcanet: empty dataset");
    if (bmn_proposals.size() != dataset.size())
        throw TrainingError("train_tcanet: need one proposal list per training video");
    const TCANetConfig& cfg = model.config();

    std::vector<MatrixXd> inputs;
    std::vector<std::vector<Interval>> gts;
    std::vector<std::vector<Proposal>> props;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
        inputs.push_back(dataset[i].features.data.cast<double>());
        gts.push_back(normalized_gts(dataset[i]));
        std::vector<Proposal> p = bmn_proposals[i];
        if (p.size() > static_cast<std::size_t>(cfg.train_proposals))
            p.resize(static_cast<std::size_t>(cfg.train_proposals));
        props.push_back(std::move(p));
    }

    const nn::ParamList params = model.parameters();
    nn::Adam adam(params, {.lr = cfg.optimizer.lr,
                           .weight_decay = cfg.optimizer.weight_decay,
                           .decoupled = cfg.optimizer.name == "AdamW"});
    nn::Rng rng(cfg.seed * 0x9E3779B97F4A7C15ULL + 29);

    if (opts.log) {
        std::ostringstream os;
        os << "tcanet: optimizer=" << cfg.optimizer.name << " batch=" << cfg.batch_size << " lr=" << cfg.optimizer.lr
           << " wd=" << cfg.optimizer.weight_decay << " epochs=" << cfg.epochs << " policy=" << cfg.lr_policy
           << " videos=" << dataset.size() << " params=" << nn::parameter_count(params);
        opts.log(os.str());
    }

    struct Work {
        std::size_t video = 0;
        TCANet::EncoderCache enc_cache;
        MatrixXd encoded;
        std::vector<std::vector<Proposal>> stage_in;
        std::vector<std::vector<TBROutput>> stage_out;
        std::vector<TCANet::TBRCache> stage_cache;
        std::vector<TBRTargets> targets;
    };

    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    TCATrainResult result;
    const int S = cfg.num_tbr;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const double lr = cfg.lr_policy == "cosine" ? nn::cosine_lr(cfg.optimizer.lr, epoch, cfg.epochs) : cfg.optimizer.lr;
        result.epoch_lr.push_back(lr);
        std::shuffle(order.begin(), order.end(), rng);
        double epoch_loss = 0.0, epoch_offset = 0.0;
        long epoch_matched = 0, epoch_batches = 0;

        std::size_t cursor = 0;
        while (cursor < order.size()) {
            // whole videos until the batch holds batch_size stage-1 proposals
            std::vector<Work> batch;
            std::size_t nprops = 0;
            while (cursor < order.size() && nprops < static_cast<std::size_t>(cfg.batch_size)) {
                const std::size_t v = order[cursor++];
                if (props[v].empty())
                    continue;
                Work w;
                w.video = v;
                nprops += props[v].size();
                batch.push_back(std::move(w));
            }
            if (batch.empty())
                break;

            std::vector<long> matched(S, 0), counted(S, 0);
            for (Work& w : batch) {
                w.encoded = model.encode(inputs[w.video], &w.enc_cache);
                w.stage_in.resize(S);
                w.stage_out.resize(S);
                w.stage_cache.resize(S);
                w.stage_in[0] = props[w.video];
                w.stage_out[0] = model.tbr_forward(0, w.encoded, w.stage_in[0], &w.stage_cache[0]);
                const auto augmented = augment_from_outputs(w.stage_in[0], w.stage_out[0], cfg.augment_per_proposal,
                                                            cfg.augment_jitter, 1.0 / static_cast<double>(w.encoded.cols()), rng);
                for (int s = 1; s < S; ++s) {
                    w.stage_in[s] = augmented;
                    w.stage_out[s] = model.tbr_forward(s, w.encoded, w.stage_in[s], &w.stage_cache[s]);
                }
                for (int s = 0; s < S; ++s) {
                    w.targets.push_back(tbr_targets(w.stage_in[s], gts[w.video], cfg.match_threshold));
                    matched[s] += std::count(w.targets[s].matched.begin(), w.targets[s].matched.end(), true);
                    counted[s] += static_cast<long>(w.stage_in[s].size());
                }
            }
            if (matched[0] == 0) {
                ++result.skipped_batches;
                continue;
            }

            nn::zero_grads(params);
            double batch_loss = 0.0;
            for (Work& w : batch) {
                MatrixXd denc = MatrixXd::Zero(w.encoded.rows(), w.encoded.cols());
                for (int s = 0; s < S; ++s) {
                    const double off_scale = matched[s] > 0 ? cfg.w_offset / static_cast<double>(matched[s]) : 0.0;
                    const double q_scale = cfg.w_quality / static_cast<double>(counted[s]);
                    MatrixXd d_off;
                    VectorXd d_q;
                    const StageLoss L = stage_loss(w.stage_out[s], w.targets[s], off_scale, q_scale, &d_off, &d_q);
                    batch_loss += off_scale * L.offset + q_scale * L.quality;
                    if (s == 0) {
                        epoch_offset += L.offset / 2.0;
                        epoch_matched += L.matched;
                    }
                    denc += model.tbr_backward(s, d_off, d_q, w.stage_cache[s]);
                }
                model.encode_backward(denc, w.enc_cache);
            }
            if (!std::isfinite(batch_loss)) {
                std::ostringstream os;
                os << "train_tcanet: non-finite loss at epoch " << epoch << ", step " << result.steps;
                throw TrainingError(os.str());
            }
            if (!opts.freeze)
                adam.step(lr);
            ++result.steps;
            ++epoch_batches;
            epoch_loss += batch_loss;
        }
        result.epoch_loss.push_back(epoch_batches > 0 ? epoch_loss / static_cast<double>(epoch_batches) : 0.0);
        result.epoch_offset_loss.push_back(epoch_matched > 0 ? epoch_offset / static_cast<double>(epoch_matched) : 0.0);
        if (opts.log) {
            std::ostringstream os;
            os << "tcanet: epoch " << epoch + 1 << "/" << cfg.epochs << " lr=" << lr
               << " loss=" << result.epoch_loss.back() << " offset=" << result.epoch_offset_loss.back();
            opts.log(os.str());
        }
    }
    return result;
}

}  // namespace tal
