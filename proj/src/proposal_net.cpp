#include "tal/proposal_net.hpp"

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

void BMNConfig::validate() const
{
    auto fail = [](const char* field, const std::string& msg) { throw ConfigError("bmn", field, msg); };
    if (L < 2) fail("L", "must be >= 2");
    if (D < 0 || D > L) fail("D", "must satisfy 0 <= D <= L (0 selects L/2)");
    if (C_in < 1) fail("C_in", "must be >= 1");
    if (C_hidden < 1) fail("C_hidden", "must be >= 1");
    if (num_lgte < 0) fail("num_lgte", "must be >= 0");
    if (lgte_heads < 1 || C_hidden % lgte_heads != 0) fail("lgte_heads", "must divide C_hidden");
    if (lgte_window < 0) fail("lgte_window", "must be >= 0 (0 selects ceil(L/10))");
    if (K < 1) fail("K", "must be >= 1");
    if (pem_channels < 1) fail("pem_channels", "must be >= 1");
    if (map_channels < 1) fail("map_channels", "must be >= 1");
    if (!(pos_threshold > 0.0 && pos_threshold <= 1.0)) fail("pos_threshold", "must be in (0, 1]");
    if (w_cls < 0.0 || w_reg < 0.0 || w_tem < 0.0) fail("w_cls", "loss weights must be >= 0");
    if (optimizer.name != "AdamW" && optimizer.name != "Adam") fail("optimizer", "name must be AdamW or Adam");
    if (!(optimizer.lr > 0.0)) fail("optimizer", "lr must be > 0");
    if (optimizer.weight_decay < 0.0) fail("optimizer", "weight_decay must be >= 0");
    if (batch_size < 1) fail("batch_size", "must be >= 1");
    if (epochs < 0) fail("epochs", "must be >= 0");
}

BMSampler BMSampler::build(BMGridSpec grid, int K)
{
    grid.validate();
    BMSampler s;
    s.T = grid.T;
    s.D = grid.D;
    s.K = K;
    const double T = grid.T;
    for (int d = 1; d <= grid.D; ++d) {
        for (int t = 0; t + d <= grid.T; ++t) {
            s.entry_d.push_back(d);
            s.entry_t.push_back(t);
            for (int k = 0; k < K; ++k) {
                const double pos = std::clamp(t - 0.5 + d * (k + 0.5) / K, 0.0, T - 1.0);
                const int lo = std::min(static_cast<int>(std::floor(pos)), std::max(grid.T - 2, 0));
                s.lo.push_back(lo);
                s.frac.push_back(grid.T == 1 ? 0.0 : pos - lo);
            }
        }
    }
    return s;
}

// ---------------------------------------------------------------------------

BMN::BMN(const BMNConfig& cfg) : cfg_(cfg)
{
    cfg_.validate();
    sampler_ = BMSampler::build(cfg_.grid(), cfg_.K);
    const int H = cfg_.C_hidden;
    base_.emplace_back("bmn.base0", cfg_.C_in, H, 3);
    base_.emplace_back("bmn.base1", H, H, 3);
    for (int i = 0; i < cfg_.num_lgte; ++i) {
        lgte_.emplace_back("bmn.lgte" + std::to_string(i), H, cfg_.lgte_heads);
        lgte_after_.push_back(std::min(i, 1));
    }
    tem1_ = nn::Conv1d("bmn.tem1", H, H, 3);
    tem2_ = nn::Conv1d("bmn.tem2", H, 2, 1);
    pem1_ = nn::Conv1d("bmn.pem1", H, cfg_.pem_channels, 3);
    sample_w_ = nn::Param("bmn.sampler.weight", cfg_.map_channels, static_cast<Eigen::Index>(cfg_.pem_channels) * cfg_.K);
    sample_b_ = nn::Param("bmn.sampler.bias", cfg_.map_channels, 1);
    map1_ = nn::Conv1d("bmn.map1", cfg_.map_channels, cfg_.map_channels, 1);
    map2_ = nn::Conv1d("bmn.map2", cfg_.map_channels, 2, 1);

    nn::Rng rng(cfg_.seed);
    for (auto& c : base_) c.init(rng);
    for (auto& l : lgte_) l.init(rng);
    tem1_.init(rng);
    tem2_.init(rng);
    pem1_.init(rng);
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg_.pem_channels) * cfg_.K);
    nn::init_uniform(sample_w_, rng, bound);
    nn::init_uniform(sample_b_, rng, bound);
    map1_.init(rng);
    map2_.init(rng);
}

nn::ParamList BMN::parameters()
{
    nn::ParamList out;
    for (auto& c : base_) c.collect(out);
    for (auto& l : lgte_) l.collect(out);
    tem1_.collect(out);
    tem2_.collect(out);
    pem1_.collect(out);
    out.push_back(&sample_w_);
    out.push_back(&sample_b_);
    map1_.collect(out);
    map2_.collect(out);
    return out;
}

nn::ParamList BMN::tem_parameters()
{
    nn::ParamList out;
    tem1_.collect(out);
    tem2_.collect(out);
    return out;
}

BMNOutput BMN::forward(const MatrixXd& x, Cache* cache) const
{
    if (x.rows() != cfg_.C_in || x.cols() != cfg_.L) {
        std::ostringstream os;
        os << "BMN: expected input " << cfg_.C_in << "x" << cfg_.L << ", got " << x.rows() << "x" << x.cols();
        throw ShapeError(os.str());
    }
    const int T = cfg_.L;
    const int window = cfg_.window();
    if (cache) {
        cache->input = x;
        cache->conv.assign(base_.size(), {});
        cache->lgte.assign(lgte_.size(), {});
        cache->relu_out.assign(base_.size(), {});
    }

    Mat h = x;
    for (std::size_t i = 0; i < base_.size(); ++i) {
        h = nn::relu(base_[i].forward(h, cache ? &cache->conv[i] : nullptr));
        if (cache)
            cache->relu_out[i] = h;
        for (std::size_t l = 0; l < lgte_.size(); ++l)
            if (lgte_after_[l] == static_cast<int>(i))
                h = lgte_[l].forward(h, window, cache ? &cache->lgte[l] : nullptr);
    }

    BMNOutput out;
    {
        Mat th = nn::relu(tem1_.forward(h, cache ? &cache->tem1 : nullptr));
        Mat to = nn::sigmoid(tem2_.forward(th, cache ? &cache->tem2 : nullptr));
        out.tem.start_prob = to.row(0).transpose();
        out.tem.end_prob = to.row(1).transpose();
        if (cache) {
            cache->tem_hidden = std::move(th);
            cache->tem_out = std::move(to);
        }
    }

    Mat pf = nn::relu(pem1_.forward(h, cache ? &cache->pem1 : nullptr));
    const int P = cfg_.map_channels, Hp = cfg_.pem_channels, K = cfg_.K;
    Mat taps(P, static_cast<Eigen::Index>(K) * T);
    for (int k = 0; k < K; ++k)
        taps.middleCols(static_cast<Eigen::Index>(k) * T, T).noalias() =
            sample_w_.value.middleCols(static_cast<Eigen::Index>(k) * Hp, Hp) * pf;

    const int E = sampler_.entries();
    Mat sampled(P, E);
    for (int e = 0; e < E; ++e) {
        double* dst = sampled.col(e).data();
        for (int p = 0; p < P; ++p)
            dst[p] = sample_b_.value(p, 0);
        for (int k = 0; k < K; ++k) {
            const std::size_t idx = static_cast<std::size_t>(e) * K + k;
            const int lo = sampler_.lo[idx];
            const int hi = std::min(lo + 1, T - 1);
            const double f = sampler_.frac[idx];
            const double* a = taps.col(static_cast<Eigen::Index>(k) * T + lo).data();
            const double* b = taps.col(static_cast<Eigen::Index>(k) * T + hi).data();
            for (int p = 0; p < P; ++p)
                dst[p] += (1.0 - f) * a[p] + f * b[p];
        }
    }
    sampled = nn::relu(sampled);
    Mat mh = nn::relu(map1_.forward(sampled, cache ? &cache->map1 : nullptr));
    Mat mo = nn::sigmoid(map2_.forward(mh, cache ? &cache->map2 : nullptr));

    const int D = cfg_.max_duration();
    BMConfidenceMap& map = out.map;
    map.cls = MatrixXd::Zero(D, T);
    map.reg = MatrixXd::Zero(D, T);
    map.valid.setConstant(D, T, false);
    for (int e = 0; e < E; ++e) {
        const int d = sampler_.entry_d[e] - 1, t = sampler_.entry_t[e];
        map.cls(d, t) = mo(0, e);
        map.reg(d, t) = mo(1, e);
        map.valid(d, t) = true;
    }

    if (cache) {
        cache->pem_feat = std::move(pf);
        cache->sampled = std::move(sampled);
        cache->map_hidden = std::move(mh);
        cache->map_out = std::move(mo);
    }
    return out;
}

void BMN::backward(const OutputGrad& g, Cache& cache)
{
    const int T = cfg_.L;
    const int P = cfg_.map_channels, Hp = cfg_.pem_channels, K = cfg_.K;
    const int E = sampler_.entries();

    // PEM
    Mat dmo(2, E);
    dmo.row(0) = g.cls.transpose();
    dmo.row(1) = g.reg.transpose();
    Mat dmh = nn::relu_backward(map2_.backward(nn::sigmoid_backward(dmo, cache.map_out), cache.map2), cache.map_hidden);
    const Mat dsampled = nn::relu_backward(map1_.backward(dmh, cache.map1), cache.sampled);
    sample_b_.grad.col(0) += dsampled.rowwise().sum();

    Mat dtaps = Mat::Zero(P, static_cast<Eigen::Index>(K) * T);
    for (int e = 0; e < E; ++e) {
        const double* src = dsampled.col(e).data();
        for (int k = 0; k < K; ++k) {
            const std::size_t idx = static_cast<std::size_t>(e) * K + k;
            const int lo = sampler_.lo[idx];
            const int hi = std::min(lo + 1, T - 1);
            const double f = sampler_.frac[idx];
            double* a = dtaps.col(static_cast<Eigen::Index>(k) * T + lo).data();
            double* b = dtaps.col(static_cast<Eigen::Index>(k) * T + hi).data();
            for (int p = 0; p < P; ++p) {
                a[p] += (1.0 - f) * src[p];
                b[p] += f * src[p];
            }
        }
    }
    Mat dpf = Mat::Zero(Hp, T);
    for (int k = 0; k < K; ++k) {
        const auto dtap = dtaps.middleCols(static_cast<Eigen::Index>(k) * T, T);
        sample_w_.grad.middleCols(static_cast<Eigen::Index>(k) * Hp, Hp).noalias() += dtap * cache.pem_feat.transpose();
        dpf.noalias() += sample_w_.value.middleCols(static_cast<Eigen::Index>(k) * Hp, Hp).transpose() * dtap;
    }
    Mat dh = pem1_.backward(nn::relu_backward(dpf, cache.pem_feat), cache.pem1);

    // TEM
    Mat dto(2, T);
    dto.row(0) = g.start.transpose();
    dto.row(1) = g.end.transpose();
    const Mat dth = nn::relu_backward(tem2_.backward(nn::sigmoid_backward(dto, cache.tem_out), cache.tem2), cache.tem_hidden);
    dh += tem1_.backward(dth, cache.tem1);

    // base, in reverse
    for (int i = static_cast<int>(base_.size()) - 1; i >= 0; --i) {
        for (int l = static_cast<int>(lgte_.size()) - 1; l >= 0; --l)
            if (lgte_after_[l] == i)
                dh = lgte_[l].backward(dh, cache.lgte[l]);
        dh = base_[i].backward(nn::relu_backward(dh, cache.relu_out[i]), cache.conv[i]);
    }
}

// ---------------------------------------------------------------------------
// Targets and loss

MatrixXd bm_label_map(const std::vector<SegmentAnnotation>& annotations, BMGridSpec grid, double duration_sec)
{
    grid.validate();
    MatrixXd m = MatrixXd::Zero(grid.D, grid.T);
    if (annotations.empty())
        return m;
    if (!(duration_sec > 0.0))
        throw InputError("bm_label_map: duration must be > 0");
    std::vector<Interval> gts;
    for (const auto& a : annotations)
        gts.push_back({std::clamp(a.start_sec / duration_sec, 0.0, 1.0), std::clamp(a.end_sec / duration_sec, 0.0, 1.0)});
    const double T = grid.T;
    for (int d = 1; d <= grid.D; ++d) {
        for (int t = 0; t + d <= grid.T; ++t) {
            const Interval cell{t / T, (t + d) / T};
            double best = 0.0;
            for (const auto& g : gts)
                if (g.end > g.start)
                    best = std::max(best, tiou(cell, g));
            m(d - 1, t) = best;
        }
    }
    return m;
}

TEMOutput tem_labels(const std::vector<SegmentAnnotation>& annotations, int T, double duration_sec)
{
    TEMOutput out{VectorXd::Zero(T), VectorXd::Zero(T)};
    if (annotations.empty())
        return out;
    const double gap = 1.0 / T;
    auto overlap_ratio = [&](double anchor_lo, double anchor_hi, double centre) {
        const double lo = centre - 1.5 * gap, hi = centre + 1.5 * gap;
        const double inter = std::min(anchor_hi, hi) - std::max(anchor_lo, lo);
        return std::max(0.0, inter) / (anchor_hi - anchor_lo);
    };
    for (int t = 0; t < T; ++t) {
        const double lo = (t - 0.5) * gap, hi = (t + 0.5) * gap;
        for (const auto& a : annotations) {
            out.start_prob(t) = std::max(out.start_prob(t), overlap_ratio(lo, hi, a.start_sec / duration_sec));
            out.end_prob(t) = std::max(out.end_prob(t), overlap_ratio(lo, hi, a.end_sec / duration_sec));
        }
    }
    return out;
}

BMNTargets bmn_targets(const std::vector<SegmentAnnotation>& annotations, const BMNConfig& cfg, double duration_sec)
{
    return {bm_label_map(annotations, cfg.grid(), duration_sec), tem_labels(annotations, cfg.L, duration_sec)};
}

namespace {

constexpr double kLogEps = 1e-8;

/// Positive/negative re-weighted BCE: each populated side carries half the
/// weight (all of it when the other side is empty). Returns the loss and
/// writes d loss / d p into `grad` when non-null.
double balanced_bce(const VectorXd& p, const std::vector<bool>& positive, VectorXd* grad)
{
    const auto n = static_cast<Eigen::Index>(positive.size());
    const auto npos = static_cast<double>(std::count(positive.begin(), positive.end(), true));
    const double nneg = static_cast<double>(n) - npos;
    const double wp = npos > 0 ? (nneg > 0 ? 0.5 : 1.0) / npos : 0.0;
    const double wn = nneg > 0 ? (npos > 0 ? 0.5 : 1.0) / nneg : 0.0;
    double loss = 0.0;
    if (grad)
        grad->resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (positive[static_cast<std::size_t>(i)]) {
            loss -= wp * std::log(p(i) + kLogEps);
            if (grad) (*grad)(i) = -wp / (p(i) + kLogEps);
        } else {
            loss -= wn * std::log(1.0 - p(i) + kLogEps);
            if (grad) (*grad)(i) = wn / (1.0 - p(i) + kLogEps);
        }
    }
    return loss;
}

}  // namespace

BMNLoss bmn_loss(const BMNOutput& out, const BMNTargets& targets, const BMNConfig& cfg, BMN::OutputGrad* grad,
                 double grad_scale)
{
    const BMConfidenceMap& map = out.map;
    std::vector<double> label;
    VectorXd cls, reg;
    {
        std::vector<double> c, r;
        for (int d = 0; d < map.durations(); ++d)
            for (int t = 0; t < map.positions(); ++t)
                if (map.valid(d, t)) {
                    c.push_back(map.cls(d, t));
                    r.push_back(map.reg(d, t));
                    label.push_back(targets.iou(d, t));
                }
        cls = Eigen::Map<VectorXd>(c.data(), static_cast<Eigen::Index>(c.size()));
        reg = Eigen::Map<VectorXd>(r.data(), static_cast<Eigen::Index>(r.size()));
    }
    const auto E = static_cast<Eigen::Index>(label.size());
    const VectorXd gt = Eigen::Map<const VectorXd>(label.data(), E);

    std::vector<bool> pos(label.size());
    for (std::size_t i = 0; i < label.size(); ++i)
        pos[i] = label[i] >= cfg.pos_threshold;

    BMNLoss L;
    VectorXd dcls, dstart, dend;
    L.cls = balanced_bce(cls, pos, grad ? &dcls : nullptr);
    const VectorXd diff = reg - gt;
    L.reg = diff.squaredNorm() / static_cast<double>(E);

    auto boundary_positive = [](const VectorXd& y) {
        std::vector<bool> b(static_cast<std::size_t>(y.size()));
        for (Eigen::Index i = 0; i < y.size(); ++i)
            b[static_cast<std::size_t>(i)] = y(i) > 0.5;
        return b;
    };
    L.tem = balanced_bce(out.tem.start_prob, boundary_positive(targets.boundary.start_prob), grad ? &dstart : nullptr) +
            balanced_bce(out.tem.end_prob, boundary_positive(targets.boundary.end_prob), grad ? &dend : nullptr);
    L.total = cfg.w_cls * L.cls + cfg.w_reg * L.reg + cfg.w_tem * L.tem;

    if (grad) {
        grad->cls = grad_scale * cfg.w_cls * dcls;
        grad->reg = grad_scale * cfg.w_reg * 2.0 / static_cast<double>(E) * diff;
        grad->start = grad_scale * cfg.w_tem * dstart;
        grad->end = grad_scale * cfg.w_tem * dend;
    }
    return L;
}

// ---------------------------------------------------------------------------
// Training / inference

namespace {

MatrixXd model_input(const BMNConfig& cfg, const VideoRecord& v)
{
    if (v.features.channels() != cfg.C_in)
        throw ShapeError("video " + v.id + ": " + std::to_string(v.features.channels()) +
                         " feature channels, model expects " + std::to_string(cfg.C_in));
    return resize_temporal(v.features, cfg.L);
}

}  // namespace

TrainResult train_bmn(BMN& model, const std::vector<VideoRecord>& dataset, const TrainOptions& opts)
{
    if (dataset.empty())
        throw TrainingError("train_bmn: empty dataset");
    const BMNConfig& cfg = model.config();

    std::vector<MatrixXd> inputs;
    std::vector<BMNTargets> targets;
    for (const auto& v : dataset) {
        inputs.push_back(model_input(cfg, v));
        targets.push_back(bmn_targets(v.annotations, cfg, v.duration_sec));
    }

    const nn::ParamList params = model.parameters();
    nn::Adam adam(params, {.lr = cfg.optimizer.lr,
                           .weight_decay = cfg.optimizer.weight_decay,
                           .decoupled = cfg.optimizer.name == "AdamW"});
    nn::Rng rng(cfg.seed * 0x2545F4914F6CDD1DULL + 17);

    std::vector<std::size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), 0);
    std::vector<double> sample_loss(dataset.size());
    TrainResult result;
    BMN::Cache cache;
    BMN::OutputGrad grad;

    if (opts.log) {
        std::ostringstream os;
        os << "bmn: optimizer=" << cfg.optimizer.name << " batch=" << cfg.batch_size << " lr=" << cfg.optimizer.lr
           << " wd=" << cfg.optimizer.weight_decay << " epochs=" << cfg.epochs << " videos=" << dataset.size()
           << " params=" << nn::parameter_count(params);
        opts.log(os.str());
    }

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
            nn::zero_grads(params);
            for (std::size_t i = b0; i < b1; ++i) {
                const std::size_t s = order[i];
                const BMNOutput out = model.forward(inputs[s], &cache);
                const BMNLoss loss = bmn_loss(out, targets[s], cfg, &grad, 1.0 / static_cast<double>(b1 - b0));
                if (!std::isfinite(loss.total)) {
                    std::ostringstream os;
                    os << "train_bmn: non-finite loss at epoch " << epoch << ", step " << result.steps << ", video "
                       << dataset[s].id << " (cls=" << loss.cls << " reg=" << loss.reg << " tem=" << loss.tem << ")";
                    throw TrainingError(os.str());
                }
                sample_loss[s] = loss.total;
                model.backward(grad, cache);
            }
            if (!opts.freeze)
                adam.step();
            ++result.steps;
        }
        const double mean = std::accumulate(sample_loss.begin(), sample_loss.end(), 0.0) / static_cast<double>(dataset.size());
        result.epoch_loss.push_back(mean);
        if (opts.log) {
            std::ostringstream os;
            os << "bmn: epoch " << epoch + 1 << "/" << cfg.epochs << " loss=" << mean;
            opts.log(os.str());
        }
    }
    return result;
}

BMConfidenceMap predict_map(const BMN& model, const VideoRecord& video)
{
    return model.forward(model_input(model.config(), video), nullptr).map;
}

std::vector<Proposal> proposals_from_map(const BMConfidenceMap& map, int top_k)
{
    if (top_k <= 0)
        throw InputError("proposals_from_map: top_k must be > 0");
    const double T = map.positions();
    std::vector<Proposal> all;
    for (int d = 0; d < map.durations(); ++d)
        for (int t = 0; t < map.positions(); ++t)
            if (map.valid(d, t))
                all.push_back({t / T, (t + d + 1) / T, map.cls(d, t) * map.reg(d, t), Stage::BMN});
    std::stable_sort(all.begin(), all.end(), [](const Proposal& a, const Proposal& b) { return a.score > b.score; });
    if (all.size() > static_cast<std::size_t>(top_k))
        all.resize(static_cast<std::size_t>(top_k));
    return all;
}

std::vector<Proposal> infer_proposals(const BMN& model, const VideoRecord& video, int top_k)
{
    if (top_k <= 0)
        throw InputError("infer_proposals: top_k must be > 0");
    return proposals_from_map(predict_map(model, video), top_k);
}

BMConfidenceMap ensemble_maps(const std::vector<BMConfidenceMap>& maps)
{
    if (maps.empty())
        throw InputError("ensemble_maps: no maps");
    BMConfidenceMap out = maps.front();
    for (std::size_t i = 1; i < maps.size(); ++i) {
        const auto& m = maps[i];
        if (m.cls.rows() != out.cls.rows() || m.cls.cols() != out.cls.cols() || m.valid != out.valid)
            throw ShapeError("ensemble_maps: maps differ in shape or validity mask");
        out.cls += m.cls;
        out.reg += m.reg;
    }
    out.cls /= static_cast<double>(maps.size());
    out.reg /= static_cast<double>(maps.size());
    return out;
}

}  // namespace tal
