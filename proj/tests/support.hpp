#pragma once

// Helpers shared by the unit tests.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "tal/nn/layers.hpp"

namespace testing {

struct GradCheck {
    double worst_rel = 0.0;
    int checked = 0;
};

/// Compares analytic gradients against central differences on `count`
/// randomly chosen scalar entries of `params`.
///
/// `loss(backprop)` must return the loss and, when backprop is true,
/// accumulate d(loss)/d(param) into the grads. Entries whose analytic and
/// numeric gradients are both below `abs_floor` count as agreeing.
inline GradCheck check_gradients(const tal::nn::ParamList& params, const std::function<double(bool)>& loss,
                                 int count, std::mt19937_64& rng, double h = 1e-5, double abs_floor = 1e-8)
{
    tal::nn::zero_grads(params);
    loss(true);

    std::vector<std::pair<tal::nn::Param*, Eigen::Index>> all;
    for (auto* p : params)
        for (Eigen::Index i = 0; i < p->value.size(); ++i)
            all.push_back({p, i});
    std::shuffle(all.begin(), all.end(), rng);
    all.resize(std::min<std::size_t>(all.size(), static_cast<std::size_t>(count)));

    GradCheck r;
    for (auto [p, i] : all) {
        const double analytic = p->grad.data()[i];
        double& w = p->value.data()[i];
        const double saved = w;
        w = saved + h;
        const double up = loss(false);
        w = saved - h;
        const double down = loss(false);
        w = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double diff = std::abs(analytic - numeric);
        const double scale = std::max(std::abs(analytic), std::abs(numeric));
        const double rel = scale < abs_floor ? 0.0 : diff / scale;
        r.worst_rel = std::max(r.worst_rel, rel);
        ++r.checked;
    }
    return r;
}

}  // namespace testing
