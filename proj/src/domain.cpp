#include "tal/domain.hpp"

#include <algorithm>
#include <string>

#include "tal/error.hpp"

namespace tal {

double tiou(Interval a, Interval b)
{
    if (!(a.end > a.start) || !(b.end > b.start))
        throw InputError("tiou: degenerate interval (end <= start)");
    const double inter = std::min(a.end, b.end) - std::max(a.start, b.start);
    if (inter <= 0.0)
        return 0.0;
    const double uni = std::max(a.end, b.end) - std::min(a.start, b.start);
    return std::min(1.0, inter / uni);
}

std::string_view to_string(Stage s) noexcept
{
    switch (s) {
    case Stage::BMN: return "BMN";
    case Stage::TBR1: return "TBR1";
    case Stage::TBR2: return "TBR2";
    case Stage::TBR3: return "TBR3";
    }
    return "BMN";
}

Stage stage_from_string(std::string_view s)
{
    if (s == "BMN") return Stage::BMN;
    if (s == "TBR1") return Stage::TBR1;
    if (s == "TBR2") return Stage::TBR2;
    if (s == "TBR3") return Stage::TBR3;
    throw InputError("unknown proposal stage '" + std::string(s) + "'");
}

void BMGridSpec::validate() const
{
    if (T < 1)
        throw InputError("BMGridSpec: T must be >= 1");
    if (D < 1 || D > T)
        throw InputError("BMGridSpec: D must satisfy 1 <= D <= T");
}

std::vector<GridEntry> bm_grid_entries(BMGridSpec spec)
{
    spec.validate();
    std::vector<GridEntry> out;
    out.reserve(static_cast<std::size_t>(spec.D) * spec.T);
    const double T = spec.T;
    for (int d = 1; d <= spec.D; ++d) {
        for (int t = 0; t < spec.T; ++t) {
            GridEntry e;
            e.d = d;
            e.t = t;
            e.valid = t + d <= spec.T;
            e.start = t / T;
            e.end = (t + d) / T;
            out.push_back(e);
        }
    }
    return out;
}

std::int64_t bm_valid_count(BMGridSpec spec)
{
    spec.validate();
    const std::int64_t D = spec.D, T = spec.T;
    return D * (T + 1) - D * (D + 1) / 2;
}

}  // namespace tal
