#pragma once

// Core data model and 1-D temporal geometry.
//
// Proposals live in normalized time [0, 1] relative to the video duration;
// only detections are expressed in seconds.

#include <cstdint>
#include <string_view>
#include <vector>

namespace tal {

/// Closed interval on a 1-D time axis. Units are up to the caller.
struct Interval {
    double start = 0.0;
    double end = 0.0;

    double length() const noexcept { return end - start; }
};

/// Temporal intersection-over-union. Throws InputError if either interval
/// has end <= start.
double tiou(Interval a, Interval b);

struct SegmentAnnotation {
    double start_sec = 0.0;
    double end_sec = 0.0;
    int label = 0;

    Interval interval() const noexcept { return {start_sec, end_sec}; }
};

/// Which network produced (or last refined) a proposal.
enum class Stage { BMN, TBR1, TBR2, TBR3 };

std::string_view to_string(Stage s) noexcept;
Stage stage_from_string(std::string_view s);

/// Class-agnostic candidate segment in normalized time.
struct Proposal {
    double start = 0.0;
    double end = 0.0;
    double score = 0.0;
    Stage stage = Stage::BMN;

    Interval interval() const noexcept { return {start, end}; }
};

/// Classified detection in seconds.
struct DetectionResult {
    double start = 0.0;
    double end = 0.0;
    int label = 0;
    double score = 0.0;

    Interval interval() const noexcept { return {start, end}; }
};

/// Dense (duration, start) grid. Entry (d, t), d in 1..D, t in 0..T-1, spans
/// clip units [t, t + d) and is valid iff t + d <= T.
struct BMGridSpec {
    int T = 0;
    int D = 0;

    void validate() const;
};

struct GridEntry {
    int d = 0;
    int t = 0;
    double start = 0.0;
    double end = 0.0;
    bool valid = false;
};

/// All D*T entries, duration-major (d = 1 first), start-minor.
std::vector<GridEntry> bm_grid_entries(BMGridSpec spec);

/// Closed form D(T+1) - D(D+1)/2.
std::int64_t bm_valid_count(BMGridSpec spec);

}  // namespace tal
