#pragma once

// Synthetic untrimmed-video features, clip scheduling, temporal resizing and
// the on-disk feature/annotation formats.

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "tal/domain.hpp"

namespace tal {

struct ClipSchedule {
    int num_clips = 0;     // N
    double step_sec = 0.0; // stride / fps
};

/// Uniform division of `num_frames` frames into clips of `stride` frames.
/// Clip k covers frames [k*stride, (k+1)*stride); a partial tail is dropped.
ClipSchedule clip_schedule(std::int64_t num_frames, int stride, double fps);

/// Dense per-video features, C channels x N clips.
struct FeatureSequence {
    Eigen::MatrixXf data;
    float fps = 30.0f;
    int stride = 8;
    std::int64_t num_frames = 0;

    int channels() const noexcept { return static_cast<int>(data.rows()); }
    int length() const noexcept { return static_cast<int>(data.cols()); }
};

struct Resolution {
    int height = 256;
    int width = 320;

    bool operator==(const Resolution&) const = default;
};

struct VideoRecord {
    std::string id;
    double duration_sec = 0.0;
    std::vector<SegmentAnnotation> annotations;
    FeatureSequence features;
    Resolution extraction_resolution;

    /// Label of the video (all segments of a synthetic video share it).
    int video_label() const;
};

bool operator==(const FeatureSequence& a, const FeatureSequence& b);
bool operator==(const SegmentAnnotation& a, const SegmentAnnotation& b);
bool operator==(const VideoRecord& a, const VideoRecord& b);

/// Linear interpolation along time with the first/last output samples aligned
/// to the first/last input clip centers. Output is C x target_length.
Eigen::MatrixXd resize_temporal(const Eigen::MatrixXd& x, int target_length);
Eigen::MatrixXd resize_temporal(const FeatureSequence& f, int target_length);

/// Number of resize_temporal calls made by this process. Lets callers assert
/// that a code path never resamples features.
std::uint64_t resize_call_count() noexcept;

struct SynthSpec {
    int num_videos = 250;
    int channels = 20;
    double min_duration_sec = 24.0;
    double max_duration_sec = 80.0;
    int num_classes = 11;  // foreground classes + 1 background (last index)
    double noise_sigma = 0.2;
    std::uint64_t seed = 1;
    float fps = 30.0f;
    int stride = 8;
    double prototype_margin = 1.0;
    int min_segments = 1;
    int max_segments = 3;
    double min_segment_fraction = 0.05;
    double max_segment_fraction = 0.3;
    double min_gap_sec = 1.0;
    Resolution resolution;
    std::string id_prefix = "vid";

    void validate() const;
    int foreground_classes() const noexcept { return num_classes - 1; }
};

/// Class prototypes, num_classes x channels. Rows are orthogonal with norm
/// prototype_margin; the last row is background.
Eigen::MatrixXd class_prototypes(const SynthSpec& spec);

/// Deterministic for a fixed spec. Video i draws from a generator seeded by
/// (seed, i) so generation order does not matter.
std::vector<VideoRecord> synthesize_dataset(const SynthSpec& spec);
VideoRecord synthesize_video(const SynthSpec& spec, const Eigen::MatrixXd& prototypes, int index);

// ---------------------------------------------------------------------------
// File formats
//
// <dir>/features/<id>.talf : little-endian
//     "TALF" | version u32 | C u32 | N u32 | fps f32 | stride u32 | num_frames u32
//     | C*N f32, channel-major
// <dir>/annotations.json   : {id -> {duration_sec, resolution: [h, w],
//                              segments: [{start, end, label}], subset?}}

class FeatureFileError : public std::runtime_error {
public:
    enum class Kind { missing, header_mismatch, truncated };

    FeatureFileError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

inline constexpr std::uint32_t kFeatureFileVersion = 1;

void write_feature_file(const FeatureSequence& f, const std::filesystem::path& file);
FeatureSequence read_feature_file(const std::filesystem::path& file);

std::filesystem::path feature_path(const std::filesystem::path& dir, const std::string& id);

/// Writes the feature file and upserts the video's entry in the index.
void write_features(const VideoRecord& v, const std::filesystem::path& dir, const std::string& subset = "");
VideoRecord read_features(const std::filesystem::path& dir, const std::string& id);

/// Writes every feature file and a single index (replacing any existing one).
void write_dataset(const std::vector<VideoRecord>& videos, const std::filesystem::path& dir,
                   const std::vector<std::string>& subsets = {});

struct IndexEntry {
    std::string id;
    double duration_sec = 0.0;
    Resolution resolution;
    std::vector<SegmentAnnotation> segments;
    std::string subset;
};

std::vector<IndexEntry> read_annotation_index(const std::filesystem::path& dir);
std::vector<std::string> list_index(const std::filesystem::path& dir);

/// Loads every video of a subset ("" = all) in index order.
std::vector<VideoRecord> read_dataset(const std::filesystem::path& dir, const std::string& subset = "");

}  // namespace tal
