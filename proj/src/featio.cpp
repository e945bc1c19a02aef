#include "tal/featio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <random>
#include <sstream>

#include <json.hpp>

#include "tal/error.hpp"

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace tal {

namespace {

std::atomic<std::uint64_t> g_resize_calls{0};

}  // namespace

ClipSchedule clip_schedule(std::int64_t num_frames, int stride, double fps)
{
    if (stride < 1)
        throw InputError("clip_schedule: stride must be >= 1");
    if (!(fps > 0.0))
        throw InputError("clip_schedule: fps must be > 0");
    if (num_frames < stride)
        throw InputError("clip_schedule: video too short (" + std::to_string(num_frames) +
                         " frames < stride " + std::to_string(stride) + ")");
    return {static_cast<int>(num_frames / stride), stride / fps};
}

int VideoRecord::video_label() const
{
    if (annotations.empty())
        throw InputError("video " + id + " has no annotations");
    return annotations.front().label;
}

bool operator==(const FeatureSequence& a, const FeatureSequence& b)
{
    if (a.data.rows() != b.data.rows() || a.data.cols() != b.data.cols())
        return false;
    // bitwise, so NaN payloads and signed zeros also have to survive
    const bool same_data =
        a.data.size() == 0 ||
        std::memcmp(a.data.data(), b.data.data(), sizeof(float) * a.data.size()) == 0;
    return same_data && std::bit_cast<std::uint32_t>(a.fps) == std::bit_cast<std::uint32_t>(b.fps) &&
           a.stride == b.stride && a.num_frames == b.num_frames;
}

bool operator==(const SegmentAnnotation& a, const SegmentAnnotation& b)
{
    return a.start_sec == b.start_sec && a.end_sec == b.end_sec && a.label == b.label;
}

bool operator==(const VideoRecord& a, const VideoRecord& b)
{
    return a.id == b.id && a.duration_sec == b.duration_sec && a.annotations == b.annotations &&
           a.features == b.features && a.extraction_resolution == b.extraction_resolution;
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd resize_temporal(const Eigen::MatrixXd& x, int target_length)
{
    g_resize_calls.fetch_add(1, std::memory_order_relaxed);
    if (target_length < 1)
        throw InputError("resize_temporal: target length must be >= 1");
    const Eigen::Index n = x.cols();
    if (n < 1 || x.rows() < 1)
        throw InputError("resize_temporal: empty input");
    if (n == target_length)
        return x;

    Eigen::MatrixXd out(x.rows(), target_length);
    for (int i = 0; i < target_length; ++i) {
        const double pos = target_length == 1 ? 0.5 * static_cast<double>(n - 1)
                                              : static_cast<double>(i) * static_cast<double>(n - 1) /
                                                    static_cast<double>(target_length - 1);
        const Eigen::Index lo = std::min<Eigen::Index>(static_cast<Eigen::Index>(std::floor(pos)), n - 1);
        const Eigen::Index hi = std::min<Eigen::Index>(lo + 1, n - 1);
        const double frac = pos - static_cast<double>(lo);
        for (Eigen::Index c = 0; c < x.rows(); ++c) {
            const double a = x(c, lo), b = x(c, hi);
            const double v = a + frac * (b - a);
            out(c, i) = std::clamp(v, std::min(a, b), std::max(a, b));
        }
    }
    return out;
}

Eigen::MatrixXd resize_temporal(const FeatureSequence& f, int target_length)
{
    return resize_temporal(Eigen::MatrixXd(f.data.cast<double>()), target_length);
}

std::uint64_t resize_call_count() noexcept
{
    return g_resize_calls.load(std::memory_order_relaxed);
}

// ---------------------------------------------------------------------------
// Synthesis

void SynthSpec::validate() const
{
    auto fail = [](const char* field, const std::string& msg) { throw ConfigError("synth", field, msg); };
    if (num_videos < 0) fail("num_videos", "must be >= 0");
    if (channels < 1) fail("channels", "must be >= 1");
    if (num_classes < 2) fail("num_classes", "must be >= 2 (foreground + background)");
    if (num_classes > channels) fail("num_classes", "orthogonal prototypes need num_classes <= channels");
    if (!(noise_sigma >= 0.0)) fail("noise_sigma", "must be >= 0");
    if (!(fps > 0.0f)) fail("fps", "must be > 0");
    if (stride < 1) fail("stride", "must be >= 1");
    if (!(min_duration_sec > 0.0) || max_duration_sec < min_duration_sec)
        fail("min_duration_sec", "need 0 < min_duration_sec <= max_duration_sec");
    if (min_duration_sec * fps < stride) fail("min_duration_sec", "shorter than one clip");
    if (min_segments < 1 || max_segments < min_segments) fail("min_segments", "need 1 <= min <= max");
    if (!(min_segment_fraction > 0.0) || max_segment_fraction < min_segment_fraction ||
        max_segment_fraction >= 1.0)
        fail("min_segment_fraction", "need 0 < min <= max < 1");
    if (!(prototype_margin > 0.0)) fail("prototype_margin", "must be > 0");
    if (min_gap_sec < 0.0) fail("min_gap_sec", "must be >= 0");
}

Eigen::MatrixXd class_prototypes(const SynthSpec& spec)
{
    spec.validate();
    std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
    std::normal_distribution<double> normal(0.0, 1.0);
    Eigen::MatrixXd g(spec.channels, spec.channels);
    for (Eigen::Index j = 0; j < g.cols(); ++j)
        for (Eigen::Index i = 0; i < g.rows(); ++i)
            g(i, j) = normal(rng);
    Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
    const Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(spec.channels, spec.channels);
    return q.leftCols(spec.num_classes).transpose() * spec.prototype_margin;
}

namespace {

std::string video_id(const SynthSpec& spec, int index)
{
    std::ostringstream os;
    os << spec.id_prefix << '_';
    os.width(5);
    os.fill('0');
    os << index;
    return os.str();
}

constexpr int kMaxPackingAttempts = 100;

}  // namespace

VideoRecord synthesize_video(const SynthSpec& spec, const Eigen::MatrixXd& prototypes, int index)
{
    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(index)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<float> noise(0.0f, static_cast<float>(spec.noise_sigma));

    VideoRecord v;
    v.id = video_id(spec, index);
    v.extraction_resolution = spec.resolution;

    const double dur_draw = spec.min_duration_sec + (spec.max_duration_sec - spec.min_duration_sec) * unit(rng);
    const auto num_frames = static_cast<std::int64_t>(std::floor(dur_draw * spec.fps));
    v.duration_sec = static_cast<double>(num_frames) / spec.fps;
    const ClipSchedule sched = clip_schedule(num_frames, spec.stride, spec.fps);

    const int label = static_cast<int>(unit(rng) * spec.foreground_classes()) % spec.foreground_classes();
    const int nseg =
        spec.min_segments + static_cast<int>(unit(rng) * (spec.max_segments - spec.min_segments + 1)) %
                                (spec.max_segments - spec.min_segments + 1);

    std::vector<double> lengths(nseg);
    double free_time = -1.0;
    for (int attempt = 0; attempt < kMaxPackingAttempts && free_time < 0.0; ++attempt) {
        double total = 0.0;
        for (double& len : lengths) {
            len = v.duration_sec * (spec.min_segment_fraction +
                                    (spec.max_segment_fraction - spec.min_segment_fraction) * unit(rng));
            total += len;
        }
        free_time = v.duration_sec - total - spec.min_gap_sec * (nseg - 1);
    }
    if (free_time < 0.0)
        throw InputError("synthesize_dataset: cannot pack " + std::to_string(nseg) + " segments into " + v.id);

    // Dirichlet(1) split of the free time into nseg + 1 gaps
    std::vector<double> gaps(nseg + 1);
    double gap_sum = 0.0;
    for (double& g : gaps) {
        g = -std::log(1.0 - unit(rng));
        gap_sum += g;
    }
    double cursor = 0.0;
    for (int s = 0; s < nseg; ++s) {
        cursor += gaps[s] / gap_sum * free_time + (s > 0 ? spec.min_gap_sec : 0.0);
        const double end = std::min(cursor + lengths[s], v.duration_sec);
        v.annotations.push_back({cursor, end, label});
        cursor = end;
    }

    FeatureSequence& f = v.features;
    f.fps = spec.fps;
    f.stride = spec.stride;
    f.num_frames = num_frames;
    f.data.resize(spec.channels, sched.num_clips);
    const Eigen::VectorXf bg = prototypes.row(spec.num_classes - 1).transpose().cast<float>();
    const Eigen::VectorXf fg = prototypes.row(label).transpose().cast<float>();
    for (int k = 0; k < sched.num_clips; ++k) {
        const double center = (static_cast<double>(k) * spec.stride + 0.5 * spec.stride) / spec.fps;
        bool inside = false;
        for (const auto& a : v.annotations)
            inside = inside || (center >= a.start_sec && center <= a.end_sec);
        f.data.col(k) = inside ? fg : bg;
        if (spec.noise_sigma > 0.0)
            for (int c = 0; c < spec.channels; ++c)
                f.data(c, k) += noise(rng);
    }
    return v;
}

std::vector<VideoRecord> synthesize_dataset(const SynthSpec& spec)
{
    spec.validate();
    const Eigen::MatrixXd protos = class_prototypes(spec);
    std::vector<VideoRecord> out;
    out.reserve(spec.num_videos);
    for (int i = 0; i < spec.num_videos; ++i)
        out.push_back(synthesize_video(spec, protos, i));
    return out;
}

// ---------------------------------------------------------------------------
// Binary feature files

namespace {

constexpr char kMagic[4] = {'T', 'A', 'L', 'F'};
constexpr std::size_t kHeaderBytes = 4 + 6 * 4;

void put_u32(std::string& buf, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i)
        buf.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const unsigned char* p)
{
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

void write_feature_file(const FeatureSequence& f, const fs::path& file)
{
    std::string buf;
    buf.reserve(kHeaderBytes + 4 * static_cast<std::size_t>(f.data.size()));
    buf.append(kMagic, 4);
    put_u32(buf, kFeatureFileVersion);
    put_u32(buf, static_cast<std::uint32_t>(f.channels()));
    put_u32(buf, static_cast<std::uint32_t>(f.length()));
    put_u32(buf, std::bit_cast<std::uint32_t>(f.fps));
    put_u32(buf, static_cast<std::uint32_t>(f.stride));
    put_u32(buf, static_cast<std::uint32_t>(f.num_frames));
    for (int c = 0; c < f.channels(); ++c)
        for (int n = 0; n < f.length(); ++n)
            put_u32(buf, std::bit_cast<std::uint32_t>(f.data(c, n)));

    if (file.has_parent_path())
        fs::create_directories(file.parent_path());
    std::ofstream os(file, std::ios::binary | std::ios::trunc);
    if (!os)
        throw std::runtime_error("cannot open " + file.string() + " for writing");
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!os)
        throw std::runtime_error("write failed: " + file.string());
}

FeatureSequence read_feature_file(const fs::path& file)
{
    using Kind = FeatureFileError::Kind;
    std::ifstream is(file, std::ios::binary);
    if (!is)
        throw FeatureFileError(Kind::missing, "feature file not found: " + file.string());
    const std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    const auto* p = reinterpret_cast<const unsigned char*>(buf.data());

    if (buf.size() < kHeaderBytes)
        throw FeatureFileError(Kind::truncated, file.string() + ": truncated header");
    if (std::memcmp(buf.data(), kMagic, 4) != 0)
        throw FeatureFileError(Kind::header_mismatch, file.string() + ": bad magic");
    if (get_u32(p + 4) != kFeatureFileVersion)
        throw FeatureFileError(Kind::header_mismatch, file.string() + ": unsupported version");

    const std::uint32_t channels = get_u32(p + 8);
    const std::uint32_t clips = get_u32(p + 12);
    FeatureSequence f;
    f.fps = std::bit_cast<float>(get_u32(p + 16));
    f.stride = static_cast<int>(get_u32(p + 20));
    f.num_frames = get_u32(p + 24);

    if (f.stride < 1 || f.num_frames / f.stride != clips)
        throw FeatureFileError(Kind::header_mismatch,
                               file.string() + ": clip count disagrees with num_frames/stride");

    const std::size_t expected = kHeaderBytes + 4ull * channels * clips;
    if (buf.size() < expected)
        throw FeatureFileError(Kind::truncated, file.string() + ": payload shorter than C*N floats");
    if (buf.size() > expected)
        throw FeatureFileError(Kind::header_mismatch, file.string() + ": payload longer than C*N floats");

    f.data.resize(channels, clips);
    const unsigned char* q = p + kHeaderBytes;
    for (std::uint32_t c = 0; c < channels; ++c)
        for (std::uint32_t n = 0; n < clips; ++n, q += 4)
            f.data(c, n) = std::bit_cast<float>(get_u32(q));
    return f;
}

// ---------------------------------------------------------------------------
// Annotation index

namespace {

const char* kIndexName = "annotations.json";

ojson load_index_json(const fs::path& dir)
{
    const fs::path file = dir / kIndexName;
    std::ifstream is(file);
    if (!is)
        return ojson::object();
    return ojson::parse(is);
}

void store_index_json(const ojson& j, const fs::path& dir)
{
    fs::create_directories(dir);
    std::ofstream os(dir / kIndexName, std::ios::trunc);
    os << j.dump(1) << '\n';
}

ojson index_entry(const VideoRecord& v, const std::string& subset)
{
    ojson segs = ojson::array();
    for (const auto& a : v.annotations)
        segs.push_back({{"start", a.start_sec}, {"end", a.end_sec}, {"label", a.label}});
    ojson e = {{"duration_sec", v.duration_sec},
               {"resolution", {v.extraction_resolution.height, v.extraction_resolution.width}},
               {"segments", segs}};
    if (!subset.empty())
        e["subset"] = subset;
    return e;
}

}  // namespace

fs::path feature_path(const fs::path& dir, const std::string& id)
{
    return dir / "features" / (id + ".talf");
}

void write_features(const VideoRecord& v, const fs::path& dir, const std::string& subset)
{
    write_feature_file(v.features, feature_path(dir, v.id));
    ojson idx = load_index_json(dir);
    idx[v.id] = index_entry(v, subset);
    store_index_json(idx, dir);
}

void write_dataset(const std::vector<VideoRecord>& videos, const fs::path& dir,
                   const std::vector<std::string>& subsets)
{
    if (!subsets.empty() && subsets.size() != videos.size())
        throw InputError("write_dataset: subsets must be empty or match videos");
    ojson idx = ojson::object();
    for (std::size_t i = 0; i < videos.size(); ++i) {
        write_feature_file(videos[i].features, feature_path(dir, videos[i].id));
        idx[videos[i].id] = index_entry(videos[i], subsets.empty() ? std::string() : subsets[i]);
    }
    store_index_json(idx, dir);
}

std::vector<IndexEntry> read_annotation_index(const fs::path& dir)
{
    const fs::path file = dir / kIndexName;
    std::ifstream is(file);
    if (!is)
        throw FeatureFileError(FeatureFileError::Kind::missing, "annotation index not found: " + file.string());
    const ojson j = ojson::parse(is);
    std::vector<IndexEntry> out;
    for (const auto& [id, e] : j.items()) {
        IndexEntry entry;
        entry.id = id;
        entry.duration_sec = e.at("duration_sec").get<double>();
        entry.resolution = {e.at("resolution").at(0).get<int>(), e.at("resolution").at(1).get<int>()};
        for (const auto& s : e.at("segments"))
            entry.segments.push_back({s.at("start").get<double>(), s.at("end").get<double>(), s.at("label").get<int>()});
        entry.subset = e.value("subset", std::string());
        out.push_back(std::move(entry));
    }
    return out;
}

std::vector<std::string> list_index(const fs::path& dir)
{
    std::vector<std::string> ids;
    for (const auto& e : read_annotation_index(dir))
        ids.push_back(e.id);
    return ids;
}

namespace {

VideoRecord assemble(const fs::path& dir, IndexEntry e)
{
    VideoRecord v;
    v.id = std::move(e.id);
    v.duration_sec = e.duration_sec;
    v.annotations = std::move(e.segments);
    v.extraction_resolution = e.resolution;
    v.features = read_feature_file(feature_path(dir, v.id));
    return v;
}

}  // namespace

VideoRecord read_features(const fs::path& dir, const std::string& id)
{
    for (auto& e : read_annotation_index(dir))
        if (e.id == id)
            return assemble(dir, std::move(e));
    throw FeatureFileError(FeatureFileError::Kind::missing, "video '" + id + "' not in " + (dir / kIndexName).string());
}

std::vector<VideoRecord> read_dataset(const fs::path& dir, const std::string& subset)
{
    std::vector<VideoRecord> out;
    for (auto& e : read_annotation_index(dir))
        if (subset.empty() || e.subset == subset)
            out.push_back(assemble(dir, std::move(e)));
    return out;
}

}  // namespace tal
