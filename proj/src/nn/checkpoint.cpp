#include "tal/nn/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace tal::nn {

namespace {

constexpr char kMagic[4] = {'T', 'A', 'L', 'C'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& b, std::uint32_t v)
{
    for (int i = 0; i < 4; ++i)
        b.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_u64(std::string& b, std::uint64_t v)
{
    for (int i = 0; i < 8; ++i)
        b.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class Reader {
public:
    Reader(const std::string& buf, std::string file) : buf_(buf), file_(std::move(file)) {}

    std::uint64_t read(int bytes)
    {
        need(static_cast<std::size_t>(bytes));
        std::uint64_t v = 0;
        for (int i = 0; i < bytes; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf_[pos_ + i])) << (8 * i);
        pos_ += static_cast<std::size_t>(bytes);
        return v;
    }

    std::string bytes(std::size_t n)
    {
        need(n);
        std::string s = buf_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool done() const noexcept { return pos_ == buf_.size(); }

private:
    void need(std::size_t n) const
    {
        if (pos_ + n > buf_.size())
            throw CheckpointError(file_ + ": truncated checkpoint");
    }

    const std::string& buf_;
    std::string file_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& file, const nlohmann::json& config, const ParamList& params)
{
    std::string b;
    b.append(kMagic, 4);
    put_u32(b, kVersion);
    const std::string cfg = config.dump();
    put_u32(b, static_cast<std::uint32_t>(cfg.size()));
    b += cfg;
    put_u32(b, static_cast<std::uint32_t>(params.size()));
    for (const Param* p : params) {
        put_u32(b, static_cast<std::uint32_t>(p->name.size()));
        b += p->name;
        put_u32(b, static_cast<std::uint32_t>(p->value.rows()));
        put_u32(b, static_cast<std::uint32_t>(p->value.cols()));
        for (Eigen::Index i = 0; i < p->value.rows(); ++i)
            for (Eigen::Index j = 0; j < p->value.cols(); ++j)
                put_u64(b, std::bit_cast<std::uint64_t>(p->value(i, j)));
    }
    if (file.has_parent_path())
        std::filesystem::create_directories(file.parent_path());
    std::ofstream os(file, std::ios::binary | std::ios::trunc);
    os.write(b.data(), static_cast<std::streamsize>(b.size()));
    if (!os)
        throw CheckpointError("cannot write " + file.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& file)
{
    std::ifstream is(file, std::ios::binary);
    if (!is)
        throw CheckpointError("checkpoint not found: " + file.string());
    const std::string buf((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    Reader r(buf, file.string());
    if (r.bytes(4) != std::string(kMagic, 4))
        throw CheckpointError(file.string() + ": not a checkpoint");
    if (r.read(4) != kVersion)
        throw CheckpointError(file.string() + ": unsupported checkpoint version");

    Checkpoint ck;
    ck.config = nlohmann::json::parse(r.bytes(r.read(4)));
    const auto count = r.read(4);
    for (std::uint64_t n = 0; n < count; ++n) {
        std::string name = r.bytes(r.read(4));
        const auto rows = static_cast<Eigen::Index>(r.read(4));
        const auto cols = static_cast<Eigen::Index>(r.read(4));
        Mat m(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i)
            for (Eigen::Index j = 0; j < cols; ++j)
                m(i, j) = std::bit_cast<double>(r.read(8));
        ck.arrays.emplace_back(std::move(name), std::move(m));
    }
    if (!r.done())
        throw CheckpointError(file.string() + ": trailing bytes");
    return ck;
}

void load_params(const Checkpoint& ckpt, const ParamList& params)
{
    std::map<std::string, const Mat*> by_name;
    for (const auto& [name, m] : ckpt.arrays)
        by_name[name] = &m;
    for (Param* p : params) {
        const auto it = by_name.find(p->name);
        if (it == by_name.end())
            throw CheckpointError("checkpoint lacks parameter " + p->name);
        if (it->second->rows() != p->value.rows() || it->second->cols() != p->value.cols())
            throw CheckpointError("shape mismatch for parameter " + p->name);
        p->value = *it->second;
        p->zero_grad();
    }
}

}  // namespace tal::nn
