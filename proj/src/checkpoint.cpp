#include "bitseg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

namespace bitseg {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'B', 'P', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
constexpr std::uint8_t dtype_tag()
{
    return std::is_same_v<T, float> ? 0 : 1;
}

class Writer {
public:
    void bytes(const void* p, std::size_t n)
    {
        const auto* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void u8(std::uint8_t v) { bytes(&v, 1); }
    void str(const std::string& s)
    {
        u32(static_cast<std::uint32_t>(s.size()));
        bytes(s.data(), s.size());
    }
    template <typename T>
    void tensor(const std::string& name, const Tensor<T>& t)
    {
        str(name);
        u8(dtype_tag<T>());
        u32(static_cast<std::uint32_t>(t.rank()));
        for (auto d : t.shape())
            u32(static_cast<std::uint32_t>(d));
        bytes(t.ptr(), t.numel() * sizeof(T));
    }
    const std::vector<char>& data() const { return buf_; }

private:
    std::vector<char> buf_;
};

class Reader {
public:
    Reader(std::vector<char> buf, std::string path) : buf_(std::move(buf)), path_(std::move(path)) {}

    void bytes(void* p, std::size_t n)
    {
        if (n > buf_.size() - pos_)
            fail("truncated file");
        std::memcpy(p, buf_.data() + pos_, n);
        pos_ += n;
    }
    std::uint32_t u32()
    {
        std::uint32_t v;
        bytes(&v, 4);
        return v;
    }
    std::uint8_t u8()
    {
        std::uint8_t v;
        bytes(&v, 1);
        return v;
    }
    std::string str()
    {
        const std::uint32_t n = u32();
        if (n > buf_.size() - pos_)
            fail("truncated file");
        std::string s(buf_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == buf_.size(); }
    [[noreturn]] void fail(const std::string& msg) const { throw CheckpointError("checkpoint " + path_ + ": " + msg); }

private:
    std::vector<char> buf_;
    std::size_t pos_ = 0;
    std::string path_;
};

struct RawTensor {
    std::uint8_t dtype = 0;
    Shape shape;
    std::vector<char> data;
};

struct RawCheckpoint {
    nlohmann::json meta;
    std::vector<std::string> order;
    std::map<std::string, RawTensor> tensors;
};

RawCheckpoint read_raw(const std::filesystem::path& path)
{
    std::ifstream f(path, std::ios::binary);
    if (!f)
        throw CheckpointError("cannot open checkpoint " + path.string());
    Reader r(std::vector<char>(std::istreambuf_iterator<char>(f), {}), path.string());
    char magic[4];
    r.bytes(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
        r.fail("bad magic (not a checkpoint)");
    if (const auto v = r.u32(); v != kVersion)
        r.fail("unsupported version " + std::to_string(v));
    RawCheckpoint out;
    try {
        out.meta = nlohmann::json::parse(r.str());
    } catch (const nlohmann::json::exception& e) {
        r.fail(std::string("bad config blob: ") + e.what());
    }
    const std::uint32_t count = r.u32();
    for (std::uint32_t k = 0; k < count; ++k) {
        std::string name = r.str();
        RawTensor t;
        t.dtype = r.u8();
        if (t.dtype > 1)
            r.fail("tensor " + name + " has unknown dtype " + std::to_string(t.dtype));
        const std::uint32_t rank = r.u32();
        if (rank > 8)
            r.fail("tensor " + name + " has rank " + std::to_string(rank));
        std::size_t n = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            t.shape.push_back(r.u32());
            n *= t.shape.back();
        }
        t.data.resize(n * (t.dtype == 0 ? 4 : 8));
        r.bytes(t.data.data(), t.data.size());
        if (!out.tensors.emplace(name, std::move(t)).second)
            r.fail("duplicate tensor " + name);
        out.order.push_back(std::move(name));
    }
    if (!r.done())
        r.fail("trailing bytes");
    return out;
}

[[noreturn]] void bad_checkpoint(const std::filesystem::path& path, const std::string& msg)
{
    throw CheckpointError("checkpoint " + path.string() + ": " + msg);
}

} // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const TrainState<T>& state, const RunConfig& run)
{
    RunConfig cfg = run;
    cfg.net = state.net;
    cfg.train = state.train;
    cfg.precision = std::is_same_v<T, float> ? Precision::f32 : Precision::f64;
    nlohmann::ordered_json meta{{"config", to_json(cfg)}, {"step", state.step}, {"adam_step", state.adam.step()}};

    Writer w;
    w.bytes(kMagic, 4);
    w.u32(kVersion);
    w.str(meta.dump());
    const auto& names = state.params.names();
    const auto& m = state.adam.first_moments();
    const auto& v = state.adam.second_moments();
    w.u32(static_cast<std::uint32_t>(names.size() * 2 + m.size() + v.size()));
    for (std::size_t k = 0; k < names.size(); ++k)
        w.tensor("param/" + names[k], state.params.tensors()[k]);
    for (std::size_t k = 0; k < names.size(); ++k)
        w.tensor("ema/" + names[k], state.ema[k]);
    for (std::size_t k = 0; k < m.size(); ++k)
        w.tensor("adam_m/" + names[k], m[k]);
    for (std::size_t k = 0; k < v.size(); ++k)
        w.tensor("adam_v/" + names[k], v[k]);

    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f)
            throw CheckpointError("cannot write checkpoint " + tmp.string());
        f.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
        if (!f)
            throw CheckpointError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path)
{
    RawCheckpoint raw = read_raw(path);
    auto fail = [&](const std::string& msg) { bad_checkpoint(path, msg); };
    Checkpoint<T> out;
    try {
        out.config = run_config_from_json(raw.meta.at("config"));
        out.state.step = raw.meta.at("step").get<std::int64_t>();
    } catch (const std::exception& e) {
        fail(std::string("bad config blob: ") + e.what());
    }
    if ((out.config.precision == Precision::f32) != std::is_same_v<T, float>)
        fail("saved at " + to_string(out.config.precision) + " precision");
    out.state.net = out.config.net;
    out.state.train = out.config.train;

    // The layout of a freshly built net is the reference for names and shapes.
    const ParamStore<T> layout = init_params<T>(out.state.net, 0);
    auto take = [&](const std::string& name, const Shape& shape) {
        auto it = raw.tensors.find(name);
        if (it == raw.tensors.end())
            bad_checkpoint(path, "missing tensor " + name);
        if (it->second.dtype != dtype_tag<T>())
            fail("tensor " + name + " has the wrong dtype");
        if (it->second.shape != shape)
            fail("tensor " + name + " has shape " + shape_str(it->second.shape) + ", expected " + shape_str(shape));
        Tensor<T> t(shape);
        std::memcpy(t.ptr(), it->second.data.data(), it->second.data.size());
        raw.tensors.erase(it);
        return t;
    };
    std::vector<Tensor<T>> m, v;
    const bool has_moments = raw.tensors.count("adam_m/" + layout.names().front()) != 0;
    for (std::size_t k = 0; k < layout.size(); ++k) {
        const auto& name = layout.names()[k];
        const auto& shape = layout.tensors()[k].shape();
        out.state.params.add(name, take("param/" + name, shape));
        out.state.ema.push_back(take("ema/" + name, shape));
        if (has_moments) {
            m.push_back(take("adam_m/" + name, shape));
            v.push_back(take("adam_v/" + name, shape));
        }
    }
    if (!raw.tensors.empty())
        fail("unexpected tensor " + raw.tensors.begin()->first);
    out.state.adam = Adam<T>(out.state.train.adam);
    out.state.adam.restore(raw.meta.value("adam_step", std::int64_t{0}), std::move(m), std::move(v));
    return out;
}

Precision checkpoint_precision(const std::filesystem::path& path)
{
    const RawCheckpoint raw = read_raw(path);
    try {
        return parse_precision(raw.meta.at("config").at("precision").get<std::string>());
    } catch (const std::exception& e) {
        throw CheckpointError("checkpoint " + path.string() + ": " + e.what());
    }
}

RunConfig load_checkpoint_config(const std::filesystem::path& path)
{
    const RawCheckpoint raw = read_raw(path);
    try {
        return run_config_from_json(raw.meta.at("config"));
    } catch (const std::exception& e) {
        throw CheckpointError("checkpoint " + path.string() + ": " + e.what());
    }
}

template void save_checkpoint<float>(const std::filesystem::path&, const TrainState<float>&, const RunConfig&);
template void save_checkpoint<double>(const std::filesystem::path&, const TrainState<double>&, const RunConfig&);
template Checkpoint<float> load_checkpoint<float>(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint<double>(const std::filesystem::path&);

} // namespace bitseg
