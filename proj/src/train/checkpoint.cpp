#include "fever/train/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>
#include <set>
#include <array>

#include "fever/errors.hpp"

namespace fever::train {
namespace {

enum class Tag : std::uint8_t { f32 = 1, f64 = 2, u64 = 3, u8 = 4 };

std::size_t tag_width(Tag t) {
    switch (t) {
        case Tag::f32: return 4;
        case Tag::f64: return 8;
        case Tag::u64: return 8;
        case Tag::u8: return 1;
    }
    return 0;
}

// Raw record as stored on disk.
struct Record {
    Tag tag;
    ndgrad::Shape dims;
    std::vector<unsigned char> bytes;  // little-endian payload
};

class Writer {
public:
    template <typename U>
    void put(U v) {
        static_assert(std::is_unsigned_v<U>);
        for (std::size_t i = 0; i < sizeof(U); ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
    }
    void put_string(const std::string& s) {
        put(static_cast<std::uint32_t>(s.size()));
        buf_.insert(buf_.end(), s.begin(), s.end());
    }
    void put_raw(const void* p, std::size_t n) {
        const auto* c = static_cast<const unsigned char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    const std::vector<unsigned char>& bytes() const { return buf_; }

private:
    std::vector<unsigned char> buf_;
};

template <typename U>
void append_le(std::vector<unsigned char>& out, U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

template <typename U>
U read_le(const unsigned char* p) {
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
    return v;
}

Record f32_record(const Array<float>& a) {
    Record r{Tag::f32, a.shape(), {}};
    r.bytes.reserve(4 * a.size());
    for (float v : a.data()) append_le(r.bytes, std::bit_cast<std::uint32_t>(v));
    return r;
}

Record u64_record(const std::vector<std::uint64_t>& v) {
    Record r{Tag::u64, {v.size()}, {}};
    for (auto x : v) append_le(r.bytes, x);
    return r;
}

Record text_record(const std::string& s) {
    return {Tag::u8, {s.size()}, std::vector<unsigned char>(s.begin(), s.end())};
}

class Reader {
public:
    Reader(std::vector<unsigned char> data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

    const unsigned char* take(std::size_t n, const char* what) {
        if (n > data_.size() - pos_) {
            throw FormatError(path_ + ": truncated while reading " + what);
        }
        const auto* p = data_.data() + pos_;
        pos_ += n;
        return p;
    }
    template <typename U>
    U get(const char* what) {
        return read_le<U>(take(sizeof(U), what));
    }
    std::string get_string(const char* what) {
        const auto n = get<std::uint32_t>(what);
        const auto* p = take(n, what);
        return std::string(reinterpret_cast<const char*>(p), n);
    }
    bool at_end() const { return pos_ == data_.size(); }
    const std::string& path() const { return path_; }

private:
    std::vector<unsigned char> data_;
    std::size_t pos_ = 0;
    std::string path_;
};

class Records {
public:
    Records(std::map<std::string, Record> records, std::string path)
        : records_(std::move(records)), path_(std::move(path)) {}

    bool has(const std::string& name) const { return records_.count(name) != 0; }

    const Record& get(const std::string& name, Tag tag) {
        const auto it = records_.find(name);
        if (it == records_.end()) throw FormatError(path_ + ": missing array " + name);
        if (it->second.tag != tag) throw FormatError(path_ + ": array " + name + " has an unexpected dtype");
        used_.insert(name);
        return it->second;
    }

    Array<float> f32(const std::string& name) {
        const auto& r = get(name, Tag::f32);
        Array<float> a(r.dims);
        for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::bit_cast<float>(read_le<std::uint32_t>(&r.bytes[4 * i]));
        return a;
    }

    std::vector<std::uint64_t> u64(const std::string& name) {
        const auto& r = get(name, Tag::u64);
        if (r.dims.size() != 1) throw FormatError(path_ + ": array " + name + " must be rank 1");
        std::vector<std::uint64_t> v(r.dims[0]);
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = read_le<std::uint64_t>(&r.bytes[8 * i]);
        return v;
    }

    std::uint64_t scalar(const std::string& name) {
        const auto v = u64(name);
        if (v.size() != 1) throw FormatError(path_ + ": array " + name + " must hold one value");
        return v[0];
    }

    std::string text(const std::string& name) {
        const auto& r = get(name, Tag::u8);
        return std::string(r.bytes.begin(), r.bytes.end());
    }

    void check_all_used() const {
        for (const auto& [name, _] : records_) {
            if (!used_.count(name)) throw FormatError(path_ + ": unexpected array " + name);
        }
    }

private:
    std::map<std::string, Record> records_;
    std::set<std::string> used_;
    std::string path_;
};

constexpr std::array<const char*, 3> kStreams{"triplets", "labeled", "unlabeled"};

data::StreamState* stream_of(data::SamplerState& s, std::size_t i) {
    return i == 0 ? &s.triplets : i == 1 ? &s.labeled : &s.unlabeled;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Network<float>& model, const TrainState* state) {
    std::vector<std::pair<std::string, Record>> arrays;
    for (const auto& p : model.params()) arrays.emplace_back("param/" + p.name, f32_record(p.value));
    for (const auto& b : model.buffers()) arrays.emplace_back("buffer/" + b.name, f32_record(b.value));
    if (state) {
        for (const auto& v : state->velocity) arrays.emplace_back("velocity/" + v.name, f32_record(v.value));
        arrays.emplace_back("state/step", u64_record({state->step}));
        arrays.emplace_back("state/epoch", u64_record({state->sampler.epoch}));
        arrays.emplace_back("state/dropout_rng", text_record(state->dropout_rng));
        data::SamplerState sampler = state->sampler;
        for (std::size_t i = 0; i < kStreams.size(); ++i) {
            const auto& s = *stream_of(sampler, i);
            const std::string prefix = std::string("state/") + kStreams[i] + "/";
            arrays.emplace_back(prefix + "order", u64_record(s.order));
            arrays.emplace_back(prefix + "cursor", u64_record({s.cursor}));
            arrays.emplace_back(prefix + "passes", u64_record({s.passes}));
            arrays.emplace_back(prefix + "rng", text_record(s.rng));
        }
    }

    Writer w;
    w.put_raw("FEVR", 4);
    w.put(kCheckpointVersion);
    w.put_string(model.config().to_text());
    w.put(static_cast<std::uint32_t>(arrays.size()));
    for (const auto& [name, r] : arrays) {
        w.put_string(name);
        w.put(static_cast<std::uint8_t>(r.tag));
        w.put(static_cast<std::uint32_t>(r.dims.size()));
        for (auto d : r.dims) w.put(static_cast<std::uint64_t>(d));
        w.put_raw(r.bytes.data(), r.bytes.size());
    }

    // Write to a sibling file first so an interrupted save never clobbers a good checkpoint.
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw DataError("cannot write checkpoint " + tmp.string());
        out.write(reinterpret_cast<const char*>(w.bytes().data()), static_cast<std::streamsize>(w.bytes().size()));
        if (!out) throw DataError("write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw DataError("cannot move checkpoint into place at " + path.string() + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    Reader r(std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {}), path.string());

    if (std::memcmp(r.take(4, "magic"), "FEVR", 4) != 0) throw FormatError(path.string() + ": not a checkpoint (bad magic)");
    const auto version = r.get<std::uint32_t>("version");
    if (version != kCheckpointVersion) {
        throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
    }
    Checkpoint ck;
    try {
        ck.config = models::ModelConfig::from_text(r.get_string("config"));
    } catch (const ConfigError& e) {
        throw FormatError(path.string() + ": bad config blob: " + e.what());
    }

    std::map<std::string, Record> records;
    const auto count = r.get<std::uint32_t>("array count");
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = r.get_string("array name");
        const auto tag = static_cast<Tag>(r.get<std::uint8_t>("dtype"));
        if (tag_width(tag) == 0) throw FormatError(path.string() + ": array " + name + " has an unknown dtype");
        const auto rank = r.get<std::uint32_t>("rank");
        if (rank > 8) throw FormatError(path.string() + ": array " + name + " has rank " + std::to_string(rank));
        Record rec{tag, {}, {}};
        std::size_t n = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const auto dim = r.get<std::uint64_t>("dims");
            if (dim != 0 && n > SIZE_MAX / tag_width(tag) / dim) {
                throw FormatError(path.string() + ": array " + name + " is too large");
            }
            n *= dim;
            rec.dims.push_back(dim);
        }
        const auto* p = r.take(n * tag_width(tag), "array payload");
        rec.bytes.assign(p, p + n * tag_width(tag));
        if (!records.emplace(name, std::move(rec)).second) {
            throw FormatError(path.string() + ": duplicate array " + name);
        }
    }
    if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes after the last array");

    // Network arrays are matched against a freshly built network's names, which fixes their order.
    const Network<float> layout(ck.config, 0);
    Records recs(std::move(records), path.string());
    for (const auto& p : layout.params()) ck.params.push_back({p.name, recs.f32("param/" + p.name)});
    for (const auto& b : layout.buffers()) ck.buffers.push_back({b.name, recs.f32("buffer/" + b.name)});
    if (recs.has("state/step")) {
        TrainState st;
        for (const auto& p : layout.params()) st.velocity.push_back({p.name, recs.f32("velocity/" + p.name)});
        st.step = recs.scalar("state/step");
        st.sampler.epoch = recs.scalar("state/epoch");
        st.dropout_rng = recs.text("state/dropout_rng");
        for (std::size_t i = 0; i < kStreams.size(); ++i) {
            auto& s = *stream_of(st.sampler, i);
            const std::string prefix = std::string("state/") + kStreams[i] + "/";
            s.order = recs.u64(prefix + "order");
            s.cursor = recs.scalar(prefix + "cursor");
            s.passes = recs.scalar(prefix + "passes");
            s.rng = recs.text(prefix + "rng");
        }
        ck.train = std::move(st);
    }
    recs.check_all_used();
    return ck;
}

Network<float> network_from_checkpoint(const Checkpoint& ck) {
    Network<float> net(ck.config, 0);
    auto fill = [](models::NamedArrays<float>& dst, const models::NamedArrays<float>& src, const char* kind) {
        if (dst.size() != src.size()) throw FormatError(std::string("checkpoint has the wrong number of ") + kind);
        for (std::size_t i = 0; i < dst.size(); ++i) {
            if (dst[i].name != src[i].name || dst[i].value.shape() != src[i].value.shape()) {
                throw FormatError("checkpoint " + std::string(kind) + " " + src[i].name + " " +
                                  ndgrad::shape_str(src[i].value.shape()) + " does not match config " + dst[i].name +
                                  " " + ndgrad::shape_str(dst[i].value.shape()));
            }
            dst[i].value = src[i].value;
        }
    };
    fill(net.params(), ck.params, "params");
    fill(net.buffers(), ck.buffers, "buffers");
    if (ck.train) {
        for (std::size_t i = 0; i < ck.params.size(); ++i) {
            if (ck.train->velocity.at(i).value.shape() != ck.params[i].value.shape()) {
                throw FormatError("checkpoint velocity " + ck.train->velocity[i].name + " does not match its parameter");
            }
        }
    }
    return net;
}

Network<float> load_network(const std::filesystem::path& path) { return network_from_checkpoint(load_checkpoint(path)); }

}  // namespace fever::train
