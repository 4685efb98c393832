#include "fever/models/network.hpp"

#include <cmath>
#include <cstring>
#include <iomanip>
#include <map>
#include <random>
#include <sstream>

#include "fever/errors.hpp"

namespace fever::models {
namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& value, char sep) {
    std::vector<std::size_t> out;
    if (value.empty()) return out;
    std::stringstream ss(value);
    std::string item;
    while (std::getline(ss, item, sep)) {
        try {
            std::size_t pos = 0;
            const auto v = std::stoull(trim(item), &pos);
            if (pos != trim(item).size()) throw std::invalid_argument(item);
            out.push_back(static_cast<std::size_t>(v));
        } catch (const std::exception&) {
            throw ConfigError(key, key + ": expected unsigned integer list, got '" + value + "'");
        }
    }
    return out;
}

template <typename T>
void fill_he_normal(Array<T>& a, std::size_t fan_in, Rng& rng) {
    std::normal_distribution<double> n(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (auto& v : a.data()) v = static_cast<T>(n(rng));
}

}  // namespace

void ModelConfig::validate() const {
    if (input.channels == 0 || input.height == 0 || input.width == 0) {
        throw ConfigError("input_shape", "input_shape: all dimensions must be positive, got " + input.str());
    }
    for (const auto& b : backbone_blocks) {
        if (b.out_channels == 0) throw ConfigError("backbone_channels", "backbone_channels: must be positive");
        if (b.stride == 0) throw ConfigError("backbone_strides", "backbone_strides: must be positive");
    }
    if (kernel_size == 0 || kernel_size % 2 == 0) {
        throw ConfigError("kernel_size", "kernel_size: must be odd and positive, got " + std::to_string(kernel_size));
    }
    if (d_face == 0) throw ConfigError("d_face", "d_face: must be positive");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
        throw ConfigError("dropout", "dropout: must be in [0, 1)");
    }
    if (heads.fec == 0) throw ConfigError("head_fec", "head_fec: must be positive");
    if (heads.classes == 0) throw ConfigError("head_classes", "head_classes: must be positive");
    if (heads.distill && *heads.distill == 0) throw ConfigError("head_distill", "head_distill: must be positive");
}

std::string ModelConfig::to_text() const {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "input = " << input.channels << 'x' << input.height << 'x' << input.width << '\n';
    os << "backbone_channels = ";
    for (std::size_t i = 0; i < backbone_blocks.size(); ++i) os << (i ? "," : "") << backbone_blocks[i].out_channels;
    os << "\nbackbone_strides = ";
    for (std::size_t i = 0; i < backbone_blocks.size(); ++i) os << (i ? "," : "") << backbone_blocks[i].stride;
    os << "\nkernel_size = " << kernel_size << '\n';
    os << "d_face = " << d_face << '\n';
    os << "dropout_rate = " << dropout_rate << '\n';
    os << "head_fec = " << heads.fec << '\n';
    os << "head_classes = " << heads.classes << '\n';
    os << "head_distill = ";
    if (heads.distill) {
        os << *heads.distill;
    } else {
        os << "none";
    }
    os << '\n';
    return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
    std::map<std::string, std::string> kv;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("", "model config: malformed line '" + line + "'");
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    auto get = [&](const std::string& key) {
        auto it = kv.find(key);
        if (it == kv.end()) throw ConfigError(key, "model config: missing key '" + key + "'");
        return it->second;
    };
    auto get_uint = [&](const std::string& key) {
        auto v = parse_list(key, get(key), ',');
        if (v.size() != 1) throw ConfigError(key, key + ": expected one unsigned integer");
        return v[0];
    };

    ModelConfig c;
    const auto dims = parse_list("input", get("input"), 'x');
    if (dims.size() != 3) throw ConfigError("input", "input: expected CxHxW");
    c.input = {dims[0], dims[1], dims[2]};
    const auto chans = parse_list("backbone_channels", get("backbone_channels"), ',');
    const auto strides = parse_list("backbone_strides", get("backbone_strides"), ',');
    if (chans.size() != strides.size()) {
        throw ConfigError("backbone_strides", "backbone_strides: length differs from backbone_channels");
    }
    c.backbone_blocks.clear();
    for (std::size_t i = 0; i < chans.size(); ++i) c.backbone_blocks.push_back({chans[i], strides[i]});
    c.kernel_size = get_uint("kernel_size");
    c.d_face = get_uint("d_face");
    try {
        c.dropout_rate = std::stod(get("dropout_rate"));
    } catch (const std::invalid_argument&) {
        throw ConfigError("dropout_rate", "dropout_rate: expected a number");
    }
    c.heads.fec = get_uint("head_fec");
    c.heads.classes = get_uint("head_classes");
    const auto distill = get("head_distill");
    if (distill != "none") c.heads.distill = get_uint("head_distill");
    c.validate();
    return c;
}

std::size_t expected_parameter_count(const ModelConfig& config) {
    const std::size_t k2 = config.kernel_size * config.kernel_size;
    std::size_t count = 0;
    std::size_t in = config.input.channels;
    for (const auto& b : config.backbone_blocks) {
        count += in * k2 * b.out_channels + 2 * b.out_channels;
        in = b.out_channels;
    }
    const std::size_t d = config.d_face;
    count += in * d + 2 * d;
    std::size_t head_width = config.heads.fec + config.heads.classes + config.heads.distill.value_or(0);
    count += head_width * d + head_width;
    return count;
}

template <typename T>
const Array<T>& find_array(const NamedArrays<T>& arrays, const std::string& name) {
    for (const auto& a : arrays) {
        if (a.name == name) return a.value;
    }
    throw std::out_of_range("no array named '" + name + "'");
}

template <typename T>
Network<T>::Network(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
    config_.validate();
    Rng rng(seed);
    const std::size_t k = config_.kernel_size;
    std::size_t in = config_.input.channels;

    auto add_bn = [&](const std::string& prefix, std::size_t channels) {
        params_.push_back({prefix + ".bn.gamma", Array<T>::ones({channels})});
        params_.push_back({prefix + ".bn.beta", Array<T>::zeros({channels})});
        buffers_.push_back({prefix + ".bn.running_mean", Array<T>::zeros({channels})});
        buffers_.push_back({prefix + ".bn.running_var", Array<T>::ones({channels})});
    };
    for (std::size_t i = 0; i < config_.backbone_blocks.size(); ++i) {
        const auto& b = config_.backbone_blocks[i];
        const std::string prefix = "backbone." + std::to_string(i);
        Array<T> w({b.out_channels, in, k, k});
        fill_he_normal(w, in * k * k, rng);
        params_.push_back({prefix + ".conv.weight", std::move(w)});
        add_bn(prefix, b.out_channels);
        in = b.out_channels;
    }
    Array<T> proj({config_.d_face, in, 1, 1});
    fill_he_normal(proj, in, rng);
    params_.push_back({"proj.conv.weight", std::move(proj)});
    add_bn("proj", config_.d_face);

    // Head order is fixed (fec, cls, distill) so that a student and a teacher with
    // the same trunk and seed share every non-distill initial value.
    auto add_head = [&](const std::string& name, std::size_t width) {
        Array<T> w({width, config_.d_face});
        fill_he_normal(w, config_.d_face, rng);
        params_.push_back({"head." + name + ".weight", std::move(w)});
        params_.push_back({"head." + name + ".bias", Array<T>::zeros({width})});
    };
    add_head("fec", config_.heads.fec);
    add_head("cls", config_.heads.classes);
    if (config_.heads.distill) add_head("distill", *config_.heads.distill);
}

template <typename T>
std::size_t Network<T>::parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
}

template <typename T>
std::size_t Network<T>::index_of(const std::string& name) const {
    for (std::size_t i = 0; i < params_.size(); ++i) {
        if (params_[i].name == name) return i;
    }
    throw std::out_of_range("no parameter named '" + name + "'");
}

template <typename T>
std::vector<Var<T>> Network<T>::bind(Tape<T>& tape) const {
    std::vector<Var<T>> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(tape.leaf(p.value));
    return out;
}

template <typename T>
Var<T> Network<T>::backbone(const std::vector<Var<T>>& bound, const Var<T>& images, NamedArrays<T>& buffers) const {
    const auto& in = config_.input;
    const ndgrad::Shape expected{images.shape().empty() ? 0 : images.shape()[0], in.channels, in.height, in.width};
    if (images.shape() != expected) {
        throw ShapeError("forward: expected images " + ndgrad::shape_str(expected) + ", got " +
                         ndgrad::shape_str(images.shape()));
    }
    if (bound.size() != params_.size()) throw ShapeError("forward: bound parameter count mismatch");
    auto p = [&](const std::string& name) { return bound[index_of(name)]; };
    auto buf = [&](const std::string& name) -> Array<T>& {
        for (auto& b : buffers) {
            if (b.name == name) return b.value;
        }
        throw std::out_of_range("no buffer named '" + name + "'");
    };
    auto conv_bn_relu = [&](const Var<T>& h, const std::string& prefix, std::size_t stride) {
        auto c = ndgrad::conv2d(h, p(prefix + ".conv.weight"), stride, ndgrad::Padding::same);
        auto b = ndgrad::batchnorm2d(c, p(prefix + ".bn.gamma"), p(prefix + ".bn.beta"), buf(prefix + ".bn.running_mean"),
                                     buf(prefix + ".bn.running_var"));
        return ndgrad::relu(b);
    };
    Var<T> h = images;
    for (std::size_t i = 0; i < config_.backbone_blocks.size(); ++i) {
        h = conv_bn_relu(h, "backbone." + std::to_string(i), config_.backbone_blocks[i].stride);
    }
    h = conv_bn_relu(h, "proj", 1);
    return ndgrad::global_avg_pool(h);
}

template <typename T>
Outputs<T> Network<T>::heads(const std::vector<Var<T>>& bound, const Var<T>& embedding, Rng& rng) const {
    auto p = [&](const std::string& name) { return bound[index_of(name)]; };
    const Var<T> dropped = ndgrad::dropout(embedding, config_.dropout_rate, rng);
    Outputs<T> out;
    out.embedding = embedding;
    out.fec = ndgrad::linear(dropped, p("head.fec.weight"), p("head.fec.bias"));
    out.logits = ndgrad::linear(dropped, p("head.cls.weight"), p("head.cls.bias"));
    if (config_.heads.distill) {
        out.distill = ndgrad::linear(dropped, p("head.distill.weight"), p("head.distill.bias"));
    }
    return out;
}

template <typename T>
Outputs<T> Network<T>::forward(const std::vector<Var<T>>& bound, const Var<T>& images, Rng& rng) {
    return heads(bound, backbone(bound, images, buffers_), rng);
}

template <typename T>
Predictions<T> Network<T>::predict(const Array<T>& images, std::size_t chunk) const {
    if (images.rank() != 4) throw ShapeError("predict: expected NCHW images, got " + ndgrad::shape_str(images.shape()));
    const std::size_t n = images.dim(0);
    const std::size_t per = images.size() / std::max<std::size_t>(n, 1);
    Predictions<T> out;
    out.embedding = Array<T>({n, config_.d_face});
    out.fec = Array<T>({n, config_.heads.fec});
    out.logits = Array<T>({n, config_.heads.classes});
    if (config_.heads.distill) out.distill = Array<T>({n, *config_.heads.distill});
    Rng unused(0);
    NamedArrays<T> buffers = buffers_;
    for (std::size_t start = 0; start < n; start += chunk) {
        const std::size_t m = std::min(chunk, n - start);
        ndgrad::Shape s = images.shape();
        s[0] = m;
        std::vector<T> slice(images.data().begin() + start * per, images.data().begin() + (start + m) * per);
        Tape<T> tape(Mode::eval);
        const auto bound = bind(tape);
        const auto x = tape.constant(Array<T>(s, std::move(slice)));
        const auto o = heads(bound, backbone(bound, x, buffers), unused);
        auto copy_rows = [&](const Var<T>& v, Array<T>& dst) {
            const std::size_t w = v.shape()[1];
            std::copy(v.value().data().begin(), v.value().data().end(), dst.data().begin() + start * w);
        };
        copy_rows(o.embedding, out.embedding);
        copy_rows(o.fec, out.fec);
        copy_rows(o.logits, out.logits);
        if (o.distill) copy_rows(*o.distill, *out.distill);
    }
    return out;
}

template <typename T>
std::uint64_t parameter_checksum(const Network<T>& net) {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&h](const void* data, std::size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < len; ++i) {
            h ^= p[i];
            h *= 1099511628211ULL;
        }
    };
    for (const auto* set : {&net.params(), &net.buffers()}) {
        for (const auto& a : *set) {
            mix(a.name.data(), a.name.size());
            mix(a.value.data().data(), a.value.size() * sizeof(T));
        }
    }
    return h;
}

template class Network<float>;
template class Network<double>;
template const Array<float>& find_array(const NamedArrays<float>&, const std::string&);
template const Array<double>& find_array(const NamedArrays<double>&, const std::string&);
template std::uint64_t parameter_checksum(const Network<float>&);
template std::uint64_t parameter_checksum(const Network<double>&);

}  // namespace fever::models
