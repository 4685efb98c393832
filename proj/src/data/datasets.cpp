#include "fever/data/datasets.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>

namespace fever::data {
namespace {

using Rng = std::mt19937_64;

class Renderer {
public:
    explicit Renderer(const SynthConfig& config) : config_(config) {
        for (std::size_t c = 0; c < config.num_classes; ++c) prototypes_.push_back(class_prototype(config, c));
    }

    void render(std::size_t cls, Rng& rng, float* out) const {
        const auto& r = config_.rendering;
        std::normal_distribution<double> noise(0.0, 1.0);
        std::uniform_real_distribution<double> unit(-1.0, 1.0);
        const double shift = r.brightness * unit(rng);
        const double contrast = 1.0 + r.contrast_jitter * unit(rng);
        const auto& proto = prototypes_.at(cls);
        for (std::size_t i = 0; i < proto.size(); ++i) {
            const double v = contrast * (proto[i] - 0.5) + 0.5 + shift + r.noise_sigma * noise(rng);
            out[i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }

private:
    SynthConfig config_;
    std::vector<Array<float>> prototypes_;
};

ndgrad::Shape batch_shape(std::size_t n, const ImageShape& s) { return {n, s.channels, s.height, s.width}; }

void require_classes(const SynthConfig& config, std::size_t min) {
    if (config.num_classes < min) {
        throw std::invalid_argument("synthetic data needs at least " + std::to_string(min) + " classes");
    }
}

}  // namespace

Array<float> class_prototype(const SynthConfig& config, std::size_t cls) {
    Rng rng(config.prototype_seed + cls);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Array<float> p({config.shape.channels, config.shape.height, config.shape.width});
    for (auto& v : p.data()) v = static_cast<float>(u(rng));
    return p;
}

LabeledDataset gen_synthetic_labeled(std::size_t n, const SynthConfig& config, std::uint64_t seed) {
    if (n == 0) throw std::invalid_argument("gen_synthetic_labeled: n must be positive");
    require_classes(config, 1);
    Rng rng(seed);
    LabeledDataset ds{config.shape, config.num_classes, Array<float>(batch_shape(n, config.shape)), {}};
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) ds.labels[i] = i % config.num_classes;
    std::shuffle(ds.labels.begin(), ds.labels.end(), rng);
    const Renderer renderer(config);
    const std::size_t per = config.shape.size();
    for (std::size_t i = 0; i < n; ++i) renderer.render(ds.labels[i], rng, ds.images.data().data() + i * per);
    return ds;
}

TripletDataset gen_synthetic_triplets(std::size_t n, const SynthConfig& config, std::uint64_t seed) {
    if (n == 0) throw std::invalid_argument("gen_synthetic_triplets: n must be positive");
    require_classes(config, 2);
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> pick_class(0, config.num_classes - 1);
    std::uniform_int_distribution<std::size_t> pick_other(0, config.num_classes - 2);
    std::uniform_int_distribution<int> pick_slot(0, 2);
    TripletDataset ds{config.shape, Array<float>(batch_shape(3 * n, config.shape)), {}};
    ds.pairs.reserve(n);
    const Renderer renderer(config);
    const std::size_t per = config.shape.size();
    for (std::size_t t = 0; t < n; ++t) {
        const std::size_t same = pick_class(rng);
        std::size_t other = pick_other(rng);
        if (other >= same) ++other;
        const int odd = pick_slot(rng);  // position of the odd one out
        for (int slot = 0; slot < 3; ++slot) {
            renderer.render(slot == odd ? other : same, rng, ds.images.data().data() + (3 * t + slot) * per);
        }
        ds.pairs.push_back(odd == 2 ? SimilarPair::p12 : odd == 1 ? SimilarPair::p13 : SimilarPair::p23);
    }
    return ds;
}

UnlabeledDataset gen_synthetic_unlabeled(std::size_t n, const SynthConfig& config, std::uint64_t seed) {
    if (n == 0) throw std::invalid_argument("gen_synthetic_unlabeled: n must be positive");
    require_classes(config, 1);
    Rng rng(seed);
    std::uniform_int_distribution<std::size_t> pick_class(0, config.num_classes - 1);
    UnlabeledDataset ds{config.shape, Array<float>(batch_shape(n, config.shape))};
    const Renderer renderer(config);
    const std::size_t per = config.shape.size();
    for (std::size_t i = 0; i < n; ++i) renderer.render(pick_class(rng), rng, ds.images.data().data() + i * per);
    return ds;
}

Array<float> gather_images(const Array<float>& images, const std::vector<std::size_t>& rows) {
    ndgrad::Shape s = images.shape();
    const std::size_t n = s.at(0);
    const std::size_t per = n == 0 ? 0 : images.size() / n;
    s[0] = rows.size();
    Array<float> out(s);
    for (std::size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] >= n) throw std::out_of_range("gather_images: row out of range");
        std::copy_n(images.data().begin() + rows[r] * per, per, out.data().begin() + r * per);
    }
    return out;
}

}  // namespace fever::data
