#pragma once

#include <cstdint>
#include <vector>

#include "fever/image.hpp"
#include "fever/ndgrad/array.hpp"
#include "fever/triplet.hpp"

namespace fever::data {

using ndgrad::Array;

// Images with class ids (the expression-classification stream).
struct LabeledDataset {
    ImageShape shape;
    std::size_t num_classes = 8;
    Array<float> images;  // [n, C, H, W], values in [0, 1]
    std::vector<std::size_t> labels;

    std::size_t size() const { return labels.size(); }
};

// Image triplets with the annotated most-similar pair.
struct TripletDataset {
    ImageShape shape;
    Array<float> images;  // [3n, C, H, W]; rows 3i..3i+2 are triplet i
    std::vector<SimilarPair> pairs;

    std::size_t size() const { return pairs.size(); }
};

// Face crops without labels (the distillation-only stream).
struct UnlabeledDataset {
    ImageShape shape;
    Array<float> images;  // [n, C, H, W]

    std::size_t size() const { return images.empty() ? 0 : images.dim(0); }
};

// How a class prototype is turned into a sample.
struct Rendering {
    double noise_sigma = 0.1;     // additive Gaussian pixel noise
    double brightness = 0.1;      // per-sample shift, uniform in [-b, b]
    double contrast_jitter = 0.0; // per-sample contrast factor, uniform in [1-c, 1+c] about 0.5
};

struct SynthConfig {
    ImageShape shape{3, 32, 32};
    std::size_t num_classes = 8;
    Rendering rendering;
    // Prototype of class c is drawn from prototype_seed + c, so every dataset built
    // with the same prototype_seed shares its classes.
    std::uint64_t prototype_seed = 20211;
};

// Uniform [0, 1] per pixel, fixed by (prototype_seed, class).
Array<float> class_prototype(const SynthConfig& config, std::size_t cls);

// Stratified: class i % K for sample i before a seeded shuffle.
LabeledDataset gen_synthetic_labeled(std::size_t n, const SynthConfig& config, std::uint64_t seed);

// Two samples of one class plus one of another, at shuffled positions.
TripletDataset gen_synthetic_triplets(std::size_t n, const SynthConfig& config, std::uint64_t seed);

// Samples of uniformly random classes, labels discarded.
UnlabeledDataset gen_synthetic_unlabeled(std::size_t n, const SynthConfig& config, std::uint64_t seed);

// Copies rows (first axis) of a [n, ...] array.
Array<float> gather_images(const Array<float>& images, const std::vector<std::size_t>& rows);

}  // namespace fever::data
