#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "fever/data/datasets.hpp"
#include "fever/eval/eval.hpp"
#include "fever/models/network.hpp"
#include "fever/train/trainer.hpp"

namespace fever::cli {

struct DataSection {
    std::string source = "synthetic";  // synthetic | manifest
    std::size_t channels = 3, height = 32, width = 32;
    std::size_t num_classes = 8;
    double noise_sigma = 0.1;
    double brightness = 0.1;
    std::uint64_t prototype_seed = 20211;
    std::size_t n_triplets = 2000, n_labeled = 2000, n_unlabeled = 2000;
    std::size_t n_test_triplets = 1000, n_test_labeled = 1000;
    // Held-out rendering: a class subset drawn with different noise, lighting and contrast.
    std::size_t transfer_classes = 7;
    double transfer_noise_sigma = 0.3;
    double transfer_brightness = 0.2;
    double transfer_contrast = 0.3;
    std::size_t n_transfer_train = 350, n_transfer_test = 700;
    // Manifest paths, relative to the config file.
    std::string triplets, labeled, unlabeled, test_triplets, test_labeled, transfer_train, transfer_test;
};

struct ModelSection {
    std::string backbone = "16/2,32/2,64/2,64/2";  // out_channels/stride per block
    std::size_t kernel_size = 3;
    std::size_t fec_dim = 32;
};

struct PhaseSection {
    std::size_t epochs = 0;
    std::size_t steps = 0;  // overrides epochs when nonzero
    double dropout = 0;
    std::size_t batch_triplets = 0, batch_labeled = 0, batch_unlabeled = 0;
};

struct RunConfig {
    std::uint64_t seed = 0;
    std::size_t seeds = 1;  // ablate repeats over seed, seed+1, ...
    DataSection data;
    ModelSection model;
    PhaseSection teacher{13, 0, 0.1, 64, 64, 0};
    std::vector<std::size_t> teacher_d_faces{32, 16};
    PhaseSection student{18, 0, 0.2, 36, 16, 16};
    std::size_t student_d_face = 32;
    train::OptimConfig optim;
    losses::LossWeights loss;
    losses::TripletLossConfig triplet;
    eval::ProbeConfig probe;
    std::filesystem::path base_dir;  // directory of the config file

    // Throws ConfigError naming the offending key.
    void validate() const;
};

// Sectioned "key = value" text; '#' starts a comment. Unknown sections or keys,
// malformed values and constraint violations throw ConfigError naming the key.
RunConfig parse_config_text(const std::string& text, const std::filesystem::path& base_dir = {});
RunConfig parse_config(const std::filesystem::path& path);

// Every key with its resolved value, in a form parse_config_text reads back.
std::string to_text(const RunConfig& config);

std::vector<std::string> known_keys(const std::string& section);
std::size_t edit_distance(const std::string& a, const std::string& b);

// Translations into the library configs.
ImageShape image_shape(const RunConfig& c);
models::ModelConfig teacher_model(const RunConfig& c, std::size_t which);
models::ModelConfig student_model(const RunConfig& c, std::size_t distill_dim);
train::TrainConfig teacher_train(const RunConfig& c, std::uint64_t seed);
train::TrainConfig student_train(const RunConfig& c, std::uint64_t seed);
data::SynthConfig synth_config(const RunConfig& c);
data::SynthConfig transfer_synth_config(const RunConfig& c);

}  // namespace fever::cli
