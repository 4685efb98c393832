#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "fever/data/sampler.hpp"
#include "fever/distill/distill.hpp"
#include "fever/losses/losses.hpp"
#include "fever/train/optim.hpp"

namespace fever::train {

using models::Network;

struct TrainConfig {
    std::size_t epochs = 5;
    std::size_t steps = 0;  // overrides epochs when nonzero
    data::BatchSizes batch{64, 64, 0};
    bool drop_last = true;
    OptimConfig optim;
    losses::LossWeights weights;
    losses::TripletLossConfig triplet;
    std::uint64_t seed = 0;

    void validate() const;
};

// Datasets are borrowed and must outlive the trainer.
struct TrainData {
    const data::TripletDataset* triplets = nullptr;
    const data::LabeledDataset* labeled = nullptr;
    const data::UnlabeledDataset* unlabeled = nullptr;
};

struct StepMetrics {
    std::uint64_t step = 0;  // 1-based
    double l_fec = 0;
    double l_aff = 0;
    double l_rkd_d = 0;
    double l_rkd_a = 0;
    double total = 0;

    std::string to_json() const;
    friend bool operator==(const StepMetrics&, const StepMetrics&) = default;
};

// Everything besides the network needed to continue a run bit-identically.
struct TrainState {
    std::uint64_t step = 0;
    data::SamplerState sampler;
    std::string dropout_rng;
    NamedArrays<float> velocity;
};

// One optimizer step per call. Each step forwards the concatenation
// [triplet images, labeled images, unlabeled images] through the network once,
// takes the FEC loss on the triplet rows and cross-entropy on the labeled rows and,
// with an ensemble, the RKD losses of the distill head over all rows against the
// teacher targets for the same images. Without an ensemble this is the teacher
// objective L_fec + alpha L_aff.
class Trainer {
public:
    Trainer(TrainConfig config, Network<float>& model, TrainData data,
            const distill::TeacherEnsemble<float>* ensemble = nullptr);

    const TrainConfig& config() const { return config_; }
    std::uint64_t step() const { return step_; }
    std::size_t epoch() const { return sampler_.epoch(); }
    // Steps implied by the config: `steps`, or epochs x floor(n_triplets / batch).
    std::uint64_t planned_steps() const;

    StepMetrics train_step();

    // Runs until planned_steps() is reached; calls `on_step` after every step.
    std::vector<StepMetrics> run(const std::function<void(const StepMetrics&)>& on_step = {});

    TrainState state() const;
    void restore(const TrainState& state);

private:
    TrainConfig config_;
    Network<float>* model_;
    TrainData data_;
    const distill::TeacherEnsemble<float>* ensemble_;
    std::uint64_t ensemble_checksum_ = 0;
    data::StreamSampler sampler_;
    ndgrad::Rng dropout_rng_;
    NamedArrays<float> velocity_;
    std::uint64_t step_ = 0;
};

// Trains a teacher on L_fec + alpha L_aff (the model may carry a distill head; it is not trained).
std::vector<StepMetrics> train_teacher(const TrainConfig& config, const TrainData& data, Network<float>& model,
                                       const std::function<void(const StepMetrics&)>& on_step = {});

// Teacher objective plus weighted RKD distance and angle terms against the frozen ensemble.
std::vector<StepMetrics> train_student(const TrainConfig& config, const TrainData& data,
                                       const distill::TeacherEnsemble<float>& ensemble, Network<float>& student,
                                       const std::function<void(const StepMetrics&)>& on_step = {});

// Appends one JSON object per step.
class MetricsLog {
public:
    MetricsLog(const std::filesystem::path& path, bool append = false);
    void write(const StepMetrics& m);
    std::function<void(const StepMetrics&)> sink() {
        return [this](const StepMetrics& m) { write(m); };
    }

private:
    std::ofstream out_;
};

std::vector<StepMetrics> read_metrics(const std::filesystem::path& path);

}  // namespace fever::train
