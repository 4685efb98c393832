#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "fever/data/datasets.hpp"

namespace fever::data {

struct BatchSizes {
    std::size_t triplets = 64;
    std::size_t labeled = 64;
    std::size_t unlabeled = 0;
};

struct TripletBatch {
    Array<float> images;  // [3b, C, H, W]
    std::vector<SimilarPair> pairs;
    std::vector<std::size_t> indices;
};

struct LabeledBatch {
    Array<float> images;
    std::vector<std::size_t> labels;
    std::vector<std::size_t> indices;
};

struct UnlabeledBatch {
    Array<float> images;
    std::vector<std::size_t> indices;
};

struct Batches {
    TripletBatch triplets;
    LabeledBatch labeled;
    UnlabeledBatch unlabeled;
    bool end_of_epoch = false;  // this draw exhausted the triplet stream
};

struct StreamState {
    std::vector<std::uint64_t> order;
    std::uint64_t cursor = 0;
    std::uint64_t passes = 0;
    std::string rng;  // std::mt19937_64 textual state
};

struct SamplerState {
    StreamState triplets, labeled, unlabeled;
    std::uint64_t epoch = 0;
};

// One shuffled pass over [0, n), reshuffled whenever a pass completes.
class Stream {
public:
    Stream(std::size_t n, std::uint64_t seed, std::uint64_t stream_id);

    std::size_t size() const { return order_.size(); }
    std::size_t remaining() const { return order_.size() - cursor_; }
    std::size_t passes() const { return passes_; }

    std::size_t next();  // wraps with a reshuffle
    void restart();      // abandons the rest of the pass

    StreamState state() const;
    void restore(const StreamState& s);

private:
    void reshuffle();

    std::vector<std::size_t> order_;
    std::size_t cursor_ = 0;
    std::size_t passes_ = 0;
    std::mt19937_64 rng_;
};

// Triplets define the epoch; labeled and unlabeled data loop in the background.
// The sampler keeps pointers to the datasets, which must outlive it.
class StreamSampler {
public:
    StreamSampler(const TripletDataset& triplets, const LabeledDataset& labeled,
                  const UnlabeledDataset* unlabeled, std::uint64_t seed, bool drop_last = true);

    Batches next_batches(const BatchSizes& sizes);

    std::size_t epoch() const { return epoch_; }
    std::size_t steps_per_epoch(std::size_t triplet_batch) const;

    SamplerState state() const;
    void restore(const SamplerState& s);

private:
    const TripletDataset* triplets_;
    const LabeledDataset* labeled_;
    const UnlabeledDataset* unlabeled_;
    bool drop_last_;
    Stream triplet_stream_, labeled_stream_, unlabeled_stream_;
    std::size_t epoch_ = 0;
};

}  // namespace fever::data
