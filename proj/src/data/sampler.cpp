#include "fever/data/sampler.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "fever/errors.hpp"

namespace fever::data {
namespace {

std::seed_seq::result_type low(std::uint64_t v) { return static_cast<std::uint32_t>(v); }
std::seed_seq::result_type high(std::uint64_t v) { return static_cast<std::uint32_t>(v >> 32); }

}  // namespace

Stream::Stream(std::size_t n, std::uint64_t seed, std::uint64_t stream_id) : order_(n) {
    std::seed_seq seq{low(seed), high(seed), low(stream_id), high(stream_id)};
    rng_.seed(seq);
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    reshuffle();
}

void Stream::reshuffle() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
}

std::size_t Stream::next() {
    if (order_.empty()) throw std::logic_error("Stream::next on an empty stream");
    if (cursor_ == order_.size()) {
        ++passes_;
        reshuffle();
    }
    return order_[cursor_++];
}

void Stream::restart() {
    ++passes_;
    reshuffle();
}

StreamState Stream::state() const {
    std::ostringstream rng;
    rng << rng_;
    return {{order_.begin(), order_.end()}, cursor_, passes_, rng.str()};
}

void Stream::restore(const StreamState& s) {
    if (s.order.size() != order_.size() || s.cursor > s.order.size()) {
        throw InvariantError("sampler state does not match the dataset size");
    }
    std::vector<std::size_t> order(s.order.begin(), s.order.end());
    std::vector<std::size_t> sorted = order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
        if (sorted[i] != i) throw InvariantError("sampler state order is not a permutation");
    }
    std::istringstream rng(s.rng);
    std::mt19937_64 restored;
    if (!(rng >> restored)) throw InvariantError("sampler state has a malformed rng");
    order_ = std::move(order);
    cursor_ = s.cursor;
    passes_ = s.passes;
    rng_ = restored;
}

StreamSampler::StreamSampler(const TripletDataset& triplets, const LabeledDataset& labeled,
                             const UnlabeledDataset* unlabeled, std::uint64_t seed, bool drop_last)
    : triplets_(&triplets),
      labeled_(&labeled),
      unlabeled_(unlabeled),
      drop_last_(drop_last),
      triplet_stream_(triplets.size(), seed, 0),
      labeled_stream_(labeled.size(), seed, 1),
      unlabeled_stream_(unlabeled ? unlabeled->size() : 0, seed, 2) {
    if (triplets.size() == 0) throw DataError("triplet dataset is empty");
    if (labeled.size() == 0) throw DataError("labeled dataset is empty");
    if (!(labeled.shape == triplets.shape) || (unlabeled && !(unlabeled->shape == triplets.shape))) {
        throw ShapeError("datasets disagree on image shape");
    }
}

std::size_t StreamSampler::steps_per_epoch(std::size_t triplet_batch) const {
    if (triplet_batch == 0) throw std::invalid_argument("triplet batch must be positive");
    const std::size_t n = triplets_->size();
    return drop_last_ ? n / triplet_batch : (n + triplet_batch - 1) / triplet_batch;
}

Batches StreamSampler::next_batches(const BatchSizes& sizes) {
    if (sizes.triplets == 0 || sizes.labeled == 0) {
        throw std::invalid_argument("triplet and labeled batch sizes must be positive");
    }
    if (sizes.triplets > triplets_->size()) {
        throw std::invalid_argument("triplet batch " + std::to_string(sizes.triplets) + " exceeds dataset size " +
                                    std::to_string(triplets_->size()));
    }
    if (sizes.unlabeled > 0 && (!unlabeled_ || unlabeled_->size() == 0)) {
        throw std::invalid_argument("unlabeled batch requested without an unlabeled dataset");
    }

    Batches out;
    const std::size_t take = std::min(sizes.triplets, triplet_stream_.remaining());
    std::vector<std::size_t> rows;
    rows.reserve(3 * take);
    for (std::size_t i = 0; i < take; ++i) {
        const std::size_t t = triplet_stream_.next();
        out.triplets.indices.push_back(t);
        out.triplets.pairs.push_back(triplets_->pairs[t]);
        for (std::size_t k = 0; k < 3; ++k) rows.push_back(3 * t + k);
    }
    out.triplets.images = gather_images(triplets_->images, rows);

    const std::size_t left = triplet_stream_.remaining();
    if (left == 0 || (drop_last_ && left < sizes.triplets)) {
        triplet_stream_.restart();
        ++epoch_;
        out.end_of_epoch = true;
    }

    for (std::size_t i = 0; i < sizes.labeled; ++i) {
        const std::size_t j = labeled_stream_.next();
        out.labeled.indices.push_back(j);
        out.labeled.labels.push_back(labeled_->labels[j]);
    }
    out.labeled.images = gather_images(labeled_->images, out.labeled.indices);

    for (std::size_t i = 0; i < sizes.unlabeled; ++i) out.unlabeled.indices.push_back(unlabeled_stream_.next());
    if (unlabeled_) {
        out.unlabeled.images = gather_images(unlabeled_->images, out.unlabeled.indices);
    } else {
        const auto& s = triplets_->shape;
        out.unlabeled.images = Array<float>({0, s.channels, s.height, s.width});
    }
    return out;
}

SamplerState StreamSampler::state() const {
    return {triplet_stream_.state(), labeled_stream_.state(), unlabeled_stream_.state(), epoch_};
}

void StreamSampler::restore(const SamplerState& s) {
    triplet_stream_.restore(s.triplets);
    labeled_stream_.restore(s.labeled);
    unlabeled_stream_.restore(s.unlabeled);
    epoch_ = s.epoch;
}

}  // namespace fever::data
