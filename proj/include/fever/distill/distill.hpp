#pragma once

#include <cstdint>
#include <vector>

#include "fever/data/sampler.hpp"
#include "fever/models/network.hpp"

namespace fever::distill {

using models::Network;
using ndgrad::Array;

// Frozen teachers whose normalised heads form the distillation target.
// Teachers are copied in at construction and only exposed as const.
template <typename T>
class TeacherEnsemble {
public:
    explicit TeacherEnsemble(std::vector<Network<T>> teachers);

    std::size_t size() const { return teachers_.size(); }
    const Network<T>& teacher(std::size_t i) const { return teachers_.at(i); }
    const ImageShape& input_shape() const { return teachers_.front().config().input; }

    // Sum over teachers of (fec dim + class count); 80 for two full-size teachers (d_face 256 and 128).
    std::size_t target_dim() const;

    // Combined parameter_checksum of every teacher, in order.
    std::uint64_t checksum() const;

private:
    std::vector<Network<T>> teachers_;
};

// Per row, in teacher order: [normalised fec vector, normalised logits], both from
// eval-mode passes. Segments whose norm is below the epsilon guard are zero.
template <typename T>
Array<T> build_distill_target(const TeacherEnsemble<T>& ensemble, const Array<T>& images);

// Triplet images (3 per triplet, triplet order) ++ labeled images ++ unlabeled images.
Array<float> assemble_distill_batch(const data::TripletBatch& fec, const data::LabeledBatch& aff,
                                    const data::UnlabeledBatch& unlabeled);

extern template class TeacherEnsemble<float>;
extern template class TeacherEnsemble<double>;

}  // namespace fever::distill
