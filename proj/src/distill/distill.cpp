#include "fever/distill/distill.hpp"

#include <algorithm>
#include <cmath>

#include "fever/errors.hpp"

namespace fever::distill {

template <typename T>
TeacherEnsemble<T>::TeacherEnsemble(std::vector<Network<T>> teachers) : teachers_(std::move(teachers)) {
    if (teachers_.empty()) throw std::invalid_argument("teacher ensemble is empty");
    for (const auto& t : teachers_) {
        if (!(t.config().input == input_shape())) {
            throw ShapeError("teacher ensemble: input shapes differ (" + t.config().input.str() + " vs " +
                             input_shape().str() + ")");
        }
    }
}

template <typename T>
std::size_t TeacherEnsemble<T>::target_dim() const {
    std::size_t d = 0;
    for (const auto& t : teachers_) d += t.config().heads.fec + t.config().heads.classes;
    return d;
}

template <typename T>
std::uint64_t TeacherEnsemble<T>::checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    for (const auto& t : teachers_) h = (h ^ models::parameter_checksum(t)) * 1099511628211ULL;
    return h;
}

namespace {

// Writes the row-normalised [n, d] block `src` into columns [offset, offset + d) of `dst`.
template <typename T>
void put_normalized(const Array<T>& src, Array<T>& dst, std::size_t offset) {
    const std::size_t n = src.dim(0), d = src.dim(1), width = dst.dim(1);
    for (std::size_t r = 0; r < n; ++r) {
        double sq = 0;
        for (std::size_t c = 0; c < d; ++c) sq += double(src[r * d + c]) * src[r * d + c];
        const double norm = std::sqrt(sq);
        const double inv = norm > ndgrad::kNormEpsilon ? 1.0 / norm : 0.0;
        for (std::size_t c = 0; c < d; ++c) dst[r * width + offset + c] = static_cast<T>(src[r * d + c] * inv);
    }
}

}  // namespace

template <typename T>
Array<T> build_distill_target(const TeacherEnsemble<T>& ensemble, const Array<T>& images) {
    const auto& s = ensemble.input_shape();
    if (images.rank() != 4 || images.dim(1) != s.channels || images.dim(2) != s.height || images.dim(3) != s.width) {
        throw ShapeError("build_distill_target: images " + ndgrad::shape_str(images.shape()) + " do not match " +
                         s.str());
    }
    Array<T> target({images.dim(0), ensemble.target_dim()});
    std::size_t offset = 0;
    for (std::size_t i = 0; i < ensemble.size(); ++i) {
        const auto out = ensemble.teacher(i).predict(images);
        put_normalized(out.fec, target, offset);
        offset += out.fec.dim(1);
        put_normalized(out.logits, target, offset);
        offset += out.logits.dim(1);
    }
    return target;
}

Array<float> assemble_distill_batch(const data::TripletBatch& fec, const data::LabeledBatch& aff,
                                    const data::UnlabeledBatch& unlabeled) {
    std::vector<const Array<float>*> parts;
    for (const auto* p : {&fec.images, &aff.images, &unlabeled.images}) {
        if (!p->empty()) parts.push_back(p);
    }
    if (parts.empty()) throw std::invalid_argument("assemble_distill_batch: all batches are empty");
    ndgrad::Shape shape = parts.front()->shape();
    std::size_t rows = 0;
    for (const auto* p : parts) {
        ndgrad::Shape tail = p->shape();
        tail[0] = shape[0];
        if (p->rank() != 4 || tail != shape) {
            throw ShapeError("assemble_distill_batch: image batches " + ndgrad::shape_str(p->shape()) + " and " +
                             ndgrad::shape_str(shape) + " differ");
        }
        rows += p->dim(0);
    }
    shape[0] = rows;
    Array<float> out(shape);
    auto dst = out.data().begin();
    for (const auto* p : parts) dst = std::copy(p->data().begin(), p->data().end(), dst);
    return out;
}

template class TeacherEnsemble<float>;
template class TeacherEnsemble<double>;
template Array<float> build_distill_target(const TeacherEnsemble<float>&, const Array<float>&);
template Array<double> build_distill_target(const TeacherEnsemble<double>&, const Array<double>&);

}  // namespace fever::distill
