#include "fever/losses/losses.hpp"

#include <stdexcept>
#include <string>
#include <vector>

#include "fever/errors.hpp"

namespace fever::losses {

using ndgrad::Array;
using ndgrad::Shape;

void LossWeights::validate() const {
    if (!(alpha >= 0.0)) throw ConfigError("alpha", "alpha: must be >= 0");
    if (!(lambda_dist >= 0.0)) throw ConfigError("lambda_dist", "lambda_dist: must be >= 0");
    if (!(lambda_angle >= 0.0)) throw ConfigError("lambda_angle", "lambda_angle: must be >= 0");
}

void TripletLossConfig::validate() const {
    if (!(margin > 0.0)) throw ConfigError("margin", "margin: must be > 0");
}

template <typename T>
Var<T> fec_triplet_loss(const Var<T>& v, std::span<const SimilarPair> labels, const TripletLossConfig& config) {
    if (v.shape().size() != 2 || v.shape()[0] % 3 != 0 || v.shape()[0] == 0) {
        throw ShapeError("fec_triplet_loss: expected [3n, d] embeddings, got " + ndgrad::shape_str(v.shape()));
    }
    const std::size_t n = v.shape()[0] / 3;
    if (labels.size() != n) {
        throw ShapeError("fec_triplet_loss: " + std::to_string(n) + " triplets but " + std::to_string(labels.size()) +
                         " labels");
    }
    std::vector<std::size_t> ia(n), ib(n), ic(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto pos = pair_positions(labels[i]);  // throws on an invalid code
        ia[i] = 3 * i + pos[0];
        ib[i] = 3 * i + pos[1];
        ic[i] = 3 * i + pos[2];
    }
    const Var<T> e = config.normalize_embeddings ? ndgrad::l2_normalize(v) : v;
    const auto a = ndgrad::gather_rows(e, std::span<const std::size_t>(ia));
    const auto b = ndgrad::gather_rows(e, std::span<const std::size_t>(ib));
    const auto c = ndgrad::gather_rows(e, std::span<const std::size_t>(ic));
    auto sq = [](const Var<T>& x, const Var<T>& y) {
        const auto d = ndgrad::sub(x, y);
        return ndgrad::sum_last(ndgrad::mul(d, d));
    };
    const auto d_ab = sq(a, b);
    const auto m = static_cast<T>(config.margin);
    const auto h1 = ndgrad::relu(ndgrad::add_scalar(ndgrad::sub(d_ab, sq(a, c)), m));
    const auto h2 = ndgrad::relu(ndgrad::add_scalar(ndgrad::sub(d_ab, sq(b, c)), m));
    return ndgrad::mean(ndgrad::add(h1, h2));
}

template <typename T>
Var<T> cross_entropy_loss(const Var<T>& logits, std::span<const std::size_t> labels) {
    if (logits.shape().size() != 2 || logits.shape()[0] == 0) {
        throw ShapeError("cross_entropy_loss: expected [n, k] logits, got " + ndgrad::shape_str(logits.shape()));
    }
    const std::size_t k = logits.shape()[1];
    for (std::size_t y : labels) {
        if (y >= k) {
            throw std::out_of_range("cross_entropy_loss: label " + std::to_string(y) + " outside [0," +
                                    std::to_string(k) + ")");
        }
    }
    return ndgrad::scale(ndgrad::mean(ndgrad::pick(ndgrad::log_softmax(logits), labels)), T(-1));
}

namespace {

template <typename T>
void require_rows(const char* op, const Var<T>& s, const Var<T>& t, std::size_t min_rows) {
    if (s.shape().size() != 2 || t.shape().size() != 2 || s.shape()[0] != t.shape()[0]) {
        throw ShapeError(std::string(op) + ": incompatible shapes " + ndgrad::shape_str(s.shape()) + " and " +
                         ndgrad::shape_str(t.shape()));
    }
    if (s.shape()[0] < min_rows) {
        throw std::invalid_argument(std::string(op) + ": needs a batch of at least " + std::to_string(min_rows) +
                                    ", got " + std::to_string(s.shape()[0]));
    }
}

template <typename T>
Var<T> mean_normalised_distances(const Var<T>& x, const Var<T>& upper, T inv_pairs) {
    const auto d = ndgrad::safe_sqrt(ndgrad::pairwise_sq_dist(x));
    const auto mu = ndgrad::scale(ndgrad::sum(ndgrad::mul(d, upper)), inv_pairs);
    return ndgrad::div_scalar(d, mu);
}

template <typename T>
Var<T> angle_cosines(const Var<T>& x) {
    const auto u = ndgrad::l2_normalize(ndgrad::pairwise_diff(x));
    return ndgrad::bmm_nt(u, u);
}

}  // namespace

template <typename T>
Var<T> rkd_distance_loss(const Var<T>& student, const Var<T>& target) {
    require_rows("rkd_distance_loss", student, target, 2);
    const std::size_t n = student.shape()[0];
    Array<T> mask({n, n});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) mask[i * n + j] = T(1);
    const auto upper = student.tape().constant(std::move(mask));
    const T inv_pairs = T(2) / static_cast<T>(n * (n - 1));
    const auto zs = mean_normalised_distances(student, upper, inv_pairs);
    const auto zt = mean_normalised_distances(target, upper, inv_pairs);
    return ndgrad::scale(ndgrad::sum(ndgrad::mul(ndgrad::huber(zs, zt), upper)), inv_pairs);
}

template <typename T>
Var<T> rkd_angle_loss(const Var<T>& student, const Var<T>& target) {
    require_rows("rkd_angle_loss", student, target, 3);
    const std::size_t n = student.shape()[0];
    // mask[j, i, k] selects i < k with j distinct from both.
    Array<T> mask({n, n, n});
    for (std::size_t j = 0; j < n; ++j)
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = i + 1; k < n; ++k)
                if (j != i && j != k) mask[(j * n + i) * n + k] = T(1);
    const auto sel = student.tape().constant(std::move(mask));
    const T inv_count = T(2) / static_cast<T>(n * (n - 1) * (n - 2));
    const auto h = ndgrad::huber(angle_cosines(student), angle_cosines(target));
    return ndgrad::scale(ndgrad::sum(ndgrad::mul(h, sel)), inv_count);
}

double teacher_total_loss(double l_fec, double l_aff, const LossWeights& w) {
    return l_fec + w.alpha * l_aff;
}

template <typename T>
Var<T> teacher_total_loss(const Var<T>& l_fec, const Var<T>& l_aff, const LossWeights& w) {
    return ndgrad::add(l_fec, ndgrad::scale(l_aff, static_cast<T>(w.alpha)));
}

double student_total_loss(double l_fec, double l_aff, double l_rkd_d, double l_rkd_a, const LossWeights& w) {
    return teacher_total_loss(l_fec, l_aff, w) + w.lambda_dist * l_rkd_d + w.lambda_angle * l_rkd_a;
}

template <typename T>
Var<T> student_total_loss(const Var<T>& l_fec, const Var<T>& l_aff, const Var<T>& l_rkd_d, const Var<T>& l_rkd_a,
                          const LossWeights& w) {
    const auto base = teacher_total_loss(l_fec, l_aff, w);
    const auto with_dist = ndgrad::add(base, ndgrad::scale(l_rkd_d, static_cast<T>(w.lambda_dist)));
    return ndgrad::add(with_dist, ndgrad::scale(l_rkd_a, static_cast<T>(w.lambda_angle)));
}

#define FEVER_INSTANTIATE_LOSSES(T)                                                                      \
    template Var<T> fec_triplet_loss(const Var<T>&, std::span<const SimilarPair>, const TripletLossConfig&); \
    template Var<T> cross_entropy_loss(const Var<T>&, std::span<const std::size_t>);                      \
    template Var<T> rkd_distance_loss(const Var<T>&, const Var<T>&);                                      \
    template Var<T> rkd_angle_loss(const Var<T>&, const Var<T>&);                                         \
    template Var<T> teacher_total_loss(const Var<T>&, const Var<T>&, const LossWeights&);                 \
    template Var<T> student_total_loss(const Var<T>&, const Var<T>&, const Var<T>&, const Var<T>&,        \
                                       const LossWeights&);

FEVER_INSTANTIATE_LOSSES(float)
FEVER_INSTANTIATE_LOSSES(double)

}  // namespace fever::losses
