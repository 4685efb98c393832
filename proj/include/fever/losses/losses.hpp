#pragma once

#include <span>

#include "fever/ndgrad/ops.hpp"
#include "fever/triplet.hpp"

namespace fever::losses {

using ndgrad::Var;

struct LossWeights {
    double alpha = 0.1;         // classification loss weight
    double lambda_dist = 25.0;  // RKD distance term
    double lambda_angle = 50.0; // RKD angle term

    void validate() const;
};

struct TripletLossConfig {
    double margin = 0.2;
    bool normalize_embeddings = true;

    void validate() const;
};

// v: [3n, d], rows 3i..3i+2 form triplet i. With (a, b) the annotated pair and c the
// odd one out, averages max(0, d(a,b) + m - d(a,c)) + max(0, d(a,b) + m - d(b,c))
// where d is squared Euclidean distance, optionally after L2 normalisation.
template <typename T>
Var<T> fec_triplet_loss(const Var<T>& v, std::span<const SimilarPair> labels, const TripletLossConfig& config);

// Mean negative log-softmax probability of the labelled class.
template <typename T>
Var<T> cross_entropy_loss(const Var<T>& logits, std::span<const std::size_t> labels);

// Relational distance loss: Huber between the pairwise-distance matrices of
// student and target, each divided by its own mean over i<j pairs.
template <typename T>
Var<T> rkd_distance_loss(const Var<T>& student, const Var<T>& target);

// Relational angle loss: Huber between cos(angle at j) of (i, j, k) for every i<k,
// j distinct from both, computed on student and target.
template <typename T>
Var<T> rkd_angle_loss(const Var<T>& student, const Var<T>& target);

// L_fec + alpha * L_aff
double teacher_total_loss(double l_fec, double l_aff, const LossWeights& w);
template <typename T>
Var<T> teacher_total_loss(const Var<T>& l_fec, const Var<T>& l_aff, const LossWeights& w);

// L_fec + alpha * L_aff + lambda_dist * L_rkd_d + lambda_angle * L_rkd_a, summed
// left to right so that zero RKD weights reproduce teacher_total_loss exactly.
double student_total_loss(double l_fec, double l_aff, double l_rkd_d, double l_rkd_a, const LossWeights& w);
template <typename T>
Var<T> student_total_loss(const Var<T>& l_fec, const Var<T>& l_aff, const Var<T>& l_rkd_d, const Var<T>& l_rkd_a,
                          const LossWeights& w);

}  // namespace fever::losses
