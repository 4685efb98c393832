#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "fever/data/datasets.hpp"
#include "fever/models/network.hpp"

namespace fever::eval {

using ndgrad::Array;

// Closest pair by squared Euclidean distance; ties resolve 12 < 13 < 23.
SimilarPair predict_pair(const float* a, const float* b, const float* c, std::size_t dim);

// embeddings: [3n, d] (rows 3i..3i+2) or [n, 3, d].
double triplet_accuracy(const Array<float>& embeddings, std::span<const SimilarPair> labels);

// Each row divided by its L2 norm; rows with norm <= 1e-12 become zero.
Array<float> normalized_rows(const Array<float>& rows);

// FEC-head triplet accuracy of a network, optionally on L2-normalised vectors.
double triplet_accuracy(const models::Network<float>& net, const data::TripletDataset& ds, bool normalize = true);

// Argmax of the classifier head against the labels.
double classifier_accuracy(const models::Network<float>& net, const data::LabeledDataset& ds);

enum class FeatureSource { embedding, fec };

struct FeatureFile {
    Array<float> rows;  // [count, dims]
    std::optional<std::vector<std::int32_t>> labels;

    std::size_t dims() const { return rows.dim(1); }
    std::size_t count() const { return rows.dim(0); }
};

FeatureFile extract_features(const models::Network<float>& net, const Array<float>& images,
                             FeatureSource source = FeatureSource::embedding);
FeatureFile extract_features(const models::Network<float>& net, const data::LabeledDataset& ds,
                             FeatureSource source = FeatureSource::embedding);

// "FEAT" | u32 dims | u32 count | u32 dtype (1 = f32) | u32 flags (bit 0: labels)
// then per row dims little-endian f32 values and, if flagged, an i32 label.
void write_feature_file(const std::filesystem::path& path, const FeatureFile& f);
FeatureFile read_feature_file(const std::filesystem::path& path);
// Header f0..f{d-1}[,label]; values printed with round-trip precision.
void write_feature_csv(const std::filesystem::path& path, const FeatureFile& f);

// w_c = N / (K N_c); throws DataError when a class has no samples.
std::vector<double> class_weights(std::span<const std::size_t> labels, std::size_t num_classes);

struct ProbeConfig {
    double C = 10000.0;  // inverse regularisation strength
    std::size_t max_iter = 5000;
    double tol = 1e-5;   // on the full gradient norm
    bool class_reweighting = true;
    bool standardize = false;  // z-score features with class-weighted statistics
    std::optional<std::uint64_t> init_seed;  // zero init when absent

    void validate() const;
};

struct LinearProbe {
    Eigen::MatrixXd weight;  // [K, d]
    Eigen::VectorXd bias;    // [K]
    Eigen::RowVectorXd shift, scale;  // applied as (x - shift) / scale before the linear map
    std::size_t iterations = 0;
    double grad_norm = 0;
    bool converged = false;
    std::vector<double> objective_trace;  // objective after every accepted step, starting at init

    std::size_t num_classes() const { return static_cast<std::size_t>(weight.rows()); }
};

Eigen::MatrixXd to_matrix(const Array<float>& rows);

// Multinomial logistic regression minimising
//   sum_i s_i CE_i + (1 / C) (1/2) ||W||_F^2,  s_i = w_{y_i} / N (or 1 / N without reweighting),
// by full-batch gradient descent with Armijo backtracking from a Barzilai-Borwein trial step.
LinearProbe fit_linear_probe(const Eigen::MatrixXd& features, std::span<const std::size_t> labels,
                             std::size_t num_classes, const ProbeConfig& config);

// Objective of the fit above at (weight, bias), on already-transformed features.
double probe_objective(const Eigen::MatrixXd& features, std::span<const std::size_t> labels,
                       const Eigen::MatrixXd& weight, const Eigen::VectorXd& bias, const ProbeConfig& config);

std::vector<std::size_t> predict(const LinearProbe& probe, const Eigen::MatrixXd& features);
double accuracy(std::span<const std::size_t> predicted, std::span<const std::size_t> labels);

}  // namespace fever::eval
