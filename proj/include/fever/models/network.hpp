#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fever/image.hpp"
#include "fever/ndgrad/ops.hpp"

namespace fever::models {

using ndgrad::Array;
using ndgrad::Mode;
using ndgrad::Rng;
using ndgrad::Tape;
using ndgrad::Var;

struct BlockSpec {
    std::size_t out_channels;
    std::size_t stride;
    friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

struct HeadDims {
    std::size_t fec = 32;
    std::size_t classes = 8;
    std::optional<std::size_t> distill;  // present iff the network is a student
    friend bool operator==(const HeadDims&, const HeadDims&) = default;
};

struct ModelConfig {
    ImageShape input{3, 32, 32};
    std::vector<BlockSpec> backbone_blocks{{16, 2}, {32, 2}, {64, 2}, {64, 2}};
    std::size_t kernel_size = 3;
    std::size_t d_face = 32;
    double dropout_rate = 0.1;
    HeadDims heads;

    bool is_student() const { return heads.distill.has_value(); }

    // Throws ConfigError naming the offending field.
    void validate() const;

    // Line-oriented "key = value" form embedded in checkpoints.
    std::string to_text() const;
    static ModelConfig from_text(const std::string& text);

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

// Closed-form parameter count:
//   sum_i (c_{i-1} k^2 c_i + 2 c_i)   conv + BN per backbone block
// + c_L d + 2 d                       1x1 projection to d_face + BN
// + sum_h (h d + h)                   linear heads
std::size_t expected_parameter_count(const ModelConfig& config);

template <typename T>
struct NamedArray {
    std::string name;
    Array<T> value;
};

template <typename T>
using NamedArrays = std::vector<NamedArray<T>>;

template <typename T>
const Array<T>& find_array(const NamedArrays<T>& arrays, const std::string& name);

template <typename T>
struct Outputs {
    Var<T> embedding;  // [N, d_face], before dropout
    Var<T> fec;        // [N, heads.fec]
    Var<T> logits;     // [N, heads.classes]
    std::optional<Var<T>> distill;
};

// Plain-array results of an eval-mode pass.
template <typename T>
struct Predictions {
    Array<T> embedding;
    Array<T> fec;
    Array<T> logits;
    std::optional<Array<T>> distill;
};

// Conv-BN-ReLU backbone, 1x1 projection to a d_face bottleneck, global average
// pooling, one dropout mask, then independent linear heads that all read the
// same dropped-out vector.
template <typename T>
class Network {
public:
    // Deterministic in (config, seed): He-normal weights, zero biases, BN gamma=1 beta=0.
    Network(ModelConfig config, std::uint64_t seed);

    const ModelConfig& config() const { return config_; }
    bool is_student() const { return config_.is_student(); }

    NamedArrays<T>& params() { return params_; }
    const NamedArrays<T>& params() const { return params_; }
    // Batch-norm running statistics; updated by train-mode forwards.
    NamedArrays<T>& buffers() { return buffers_; }
    const NamedArrays<T>& buffers() const { return buffers_; }

    std::size_t parameter_count() const;

    // Registers every parameter as a trainable leaf; order matches params().
    std::vector<Var<T>> bind(Tape<T>& tape) const;

    // Forward pass in the tape's mode. Train mode updates running statistics and
    // draws one dropout mask from rng.
    Outputs<T> forward(const std::vector<Var<T>>& bound, const Var<T>& images, Rng& rng);

    // Applies dropout and the heads to a given embedding.
    Outputs<T> heads(const std::vector<Var<T>>& bound, const Var<T>& embedding, Rng& rng) const;

    // Eval-mode pass over [N, C, H, W] images in chunks; never mutates the network.
    Predictions<T> predict(const Array<T>& images, std::size_t chunk = 256) const;

private:
    Var<T> backbone(const std::vector<Var<T>>& bound, const Var<T>& images, NamedArrays<T>& buffers) const;
    std::size_t index_of(const std::string& name) const;

    ModelConfig config_;
    NamedArrays<T> params_;
    NamedArrays<T> buffers_;
};

// FNV-1a over names and raw bytes of all parameters and buffers.
template <typename T>
std::uint64_t parameter_checksum(const Network<T>& net);

extern template class Network<float>;
extern template class Network<double>;

}  // namespace fever::models
