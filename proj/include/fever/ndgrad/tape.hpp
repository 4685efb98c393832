#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <string>
#include <string_view>
#include <vector>

#include "fever/ndgrad/array.hpp"

namespace fever::ndgrad {

// train: ops record backward closures and use batch statistics / dropout masks.
// eval: ops are pure deterministic functions and nothing is recorded.
enum class Mode { train, eval };

template <typename T>
class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
template <typename T>
class Var {
public:
    Var() = default;

    Tape<T>& tape() const { return *tape_; }
    const Array<T>& value() const;
    const Shape& shape() const { return value().shape(); }
    std::size_t id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    friend class Tape<T>;
    Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

    Tape<T>* tape_ = nullptr;
    std::size_t id_ = 0;
};

// Reverse-mode autodiff tape for a single step. Nodes are appended in evaluation
// order, so reverse index order is a valid topological order for backward.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void(Tape&, const Array<T>& grad_out)>;

    explicit Tape(Mode mode = Mode::train) : mode_(mode) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Mode mode() const { return mode_; }
    bool training() const { return mode_ == Mode::train; }
    std::size_t size() const { return nodes_.size(); }

    Var<T> leaf(Array<T> value, bool requires_grad = true);
    Var<T> constant(Array<T> value) { return leaf(std::move(value), false); }

    // Appends an op result. The output must be finite. The closure is kept only in
    // train mode and only when some input participates in differentiation.
    Var<T> record(std::string_view op, Array<T> value, std::initializer_list<Var<T>> inputs,
                  BackwardFn backward);
    Var<T> record(std::string_view op, Array<T> value, const std::vector<Var<T>>& inputs,
                  BackwardFn backward);

    const Array<T>& value(std::size_t id) const { return nodes_.at(id).value; }
    bool requires_grad(const Var<T>& v) const { return nodes_.at(v.id()).requires_grad; }

    // Gradient accumulator for a node, zero-filled on first use.
    Array<T>& grad_buffer(std::size_t id);

    void backward(const Var<T>& loss);

    // Gradient of the last backward loss w.r.t. v; zeros when v did not participate.
    Array<T> grad(const Var<T>& v) const;

private:
    struct Node {
        Array<T> value;
        Array<T> grad;
        BackwardFn backward;
        bool requires_grad = false;
    };

    Mode mode_;
    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

extern template class Var<float>;
extern template class Var<double>;
extern template class Tape<float>;
extern template class Tape<double>;

}  // namespace fever::ndgrad
