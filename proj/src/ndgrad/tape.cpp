#include "fever/ndgrad/tape.hpp"

#include "fever/errors.hpp"

namespace fever::ndgrad {

template <typename T>
const Array<T>& Var<T>::value() const {
    return tape_->value(id_);
}

template <typename T>
Var<T> Tape<T>::leaf(Array<T> value, bool requires_grad) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad && training();
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Var<T> Tape<T>::record(std::string_view op, Array<T> value, std::initializer_list<Var<T>> inputs,
                       BackwardFn backward) {
    return record(op, std::move(value), std::vector<Var<T>>(inputs), std::move(backward));
}

template <typename T>
Var<T> Tape<T>::record(std::string_view op, Array<T> value, const std::vector<Var<T>>& inputs,
                       BackwardFn backward) {
    if (!value.all_finite()) {
        throw NumericError(std::string(op) + ": non-finite output");
    }
    Node node;
    node.value = std::move(value);
    if (training()) {
        for (const auto& in : inputs) {
            if (&in.tape() != this) {
                throw InvariantError(std::string(op) + ": input belongs to another tape");
            }
            if (nodes_[in.id()].requires_grad) {
                node.requires_grad = true;
                break;
            }
        }
        if (node.requires_grad) node.backward = std::move(backward);
    }
    nodes_.push_back(std::move(node));
    return Var<T>(this, nodes_.size() - 1);
}

template <typename T>
Array<T>& Tape<T>::grad_buffer(std::size_t id) {
    Node& node = nodes_.at(id);
    if (node.grad.shape() != node.value.shape() || node.grad.size() != node.value.size()) {
        node.grad = Array<T>::zeros(node.value.shape());
    }
    return node.grad;
}

template <typename T>
void Tape<T>::backward(const Var<T>& loss) {
    if (!training()) {
        throw InvariantError("backward: tape was recorded in eval mode");
    }
    if (&loss.tape() != this) {
        throw InvariantError("backward: loss belongs to another tape");
    }
    if (loss.value().size() != 1) {
        throw ShapeError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }
    if (backward_done_) {
        throw InvariantError("backward: already run on this tape");
    }
    backward_done_ = true;
    grad_buffer(loss.id())[0] = T(1);
    for (std::size_t i = loss.id() + 1; i-- > 0;) {
        Node& node = nodes_[i];
        if (!node.backward || node.grad.empty()) continue;
        // Inputs always precede their consumer, so the closure never touches node i.
        Array<T> g = std::move(node.grad);
        if (!g.all_finite()) {
            throw NumericError("backward: non-finite gradient at node " + std::to_string(i));
        }
        node.backward(*this, g);
        nodes_[i].grad = std::move(g);
    }
}

template <typename T>
Array<T> Tape<T>::grad(const Var<T>& v) const {
    const Node& node = nodes_.at(v.id());
    if (node.grad.empty() && !node.value.empty()) return Array<T>::zeros(node.value.shape());
    return node.grad;
}

template class Var<float>;
template class Var<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace fever::ndgrad
