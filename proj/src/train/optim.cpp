#include "fever/train/optim.hpp"

#include <cmath>

#include "fever/errors.hpp"

namespace fever::train {

void OptimConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("lr", "lr: must be > 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) {
        throw ConfigError("momentum", "momentum: must be in [0, 1)");
    }
}

template <typename T>
void sgd_nesterov_step(NamedArrays<T>& params, const std::vector<Array<T>>& grads, NamedArrays<T>& velocity,
                       const OptimConfig& config) {
    if (grads.size() != params.size() || velocity.size() != params.size()) {
        throw ShapeError("sgd_nesterov_step: " + std::to_string(params.size()) + " params, " +
                         std::to_string(grads.size()) + " grads, " + std::to_string(velocity.size()) +
                         " velocities");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& s = params[i].value.shape();
        if (grads[i].shape() != s || velocity[i].value.shape() != s) {
            throw ShapeError("sgd_nesterov_step: " + params[i].name + " is " + ndgrad::shape_str(s) + ", grad " +
                             ndgrad::shape_str(grads[i].shape()) + ", velocity " +
                             ndgrad::shape_str(velocity[i].value.shape()));
        }
        if (!grads[i].all_finite()) throw NumericError("non-finite gradient for " + params[i].name);
    }
    const T lr = static_cast<T>(config.lr), mu = static_cast<T>(config.momentum);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].value.data();
        auto v = velocity[i].value.data();
        const auto g = grads[i].data();
        for (std::size_t k = 0; k < p.size(); ++k) {
            v[k] = mu * v[k] + g[k];
            p[k] -= config.nesterov ? lr * (g[k] + mu * v[k]) : lr * v[k];
        }
    }
}

template <typename T>
NamedArrays<T> zero_velocity(const NamedArrays<T>& params) {
    NamedArrays<T> v;
    v.reserve(params.size());
    for (const auto& p : params) v.push_back({p.name, Array<T>::zeros(p.value.shape())});
    return v;
}

template void sgd_nesterov_step(NamedArrays<float>&, const std::vector<Array<float>>&, NamedArrays<float>&,
                                const OptimConfig&);
template void sgd_nesterov_step(NamedArrays<double>&, const std::vector<Array<double>>&, NamedArrays<double>&,
                                const OptimConfig&);
template NamedArrays<float> zero_velocity(const NamedArrays<float>&);
template NamedArrays<double> zero_velocity(const NamedArrays<double>&);

}  // namespace fever::train
