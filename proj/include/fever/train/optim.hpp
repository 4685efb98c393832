#pragma once

#include <vector>

#include "fever/models/network.hpp"

namespace fever::train {

using models::NamedArrays;
using ndgrad::Array;

struct OptimConfig {
    double lr = 0.005;
    double momentum = 0.9;
    bool nesterov = true;

    // lr > 0, momentum in [0, 1); throws ConfigError.
    void validate() const;
};

// v <- mu v + g, then p <- p - lr (g + mu v) with Nesterov or p <- p - lr v without.
// Every gradient is checked before anything is written, so a non-finite gradient
// leaves params and velocity untouched.
template <typename T>
void sgd_nesterov_step(NamedArrays<T>& params, const std::vector<Array<T>>& grads, NamedArrays<T>& velocity,
                       const OptimConfig& config);

// Zero velocity named after the parameters.
template <typename T>
NamedArrays<T> zero_velocity(const NamedArrays<T>& params);

}  // namespace fever::train
