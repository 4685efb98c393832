#pragma once

#include <functional>
#include <span>
#include <vector>

#include "fever/ndgrad/array.hpp"
#include "fever/ndgrad/tape.hpp"

namespace fever::ndgrad {

// Builds a scalar loss on the tape that owns its inputs.
using ScalarFn = std::function<Var<double>(const Var<double>&)>;
using MultiScalarFn = std::function<Var<double>(std::span<const Var<double>>)>;

// Compares reverse-mode gradients of f against central differences with step eps.
// Returns max over coordinates of |analytic - numeric| / max(1, |numeric|).
// Throws InvariantError when two evaluations of f at the same point disagree.
double finite_diff_check(const ScalarFn& f, const Array<double>& x, double eps = 1e-5);
double finite_diff_check(const MultiScalarFn& f, const std::vector<Array<double>>& inputs, double eps = 1e-5);

}  // namespace fever::ndgrad
