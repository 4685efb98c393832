#include "fever/ndgrad/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "fever/errors.hpp"

namespace fever::ndgrad {
namespace {

double evaluate(const MultiScalarFn& f, const std::vector<Array<double>>& inputs) {
    Tape<double> tape(Mode::train);
    std::vector<Var<double>> vars;
    for (const auto& in : inputs) vars.push_back(tape.leaf(in));
    return f(vars).value().item();
}

}  // namespace

double finite_diff_check(const MultiScalarFn& f, const std::vector<Array<double>>& inputs, double eps) {
    if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps must be positive");

    Tape<double> tape(Mode::train);
    std::vector<Var<double>> vars;
    for (const auto& in : inputs) vars.push_back(tape.leaf(in));
    const Var<double> loss = f(vars);
    const double base = loss.value().item();
    tape.backward(loss);

    const double again = evaluate(f, inputs);
    if (std::memcmp(&base, &again, sizeof(double)) != 0) {
        throw InvariantError("finite_diff_check: function is not deterministic");
    }

    double worst = 0.0;
    std::vector<Array<double>> probe = inputs;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        const Array<double> analytic = tape.grad(vars[k]);
        for (std::size_t i = 0; i < inputs[k].size(); ++i) {
            const double x0 = inputs[k][i];
            probe[k][i] = x0 + eps;
            const double fp = evaluate(f, probe);
            probe[k][i] = x0 - eps;
            const double fm = evaluate(f, probe);
            probe[k][i] = x0;
            const double numeric = (fp - fm) / (2.0 * eps);
            worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
        }
    }
    return worst;
}

double finite_diff_check(const ScalarFn& f, const Array<double>& x, double eps) {
    MultiScalarFn wrapped = [&f](std::span<const Var<double>> v) { return f(v[0]); };
    return finite_diff_check(wrapped, std::vector<Array<double>>{x}, eps);
}

}  // namespace fever::ndgrad
