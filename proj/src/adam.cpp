#include "rotaprune/adam.hpp"

#include <cmath>

namespace rotaprune {

Matrix adam_step(AdamState& state, const Matrix& param, const Matrix& grad) {
    require_same_shape(param, grad, "adam_step");
    require_same_shape(param, state.m, "adam_step (first moment)");
    require_same_shape(param, state.v, "adam_step (second moment)");
    const AdamOptions& o = state.options;

    state.step += 1;
    const double t = static_cast<double>(state.step);
    const double bc1 = 1.0 - std::pow(o.beta1, t);
    const double bc2 = 1.0 - std::pow(o.beta2, t);

    Matrix out = param;
    auto p = out.data();
    auto g = grad.data();
    auto m = state.m.data();
    auto v = state.v.data();
    for (std::size_t i = 0; i < p.size(); ++i) {
        m[i] = o.beta1 * m[i] + (1.0 - o.beta1) * g[i];
        v[i] = o.beta2 * v[i] + (1.0 - o.beta2) * g[i] * g[i];
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        p[i] -= o.lr * mhat / (std::sqrt(vhat) + o.eps);
    }
    return out;
}

}  // namespace rotaprune
