#pragma once

#include <cstddef>

#include "rotaprune/matrix.hpp"

namespace rotaprune {

struct AdamOptions {
    double lr = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// Moment estimates for one parameter matrix.
struct AdamState {
    AdamState() = default;
    AdamState(std::size_t rows, std::size_t cols, AdamOptions opts = {})
        : m(rows, cols), v(rows, cols), options(opts) {}

    std::size_t step = 0;
    Matrix m;
    Matrix v;
    AdamOptions options;
};

/// One bias-corrected Adam update. Advances `state` and returns the new parameter.
Matrix adam_step(AdamState& state, const Matrix& param, const Matrix& grad);

}  // namespace rotaprune
