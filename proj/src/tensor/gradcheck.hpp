#pragma once

#include <functional>
#include <vector>

#include "tensor/tape.hpp"

namespace magmix {

// Scalar-valued function of leaf inputs, built on the given tape.
using ScalarFn = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;
// Scalar-valued function whose differentiable inputs are parameters it reads via tape.param().
using ParamScalarFn = std::function<Var<double>(Tape<double>&)>;

// Max over all coordinates of |analytic - central difference| / max(1, |analytic|).
double finite_diff_check(const ScalarFn& f, const std::vector<Tensor<double>>& inputs, double h = 1e-5);

double finite_diff_check(const std::function<Var<double>(Tape<double>&, const Var<double>&)>& f,
                         const Tensor<double>& x, double h = 1e-5);

// Same measure with respect to parameter values; gradients are recomputed
// from zero so existing param.grad contents are overwritten.
double finite_diff_check_params(const ParamScalarFn& f, const std::vector<Parameter<double>*>& params,
                                double h = 1e-5);

}  // namespace magmix
