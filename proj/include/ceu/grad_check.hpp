#pragma once

#include <functional>

#include "ceu/autodiff.hpp"

namespace ceu {

// A scalar-valued graph builder: given a leaf, returns the scalar output node
// of a freshly built graph.
using ScalarGraphFn = std::function<Var(const Var&)>;

// Compares backward-mode gradients of f at x against central differences.
// Returns the max over coordinates of
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
double finite_diff_check(const ScalarGraphFn& f, const DenseArray& x, double step = 1e-5);

}  // namespace ceu
