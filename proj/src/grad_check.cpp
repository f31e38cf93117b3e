#include "ceu/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace ceu {

double finite_diff_check(const ScalarGraphFn& f, const DenseArray& x, double step) {
  if (step <= 0.0) throw std::invalid_argument("finite_diff_check: step must be positive");

  Var leaf = Var::param(x);
  Var out = f(leaf);
  if (out.value().numel() != 1) throw std::invalid_argument("finite_diff_check: f must be scalar-valued");
  backward(out);
  const DenseArray analytic = leaf.grad();

  auto eval = [&f](const DenseArray& at) {
    return f(Var::constant(at)).scalar();
  };

  double max_rel = 0.0;
  DenseArray probe = x;
  for (std::size_t i = 0; i < probe.data.size(); ++i) {
    const double orig = probe.data[i];
    probe.data[i] = orig + step;
    const double up = eval(probe);
    probe.data[i] = orig - step;
    const double down = eval(probe);
    probe.data[i] = orig;
    const double numeric = (up - down) / (2.0 * step);
    const double a = analytic.data[i];
    const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
    max_rel = std::max(max_rel, rel);
  }
  return max_rel;
}

}  // namespace ceu
