#include "ceu/softmax_ext.hpp"

#include <cmath>
#include <limits>

namespace ceu {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Scans for the stability pivot (max over finite entries) and validates the
// extended-real contract. Returns the index of the +infinity entry, or -1.
std::int64_t scan_logits(std::span<const double> logits, double& finite_max) {
  if (logits.empty()) throw std::invalid_argument("softmax_ext: empty logit vector");
  std::int64_t pos_inf_at = -1;
  finite_max = -kInf;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i];
    if (std::isnan(z)) throw std::invalid_argument("softmax_ext: NaN logit");
    if (z == kInf) {
      if (pos_inf_at >= 0) throw ambiguous_one_hot_error("softmax_ext: multiple +inf logits");
      pos_inf_at = static_cast<std::int64_t>(i);
    } else if (z > finite_max) {
      finite_max = z;
    }
  }
  if (pos_inf_at < 0 && finite_max == -kInf) {
    throw degenerate_distribution_error("softmax_ext: all logits are -inf");
  }
  return pos_inf_at;
}

}  // namespace

std::vector<double> softmax_ext(std::span<const double> logits) {
  double finite_max;
  const std::int64_t pos_inf_at = scan_logits(logits, finite_max);

  std::vector<double> out(logits.size(), 0.0);
  if (pos_inf_at >= 0) {
    out[static_cast<std::size_t>(pos_inf_at)] = 1.0;
    return out;
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    // exp(-inf - finite_max) underflows to exactly 0
    const double e = std::exp(logits[i] - finite_max);
    out[i] = e;
    sum += e;
  }
  for (double& v : out) v /= sum;
  return out;
}

double log_sum_exp_ext(std::span<const double> logits) {
  double finite_max;
  const std::int64_t pos_inf_at = scan_logits(logits, finite_max);
  if (pos_inf_at >= 0) return kInf;
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - finite_max);
  return finite_max + std::log(sum);
}

std::vector<double> log_softmax_ext(std::span<const double> logits) {
  double finite_max;
  const std::int64_t pos_inf_at = scan_logits(logits, finite_max);

  std::vector<double> out(logits.size(), -kInf);
  if (pos_inf_at >= 0) {
    out[static_cast<std::size_t>(pos_inf_at)] = 0.0;
    return out;
  }
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - finite_max);
  const double lse = finite_max + std::log(sum);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = logits[i] == -kInf ? -kInf : logits[i] - lse;
  }
  return out;
}

}  // namespace ceu
