#pragma once

#include <span>
#include <stdexcept>
#include <vector>

namespace ceu {

// All logits are -infinity: no probability mass survives.
struct degenerate_distribution_error : std::domain_error {
  using std::domain_error::domain_error;
};

// Two or more +infinity logits: the one-hot limit is not unique.
struct ambiguous_one_hot_error : std::domain_error {
  using std::domain_error::domain_error;
};

// Softmax over an extended-real logit vector. -infinity entries map to
// exactly 0; a single +infinity entry short-circuits to the exact one-hot
// vector at that index. Finite entries are max-subtracted for stability.
std::vector<double> softmax_ext(std::span<const double> logits);

// log(softmax_ext(logits)) computed by log-sum-exp, never by log of softmax.
// Entries with zero probability come out as -infinity.
std::vector<double> log_softmax_ext(std::span<const double> logits);

// Log-sum-exp over the finite entries of an extended-real vector, with the
// same one-hot/degenerate contracts as softmax_ext. A +infinity entry yields
// +infinity; an all--infinity input throws.
double log_sum_exp_ext(std::span<const double> logits);

}  // namespace ceu
