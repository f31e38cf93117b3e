#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ceu {

// ROUGE-L recall: LCS(candidate, reference) / |reference|.
double rouge_l_recall(std::span<const std::int64_t> candidate, std::span<const std::int64_t> reference);

// exp(total_logprob / n_tokens): length-normalized sequence probability.
double normalized_probability(double total_logprob, std::int64_t n_tokens);

// Geometric mean of the perturbed normalized probabilities divided by the
// paraphrased-answer normalized probability. A zero paraphrased probability
// yields the +infinity sentinel; aggregation excludes it with a warning.
double truth_ratio(double paraphrased_norm_prob, std::span<const double> perturbed_norm_probs);

// max(0, 1 - truth_ratio): the per-item transform used when truth ratios
// enter Model Utility on retain/probe splits (wrong answers should be less
// likely than right ones).
double truth_ratio_utility(double ratio);

struct KsResult {
  double statistic = 0.0;  // sup |ECDF_a - ECDF_b|
  double p_value = 1.0;
  double log_p_value = 0.0;
};

// Two-sample Kolmogorov-Smirnov test with the asymptotic p-value at effective
// size n*m/(n+m). The small-sample correction is intentionally skipped;
// adequate from roughly 20 samples per side.
KsResult ks_two_sample(std::span<const double> sample_a, std::span<const double> sample_b);

// Harmonic mean of component scores in [0,1]; any zero component forces 0.
double harmonic_mean(std::span<const double> components);

// Aggregates a list of per-item values, skipping non-finite entries (the
// truth-ratio +inf sentinel). warned flags whether anything was skipped.
struct Aggregate {
  double mean = 0.0;
  std::int64_t n_used = 0;
  bool warned = false;
};
Aggregate aggregate_mean(std::span<const double> values);

// Per-split metric aggregates for one evaluation pass.
struct MetricRecord {
  std::string split;  // forget | retain | probe
  double rouge_l = 0.0;
  double norm_prob = 0.0;
  double truth_ratio_mean = 0.0;      // raw ratios, +inf entries excluded
  double truth_ratio_utility_mean = 0.0;
  double rouge_l_gold = 0.0;          // supplementary gold-question decode
};

// Harmonic mean of the six retain/probe components: ROUGE, normalized
// probability, and transformed truth ratio for each of the two splits.
double model_utility(const MetricRecord& retain, const MetricRecord& probe);

// KS p-value between the unlearned and reference truth-ratio samples on the
// forget items: higher means the unlearned model is statistically
// indistinguishable from the retain-only reference.
KsResult forget_quality(std::span<const double> unlearned_truth_ratios,
                        std::span<const double> reference_truth_ratios);

}  // namespace ceu
