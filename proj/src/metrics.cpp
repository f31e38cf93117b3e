#include "ceu/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

namespace ceu {

namespace {
constexpr double kInf = std::numeric_limits<double>::infinity();
}

double rouge_l_recall(std::span<const std::int64_t> candidate, std::span<const std::int64_t> reference) {
  if (reference.empty()) throw std::invalid_argument("rouge_l_recall: empty reference");
  if (candidate.empty()) return 0.0;
  const std::size_t m = candidate.size(), n = reference.size();
  // two-row LCS dynamic program
  std::vector<std::int64_t> prev(n + 1, 0), cur(n + 1, 0);
  for (std::size_t i = 1; i <= m; ++i) {
    for (std::size_t j = 1; j <= n; ++j) {
      cur[j] = candidate[i - 1] == reference[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return static_cast<double>(prev[n]) / static_cast<double>(n);
}

double normalized_probability(double total_logprob, std::int64_t n_tokens) {
  if (n_tokens < 1) throw std::invalid_argument("normalized_probability: n_tokens must be >= 1");
  return std::exp(total_logprob / static_cast<double>(n_tokens));
}

double truth_ratio(double paraphrased_norm_prob, std::span<const double> perturbed_norm_probs) {
  if (perturbed_norm_probs.empty()) throw std::invalid_argument("truth_ratio: need at least one perturbation");
  if (paraphrased_norm_prob < 0.0) throw std::invalid_argument("truth_ratio: negative probability");
  if (paraphrased_norm_prob == 0.0) return kInf;  // sentinel, excluded from aggregation
  double log_gm = 0.0;
  for (double p : perturbed_norm_probs) {
    if (p < 0.0) throw std::invalid_argument("truth_ratio: negative probability");
    if (p == 0.0) return 0.0;  // model rejects a wrong answer outright
    log_gm += std::log(p);
  }
  log_gm /= static_cast<double>(perturbed_norm_probs.size());
  return std::exp(log_gm - std::log(paraphrased_norm_prob));
}

double truth_ratio_utility(double ratio) {
  if (!(ratio >= 0.0)) throw std::invalid_argument("truth_ratio_utility: ratio must be >= 0");
  return std::max(0.0, 1.0 - ratio);
}

namespace {

// Asymptotic Kolmogorov survival function Q(lambda) = 2 sum (-1)^{k-1} e^{-2 k^2 lambda^2},
// truncated at 100 terms. Returns both Q and log Q (leading-term log when the
// series underflows).
void kolmogorov_q(double lambda, double& q, double& log_q) {
  if (lambda < 1e-8) {
    q = 1.0;
    log_q = 0.0;
    return;
  }
  const double a = -2.0 * lambda * lambda;
  double sum = 0.0;
  double sign = 1.0;
  for (int k = 1; k <= 100; ++k) {
    const double term = sign * std::exp(a * static_cast<double>(k) * static_cast<double>(k));
    sum += term;
    sign = -sign;
    if (std::abs(term) < 1e-300) break;
  }
  q = std::min(1.0, std::max(0.0, 2.0 * sum));
  if (q > 0.0) {
    log_q = std::log(q);
  } else {
    // 2 e^{-2 lambda^2} underflowed; keep the leading-term logarithm
    log_q = std::log(2.0) + a;
  }
}

}  // namespace

KsResult ks_two_sample(std::span<const double> sample_a, std::span<const double> sample_b) {
  if (sample_a.empty() || sample_b.empty()) throw std::invalid_argument("ks_two_sample: empty sample");
  std::vector<double> a(sample_a.begin(), sample_a.end());
  std::vector<double> b(sample_b.begin(), sample_b.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());

  const double na = static_cast<double>(a.size()), nb = static_cast<double>(b.size());
  double d = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    const double x = std::min(a[i], b[j]);
    while (i < a.size() && a[i] <= x) ++i;
    while (j < b.size() && b[j] <= x) ++j;
    d = std::max(d, std::abs(static_cast<double>(i) / na - static_cast<double>(j) / nb));
  }

  KsResult r;
  r.statistic = d;
  const double ne = na * nb / (na + nb);
  kolmogorov_q(std::sqrt(ne) * d, r.p_value, r.log_p_value);
  return r;
}

double harmonic_mean(std::span<const double> components) {
  if (components.empty()) throw std::invalid_argument("harmonic_mean: no components");
  double inv_sum = 0.0;
  for (double c : components) {
    if (!(c >= 0.0 && c <= 1.0)) throw std::invalid_argument("harmonic_mean: component outside [0,1]");
    if (c == 0.0) return 0.0;
    inv_sum += 1.0 / c;
  }
  return static_cast<double>(components.size()) / inv_sum;
}

Aggregate aggregate_mean(std::span<const double> values) {
  Aggregate a;
  double sum = 0.0;
  for (double v : values) {
    if (!std::isfinite(v)) {
      a.warned = true;
      continue;
    }
    sum += v;
    a.n_used += 1;
  }
  a.mean = a.n_used > 0 ? sum / static_cast<double>(a.n_used) : 0.0;
  return a;
}

double model_utility(const MetricRecord& retain, const MetricRecord& probe) {
  const double components[6] = {retain.rouge_l,  retain.norm_prob, retain.truth_ratio_utility_mean,
                                probe.rouge_l,   probe.norm_prob,  probe.truth_ratio_utility_mean};
  return harmonic_mean(components);
}

KsResult forget_quality(std::span<const double> unlearned_truth_ratios,
                        std::span<const double> reference_truth_ratios) {
  return ks_two_sample(unlearned_truth_ratios, reference_truth_ratios);
}

}  // namespace ceu
