#pragma once

#include <cstdint>
#include <iosfwd>
#include <vector>

namespace ceu {

// Gradient magnitude at the true-label logit for gradient-ascent unlearning,
// with the proportionality constant fixed to 1 per valid position: 1 - p.
// Vanishes as confidence grows, explodes as it falls.
double ga_grad_mag(double p_true);

// Gradient magnitude at the true-label logit for the unlearning loss: p.
// Large exactly when the model is confident about the label to forget.
double ceu_grad_mag(double p_true);

// DPO per-sample gradient weight beta * sigmoid(reward_gap), where the gap is
// r(x, y_l) - r(x, y_w). Always in (0, beta).
struct DpoGradSample {
  double reward_gap = 0.0;
  double beta = 0.1;  // > 0
};
double dpo_weight(const DpoGradSample& sample);

// GRPO per-token gradient coefficient: advantage + beta * (prob_ratio - 1)
// with prob_ratio = pi_ref / pi_theta at the token. Negative coefficients turn
// the update into weighted gradient ascent.
struct GrpoGradSample {
  double advantage = 0.0;
  double beta = 0.04;       // >= 0
  double prob_ratio = 1.0;  // > 0
};
double grpo_coefficient(const GrpoGradSample& sample);

// The advantage at which the GRPO coefficient changes sign for a given
// (beta, ratio): -beta * (ratio - 1).
double grpo_sign_flip_advantage(double beta, double prob_ratio);

// Confidence sweep comparing the two unlearning gradient magnitudes across a
// grid of true-label probabilities.
struct ConfidenceSweep {
  std::vector<double> p_true;
  std::vector<double> ga_grad;
  std::vector<double> ceu_grad;
};

// Sweep over an explicit strictly increasing grid of probabilities in (0,1).
ConfidenceSweep sweep_report(const std::vector<double>& grid);

// Sweep over a log-spaced grid of grid_size points covering [0.01, 0.99].
ConfidenceSweep sweep_report(std::int64_t grid_size);

// CSV with header "p_true,ga_grad,ceu_grad", one row per grid point.
void write_sweep_csv(std::ostream& out, const ConfidenceSweep& sweep);

}  // namespace ceu
