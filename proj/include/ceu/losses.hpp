#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ceu/autodiff.hpp"
#include "ceu/dense_array.hpp"

namespace ceu {

struct empty_supervision_error : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Model logits over a batch of token positions, shape [batch, seq_len, vocab].
// Model outputs are finite; only constructed target logits carry +-infinity.
struct LogitBlock {
  Var values;

  std::int64_t batch() const { return values.value().shape[0]; }
  std::int64_t seq_len() const { return values.value().shape[1]; }
  std::int64_t vocab() const { return values.value().shape[2]; }
};

LogitBlock make_logit_block(Var values);  // validates rank/vocab/finiteness

// Per-position token labels with an ignore sentinel. Default sentinel -100
// keeps drop-in familiarity with common training stacks.
struct LabelBlock {
  std::int64_t batch = 0;
  std::int64_t seq_len = 0;
  std::vector<std::int64_t> token_ids;  // row-major [batch, seq_len]
  std::int64_t ignore_value = -100;

  std::int64_t at(std::int64_t b, std::int64_t t) const {
    return token_ids[static_cast<std::size_t>(b * seq_len + t)];
  }
};

// Valid (supervised) positions of a label block, in row-major order. All
// per-position score vectors and target rows follow this order.
std::vector<std::int64_t> valid_positions(const LabelBlock& labels);

// Per-valid-position preference score for the true label in the target
// distribution: raw scores live in log space (extended real), normalized
// scores are the target probability of the true label in [0,1].
struct PreferenceScore {
  enum class Kind { raw, normalized };
  Kind kind = Kind::normalized;
  std::vector<double> values;

  static PreferenceScore raw(std::vector<double> v) { return {Kind::raw, std::move(v)}; }
  static PreferenceScore normalized(std::vector<double> v);  // range-checked
};

// Detached per-position target distribution, shape [num_valid_positions, vocab].
struct TargetDistribution {
  DenseArray probs;
};

// ---- target constructors ----------------------------------------------------

// Unlearning target: softmax of the detached logits with the true-label entry
// suppressed to -infinity, so the true label gets exactly zero mass.
TargetDistribution ceu_target(const LogitBlock& logits, const LabelBlock& labels);

// Raw-score target: the true-label logit is replaced by the given log-space
// score. +inf short-circuits to the exact one-hot at the label before any
// arithmetic; -inf reproduces the ceu_target row.
TargetDistribution general_ceu_target_raw(const LogitBlock& logits, const LabelBlock& labels,
                                          const PreferenceScore& scores);

// Normalized-score target: r * one_hot(y) + (1 - r) * ceu_target row.
TargetDistribution general_ceu_target_normalized(const LogitBlock& logits, const LabelBlock& labels,
                                                 const PreferenceScore& scores);

// Converts a raw log-space score to the normalized score it induces:
// exp(r) / (exp(r) + sum_{j != y} exp(z_j)), evaluated in log space.
double raw_to_normalized(std::span<const double> logits_row, std::int64_t y, double r_raw);

// ---- losses -------------------------------------------------------------

// Mean over valid positions of -sum_i target_i * log p(i) against an
// explicit constant target. This is the shared core of every loss below once
// its target is built; it is also the right function to feed a
// finite-difference oracle, since the stop-gradient in the loss definitions
// means the target is held fixed while the logits vary.
Var target_cross_entropy(const LogitBlock& logits, const LabelBlock& labels, const TargetDistribution& target);

// Mean over valid positions of -sum_i sg(target_i) * log p(i), with p the
// softmax of the live logits. Differentiable w.r.t. logits only.
Var ceu_loss(const LogitBlock& logits, const LabelBlock& labels);

// Same loss against the general target (raw or normalized score kind).
// A +inf raw score at a position where the model's log p(y) underflows to
// -infinity yields a +infinity loss; that is the documented limit, not an
// error.
Var general_ceu_loss(const LogitBlock& logits, const LabelBlock& labels, const PreferenceScore& scores);

// Mean over valid positions of -log p(y).
Var cross_entropy_loss(const LogitBlock& logits, const LabelBlock& labels);

// Mean over valid positions of +log p(y): minimizing this objective ascends
// the NLL, so all objectives share one optimizer path. Gradient w.r.t. the
// logits is one_hot(y) - p per valid position.
Var grad_ascent_loss(const LogitBlock& logits, const LabelBlock& labels);

}  // namespace ceu
