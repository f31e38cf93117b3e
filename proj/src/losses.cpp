#include "ceu/losses.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "ceu/softmax_ext.hpp"

namespace ceu {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_labels(const LogitBlock& logits, const LabelBlock& labels) {
  if (labels.batch != logits.batch() || labels.seq_len != logits.seq_len()) {
    throw std::invalid_argument("labels shape [" + std::to_string(labels.batch) + "," +
                                std::to_string(labels.seq_len) + "] does not match logits " +
                                shape_str(logits.values.value().shape));
  }
  const std::int64_t vocab = logits.vocab();
  for (std::int64_t id : labels.token_ids) {
    if (id == labels.ignore_value) continue;
    if (id < 0 || id >= vocab) {
      throw std::invalid_argument("label id " + std::to_string(id) + " outside vocab " + std::to_string(vocab));
    }
  }
}

struct ValidView {
  std::vector<std::int64_t> rows;    // flat row indices into [batch*seq_len, vocab]
  std::vector<std::int64_t> labels;  // true-label id per valid position
};

ValidView gather_valid(const LogitBlock& logits, const LabelBlock& labels) {
  check_labels(logits, labels);
  ValidView v;
  for (std::int64_t b = 0; b < labels.batch; ++b) {
    for (std::int64_t t = 0; t < labels.seq_len; ++t) {
      const std::int64_t id = labels.at(b, t);
      if (id == labels.ignore_value) continue;
      v.rows.push_back(b * labels.seq_len + t);
      v.labels.push_back(id);
    }
  }
  if (v.rows.empty()) throw empty_supervision_error("loss: no supervised positions");
  return v;
}

// Detached logit rows at the valid positions, one row per position.
std::vector<std::vector<double>> detached_rows(const LogitBlock& logits, const ValidView& view) {
  const std::int64_t vocab = logits.vocab();
  const auto& data = logits.values.value().data;
  std::vector<std::vector<double>> rows;
  rows.reserve(view.rows.size());
  for (std::int64_t r : view.rows) {
    const double* src = &data[static_cast<std::size_t>(r * vocab)];
    rows.emplace_back(src, src + vocab);
  }
  return rows;
}

void check_score_count(const ValidView& view, const PreferenceScore& scores) {
  if (scores.values.size() != view.rows.size()) {
    throw std::invalid_argument("scores: expected " + std::to_string(view.rows.size()) + " values, got " +
                                std::to_string(scores.values.size()));
  }
}

TargetDistribution target_from_raw(const LogitBlock& logits, const ValidView& view,
                                   const std::vector<double>& raw_scores) {
  const std::int64_t vocab = logits.vocab();
  auto rows = detached_rows(logits, view);
  DenseArray probs = DenseArray::zeros({static_cast<std::int64_t>(rows.size()), vocab});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i][static_cast<std::size_t>(view.labels[i])] = raw_scores[i];
    const auto p = softmax_ext(rows[i]);
    std::copy(p.begin(), p.end(), probs.data.begin() + static_cast<std::ptrdiff_t>(i * static_cast<std::size_t>(vocab)));
  }
  return {std::move(probs)};
}

// The shared loss core: mean over valid positions of -sum_i target_i * log p_i,
// with the target treated as a constant.
Var target_loss(const LogitBlock& logits, const ValidView& view, const TargetDistribution& target) {
  const std::int64_t vocab = logits.vocab();
  const std::int64_t n = static_cast<std::int64_t>(view.rows.size());
  Var flat = reshape(logits.values, {logits.batch() * logits.seq_len(), vocab});
  Var rows = select_rows(flat, view.rows);
  Var logp = row_log_softmax(rows);
  DenseArray weights = target.probs;
  const double inv_n = -1.0 / static_cast<double>(n);
  for (double& w : weights.data) w *= inv_n;
  return sum_weighted(logp, weights);
}

DenseArray one_hot_rows(const ValidView& view, std::int64_t vocab) {
  DenseArray out = DenseArray::zeros({static_cast<std::int64_t>(view.labels.size()), vocab});
  for (std::size_t i = 0; i < view.labels.size(); ++i) {
    out.data[i * static_cast<std::size_t>(vocab) + static_cast<std::size_t>(view.labels[i])] = 1.0;
  }
  return out;
}

}  // namespace

LogitBlock make_logit_block(Var values) {
  const DenseArray& v = values.value();
  if (v.rank() != 3) throw std::invalid_argument("LogitBlock: expected rank 3, got " + shape_str(v.shape));
  if (v.shape[2] < 2) throw std::invalid_argument("LogitBlock: vocab must be >= 2");
  if (!v.all_finite()) throw std::invalid_argument("LogitBlock: model logits must be finite");
  return {std::move(values)};
}

std::vector<std::int64_t> valid_positions(const LabelBlock& labels) {
  std::vector<std::int64_t> out;
  for (std::size_t i = 0; i < labels.token_ids.size(); ++i) {
    if (labels.token_ids[i] != labels.ignore_value) out.push_back(static_cast<std::int64_t>(i));
  }
  return out;
}

PreferenceScore PreferenceScore::normalized(std::vector<double> v) {
  for (double s : v) {
    if (!(s >= 0.0 && s <= 1.0)) {
      throw std::invalid_argument("PreferenceScore: normalized score " + std::to_string(s) + " outside [0,1]");
    }
  }
  return {Kind::normalized, std::move(v)};
}

TargetDistribution ceu_target(const LogitBlock& logits, const LabelBlock& labels) {
  const ValidView view = gather_valid(logits, labels);
  return target_from_raw(logits, view, std::vector<double>(view.rows.size(), -kInf));
}

TargetDistribution general_ceu_target_raw(const LogitBlock& logits, const LabelBlock& labels,
                                          const PreferenceScore& scores) {
  if (scores.kind != PreferenceScore::Kind::raw) throw std::invalid_argument("general_ceu_target_raw: scores must be raw");
  const ValidView view = gather_valid(logits, labels);
  check_score_count(view, scores);
  return target_from_raw(logits, view, scores.values);
}

TargetDistribution general_ceu_target_normalized(const LogitBlock& logits, const LabelBlock& labels,
                                                 const PreferenceScore& scores) {
  if (scores.kind != PreferenceScore::Kind::normalized) {
    throw std::invalid_argument("general_ceu_target_normalized: scores must be normalized");
  }
  const ValidView view = gather_valid(logits, labels);
  check_score_count(view, scores);
  for (double s : scores.values) {
    if (!(s >= 0.0 && s <= 1.0)) throw std::invalid_argument("normalized score outside [0,1]");
  }
  TargetDistribution base = ceu_target(logits, labels);
  const std::int64_t vocab = logits.vocab();
  for (std::size_t i = 0; i < view.labels.size(); ++i) {
    const double r = scores.values[i];
    double* row = &base.probs.data[i * static_cast<std::size_t>(vocab)];
    for (std::int64_t j = 0; j < vocab; ++j) row[j] *= 1.0 - r;
    row[view.labels[i]] += r;
  }
  return base;
}

double raw_to_normalized(std::span<const double> logits_row, std::int64_t y, double r_raw) {
  if (y < 0 || y >= static_cast<std::int64_t>(logits_row.size())) {
    throw std::invalid_argument("raw_to_normalized: label out of range");
  }
  if (r_raw == kInf) return 1.0;
  if (r_raw == -kInf) return 0.0;
  std::vector<double> others;
  others.reserve(logits_row.size() - 1);
  for (std::size_t j = 0; j < logits_row.size(); ++j) {
    if (static_cast<std::int64_t>(j) != y) others.push_back(logits_row[j]);
  }
  // lse_others = log sum_{j != y} exp(z_j); throws if every remaining logit is -inf
  const double lse_others = log_sum_exp_ext(others);
  // exp(r) / (exp(r) + exp(lse)) = sigmoid(r - lse)
  const double gap = r_raw - lse_others;
  if (gap >= 0.0) return 1.0 / (1.0 + std::exp(-gap));
  const double e = std::exp(gap);
  return e / (1.0 + e);
}

Var target_cross_entropy(const LogitBlock& logits, const LabelBlock& labels, const TargetDistribution& target) {
  const ValidView view = gather_valid(logits, labels);
  if (target.probs.rank() != 2 || target.probs.shape[0] != static_cast<std::int64_t>(view.rows.size()) ||
      target.probs.shape[1] != logits.vocab()) {
    throw std::invalid_argument("target_cross_entropy: target shape " + shape_str(target.probs.shape) +
                                " does not cover the valid positions");
  }
  return target_loss(logits, view, target);
}

Var ceu_loss(const LogitBlock& logits, const LabelBlock& labels) {
  const ValidView view = gather_valid(logits, labels);
  const TargetDistribution target =
      target_from_raw(logits, view, std::vector<double>(view.rows.size(), -kInf));
  return target_loss(logits, view, target);
}

Var general_ceu_loss(const LogitBlock& logits, const LabelBlock& labels, const PreferenceScore& scores) {
  const ValidView view = gather_valid(logits, labels);
  check_score_count(view, scores);
  TargetDistribution target = scores.kind == PreferenceScore::Kind::raw
                                  ? target_from_raw(logits, view, scores.values)
                                  : general_ceu_target_normalized(logits, labels, scores);
  return target_loss(logits, view, target);
}

Var cross_entropy_loss(const LogitBlock& logits, const LabelBlock& labels) {
  const ValidView view = gather_valid(logits, labels);
  return target_loss(logits, view, {one_hot_rows(view, logits.vocab())});
}

Var grad_ascent_loss(const LogitBlock& logits, const LabelBlock& labels) {
  return neg(cross_entropy_loss(logits, labels));
}

}  // namespace ceu
