#include "ceu/grad_analysis.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>
#include <stdexcept>

namespace ceu {

namespace {

void check_open_unit(double p) {
  if (!(p > 0.0 && p < 1.0)) {
    throw std::invalid_argument("gradient magnitude defined for p in (0,1), got " + std::to_string(p));
  }
}

}  // namespace

double ga_grad_mag(double p_true) {
  check_open_unit(p_true);
  return 1.0 - p_true;
}

double ceu_grad_mag(double p_true) {
  check_open_unit(p_true);
  return p_true;
}

double dpo_weight(const DpoGradSample& sample) {
  if (!(sample.beta > 0.0)) throw std::invalid_argument("dpo_weight: beta must be > 0");
  // sigmoid evaluated on the non-overflowing side
  const double g = sample.reward_gap;
  const double sig = g >= 0.0 ? 1.0 / (1.0 + std::exp(-g)) : std::exp(g) / (1.0 + std::exp(g));
  return sample.beta * sig;
}

double grpo_coefficient(const GrpoGradSample& sample) {
  if (!(sample.prob_ratio > 0.0)) throw std::invalid_argument("grpo_coefficient: prob_ratio must be > 0");
  if (sample.beta < 0.0) throw std::invalid_argument("grpo_coefficient: beta must be >= 0");
  return sample.advantage + sample.beta * (sample.prob_ratio - 1.0);
}

double grpo_sign_flip_advantage(double beta, double prob_ratio) {
  return -beta * (prob_ratio - 1.0);
}

ConfidenceSweep sweep_report(const std::vector<double>& grid) {
  if (grid.size() < 2) throw std::invalid_argument("sweep_report: grid needs at least 2 points");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    check_open_unit(grid[i]);
    if (i > 0 && !(grid[i] > grid[i - 1])) throw std::invalid_argument("sweep_report: grid must be strictly increasing");
  }
  ConfidenceSweep s;
  s.p_true = grid;
  s.ga_grad.reserve(grid.size());
  s.ceu_grad.reserve(grid.size());
  for (double p : grid) {
    s.ga_grad.push_back(ga_grad_mag(p));
    s.ceu_grad.push_back(ceu_grad_mag(p));
  }
  return s;
}

ConfidenceSweep sweep_report(std::int64_t grid_size) {
  if (grid_size < 2) throw std::invalid_argument("sweep_report: grid_size must be >= 2");
  const double lo = std::log(0.01), hi = std::log(0.99);
  std::vector<double> grid(static_cast<std::size_t>(grid_size));
  for (std::int64_t i = 0; i < grid_size; ++i) {
    const double t = static_cast<double>(i) / static_cast<double>(grid_size - 1);
    grid[static_cast<std::size_t>(i)] = std::exp(lo + t * (hi - lo));
  }
  return sweep_report(grid);
}

void write_sweep_csv(std::ostream& out, const ConfidenceSweep& sweep) {
  out << "p_true,ga_grad,ceu_grad\n";
  char buf[128];
  for (std::size_t i = 0; i < sweep.p_true.size(); ++i) {
    std::snprintf(buf, sizeof(buf), "%.12g,%.12g,%.12g\n", sweep.p_true[i], sweep.ga_grad[i], sweep.ceu_grad[i]);
    out << buf;
  }
}

}  // namespace ceu
