#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "cora/convnet.hpp"

namespace cora {

/// Continuous ranks with their per-layer upper bounds R_l.
struct RankVector {
  std::vector<double> values;
  std::vector<std::size_t> bounds;
};

struct SearchConfig {
  double budget = 0.05;
  double lambda = 1.0;
  int order = 4;
  double lr = 0.01;
  std::size_t iterations = 250;
  std::size_t batch_size = 32;
  double grad_clip = 0.2;
  std::uint64_t seed = 0;
};

void validate(const SearchConfig& cfg);

struct TraceRecord {
  std::size_t iteration = 0;
  double data_loss = 0.0;
  double penalty = 0.0;
  double running_budget = 0.0;  // omega^T r after the update
  std::vector<double> ranks;
  bool anomaly = false;  // non-finite gradient replaced this step
};

struct SearchTrace {
  std::vector<TraceRecord> records;
};

/// omega_l = Theta_l / (R_l * sum Theta), Theta_l the conv weight's parameter count.
std::vector<double> rank_norm_coeffs(const AdaptedQuantModel& model);

double running_budget(std::span<const double> omega, std::span<const double> ranks);

struct Penalty {
  double value = 0.0;
  std::vector<double> grad;
};

/// lambda * exp(relu(omega^T r - b)); the gradient is zero under budget.
Penalty budget_penalty(std::span<const double> ranks, std::span<const double> omega, double budget,
                       double lambda);

/// floor(b * R_l), at least 1.
std::vector<std::size_t> heuristic_ranks(double budget, std::span<const std::size_t> bounds);

/// Adam with per-component clipping, NaN reset and box clamping.
/// The model is switched to soft mode and left at the final continuous ranks.
/// `observer` is called after each iteration with the newest record.
std::pair<RankVector, SearchTrace> search(
    AdaptedQuantModel& model, const Batch& calib, const SearchConfig& cfg,
    const std::function<void(const TraceRecord&)>& observer = {});

/// clamp(round(r), 1, R) per layer.
std::vector<std::size_t> finalize_ranks(const RankVector& r);

/// Rounds the ranks and rebuilds hard adapters, optionally quantized.
std::vector<std::size_t> finalize(AdaptedQuantModel& model, const RankVector& r,
                                  const std::optional<QuantSpec>& adapter_spec);

double equivalent_bitwidth(double bits, double adapter_bits, double budget);

struct LayerSolution {
  std::size_t layer = 0;
  std::size_t max_rank = 0;
  std::size_t heuristic = 0;
  std::size_t optimal = 0;
  double continuous = 0.0;
};

struct Solution {
  std::vector<LayerSolution> layers;
  double budget = 0.0;
  double continuous_budget = 0.0;  // omega^T r for the relaxed ranks
  double integer_budget = 0.0;     // omega^T r for the finalized ranks
};

Solution make_solution(const AdaptedQuantModel& model, const RankVector& r, double budget);

void write_trace_csv(std::ostream& out, const SearchTrace& trace);
void write_solution_json(std::ostream& out, const Solution& solution);

}  // namespace cora
