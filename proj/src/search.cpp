#include "cora/search.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <random>
#include <string>

#include "cora/report.hpp"

namespace cora {
namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kEpsilon = 1e-8;

// Epoch-wise shuffled mini-batches over the calibration set.
class BatchSampler {
 public:
  BatchSampler(std::size_t count, std::size_t batch, std::uint64_t seed)
      : order_(count), batch_(std::min(batch, count)), rng_(seed) {
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    reshuffle();
  }

  std::span<const std::size_t> next() {
    if (pos_ + batch_ > order_.size()) reshuffle();
    std::span<const std::size_t> out(order_.data() + pos_, batch_);
    pos_ += batch_;
    return out;
  }

 private:
  void reshuffle() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }

  std::vector<std::size_t> order_;
  std::size_t batch_;
  std::size_t pos_ = 0;
  std::mt19937_64 rng_;
};

}  // namespace

void validate(const SearchConfig& cfg) {
  if (!(cfg.budget >= 0.0 && cfg.budget <= 1.0))
    throw Error(Errc::invalid_argument, "budget must lie in [0, 1]");
  if (!(cfg.lambda >= 0.0)) throw Error(Errc::invalid_argument, "penalty lambda must be >= 0");
  if (cfg.order < 1) throw Error(Errc::invalid_argument, "Butterworth order must be >= 1");
  if (!(cfg.lr > 0.0)) throw Error(Errc::invalid_argument, "learning rate must be positive");
  if (cfg.batch_size == 0) throw Error(Errc::invalid_argument, "batch size must be positive");
  if (!(cfg.grad_clip > 0.0)) throw Error(Errc::invalid_argument, "gradient clip must be positive");
}

std::vector<double> rank_norm_coeffs(const AdaptedQuantModel& model) {
  if (model.adapters.empty()) throw Error(Errc::invalid_argument, "model has no adaptable conv layers");
  std::vector<double> theta;
  for (const auto& ac : model.adapters)
    theta.push_back(static_cast<double>(
        std::get<ConvLayer>(model.network.layers.at(ac.layer)).weight.size()));
  const double total = std::accumulate(theta.begin(), theta.end(), 0.0);
  std::vector<double> omega(theta.size());
  for (std::size_t l = 0; l < omega.size(); ++l)
    omega[l] = theta[l] / (static_cast<double>(model.adapters[l].max_rank) * total);
  return omega;
}

double running_budget(std::span<const double> omega, std::span<const double> ranks) {
  if (omega.size() != ranks.size()) throw Error(Errc::shape_mismatch, "omega and ranks differ");
  double acc = 0.0;
  for (std::size_t l = 0; l < omega.size(); ++l) acc += omega[l] * ranks[l];
  return acc;
}

Penalty budget_penalty(std::span<const double> ranks, std::span<const double> omega, double budget,
                       double lambda) {
  const double excess = running_budget(omega, ranks) - budget;
  Penalty p;
  p.grad.assign(ranks.size(), 0.0);
  if (excess > 0.0) {
    const double e = std::exp(excess);
    p.value = lambda * e;
    for (std::size_t l = 0; l < ranks.size(); ++l) p.grad[l] = lambda * omega[l] * e;
  } else {
    p.value = lambda;
  }
  return p;
}

std::vector<std::size_t> heuristic_ranks(double budget, std::span<const std::size_t> bounds) {
  std::vector<std::size_t> out;
  for (std::size_t bound : bounds) {
    const auto r = static_cast<std::size_t>(std::floor(budget * static_cast<double>(bound)));
    out.push_back(std::clamp<std::size_t>(r, 1, std::max<std::size_t>(bound, 1)));
  }
  return out;
}

std::pair<RankVector, SearchTrace> search(AdaptedQuantModel& model, const Batch& calib,
                                          const SearchConfig& cfg,
                                          const std::function<void(const TraceRecord&)>& observer) {
  validate(cfg);
  if (calib.size() == 0) throw Error(Errc::invalid_argument, "empty calibration set");
  validate(calib, model.network.num_classes);
  for (const auto& ac : model.adapters)
    if (!ac.factorization) throw Error(Errc::invalid_argument, "search needs residual factorizations");

  const auto omega = rank_norm_coeffs(model);
  RankVector r;
  r.bounds = model.max_ranks();
  const auto init = heuristic_ranks(cfg.budget, r.bounds);
  r.values.assign(init.begin(), init.end());
  const std::size_t layers = r.values.size();

  model.mode = AdapterMode::soft;
  model.order = cfg.order;
  model.target_budget = cfg.budget;
  for (auto& ac : model.adapters) {
    ac.adapter.reset();
    ac.a_codes.reset();
    ac.b_codes.reset();
  }
  model.adapter_spec.reset();

  std::vector<double> m(layers, 0.0);
  std::vector<double> v(layers, 0.0);
  BatchSampler sampler(calib.size(), cfg.batch_size, cfg.seed);
  SearchTrace trace;
  int bad_streak = 0;

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    model.ranks = r.values;
    const Batch batch = select(calib, sampler.next());
    const RankGradient rg = grad_wrt_ranks(model, batch);
    const Penalty pen = budget_penalty(r.values, omega, cfg.budget, cfg.lambda);

    TraceRecord rec;
    rec.iteration = it;
    rec.data_loss = rg.loss;
    rec.penalty = pen.value;
    rec.anomaly = !rg.finite;
    bad_streak = std::isfinite(rg.loss) ? 0 : bad_streak + 1;
    if (bad_streak >= 2)
      throw Error(Errc::numeric, "loss stayed non-finite for two iterations at step " +
                                     std::to_string(it));

    const double t = static_cast<double>(it + 1);
    for (std::size_t l = 0; l < layers; ++l) {
      double g = std::clamp(rg.grad[l] + pen.grad[l], -cfg.grad_clip, cfg.grad_clip);
      m[l] = kBeta1 * m[l] + (1.0 - kBeta1) * g;
      v[l] = kBeta2 * v[l] + (1.0 - kBeta2) * g * g;
      const double mhat = m[l] / (1.0 - std::pow(kBeta1, t));
      const double vhat = v[l] / (1.0 - std::pow(kBeta2, t));
      r.values[l] -= cfg.lr * mhat / (std::sqrt(vhat) + kEpsilon);
      if (!std::isfinite(r.values[l])) {
        r.values[l] = 1.0;
        m[l] = 0.0;
        v[l] = 0.0;
        rec.anomaly = true;
      }
      r.values[l] = std::clamp(r.values[l], 1.0, static_cast<double>(r.bounds[l]));
    }
    rec.ranks = r.values;
    rec.running_budget = running_budget(omega, r.values);
    if (observer) observer(rec);
    trace.records.push_back(std::move(rec));
  }
  model.ranks = r.values;
  return {std::move(r), std::move(trace)};
}

std::vector<std::size_t> finalize_ranks(const RankVector& r) {
  std::vector<std::size_t> out;
  for (std::size_t l = 0; l < r.values.size(); ++l) {
    const double bound = static_cast<double>(r.bounds.at(l));
    out.push_back(static_cast<std::size_t>(std::clamp(std::nearbyint(r.values[l]), 1.0, bound)));
  }
  return out;
}

std::vector<std::size_t> finalize(AdaptedQuantModel& model, const RankVector& r,
                                  const std::optional<QuantSpec>& adapter_spec) {
  auto ranks = finalize_ranks(r);
  apply_hard_ranks(model, ranks, adapter_spec);
  return ranks;
}

double equivalent_bitwidth(double bits, double adapter_bits, double budget) {
  return bits + adapter_bits * budget;
}

Solution make_solution(const AdaptedQuantModel& model, const RankVector& r, double budget) {
  const auto omega = rank_norm_coeffs(model);
  const auto heuristic = heuristic_ranks(budget, r.bounds);
  const auto optimal = finalize_ranks(r);
  Solution s;
  s.budget = budget;
  s.continuous_budget = running_budget(omega, r.values);
  const std::vector<double> opt_d(optimal.begin(), optimal.end());
  s.integer_budget = running_budget(omega, opt_d);
  for (std::size_t l = 0; l < optimal.size(); ++l)
    s.layers.push_back({model.adapters[l].layer, r.bounds[l], heuristic[l], optimal[l], r.values[l]});
  return s;
}

void write_trace_csv(std::ostream& out, const SearchTrace& trace) {
  out << "iteration,data_loss,penalty,running_budget";
  const std::size_t layers = trace.records.empty() ? 0 : trace.records.front().ranks.size();
  for (std::size_t l = 0; l < layers; ++l) out << ",r" << l;
  out << '\n';
  for (const auto& rec : trace.records) {
    out << rec.iteration << ',' << format_double(rec.data_loss) << ','
        << format_double(rec.penalty) << ',' << format_double(rec.running_budget);
    for (double v : rec.ranks) out << ',' << format_double(v);
    out << '\n';
  }
}

void write_solution_json(std::ostream& out, const Solution& s) {
  out << "{\n  \"budget\": " << format_double(s.budget)
      << ",\n  \"continuous_budget\": " << format_double(s.continuous_budget)
      << ",\n  \"integer_budget\": " << format_double(s.integer_budget) << ",\n  \"layers\": [";
  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    const auto& ls = s.layers[l];
    out << (l ? ",\n" : "\n") << "    {\"layer\": " << ls.layer << ", \"max_rank\": " << ls.max_rank
        << ", \"heuristic\": " << ls.heuristic << ", \"optimal\": " << ls.optimal
        << ", \"continuous\": " << format_double(ls.continuous) << "}";
  }
  out << "\n  ]\n}\n";
}

}  // namespace cora
