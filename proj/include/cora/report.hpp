#pragma once

#include <iosfwd>
#include <string>
#include <string_view>

#include "cora/quantizer.hpp"
#include "cora/search.hpp"

namespace cora {

/// %.17g; enough digits for an exact round trip of any double.
std::string format_double(double v);
std::string json_quote(std::string_view s);

struct Accuracies {
  double float_model = 0.0;
  double quantized = 0.0;
  double heuristic = 0.0;
  double optimal = 0.0;
};

struct RunReport {
  QuantSpec weight_spec;
  int adapter_bits = 8;
  double budget = 0.05;
  double equivalent_bits = 0.0;
  Solution solution;
  Accuracies accuracy;
  std::size_t iterations = 0;
  double wall_time_s = 0.0;
};

/// Fills equivalent_bits from the specs and budget.
RunReport make_report(const QuantSpec& weight_spec, int adapter_bits, double budget);

/// JSON with a fixed key order.
void write_report(std::ostream& out, const RunReport& report);
void write_report(const std::string& path, const RunReport& report);

}  // namespace cora
