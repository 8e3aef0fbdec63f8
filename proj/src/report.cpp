#include "cora/report.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <ostream>

namespace cora {

std::string format_double(double v) {
  if (!std::isfinite(v)) return "null";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string json_quote(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    switch (c) {
      case '"': out += "\\\""; break;
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\t': out += "\\t"; break;
      default:
        if (static_cast<unsigned char>(c) < 0x20) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "\\u%04x", c);
          out += buf;
        } else {
          out += c;
        }
    }
  }
  return out + "\"";
}

RunReport make_report(const QuantSpec& weight_spec, int adapter_bits, double budget) {
  RunReport r;
  r.weight_spec = weight_spec;
  r.adapter_bits = adapter_bits;
  r.budget = budget;
  r.equivalent_bits = equivalent_bitwidth(weight_spec.bits, adapter_bits, budget);
  return r;
}

void write_report(std::ostream& out, const RunReport& r) {
  const auto& s = r.solution;
  out << "{\n"
      << "  \"bits\": " << r.weight_spec.bits << ",\n"
      << "  \"clip\": " << json_quote(describe(r.weight_spec.clip)) << ",\n"
      << "  \"mode\": "
      << json_quote(r.weight_spec.mode == QuantMode::symmetric ? "symmetric" : "asymmetric") << ",\n"
      << "  \"adapter_bits\": " << r.adapter_bits << ",\n"
      << "  \"budget\": " << format_double(r.budget) << ",\n"
      << "  \"equivalent_bits\": " << format_double(r.equivalent_bits) << ",\n"
      << "  \"accuracy\": {\n"
      << "    \"float\": " << format_double(r.accuracy.float_model) << ",\n"
      << "    \"quantized\": " << format_double(r.accuracy.quantized) << ",\n"
      << "    \"quantized_heuristic\": " << format_double(r.accuracy.heuristic) << ",\n"
      << "    \"quantized_optimal\": " << format_double(r.accuracy.optimal) << "\n"
      << "  },\n"
      << "  \"continuous_budget\": " << format_double(s.continuous_budget) << ",\n"
      << "  \"integer_budget\": " << format_double(s.integer_budget) << ",\n"
      << "  \"layers\": [";
  for (std::size_t l = 0; l < s.layers.size(); ++l) {
    const auto& ls = s.layers[l];
    out << (l ? ",\n" : "\n") << "    {\"layer\": " << ls.layer << ", \"max_rank\": " << ls.max_rank
        << ", \"heuristic\": " << ls.heuristic << ", \"optimal\": " << ls.optimal
        << ", \"continuous\": " << format_double(ls.continuous) << "}";
  }
  out << (s.layers.empty() ? "],\n" : "\n  ],\n")
      << "  \"iterations\": " << r.iterations << ",\n"
      << "  \"wall_time_s\": " << format_double(r.wall_time_s) << "\n"
      << "}\n";
}

void write_report(const std::string& path, const RunReport& r) {
  std::ofstream out(path);
  if (!out) throw Error(Errc::io, "cannot open " + path + " for writing");
  write_report(out, r);
  if (!out) throw Error(Errc::io, "failed writing " + path);
}

}  // namespace cora
