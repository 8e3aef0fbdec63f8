#include "cora/cli.hpp"

#include <chrono>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "cora/convnet.hpp"
#include "cora/kernels.hpp"
#include "cora/model_io.hpp"
#include "cora/report.hpp"
#include "cora/search.hpp"
#include "json.hpp"

namespace cora::cli {
namespace {

using json = nlohmann::ordered_json;
using io::Dataset;

struct Options {
  std::string model;
  std::string data;
  std::string calib;
  std::string out;
  std::string mode = "heuristic";
  std::string clip = "normal:4";
  int bits = 4;
  int adapter_bits = 8;
  SearchConfig search;
  int threads = 0;
  bool json = false;
  bool quiet = false;
};

ClipScheme parse_clip(const std::string& text) {
  if (text == "minmax") return ClipScheme::min_max();
  if (text.rfind("normal:", 0) == 0) {
    std::size_t used = 0;
    const std::string k = text.substr(7);
    double value = 0.0;
    try {
      value = std::stod(k, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == k.size() && !k.empty()) return ClipScheme::normal(value);
  }
  throw Error(Errc::invalid_argument, "--clip expects 'minmax' or 'normal:K', got '" + text + "'");
}

QuantSpec weight_spec(const Options& o) {
  QuantSpec s{o.bits, parse_clip(o.clip), QuantMode::asymmetric};
  validate(s);
  return s;
}

std::optional<QuantSpec> adapter_spec(const Options& o) {
  if (o.adapter_bits == 0) return std::nullopt;
  QuantSpec s{o.adapter_bits, ClipScheme::min_max(), QuantMode::asymmetric};
  validate(s);
  return s;
}

double adapter_bit_cost(const Options& o) { return o.adapter_bits == 0 ? 32.0 : o.adapter_bits; }

Dataset load_split(const std::string& path) { return io::load_dataset(path); }

// Human-readable "key: value" lines or one JSON object, depending on --json.
class Printer {
 public:
  Printer(std::ostream& out, bool as_json) : out_(out), json_(as_json) {}
  ~Printer() {
    if (json_ && !doc_.empty()) out_ << doc_.dump(2) << '\n';
  }
  template <class T>
  void put(const std::string& key, const T& value) {
    if (json_) {
      doc_[key] = value;
    } else {
      out_ << key << ": " << text(value) << '\n';
    }
  }

 private:
  static std::string text(double v) { return format_double(v); }
  static std::string text(const std::string& v) { return v; }
  static std::string text(const char* v) { return v; }
  template <class T>
  static std::string text(const std::vector<T>& v) {
    std::string s = "[";
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + text(v[i]);
    return s + "]";
  }
  template <class T>
  static std::string text(const T& v) {
    return std::to_string(v);
  }

  std::ostream& out_;
  bool json_;
  json doc_;
};

std::function<void(const TraceRecord&)> progress(std::ostream& err, const Options& o) {
  if (o.quiet || o.json) return {};
  return [&err, every = std::max<std::size_t>(1, o.search.iterations / 10)](const TraceRecord& r) {
    if ((r.iteration + 1) % every == 0)
      err << "iter " << r.iteration + 1 << "  loss " << format_double(r.data_loss) << "  budget "
          << format_double(r.running_budget) << '\n';
  };
}

struct SearchOutcome {
  RankVector ranks;
  SearchTrace trace;
  std::vector<std::size_t> finalized;
};

SearchOutcome run_search(AdaptedQuantModel& q, const Batch& calib, const Options& o,
                         std::ostream& err) {
  auto [r, trace] = search(q, calib, o.search, progress(err, o));
  auto finalized = finalize(q, r, adapter_spec(o));
  return {std::move(r), std::move(trace), std::move(finalized)};
}

void write_text(const std::string& path, const std::function<void(std::ostream&)>& fn) {
  std::ofstream f(path);
  if (!f) throw Error(Errc::io, "cannot open " + path + " for writing");
  fn(f);
  if (!f) throw Error(Errc::io, "failed writing " + path);
}

// ---------------------------------------------------------------------------

int cmd_quantize(const Options& o, std::ostream& out, std::ostream& err) {
  const QuantSpec spec = weight_spec(o);
  const auto aspec = adapter_spec(o);
  const Model model = io::load_model(o.model);
  AdaptedQuantModel q = quantize_model(model, spec, o.mode != "none");
  Printer p(out, o.json);
  p.put("command", "quantize");
  p.put("mode", o.mode);
  if (o.mode == "heuristic") {
    const auto ranks = heuristic_ranks(o.search.budget, q.max_ranks());
    apply_hard_ranks(q, ranks, aspec);
    q.target_budget = o.search.budget;
    p.put("ranks", ranks);
  } else if (o.mode == "optimal") {
    if (o.data.empty()) throw Error(Errc::invalid_argument, "--mode optimal needs --data");
    const Dataset calib = load_split(o.data);
    const auto res = run_search(q, calib.batch, o, err);
    p.put("ranks", res.finalized);
  }
  io::save_quantized(o.out, q);
  const double budget = o.mode == "none" ? 0.0 : o.search.budget;
  p.put("equivalent_bits", equivalent_bitwidth(spec.bits, adapter_bit_cost(o), budget));
  p.put("output", o.out);
  return ok;
}

int cmd_search(const Options& o, std::ostream& out, std::ostream& err) {
  const QuantSpec spec = weight_spec(o);
  (void)adapter_spec(o);
  const Model model = io::load_model(o.model);
  const Dataset calib = load_split(o.data);
  AdaptedQuantModel q = quantize_model(model, spec);
  const auto res = run_search(q, calib.batch, o, err);
  const Solution sol = make_solution(q, res.ranks, o.search.budget);

  const std::string qpath = o.out + ".cora-qmodel";
  const std::string spath = o.out + ".solution.json";
  const std::string tpath = o.out + ".trace.csv";
  io::save_quantized(qpath, q);
  write_text(spath, [&](std::ostream& f) { write_solution_json(f, sol); });
  write_text(tpath, [&](std::ostream& f) { write_trace_csv(f, res.trace); });

  Printer p(out, o.json);
  p.put("command", "search");
  p.put("iterations", res.trace.records.size());
  p.put("ranks", res.finalized);
  p.put("continuous_budget", sol.continuous_budget);
  p.put("integer_budget", sol.integer_budget);
  p.put("equivalent_bits", equivalent_bitwidth(spec.bits, adapter_bit_cost(o), o.search.budget));
  p.put("qmodel", qpath);
  p.put("solution", spath);
  p.put("trace", tpath);
  return ok;
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream&) {
  const Dataset data = load_split(o.data);
  const std::string format = io::peek_format(o.model);
  Printer p(out, o.json);
  p.put("command", "eval");
  if (format == "cora-model") {
    const Model model = io::load_model(o.model);
    p.put("model", "float");
    p.put("top1", top1_accuracy(model, data.batch));
  } else if (format == "cora-qmodel") {
    const AdaptedQuantModel q = io::load_quantized(o.model);
    const double budget = q.mode == AdapterMode::none ? 0.0 : q.target_budget;
    const double abits = q.adapter_spec ? q.adapter_spec->bits : 32.0;
    p.put("model", "quantized");
    p.put("top1", top1_accuracy(q, data.batch));
    p.put("equivalent_bits", equivalent_bitwidth(q.weight_spec.bits, abits, budget));
  } else {
    throw Error(Errc::format, o.model + " is not a model file");
  }
  return ok;
}

int cmd_report(const Options& o, std::ostream& out, std::ostream& err) {
  const auto start = std::chrono::steady_clock::now();
  const QuantSpec spec = weight_spec(o);
  const auto aspec = adapter_spec(o);
  const Model model = io::load_model(o.model);
  const Dataset calib = load_split(o.calib);
  const Dataset val = load_split(o.data);

  RunReport report = make_report(spec, static_cast<int>(adapter_bit_cost(o)), o.search.budget);
  report.accuracy.float_model = top1_accuracy(model, val.batch);
  AdaptedQuantModel q = quantize_model(model, spec);
  {
    AdaptedQuantModel plain = q;
    plain.mode = AdapterMode::none;
    report.accuracy.quantized = top1_accuracy(plain, val.batch);
  }
  {
    AdaptedQuantModel heur = q;
    apply_hard_ranks(heur, heuristic_ranks(o.search.budget, q.max_ranks()), aspec);
    report.accuracy.heuristic = top1_accuracy(heur, val.batch);
  }
  const auto res = run_search(q, calib.batch, o, err);
  report.accuracy.optimal = top1_accuracy(q, val.batch);
  report.solution = make_solution(q, res.ranks, o.search.budget);
  report.iterations = res.trace.records.size();
  report.wall_time_s =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_report(o.out, report);

  Printer p(out, o.json);
  p.put("command", "report");
  p.put("float", report.accuracy.float_model);
  p.put("quantized", report.accuracy.quantized);
  p.put("quantized_heuristic", report.accuracy.heuristic);
  p.put("quantized_optimal", report.accuracy.optimal);
  p.put("equivalent_bits", report.equivalent_bits);
  p.put("report", o.out);
  return ok;
}

int exit_code_for(Errc code) {
  switch (code) {
    case Errc::numeric: return numeric_error;
    case Errc::invalid_argument:
    case Errc::out_of_range: return usage;
    default: return data_error;
  }
}

void report_error(std::ostream& out, std::ostream& err, bool as_json, const char* kind,
                  const std::string& message) {
  err << "error: " << message << '\n';
  if (as_json) {
    json j;
    j["error"] = kind;
    j["message"] = message;
    out << j.dump(2) << '\n';
  }
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"Post-training quantization with low-rank residual adapters"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "cora 1.0");

  auto common = [&](CLI::App* sub) {
    sub->add_flag("--json", o.json, "Machine-readable JSON on stdout");
    sub->add_option("--threads", o.threads, "Worker threads (0 = OpenMP default)")
        ->check(CLI::NonNegativeNumber);
  };
  auto quant_flags = [&](CLI::App* sub) {
    sub->add_option("--bits", o.bits, "Weight bit-width")->check(CLI::Range(2, 8))->capture_default_str();
    sub->add_option("--clip", o.clip, "minmax or normal:K")->capture_default_str();
    sub->add_option("--adapter-bits", o.adapter_bits, "Adapter bit-width, 0 keeps float adapters")
        ->check(CLI::Range(0, 8))
        ->capture_default_str();
  };
  auto search_flags = [&](CLI::App* sub) {
    SearchConfig& s = o.search;
    sub->add_option("--budget", s.budget, "Target adapter budget b")->check(CLI::Range(0.0, 1.0))->capture_default_str();
    sub->add_option("--lambda", s.lambda, "Budget penalty coefficient")->check(CLI::NonNegativeNumber)->capture_default_str();
    sub->add_option("--order", s.order, "Butterworth order k")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--lr", s.lr, "Adam learning rate")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--iters", s.iterations, "Search iterations")->capture_default_str();
    sub->add_option("--batch", s.batch_size, "Calibration mini-batch size")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--grad-clip", s.grad_clip, "Per-component gradient clip")->check(CLI::PositiveNumber)->capture_default_str();
    sub->add_option("--seed", s.seed, "Mini-batch shuffling seed")->capture_default_str();
    sub->add_flag("--quiet", o.quiet, "No progress lines on stderr");
  };

  auto* quant = app.add_subcommand("quantize", "Quantize a float model and attach adapters");
  quant->add_option("--model", o.model, "Float model")->required();
  quant->add_option("--data", o.data, "Calibration set (mode optimal)");
  quant->add_option("--out", o.out, "Output quantized model")->required();
  quant->add_option("--mode", o.mode, "Adapter ranks")
      ->check(CLI::IsMember({"none", "heuristic", "optimal"}))
      ->capture_default_str();
  quant_flags(quant);
  search_flags(quant);
  common(quant);

  auto* srch = app.add_subcommand("search", "Search adapter ranks on a calibration set");
  srch->add_option("--model", o.model, "Float model")->required();
  srch->add_option("--data", o.data, "Calibration set")->required();
  srch->add_option("--out", o.out, "Output prefix")->required();
  quant_flags(srch);
  search_flags(srch);
  common(srch);

  auto* eval = app.add_subcommand("eval", "Top-1 accuracy of a float or quantized model");
  eval->add_option("--model", o.model, "Model file")->required();
  eval->add_option("--data", o.data, "Dataset")->required();
  common(eval);

  auto* rep = app.add_subcommand("report", "Full pipeline: float, quantized, heuristic and searched");
  rep->add_option("--model", o.model, "Float model")->required();
  rep->add_option("--calib", o.calib, "Calibration set")->required();
  rep->add_option("--data", o.data, "Validation set")->required();
  rep->add_option("--out", o.out, "Report JSON")->required();
  quant_flags(rep);
  search_flags(rep);
  common(rep);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? ok : usage;
  }

  kernels::set_num_threads(o.threads);
  try {
    if (*quant) return cmd_quantize(o, out, err);
    if (*srch) return cmd_search(o, out, err);
    if (*eval) return cmd_eval(o, out, err);
    return cmd_report(o, out, err);
  } catch (const Error& e) {
    report_error(out, err, o.json, to_string(e.code()), e.what());
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    report_error(out, err, o.json, "internal", e.what());
    return data_error;
  }
}

int run(int argc, const char* const* argv) { return run(argc, argv, std::cout, std::cerr); }

}  // namespace cora::cli
