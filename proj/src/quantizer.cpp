#include "cora/quantizer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace cora {

ClipScheme ClipScheme::normal(double k) {
  if (!(k > 0.0) || !std::isfinite(k))
    throw Error(Errc::invalid_argument, "normal clipping requires k > 0");
  return {Kind::normal, k};
}

std::pair<std::int32_t, std::int32_t> code_range(int bits) {
  const std::int32_t half = std::int32_t{1} << (bits - 1);
  return {-half, half - 1};
}

void validate(const QuantSpec& spec) {
  if (spec.bits < 2 || spec.bits > 8)
    throw Error(Errc::invalid_argument,
                "bit-width must lie in 2..8, got " + std::to_string(spec.bits));
  if (spec.clip.kind == ClipScheme::Kind::normal && !(spec.clip.k > 0.0))
    throw Error(Errc::invalid_argument, "normal clipping requires k > 0");
}

std::pair<double, double> clip_range(const DenseTensor& w, const ClipScheme& clip) {
  if (w.empty()) throw Error(Errc::invalid_argument, "clip range of an empty tensor");
  const auto values = w.data();
  if (clip.kind == ClipScheme::Kind::min_max) {
    const auto [lo, hi] = std::minmax_element(values.begin(), values.end());
    return {*lo, *hi};
  }
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  const double sigma = std::sqrt(var / static_cast<double>(values.size()));
  return {mean - clip.k * sigma, mean + clip.k * sigma};
}

QuantParams quant_params(const DenseTensor& w, const QuantSpec& spec) {
  validate(spec);
  auto [alpha, beta] = clip_range(w, spec.clip);
  if (spec.mode == QuantMode::symmetric) {
    const double bound = std::max(std::abs(alpha), std::abs(beta));
    alpha = -bound;
    beta = bound;
  }
  QuantParams p{1.0, 0, alpha, beta};
  if (!(beta > alpha)) {
    // Degenerate range: every code is 0 and scale*(0 + zero) reproduces the constant.
    if (alpha != 0.0) {
      p.scale = std::abs(alpha);
      p.zero = alpha > 0.0 ? 1 : -1;
    }
    return p;
  }
  const double levels = std::ldexp(1.0, spec.bits) - 1.0;
  p.scale = (beta - alpha) / levels;
  if (spec.mode == QuantMode::asymmetric) {
    // Shift so that alpha lands on the lowest signed code.
    p.zero = static_cast<std::int32_t>(std::nearbyint(alpha / p.scale)) - code_range(spec.bits).first;
  }
  return p;
}

QuantizedTensor quantize_with(const DenseTensor& w, const QuantSpec& spec, const QuantParams& params) {
  validate(spec);
  if (!w.all_finite()) throw Error(Errc::numeric, "quantize input contains non-finite values");
  const auto [lo, hi] = code_range(spec.bits);
  QuantizedTensor q{w.shape(), std::vector<std::int8_t>(w.size()), params, spec};
  const bool degenerate = !(params.beta > params.alpha);
  const auto values = w.data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (degenerate) {
      q.codes[i] = 0;
      continue;
    }
    const double clipped = std::clamp(values[i], params.alpha, params.beta);
    // nearbyint uses the default rounding mode: round half to even.
    const double code = std::nearbyint(clipped / params.scale) - params.zero;
    q.codes[i] = static_cast<std::int8_t>(std::clamp<double>(code, lo, hi));
  }
  return q;
}

QuantizedTensor quantize(const DenseTensor& w, const QuantSpec& spec) {
  return quantize_with(w, spec, quant_params(w, spec));
}

DenseTensor dequantize(const QuantizedTensor& q) {
  std::vector<double> values(q.codes.size());
  for (std::size_t i = 0; i < values.size(); ++i)
    values[i] = q.params.scale * (static_cast<double>(q.codes[i]) + q.params.zero);
  return DenseTensor(q.shape, std::move(values));
}

DenseTensor residual(const DenseTensor& w, const QuantSpec& spec) {
  const DenseTensor deq = dequantize(quantize(w, spec));
  std::vector<double> diff(w.size());
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = w[i] - deq[i];
  return DenseTensor(w.shape(), std::move(diff));
}

std::string describe(const ClipScheme& clip) {
  if (clip.kind == ClipScheme::Kind::min_max) return "minmax";
  char buf[64];
  std::snprintf(buf, sizeof buf, "normal:%g", clip.k);
  return buf;
}

}  // namespace cora
