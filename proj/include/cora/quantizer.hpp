#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "cora/tensor.hpp"

namespace cora {

/// How the clipping range [alpha, beta] is chosen from a tensor.
struct ClipScheme {
  enum class Kind { min_max, normal };

  Kind kind = Kind::min_max;
  double k = 0.0;  // range multiplier for Kind::normal: mu +/- k*sigma

  static ClipScheme min_max() { return {}; }
  static ClipScheme normal(double k);

  friend bool operator==(const ClipScheme&, const ClipScheme&) = default;
};

enum class QuantMode { symmetric, asymmetric };

struct QuantSpec {
  int bits = 4;
  ClipScheme clip = ClipScheme::normal(4.0);
  QuantMode mode = QuantMode::asymmetric;

  friend bool operator==(const QuantSpec&, const QuantSpec&) = default;
};

/// Representable code interval for `bits`: [-2^(bits-1), 2^(bits-1) - 1].
/// Both modes use the signed range; the asymmetric zero point absorbs the offset.
std::pair<std::int32_t, std::int32_t> code_range(int bits);

struct QuantParams {
  double scale = 1.0;
  std::int32_t zero = 0;
  double alpha = 0.0;
  double beta = 0.0;
};

/// Per-tensor uniformly quantized weights: value = scale * (code + zero).
struct QuantizedTensor {
  Shape shape;
  std::vector<std::int8_t> codes;
  QuantParams params;
  QuantSpec spec;
};

void validate(const QuantSpec& spec);

/// min/max, or mean +/- k * population standard deviation.
std::pair<double, double> clip_range(const DenseTensor& w, const ClipScheme& clip);

/// Scale and zero point for a spec, derived from the tensor's clipping range.
QuantParams quant_params(const DenseTensor& w, const QuantSpec& spec);

QuantizedTensor quantize(const DenseTensor& w, const QuantSpec& spec);

/// Quantizes with fixed parameters instead of re-deriving them from `w`.
QuantizedTensor quantize_with(const DenseTensor& w, const QuantSpec& spec, const QuantParams& params);

DenseTensor dequantize(const QuantizedTensor& q);

/// Quantization residual w - dequantize(quantize(w)).
DenseTensor residual(const DenseTensor& w, const QuantSpec& spec);

std::string describe(const ClipScheme& clip);

}  // namespace cora
