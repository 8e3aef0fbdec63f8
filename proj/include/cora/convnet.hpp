#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "cora/quantizer.hpp"
#include "cora/residual_adapter.hpp"
#include "cora/tensor.hpp"

namespace cora {

struct ConvLayer {
  std::string name;
  std::size_t out_channels = 0;
  std::size_t in_channels = 0;
  std::size_t kernel_h = 0;
  std::size_t kernel_w = 0;
  ConvGeometry geometry;
  DenseTensor weight;        // out x in x kernel_h x kernel_w
  std::vector<double> bias;  // empty when the layer has no bias
};

struct DenseLayer {
  std::string name;
  std::size_t out_features = 0;
  std::size_t in_features = 0;
  DenseTensor weight;  // out x in
  std::vector<double> bias;
};

struct ReluLayer {};
struct MaxPoolLayer {
  std::size_t kernel = 2;
  std::size_t stride = 2;
};
struct AvgPoolLayer {
  std::size_t kernel = 2;
  std::size_t stride = 2;
};
struct FlattenLayer {};

using Layer = std::variant<ConvLayer, ReluLayer, MaxPoolLayer, AvgPoolLayer, FlattenLayer, DenseLayer>;

/// Feed-forward ConvNet. Activations are channels x height x width until a
/// Flatten layer, then plain feature vectors.
struct Model {
  Shape input_shape;  // channels x height x width
  std::size_t num_classes = 0;
  std::vector<Layer> layers;
  std::string provenance;

  std::vector<std::size_t> conv_layer_indices() const;
};

/// Activation shape after each layer; throws Errc::shape_composition when a
/// layer does not accept its input or the output is not num_classes wide.
std::vector<Shape> activation_shapes(const Model& model);
void validate(const Model& model);

/// Labeled images: images is count x channels x height x width.
struct Batch {
  DenseTensor images;
  std::vector<std::int32_t> labels;

  std::size_t size() const noexcept { return labels.size(); }
  Shape sample_shape() const;
};

void validate(const Batch& batch, std::size_t num_classes);
Batch select(const Batch& batch, std::span<const std::size_t> indices);

enum class AdapterMode { none, soft, hard };

struct AdaptedConv {
  std::size_t layer = 0;  // index into network.layers
  std::size_t max_rank = 0;
  std::optional<ResidualFactorization> factorization;  // required for soft mode
  std::optional<LowRankAdapter> adapter;               // hard adapter, dequantized if quantized
  std::optional<QuantizedTensor> a_codes;
  std::optional<QuantizedTensor> b_codes;
};

/// Quantized network plus per-conv residual adapters. network holds the
/// dequantized weights; quantized[i] is set for every Conv/Dense layer i.
struct AdaptedQuantModel {
  Model network;
  QuantSpec weight_spec;
  std::vector<std::optional<QuantizedTensor>> quantized;
  std::vector<AdaptedConv> adapters;
  std::vector<double> ranks;  // soft: continuous cut-offs; hard: finalized ranks
  int order = 4;
  AdapterMode mode = AdapterMode::none;
  std::optional<QuantSpec> adapter_spec;
  double target_budget = 0.0;

  std::vector<std::size_t> max_ranks() const;
};

/// Quantizes every Conv and Dense weight. With `factorize`, each conv residual
/// is factorized and the model starts in soft mode at full cut-off ranks.
AdaptedQuantModel quantize_model(const Model& model, const QuantSpec& spec, bool factorize = true);

/// Switches to hard adapters of the given integer ranks, optionally quantizing
/// A and B with `adapter_spec`.
void apply_hard_ranks(AdaptedQuantModel& model, std::span<const std::size_t> ranks,
                      const std::optional<QuantSpec>& adapter_spec = std::nullopt);

void validate(const AdaptedQuantModel& model);

/// Logits, count x num_classes.
DenseTensor forward(const Model& model, const DenseTensor& images);
DenseTensor forward(const AdaptedQuantModel& model, const DenseTensor& images);

/// Mean softmax cross-entropy, stabilized by max subtraction.
double cross_entropy(const DenseTensor& logits, std::span<const std::int32_t> labels);

struct RankGradient {
  double loss = 0.0;
  std::vector<double> grad;  // d loss / d r_l, one entry per adapted conv
  bool finite = true;
};

/// Reverse-mode gradient of the mean cross-entropy with respect to the soft
/// cut-off ranks; weights and factorizations stay frozen.
RankGradient grad_wrt_ranks(const AdaptedQuantModel& model, const Batch& batch);

/// Argmax per row, ties resolved to the lowest class index.
std::vector<std::int32_t> predict(const DenseTensor& logits);

double top1_accuracy(const Model& model, const Batch& data);
double top1_accuracy(const AdaptedQuantModel& model, const Batch& data);

}  // namespace cora
