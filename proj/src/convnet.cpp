#include "cora/convnet.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "cora/kernels.hpp"

namespace cora {
namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

[[noreturn]] void composition_error(std::size_t layer, const std::string& what) {
  throw Error(Errc::shape_composition, "layer " + std::to_string(layer) + ": " + what);
}

std::size_t pool_extent(std::size_t extent, std::size_t kernel, std::size_t stride) {
  return (extent - kernel) / stride + 1;
}

// ---------------------------------------------------------------------------
// Execution plan: the per-layer tensors a forward pass reads, with adapters
// resolved for the model's mode.

struct ConvStep {
  const ConvLayer* layer;
  const LowRankAdapter* adapter;  // null when the layer runs without one
  int slot;                       // index into AdaptedQuantModel::adapters, -1 if none
};

using Step = std::variant<ConvStep, const DenseLayer*, ReluLayer, MaxPoolLayer, AvgPoolLayer,
                          FlattenLayer>;

struct Plan {
  std::vector<Step> steps;
  std::vector<Shape> inputs;  // activation shape entering each step
  std::vector<LowRankAdapter> owned;
  std::vector<std::vector<double>> factor_weights;  // soft mode: g per slot
  std::size_t num_classes = 0;
};

Plan make_plan(const Model& model) {
  Plan plan;
  const auto shapes = activation_shapes(model);
  plan.num_classes = model.num_classes;
  Shape current = model.input_shape;
  for (const Layer& layer : model.layers) {
    plan.inputs.push_back(current);
    plan.steps.push_back(std::visit(
        Overloaded{[](const ConvLayer& c) -> Step { return ConvStep{&c, nullptr, -1}; },
                   [](const DenseLayer& d) -> Step { return &d; },
                   [](const auto& other) -> Step { return other; }},
        layer));
    current = shapes[plan.inputs.size() - 1];
  }
  return plan;
}

Plan make_plan(const AdaptedQuantModel& model) {
  Plan plan = make_plan(model.network);
  if (model.mode == AdapterMode::none) return plan;
  plan.owned.reserve(model.adapters.size());
  plan.factor_weights.resize(model.adapters.size());
  for (std::size_t slot = 0; slot < model.adapters.size(); ++slot) {
    const AdaptedConv& ac = model.adapters[slot];
    auto& step = std::get<ConvStep>(plan.steps[ac.layer]);
    step.slot = static_cast<int>(slot);
    if (model.mode == AdapterMode::soft) {
      if (!ac.factorization)
        throw Error(Errc::invalid_argument, "soft adapters need a residual factorization");
      plan.factor_weights[slot] =
          soft_factor_weights(*ac.factorization, model.ranks.at(slot), model.order);
      plan.owned.push_back(build_adapter_weighted(*ac.factorization, plan.factor_weights[slot]));
      step.adapter = &plan.owned.back();
    } else if (ac.adapter) {
      step.adapter = &*ac.adapter;
    }
  }
  return plan;
}

// ---------------------------------------------------------------------------
// Single-sample forward/backward. Activations are flat vectors; the plan's
// shapes give their layout.

struct StepCache {
  std::vector<double> input;
  std::vector<double> cols;  // conv: unfolded input, taps x plane
  std::vector<double> z;     // conv with adapter: A applied to cols, rank x plane
  std::vector<std::size_t> argmax;
};

std::vector<double> run_forward(const Plan& plan, std::span<const double> x,
                                std::vector<StepCache>* caches) {
  std::vector<double> act(x.begin(), x.end());
  for (std::size_t i = 0; i < plan.steps.size(); ++i) {
    const Shape& in = plan.inputs[i];
    StepCache* cache = caches ? &(*caches)[i] : nullptr;
    if (cache) cache->input = act;
    act = std::visit(
        Overloaded{
            [&](const ConvStep& s) {
              const ConvLayer& c = *s.layer;
              const std::size_t oh = conv_out_extent(in[1], c.kernel_h, c.geometry.stride_h,
                                                     c.geometry.pad_h);
              const std::size_t ow = conv_out_extent(in[2], c.kernel_w, c.geometry.stride_w,
                                                     c.geometry.pad_w);
              const std::size_t plane = oh * ow;
              const std::size_t taps = c.in_channels * c.kernel_h * c.kernel_w;
              std::vector<double> cols(taps * plane);
              kernels::im2col(act.data(), in[0], in[1], in[2], c.kernel_h, c.kernel_w, c.geometry,
                              cols.data());
              std::vector<double> out(c.out_channels * plane);
              kernels::gemm(c.out_channels, plane, taps, c.weight.data().data(), cols.data(),
                            out.data());
              if (s.adapter) {
                const std::size_t rank = s.adapter->rank;
                std::vector<double> z(rank * plane);
                kernels::gemm(rank, plane, taps, s.adapter->a.data().data(), cols.data(), z.data());
                kernels::gemm(c.out_channels, plane, rank, s.adapter->b.data().data(), z.data(),
                              out.data(), /*accumulate=*/true);
                if (cache) cache->z = std::move(z);
              }
              if (!c.bias.empty())
                for (std::size_t o = 0; o < c.out_channels; ++o)
                  for (std::size_t p = 0; p < plane; ++p) out[o * plane + p] += c.bias[o];
              if (cache) cache->cols = std::move(cols);
              return out;
            },
            [&](const DenseLayer* d) {
              std::vector<double> out(d->out_features);
              kernels::gemm(d->out_features, 1, d->in_features, d->weight.data().data(),
                            act.data(), out.data());
              if (!d->bias.empty())
                for (std::size_t o = 0; o < out.size(); ++o) out[o] += d->bias[o];
              return out;
            },
            [&](const ReluLayer&) {
              std::vector<double> out(act.size());
              for (std::size_t k = 0; k < act.size(); ++k) out[k] = act[k] < 0.0 ? 0.0 : act[k];  // NaN passes
              return out;
            },
            [&](const MaxPoolLayer& p) {
              const std::size_t oh = pool_extent(in[1], p.kernel, p.stride);
              const std::size_t ow = pool_extent(in[2], p.kernel, p.stride);
              std::vector<double> out(in[0] * oh * ow);
              std::vector<std::size_t> arg(out.size());
              for (std::size_t c = 0; c < in[0]; ++c)
                for (std::size_t y = 0; y < oh; ++y)
                  for (std::size_t xo = 0; xo < ow; ++xo) {
                    std::size_t best = (c * in[1] + y * p.stride) * in[2] + xo * p.stride;
                    for (std::size_t u = 0; u < p.kernel; ++u)
                      for (std::size_t v = 0; v < p.kernel; ++v) {
                        const std::size_t idx =
                            (c * in[1] + y * p.stride + u) * in[2] + xo * p.stride + v;
                        if (act[idx] > act[best] || (std::isnan(act[idx]) && !std::isnan(act[best])))
                          best = idx;
                      }
                    const std::size_t o = (c * oh + y) * ow + xo;
                    out[o] = act[best];
                    arg[o] = best;
                  }
              if (cache) cache->argmax = std::move(arg);
              return out;
            },
            [&](const AvgPoolLayer& p) {
              const std::size_t oh = pool_extent(in[1], p.kernel, p.stride);
              const std::size_t ow = pool_extent(in[2], p.kernel, p.stride);
              const double inv = 1.0 / static_cast<double>(p.kernel * p.kernel);
              std::vector<double> out(in[0] * oh * ow);
              for (std::size_t c = 0; c < in[0]; ++c)
                for (std::size_t y = 0; y < oh; ++y)
                  for (std::size_t xo = 0; xo < ow; ++xo) {
                    double acc = 0.0;
                    for (std::size_t u = 0; u < p.kernel; ++u)
                      for (std::size_t v = 0; v < p.kernel; ++v)
                        acc += act[(c * in[1] + y * p.stride + u) * in[2] + xo * p.stride + v];
                    out[(c * oh + y) * ow + xo] = acc * inv;
                  }
              return out;
            },
            [&](const FlattenLayer&) { return act; }},
        plan.steps[i]);
  }
  return act;
}

// Back-propagates dlogits; accumulates d loss / d g_i for every adapted slot
// into slot_grads[slot][i] where g are the per-component factor weights.
void run_backward(const Plan& plan, const std::vector<StepCache>& caches,
                  const AdaptedQuantModel& model, std::vector<double> grad,
                  std::vector<std::vector<double>>& slot_grads) {
  // Nothing upstream of the first adapted conv contributes to the rank gradient.
  std::size_t first = plan.steps.size();
  for (std::size_t i = 0; i < plan.steps.size(); ++i) {
    if (const auto* s = std::get_if<ConvStep>(&plan.steps[i]); s && s->adapter) {
      first = i;
      break;
    }
  }
  for (std::size_t i = plan.steps.size(); i-- > first;) {
    const Shape& in = plan.inputs[i];
    const StepCache& cache = caches[i];
    const bool need_input_grad = i > first;
    grad = std::visit(
        Overloaded{
            [&](const ConvStep& s) {
              const ConvLayer& c = *s.layer;
              const std::size_t taps = c.in_channels * c.kernel_h * c.kernel_w;
              const std::size_t plane = grad.size() / c.out_channels;
              std::vector<double> dcols;
              if (need_input_grad) {
                dcols.resize(taps * plane);
                kernels::gemm_tn(taps, plane, c.out_channels, c.weight.data().data(), grad.data(),
                                 dcols.data());
              }
              if (s.adapter) {
                const LowRankAdapter& ad = *s.adapter;
                const std::size_t rank = ad.rank;
                std::vector<double> dz(rank * plane);
                kernels::gemm_tn(rank, plane, c.out_channels, ad.b.data().data(), grad.data(),
                                 dz.data());
                std::vector<double> db(c.out_channels * rank);
                kernels::gemm_nt(c.out_channels, rank, plane, grad.data(), cache.z.data(),
                                 db.data());
                std::vector<double> da(rank * taps);
                kernels::gemm_nt(rank, taps, plane, dz.data(), cache.cols.data(), da.data());
                // Chain through A[i, :] = g_i V[:, i]^T and B[:, i] = U[:, i] g_i.
                const ResidualFactorization& f = *model.adapters[s.slot].factorization;
                auto& out = slot_grads[s.slot];
                for (std::size_t r = 0; r < rank; ++r) {
                  double acc = 0.0;
                  for (std::size_t j = 0; j < taps; ++j) acc += da[r * taps + j] * f.v(j, r);
                  for (std::size_t o = 0; o < c.out_channels; ++o)
                    acc += db[o * rank + r] * f.u(o, r);
                  out[r] += acc;
                }
                if (need_input_grad)
                  kernels::gemm_tn(taps, plane, rank, ad.a.data().data(), dz.data(), dcols.data(),
                                   /*accumulate=*/true);
              }
              std::vector<double> dx;
              if (need_input_grad) {
                dx.assign(in[0] * in[1] * in[2], 0.0);
                kernels::col2im_add(dcols.data(), in[0], in[1], in[2], c.kernel_h, c.kernel_w,
                                    c.geometry, dx.data());
              }
              return dx;
            },
            [&](const DenseLayer* d) {
              std::vector<double> dx(d->in_features);
              kernels::gemm_tn(d->in_features, 1, d->out_features, d->weight.data().data(),
                               grad.data(), dx.data());
              return dx;
            },
            [&](const ReluLayer&) {
              std::vector<double> dx(grad.size());
              for (std::size_t k = 0; k < grad.size(); ++k)
                dx[k] = cache.input[k] < 0.0 || cache.input[k] == 0.0 ? 0.0 : grad[k];
              return dx;
            },
            [&](const MaxPoolLayer&) {
              std::vector<double> dx(cache.input.size(), 0.0);
              for (std::size_t k = 0; k < grad.size(); ++k) dx[cache.argmax[k]] += grad[k];
              return dx;
            },
            [&](const AvgPoolLayer& p) {
              const std::size_t oh = pool_extent(in[1], p.kernel, p.stride);
              const std::size_t ow = pool_extent(in[2], p.kernel, p.stride);
              const double inv = 1.0 / static_cast<double>(p.kernel * p.kernel);
              std::vector<double> dx(cache.input.size(), 0.0);
              for (std::size_t c = 0; c < in[0]; ++c)
                for (std::size_t y = 0; y < oh; ++y)
                  for (std::size_t xo = 0; xo < ow; ++xo) {
                    const double gv = grad[(c * oh + y) * ow + xo] * inv;
                    for (std::size_t u = 0; u < p.kernel; ++u)
                      for (std::size_t v = 0; v < p.kernel; ++v)
                        dx[(c * in[1] + y * p.stride + u) * in[2] + xo * p.stride + v] += gv;
                  }
              return dx;
            },
            [&](const FlattenLayer&) { return grad; }},
        plan.steps[i]);
  }
}

DenseTensor forward_plan(const Plan& plan, const DenseTensor& images, const Shape& input_shape) {
  if (images.order() != 4 || Shape(images.shape().begin() + 1, images.shape().end()) != input_shape)
    throw Error(Errc::shape_mismatch, "images do not match the model input shape");
  const std::size_t count = images.dim(0);
  const std::size_t sample = shape_size(input_shape);
  DenseTensor logits({count, plan.num_classes});
  const auto n = static_cast<std::ptrdiff_t>(count);
#pragma omp parallel for schedule(static) if (count > 1)
  for (std::ptrdiff_t s = 0; s < n; ++s) {
    const auto out = run_forward(plan, images.data().subspan(s * sample, sample), nullptr);
    std::copy(out.begin(), out.end(), logits.data().begin() + s * plan.num_classes);
  }
  return logits;
}

void log_softmax_row(std::span<const double> row, std::vector<double>& out) {
  const double mx = *std::max_element(row.begin(), row.end());
  double sum = 0.0;
  for (double v : row) sum += std::exp(v - mx);
  const double lse = mx + std::log(sum);
  out.resize(row.size());
  for (std::size_t j = 0; j < row.size(); ++j) out[j] = row[j] - lse;
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<std::size_t> Model::conv_layer_indices() const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < layers.size(); ++i)
    if (std::holds_alternative<ConvLayer>(layers[i])) out.push_back(i);
  return out;
}

std::vector<Shape> activation_shapes(const Model& model) {
  if (model.input_shape.size() != 3) composition_error(0, "input shape must be c x h x w");
  std::vector<Shape> shapes;
  Shape cur = model.input_shape;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    cur = std::visit(
        Overloaded{
            [&](const ConvLayer& c) -> Shape {
              if (cur.size() != 3) composition_error(i, "conv expects a c x h x w input");
              if (cur[0] != c.in_channels) composition_error(i, "conv input channels differ");
              if (c.weight.shape() != Shape{c.out_channels, c.in_channels, c.kernel_h, c.kernel_w})
                composition_error(i, "conv weight shape does not match layer spec");
              if (!c.bias.empty() && c.bias.size() != c.out_channels)
                composition_error(i, "conv bias length differs from output channels");
              if (cur[1] + 2 * c.geometry.pad_h < c.kernel_h ||
                  cur[2] + 2 * c.geometry.pad_w < c.kernel_w || c.geometry.stride_h == 0 ||
                  c.geometry.stride_w == 0)
                composition_error(i, "conv kernel does not fit the input");
              return {c.out_channels,
                      conv_out_extent(cur[1], c.kernel_h, c.geometry.stride_h, c.geometry.pad_h),
                      conv_out_extent(cur[2], c.kernel_w, c.geometry.stride_w, c.geometry.pad_w)};
            },
            [&](const DenseLayer& d) -> Shape {
              if (cur.size() != 1 || cur[0] != d.in_features)
                composition_error(i, "dense input features differ");
              if (d.weight.shape() != Shape{d.out_features, d.in_features})
                composition_error(i, "dense weight shape does not match layer spec");
              if (!d.bias.empty() && d.bias.size() != d.out_features)
                composition_error(i, "dense bias length differs from output features");
              return {d.out_features};
            },
            [&](const ReluLayer&) -> Shape { return cur; },
            [&](const FlattenLayer&) -> Shape { return {shape_size(cur)}; },
            [&](const auto& pool) -> Shape {
              if (cur.size() != 3) composition_error(i, "pooling expects a c x h x w input");
              if (pool.kernel == 0 || pool.stride == 0 || cur[1] < pool.kernel ||
                  cur[2] < pool.kernel)
                composition_error(i, "pooling window does not fit the input");
              return {cur[0], pool_extent(cur[1], pool.kernel, pool.stride),
                      pool_extent(cur[2], pool.kernel, pool.stride)};
            }},
        model.layers[i]);
    shapes.push_back(cur);
  }
  if (cur != Shape{model.num_classes})
    composition_error(model.layers.size(), "network output is not a num_classes vector");
  return shapes;
}

void validate(const Model& model) { (void)activation_shapes(model); }

Shape Batch::sample_shape() const {
  return Shape(images.shape().begin() + 1, images.shape().end());
}

void validate(const Batch& batch, std::size_t num_classes) {
  if (batch.images.order() != 4 || batch.images.dim(0) != batch.labels.size())
    throw Error(Errc::shape_mismatch, "image count and label count differ");
  for (auto label : batch.labels)
    if (label < 0 || static_cast<std::size_t>(label) >= num_classes)
      throw Error(Errc::out_of_range, "label " + std::to_string(label) + " outside class range");
}

Batch select(const Batch& batch, std::span<const std::size_t> indices) {
  const std::size_t sample = shape_size(batch.sample_shape());
  Shape shape = batch.images.shape();
  shape[0] = indices.size();
  std::vector<double> data(indices.size() * sample);
  std::vector<std::int32_t> labels(indices.size());
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto src = batch.images.data().subspan(indices[k] * sample, sample);
    std::copy(src.begin(), src.end(), data.begin() + k * sample);
    labels[k] = batch.labels.at(indices[k]);
  }
  return Batch{DenseTensor(std::move(shape), std::move(data)), std::move(labels)};
}

std::vector<std::size_t> AdaptedQuantModel::max_ranks() const {
  std::vector<std::size_t> out;
  for (const auto& a : adapters) out.push_back(a.max_rank);
  return out;
}

AdaptedQuantModel quantize_model(const Model& model, const QuantSpec& spec, bool factorize) {
  validate(model);
  validate(spec);
  AdaptedQuantModel out;
  out.network = model;
  out.weight_spec = spec;
  out.quantized.resize(model.layers.size());
  // Biases stay in floating point but are held at file precision so a stored
  // quantized model reproduces these logits exactly.
  const auto to_float = [](std::vector<double>& bias) {
    for (double& v : bias) v = static_cast<float>(v);
  };
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    Layer& layer = out.network.layers[i];
    if (auto* c = std::get_if<ConvLayer>(&layer)) {
      to_float(c->bias);
      QuantizedTensor q = quantize(c->weight, spec);
      DenseTensor deq = dequantize(q);
      if (factorize) {
        std::vector<double> diff(deq.size());
        for (std::size_t k = 0; k < diff.size(); ++k) diff[k] = c->weight[k] - deq[k];
        AdaptedConv ac;
        ac.layer = i;
        ac.factorization =
            factorize_residual(DenseTensor(c->weight.shape(), std::move(diff)), i, c->geometry);
        ac.max_rank = ac.factorization->max_rank();
        out.adapters.push_back(std::move(ac));
      }
      c->weight = std::move(deq);
      out.quantized[i] = std::move(q);
    } else if (auto* d = std::get_if<DenseLayer>(&layer)) {
      to_float(d->bias);
      QuantizedTensor q = quantize(d->weight, spec);
      d->weight = dequantize(q);
      out.quantized[i] = std::move(q);
    }
  }
  out.mode = factorize ? AdapterMode::soft : AdapterMode::none;
  for (const auto& a : out.adapters) out.ranks.push_back(static_cast<double>(a.max_rank));
  return out;
}

void apply_hard_ranks(AdaptedQuantModel& model, std::span<const std::size_t> ranks,
                      const std::optional<QuantSpec>& adapter_spec) {
  if (ranks.size() != model.adapters.size())
    throw Error(Errc::shape_mismatch, "one rank per adapted conv layer is required");
  if (adapter_spec) validate(*adapter_spec);
  for (std::size_t l = 0; l < ranks.size(); ++l) {
    AdaptedConv& ac = model.adapters[l];
    if (!ac.factorization)
      throw Error(Errc::invalid_argument, "hard adapters need a residual factorization");
    LowRankAdapter adapter = build_adapter_hard(*ac.factorization, ranks[l]);
    ac.a_codes.reset();
    ac.b_codes.reset();
    if (adapter_spec) {
      ac.a_codes = quantize(adapter.a, *adapter_spec);
      ac.b_codes = quantize(adapter.b, *adapter_spec);
      adapter.a = dequantize(*ac.a_codes);
      adapter.b = dequantize(*ac.b_codes);
    } else {
      // Stored as float32; rounding here keeps save/load bit-exact.
      for (auto* t : {&adapter.a, &adapter.b})
        for (double& v : t->data()) v = static_cast<float>(v);
    }
    ac.adapter = std::move(adapter);
  }
  model.ranks.assign(ranks.begin(), ranks.end());
  model.mode = AdapterMode::hard;
  model.adapter_spec = adapter_spec;
}

void validate(const AdaptedQuantModel& model) {
  validate(model.network);
  if (model.ranks.size() != model.adapters.size())
    throw Error(Errc::shape_mismatch, "rank vector length differs from adapter count");
  for (std::size_t l = 0; l < model.adapters.size(); ++l) {
    const AdaptedConv& ac = model.adapters[l];
    const auto* conv = ac.layer < model.network.layers.size()
                           ? std::get_if<ConvLayer>(&model.network.layers[ac.layer])
                           : nullptr;
    if (!conv) throw Error(Errc::shape_composition, "adapter attached to a non-conv layer");
    if (!(model.ranks[l] >= 1.0 && model.ranks[l] <= static_cast<double>(ac.max_rank)))
      throw Error(Errc::out_of_range, "rank outside [1, R] for adapter " + std::to_string(l));
    if (ac.adapter) {
      const auto& a = ac.adapter->a.shape();
      const auto& b = ac.adapter->b.shape();
      if (a != Shape{ac.adapter->rank, conv->in_channels, conv->kernel_h, conv->kernel_w} ||
          b != Shape{conv->out_channels, ac.adapter->rank, 1, 1})
        throw Error(Errc::shape_composition, "adapter shapes do not match host conv");
    }
  }
}

DenseTensor forward(const Model& model, const DenseTensor& images) {
  return forward_plan(make_plan(model), images, model.input_shape);
}

DenseTensor forward(const AdaptedQuantModel& model, const DenseTensor& images) {
  return forward_plan(make_plan(model), images, model.network.input_shape);
}

double cross_entropy(const DenseTensor& logits, std::span<const std::int32_t> labels) {
  if (logits.order() != 2 || logits.dim(0) != labels.size())
    throw Error(Errc::shape_mismatch, "logits rows and labels differ");
  const std::size_t classes = logits.dim(1);
  std::vector<double> lsm;
  double total = 0.0;
  for (std::size_t s = 0; s < labels.size(); ++s) {
    log_softmax_row(logits.data().subspan(s * classes, classes), lsm);
    total -= lsm.at(static_cast<std::size_t>(labels[s]));
  }
  return total / static_cast<double>(labels.size());
}

RankGradient grad_wrt_ranks(const AdaptedQuantModel& model, const Batch& batch) {
  if (model.mode != AdapterMode::soft)
    throw Error(Errc::invalid_argument, "rank gradients need soft adapters");
  if (batch.size() == 0) throw Error(Errc::invalid_argument, "empty batch");
  validate(batch, model.network.num_classes);
  const Plan plan = make_plan(model);
  const Shape& input_shape = model.network.input_shape;
  if (batch.sample_shape() != input_shape)
    throw Error(Errc::shape_mismatch, "batch images do not match the model input shape");

  const std::size_t count = batch.size();
  const std::size_t sample = shape_size(input_shape);
  const std::size_t classes = model.network.num_classes;
  const std::size_t slots = model.adapters.size();

  std::vector<double> losses(count);
  std::vector<std::vector<std::vector<double>>> per_sample(count);
  const auto n = static_cast<std::ptrdiff_t>(count);
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t s = 0; s < n; ++s) {
    std::vector<StepCache> caches(plan.steps.size());
    const auto logits =
        run_forward(plan, batch.images.data().subspan(s * sample, sample), &caches);
    std::vector<double> lsm;
    log_softmax_row(logits, lsm);
    const auto label = static_cast<std::size_t>(batch.labels[s]);
    losses[s] = -lsm[label];
    std::vector<double> dlogits(classes);
    for (std::size_t j = 0; j < classes; ++j)
      dlogits[j] = (std::exp(lsm[j]) - (j == label ? 1.0 : 0.0)) / static_cast<double>(count);
    auto& grads = per_sample[s];
    grads.resize(slots);
    for (std::size_t l = 0; l < slots; ++l) grads[l].assign(model.adapters[l].max_rank, 0.0);
    run_backward(plan, caches, model, std::move(dlogits), grads);
  }

  // Fixed-order reduction keeps results independent of the thread count.
  RankGradient out;
  for (double v : losses) out.loss += v;
  out.loss /= static_cast<double>(count);
  out.grad.assign(slots, 0.0);
  for (std::size_t l = 0; l < slots; ++l) {
    const ResidualFactorization& f = *model.adapters[l].factorization;
    std::vector<double> dg(f.max_rank(), 0.0);
    for (std::size_t s = 0; s < count; ++s)
      for (std::size_t r = 0; r < dg.size(); ++r) dg[r] += per_sample[s][l][r];
    // g_r = phi_r(cutoff) * sqrt(S_r)  =>  dg_r/dcutoff = phi'_r * sqrt(S_r)
    const auto dphi = mask_gradient(model.ranks[l], f.max_rank(), model.order);
    double acc = 0.0;
    for (std::size_t r = 0; r < dg.size(); ++r) acc += dg[r] * dphi[r] * std::sqrt(f.s[r]);
    out.grad[l] = acc;
  }
  out.finite = std::isfinite(out.loss);
  for (double g : out.grad) out.finite = out.finite && std::isfinite(g);
  return out;
}

std::vector<std::int32_t> predict(const DenseTensor& logits) {
  const std::size_t classes = logits.dim(1);
  std::vector<std::int32_t> out(logits.dim(0));
  for (std::size_t s = 0; s < out.size(); ++s) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < classes; ++j)
      if (logits[s * classes + j] > logits[s * classes + best]) best = j;
    out[s] = static_cast<std::int32_t>(best);
  }
  return out;
}

namespace {

template <class M>
double accuracy_impl(const M& model, const Batch& data) {
  if (data.size() == 0) throw Error(Errc::invalid_argument, "accuracy of an empty dataset");
  const auto predictions = predict(forward(model, data.images));
  std::size_t correct = 0;
  for (std::size_t s = 0; s < predictions.size(); ++s) correct += predictions[s] == data.labels[s];
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace

double top1_accuracy(const Model& model, const Batch& data) { return accuracy_impl(model, data); }
double top1_accuracy(const AdaptedQuantModel& model, const Batch& data) {
  return accuracy_impl(model, data);
}

}  // namespace cora
