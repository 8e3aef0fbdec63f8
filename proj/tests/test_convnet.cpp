#include <gtest/gtest.h>

#include "cora/convnet.hpp"
#include "cora/kernels.hpp"
#include "helpers.hpp"

using namespace cora;

namespace {

const QuantSpec kFourBit{4, ClipScheme::min_max(), QuantMode::asymmetric};

double loss_at(AdaptedQuantModel model, const std::vector<double>& ranks, const Batch& batch) {
  model.ranks = ranks;
  return cross_entropy(forward(model, batch.images), batch.labels);
}

std::vector<double> random_ranks(const AdaptedQuantModel& q, std::mt19937_64& rng) {
  std::vector<double> r;
  for (std::size_t bound : q.max_ranks()) {
    // Keep clear of the lower edge so the central difference stays feasible.
    std::uniform_real_distribution<double> dist(1.2, static_cast<double>(bound));
    r.push_back(dist(rng));
  }
  return r;
}

}  // namespace

TEST(Model, ShapeCompositionErrors) {
  std::mt19937_64 rng(51);
  Model m = testing_util::toy_model(rng);
  EXPECT_NO_THROW(validate(m));
  const auto shapes = activation_shapes(m);
  EXPECT_EQ(shapes[0], (Shape{4, 10, 10}));
  EXPECT_EQ(shapes[3], (Shape{6, 3, 3}));
  EXPECT_EQ(shapes.back(), (Shape{5}));
  EXPECT_EQ(m.conv_layer_indices(), (std::vector<std::size_t>{0, 3, 5}));

  Model bad = m;
  std::get<ConvLayer>(bad.layers[3]).in_channels = 5;
  try {
    validate(bad);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::shape_composition);
  }
  bad = m;
  bad.num_classes = 4;
  EXPECT_THROW(validate(bad), Error);
  bad = m;
  bad.layers.erase(bad.layers.begin() + 8);  // drop flatten
  EXPECT_THROW(validate(bad), Error);
}

TEST(Forward, ZeroModelGivesZeroLogits) {
  std::mt19937_64 rng(52);
  Model m = testing_util::toy_model(rng);
  for (Layer& l : m.layers)
    std::visit(
        [](auto& layer) {
          if constexpr (requires { layer.weight; }) {
            for (double& v : layer.weight.data()) v = 0.0;
            layer.bias.clear();
          }
        },
        l);
  const DenseTensor logits = forward(m, DenseTensor({3, 1, 10, 10}));
  for (double v : logits.data()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, HandComputedTinyNet) {
  // conv 1->1, 1x1 weight 2, bias 1; flatten; dense 2x4.
  Model m;
  m.input_shape = {1, 2, 2};
  m.num_classes = 2;
  ConvLayer c;
  c.out_channels = c.in_channels = c.kernel_h = c.kernel_w = 1;
  c.weight = DenseTensor({1, 1, 1, 1}, {2.0});
  c.bias = {1.0};
  m.layers.push_back(c);
  m.layers.push_back(ReluLayer{});
  m.layers.push_back(FlattenLayer{});
  DenseLayer d;
  d.out_features = 2;
  d.in_features = 4;
  d.weight = DenseTensor({2, 4}, {1, 0, 0, 1, 0.5, 0.5, -1, 0});
  d.bias = {0.0, 0.25};
  m.layers.push_back(d);
  // x = [1, -3, 0.5, 2] -> conv [3, -5, 2, 5] -> relu [3, 0, 2, 5]
  const DenseTensor logits = forward(m, DenseTensor({1, 1, 2, 2}, {1, -3, 0.5, 2}));
  EXPECT_DOUBLE_EQ(logits[0], 3.0 + 5.0);
  EXPECT_DOUBLE_EQ(logits[1], 1.5 - 2.0 + 0.25);
}

TEST(Forward, PoolingHandValues) {
  Model m;
  m.input_shape = {1, 4, 4};
  m.num_classes = 2;
  m.layers = {MaxPoolLayer{2, 2}, AvgPoolLayer{2, 2}, FlattenLayer{}};
  DenseLayer d{"fc", 2, 1, DenseTensor({2, 1}, {1.0, -1.0}), {}};
  m.layers.push_back(d);
  std::vector<double> x(16);
  for (std::size_t i = 0; i < 16; ++i) x[i] = static_cast<double>(i);
  // max pools: 5, 7, 13, 15 -> mean 10
  const DenseTensor logits = forward(m, DenseTensor({1, 1, 4, 4}, x));
  EXPECT_DOUBLE_EQ(logits[0], 10.0);
  EXPECT_DOUBLE_EQ(logits[1], -10.0);
}

TEST(Forward, FullRankAdaptersRecoverFloatLogits) {
  std::mt19937_64 rng(53);
  const Model m = testing_util::toy_model(rng);
  const Batch b = testing_util::random_batch(m, 6, rng);
  AdaptedQuantModel q = quantize_model(m, kFourBit);
  // Dense layers are quantized plainly, so compare against a float model that
  // carries the same dense weights.
  Model reference = m;
  for (std::size_t i = 0; i < m.layers.size(); ++i)
    if (auto* d = std::get_if<DenseLayer>(&reference.layers[i]))
      d->weight = std::get<DenseLayer>(q.network.layers[i]).weight;
  apply_hard_ranks(q, q.max_ranks());
  const DenseTensor got = forward(q, b.images), want = forward(reference, b.images);
  EXPECT_LE(testing_util::rel_diff(got.data(), want.data()), 1e-3);

  AdaptedQuantModel plain = quantize_model(m, kFourBit, false);
  EXPECT_GT(testing_util::rel_diff(forward(plain, b.images).data(), want.data()), 1e-3);
}

TEST(Forward, ShapeMismatchIsRejected) {
  std::mt19937_64 rng(54);
  const Model m = testing_util::toy_model(rng);
  EXPECT_THROW(forward(m, DenseTensor({2, 1, 9, 10})), Error);
}

TEST(Forward, DeterministicAcrossThreadCounts) {
  std::mt19937_64 rng(55);
  const Model m = testing_util::toy_model(rng);
  const Batch b = testing_util::random_batch(m, 9, rng);
  AdaptedQuantModel q = quantize_model(m, kFourBit);
  q.ranks = {2.5, 3.5, 4.5};
  kernels::set_num_threads(1);
  const DenseTensor one = forward(q, b.images);
  const RankGradient g1 = grad_wrt_ranks(q, b);
  kernels::set_num_threads(4);
  const DenseTensor many = forward(q, b.images);
  const RankGradient g4 = grad_wrt_ranks(q, b);
  kernels::set_num_threads(0);
  EXPECT_EQ(one.values(), many.values());
  EXPECT_EQ(g1.grad, g4.grad);
  EXPECT_EQ(g1.loss, g4.loss);
}

TEST(CrossEntropy, ClosedForms) {
  const DenseTensor uniform({2, 5}, std::vector<double>(10, 0.3));
  EXPECT_NEAR(cross_entropy(uniform, std::vector<std::int32_t>{0, 4}), std::log(5.0), 1e-15);
  const DenseTensor confident({1, 3}, {100.0, 0.0, 0.0});
  EXPECT_NEAR(cross_entropy(confident, std::vector<std::int32_t>{0}), 0.0, 1e-40 + 1e-43);
  EXPECT_LT(cross_entropy(confident, std::vector<std::int32_t>{0}), 1e-40);
}

TEST(CrossEntropy, MatchesDirectFormula) {
  std::mt19937_64 rng(56);
  const auto v = testing_util::normal_values(5 * 4, rng, 3.0);
  const DenseTensor logits({5, 4}, v);
  const std::vector<std::int32_t> labels = {0, 3, 1, 2, 3};
  double direct = 0.0;
  for (std::size_t s = 0; s < 5; ++s) {
    double z = 0.0;
    for (std::size_t j = 0; j < 4; ++j) z += std::exp(v[s * 4 + j]);
    direct += -std::log(std::exp(v[s * 4 + labels[s]]) / z);
  }
  EXPECT_NEAR(cross_entropy(logits, labels), direct / 5.0, 1e-10);
}

TEST(CrossEntropy, StableForHugeLogits) {
  const DenseTensor logits({1, 2}, {1e4, -1e4});
  EXPECT_NEAR(cross_entropy(logits, std::vector<std::int32_t>{1}), 2e4, 1e-9);
}

TEST(RankGradient, MatchesCentralDifferences) {
  std::mt19937_64 rng(57);
  const Model m = testing_util::toy_model(rng);
  const Batch b = testing_util::random_batch(m, 8, rng);
  AdaptedQuantModel q = quantize_model(m, {3, ClipScheme::min_max(), QuantMode::asymmetric});
  // Small step: at 1e-2 the difference routinely straddles relu/maxpool switches.
  const double h = 1e-4;
  for (int trial = 0; trial < 5; ++trial) {
    q.ranks = random_ranks(q, rng);
    const RankGradient g = grad_wrt_ranks(q, b);
    ASSERT_TRUE(g.finite);
    EXPECT_NEAR(g.loss, loss_at(q, q.ranks, b), 1e-12);
    for (std::size_t l = 0; l < q.ranks.size(); ++l) {
      auto up = q.ranks, down = q.ranks;
      up[l] += h;
      down[l] -= h;
      const double fd = (loss_at(q, up, b) - loss_at(q, down, b)) / (2 * h);
      EXPECT_NEAR(g.grad[l], fd, 1e-5 * std::max(std::abs(fd), 1e-6)) << "trial " << trial << " layer " << l;
    }
  }
}

TEST(RankGradient, ZeroResidualLayerHasZeroGradient) {
  std::mt19937_64 rng(58);
  Model m = testing_util::toy_model(rng);
  // Grid-valued weights: min -0.75, max 3.0, step 0.25 are exact under 4-bit min-max.
  auto& c1 = std::get<ConvLayer>(m.layers[3]);
  std::uniform_int_distribution<int> step(0, 15);
  for (double& v : c1.weight.data()) v = -0.75 + 0.25 * step(rng);
  c1.weight[0] = -0.75;
  c1.weight[1] = 3.0;
  AdaptedQuantModel q = quantize_model(m, kFourBit);
  for (double s : q.adapters[1].factorization->s) EXPECT_EQ(s, 0.0);
  q.ranks = {2.0, 3.0, 4.0};
  const RankGradient g = grad_wrt_ranks(q, testing_util::random_batch(m, 4, rng));
  EXPECT_EQ(g.grad[1], 0.0);
  EXPECT_NE(g.grad[0], 0.0);
}

TEST(RankGradient, DuplicatedBatchLeavesGradientUnchanged) {
  std::mt19937_64 rng(59);
  const Model m = testing_util::toy_model(rng);
  const Batch b = testing_util::random_batch(m, 5, rng);
  std::vector<std::size_t> twice = {0, 1, 2, 3, 4, 0, 1, 2, 3, 4};
  const Batch bb = select(b, twice);
  AdaptedQuantModel q = quantize_model(m, kFourBit);
  q.ranks = {1.5, 2.5, 6.0};
  const RankGradient g1 = grad_wrt_ranks(q, b), g2 = grad_wrt_ranks(q, bb);
  EXPECT_NEAR(g1.loss, g2.loss, 1e-13);
  for (std::size_t l = 0; l < 3; ++l) EXPECT_NEAR(g1.grad[l], g2.grad[l], 1e-12 * std::abs(g1.grad[l]) + 1e-16);
}

TEST(RankGradient, RequiresSoftMode) {
  std::mt19937_64 rng(60);
  const Model m = testing_util::toy_model(rng);
  AdaptedQuantModel q = quantize_model(m, kFourBit, false);
  EXPECT_THROW(grad_wrt_ranks(q, testing_util::random_batch(m, 2, rng)), Error);
}

TEST(Accuracy, SelfLabelsAndShiftedLabels) {
  std::mt19937_64 rng(61);
  const Model m = testing_util::toy_model(rng);
  Batch b = testing_util::random_batch(m, 20, rng);
  b.labels = predict(forward(m, b.images));
  EXPECT_EQ(top1_accuracy(m, b), 1.0);
  for (auto& l : b.labels) l = (l + 1) % 5;
  EXPECT_EQ(top1_accuracy(m, b), 0.0);
}

TEST(Accuracy, TiesGoToLowestIndex) {
  const DenseTensor logits({2, 3}, {1, 1, 0, 0, 2, 2});
  EXPECT_EQ(predict(logits), (std::vector<std::int32_t>{0, 1}));
}

TEST(Batch, ValidationAndSelect) {
  std::mt19937_64 rng(62);
  const Model m = testing_util::toy_model(rng);
  Batch b = testing_util::random_batch(m, 4, rng);
  EXPECT_NO_THROW(validate(b, 5));
  b.labels[2] = 5;
  EXPECT_THROW(validate(b, 5), Error);
  b.labels.pop_back();
  EXPECT_THROW(validate(b, 5), Error);
  const Batch s = select(testing_util::random_batch(m, 4, rng), std::vector<std::size_t>{3, 1});
  EXPECT_EQ(s.images.dim(0), 2u);
}

TEST(ApplyHardRanks, QuantizedAdaptersAndValidation) {
  std::mt19937_64 rng(63);
  const Model m = testing_util::toy_model(rng);
  AdaptedQuantModel q = quantize_model(m, kFourBit);
  const QuantSpec eight{8, ClipScheme::min_max(), QuantMode::asymmetric};
  apply_hard_ranks(q, std::vector<std::size_t>{1, 2, 3}, eight);
  EXPECT_EQ(q.mode, AdapterMode::hard);
  EXPECT_TRUE(q.adapters[2].a_codes.has_value());
  EXPECT_EQ(q.adapters[2].adapter->a.shape(), (Shape{3, 6, 3, 3}));
  EXPECT_NO_THROW(validate(q));
  EXPECT_THROW(apply_hard_ranks(q, std::vector<std::size_t>{1, 2}), Error);
  EXPECT_THROW(apply_hard_ranks(q, std::vector<std::size_t>{1, 2, 9}), Error);
}
