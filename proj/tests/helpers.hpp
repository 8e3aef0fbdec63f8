#pragma once

#include <cmath>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "cora/convnet.hpp"
#include "cora/tensor.hpp"

namespace testing_util {

inline std::vector<double> normal_values(std::size_t n, std::mt19937_64& rng, double sd = 1.0) {
  std::normal_distribution<double> dist(0.0, sd);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

inline cora::DenseTensor random_tensor(const cora::Shape& shape, std::mt19937_64& rng,
                                       double sd = 1.0) {
  return cora::DenseTensor(shape, normal_values(cora::shape_size(shape), rng, sd));
}

// Direct cross-correlation by nested loops over output, channel and tap.
inline cora::DenseTensor naive_conv(const cora::DenseTensor& w, const cora::DenseTensor& x,
                                    const cora::ConvGeometry& g) {
  const std::size_t m = w.dim(0), n = w.dim(1), k1 = w.dim(2), k2 = w.dim(3);
  const long h = static_cast<long>(x.dim(1)), wd = static_cast<long>(x.dim(2));
  const std::size_t oh = (x.dim(1) + 2 * g.pad_h - k1) / g.stride_h + 1;
  const std::size_t ow = (x.dim(2) + 2 * g.pad_w - k2) / g.stride_w + 1;
  cora::DenseTensor y({m, oh, ow});
  for (std::size_t o = 0; o < m; ++o)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double acc = 0.0;
        for (std::size_t c = 0; c < n; ++c)
          for (std::size_t u = 0; u < k1; ++u)
            for (std::size_t v = 0; v < k2; ++v) {
              const long yy = static_cast<long>(i * g.stride_h + u) - static_cast<long>(g.pad_h);
              const long xx = static_cast<long>(j * g.stride_w + v) - static_cast<long>(g.pad_w);
              if (yy < 0 || yy >= h || xx < 0 || xx >= wd) continue;
              acc += w.at(o, c, u, v) * x.at(c, static_cast<std::size_t>(yy), static_cast<std::size_t>(xx));
            }
        y.at(o, i, j) = acc;
      }
  return y;
}

inline double rel_diff(std::span<const double> a, std::span<const double> b) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline cora::ConvLayer conv_layer(const std::string& name, std::size_t m, std::size_t n,
                                  std::size_t k, cora::ConvGeometry g, std::mt19937_64& rng,
                                  bool bias = true) {
  cora::ConvLayer c;
  c.name = name;
  c.out_channels = m;
  c.in_channels = n;
  c.kernel_h = c.kernel_w = k;
  c.geometry = g;
  c.weight = random_tensor({m, n, k, k}, rng, std::sqrt(2.0 / static_cast<double>(n * k * k)));
  if (bias) c.bias = normal_values(m, rng, 0.05);
  return c;
}

// conv(1->4, 3x3, pad 1) relu maxpool conv(4->6, 3x3, stride 2, pad 1) relu
// conv(6->8, 3x3) relu avgpool flatten dense(8->5) on 1x10x10 inputs.
inline cora::Model toy_model(std::mt19937_64& rng) {
  cora::Model m;
  m.input_shape = {1, 10, 10};
  m.num_classes = 5;
  m.provenance = "unit-test toy";
  m.layers.push_back(conv_layer("c0", 4, 1, 3, {1, 1, 1, 1}, rng));
  m.layers.push_back(cora::ReluLayer{});
  m.layers.push_back(cora::MaxPoolLayer{2, 2});
  m.layers.push_back(conv_layer("c1", 6, 4, 3, {2, 2, 1, 1}, rng));
  m.layers.push_back(cora::ReluLayer{});
  m.layers.push_back(conv_layer("c2", 8, 6, 3, {1, 1, 1, 1}, rng));
  m.layers.push_back(cora::ReluLayer{});
  m.layers.push_back(cora::AvgPoolLayer{3, 3});
  m.layers.push_back(cora::FlattenLayer{});
  cora::DenseLayer d;
  d.name = "fc";
  d.out_features = 5;
  d.in_features = 8;
  d.weight = random_tensor({5, 8}, rng, 0.5);
  d.bias = normal_values(5, rng, 0.05);
  m.layers.push_back(std::move(d));
  return m;
}

inline cora::Batch random_batch(const cora::Model& m, std::size_t count, std::mt19937_64& rng) {
  cora::Shape shape = m.input_shape;
  shape.insert(shape.begin(), count);
  cora::Batch b{random_tensor(shape, rng), std::vector<std::int32_t>(count)};
  std::uniform_int_distribution<int> label(0, static_cast<int>(m.num_classes) - 1);
  for (auto& l : b.labels) l = label(rng);
  return b;
}

class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("cora-test-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  std::string file(const std::string& name) const { return (path_ / name).string(); }

 private:
  std::filesystem::path path_;
};

inline std::string fixture(const std::string& name) { return std::string(CORA_FIXTURE_DIR) + "/" + name; }

}  // namespace testing_util
