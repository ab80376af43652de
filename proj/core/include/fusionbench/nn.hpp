#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "fusionbench/geometry.hpp"
#include "fusionbench/rng.hpp"
#include "fusionbench/tensor.hpp"

namespace fusionbench {

/// Learnable array with a stable name used by checkpoints and optimizers.
struct ParamArray {
  std::string name;
  std::vector<int> shape;
  std::vector<double> values;

  ParamArray() = default;
  ParamArray(std::string n, std::vector<int> s);

  bool operator==(const ParamArray&) const = default;
};

/// 3x3 convolution, zero padding 1, configurable stride.
struct Conv2d {
  int in_channels = 0;
  int out_channels = 0;
  int stride = 1;
  ParamArray weight;  // out x in x 3 x 3
  ParamArray bias;    // out

  Conv2d() = default;
  Conv2d(const std::string& name, int in, int out, int stride);

  int output_extent(int n) const { return (n - 1) / stride + 1; }

  void init(Rng& rng);
  void forward(const Tensor& in, Tensor& out) const;
  /// Either output pointer may be null.
  void backward(const Tensor& in, const Tensor& grad_out, Conv2d* grad_params,
                Tensor* grad_in) const;
};

/// Conv + ReLU blocks.
struct ConvStack {
  std::vector<Conv2d> layers;

  struct Cache {
    std::vector<Tensor> activations;  // [0] = input, [i + 1] = relu(conv_i(...))
    const Tensor& output() const { return activations.back(); }
  };

  void forward(const Tensor& input, Cache& cache) const;
  void backward(const Cache& cache, Tensor grad_top, ConvStack* grad_params,
                Tensor* grad_input) const;
};

struct Dense {
  int in = 0;
  int out = 0;
  ParamArray weight;  // out x in
  ParamArray bias;    // out

  Dense() = default;
  Dense(const std::string& name, int in, int out);

  void init(Rng& rng, double gain);
  void forward(std::span<const double> x, std::span<double> y) const;
  void backward(std::span<const double> x, std::span<const double> grad_y, Dense* grad_params,
                std::span<double> grad_x) const;
};

/// Two-layer perceptron: Dense -> ReLU -> Dense.
struct Mlp {
  Dense hidden;
  Dense output;

  struct Cache {
    std::vector<double> input;
    std::vector<double> hidden;  // post-activation
  };

  Mlp() = default;
  Mlp(const std::string& name, int in, int width, int out);

  void init(Rng& rng);
  std::vector<double> forward(std::span<const double> x, Cache* cache) const;
  /// grad_input may be empty.
  void backward(const Cache& cache, std::span<const double> grad_out, Mlp* grad_params,
                std::span<double> grad_input) const;
};

/// Bilinear sampling grid of `size` x `size` points over a box given in
/// feature-map units. Samples clamp to the map, so boxes partly outside the
/// map are legal.
struct CropPlan {
  int size = 0;
  std::vector<std::array<int, 4>> index;     // flat plane offsets per sample
  std::vector<std::array<double, 4>> weight;
};

CropPlan make_crop_plan(const Box2& box, int map_height, int map_width, int size);
/// out has channels * size * size entries, channel-major.
void crop_features(const Tensor& map, const CropPlan& plan, std::span<double> out);
void crop_features_backward(const CropPlan& plan, std::span<const double> grad_out,
                            Tensor& grad_map);

std::vector<double> softmax(std::span<const double> logits);
/// Maps a gradient on softmax probabilities to a gradient on logits.
std::vector<double> softmax_backward(std::span<const double> probs,
                                     std::span<const double> grad_probs);

}  // namespace fusionbench
