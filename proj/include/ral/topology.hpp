#pragma once

#include <string>
#include <variant>
#include <vector>

#include "ral/numeric.hpp"

namespace ral {

/// Per-sample activation shape. Flat feature vectors use height = width = 1.
struct ImageShape {
  int channels = 1;
  int height = 1;
  int width = 1;

  int spatial() const { return height * width; }
  int size() const { return channels * height * width; }
  bool flat() const { return height == 1 && width == 1; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

struct Linear {
  int in = 0;
  int out = 0;
};

struct Conv {
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 1;
  int stride = 1;
  int padding = 0;
};

/// Non-overlapping k x k average pooling.
struct AvgPool {
  int size = 2;
};

struct Relu {};
struct Flatten {};

using LayerSpec = std::variant<Linear, Conv, AvgPool, Relu, Flatten>;

inline bool has_weights(const LayerSpec& l) {
  return std::holds_alternative<Linear>(l) || std::holds_alternative<Conv>(l);
}

inline ImageShape conv_output_shape(const Conv& c, const ImageShape& in) {
  return {c.out_channels, (in.height + 2 * c.padding - c.kernel) / c.stride + 1,
          (in.width + 2 * c.padding - c.kernel) / c.stride + 1};
}

/// Output shape of a single layer; throws ShapeError on incompatible input.
inline ImageShape layer_output_shape(const LayerSpec& layer, const ImageShape& in) {
  struct Visitor {
    const ImageShape& in;
    ImageShape operator()(const Linear& l) const {
      if (!in.flat() || in.channels != l.in)
        throw ShapeError("linear layer expects flat input of size " + std::to_string(l.in) +
                         ", got " + std::to_string(in.size()));
      return {l.out, 1, 1};
    }
    ImageShape operator()(const Conv& c) const {
      if (in.channels != c.in_channels)
        throw ShapeError("conv layer expects " + std::to_string(c.in_channels) +
                         " channels, got " + std::to_string(in.channels));
      if (c.kernel < 1 || c.stride < 1 || c.padding < 0)
        throw ShapeError("invalid conv geometry");
      if (in.height + 2 * c.padding < c.kernel || in.width + 2 * c.padding < c.kernel)
        throw ShapeError("conv kernel larger than padded input");
      return conv_output_shape(c, in);
    }
    ImageShape operator()(const AvgPool& p) const {
      if (p.size < 1 || in.height % p.size != 0 || in.width % p.size != 0)
        throw ShapeError("avg pool size must divide the input extent");
      return {in.channels, in.height / p.size, in.width / p.size};
    }
    ImageShape operator()(const Relu&) const { return in; }
    ImageShape operator()(const Flatten&) const { return {in.size(), 1, 1}; }
  };
  return std::visit(Visitor{in}, layer);
}

/// Fixed network architecture: input shape plus an ordered layer list.
struct Topology {
  ImageShape input;
  std::vector<LayerSpec> layers;

  /// Shapes after every layer (front = input shape). Throws ShapeError.
  std::vector<ImageShape> shapes() const {
    std::vector<ImageShape> out{input};
    for (const auto& l : layers) out.push_back(layer_output_shape(l, out.back()));
    return out;
  }

  ImageShape output_shape() const { return shapes().back(); }
  int num_outputs() const { return output_shape().size(); }

  void validate() const {
    const auto out = output_shape();
    if (!out.flat()) throw ShapeError("network output must be flat");
  }

  /// Plain MLP: in -> hidden... -> out with ReLU between affine layers.
  static Topology mlp(int in, const std::vector<int>& hidden, int out) {
    Topology t{{in, 1, 1}, {}};
    int prev = in;
    for (int h : hidden) {
      t.layers.emplace_back(Linear{prev, h});
      t.layers.emplace_back(Relu{});
      prev = h;
    }
    t.layers.emplace_back(Linear{prev, out});
    return t;
  }

  /// LeNet-5 sized predictor: conv(20) -> conv(50) -> 500 -> classes,
  /// 5x5 kernels, average pooling.
  static Topology lenet(ImageShape input, int classes) {
    Topology t{input, {}};
    t.layers = {Conv{input.channels, 20, 5}, AvgPool{2}, Relu{},
                Conv{20, 50, 5},             AvgPool{2}, Relu{},
                Flatten{}};
    const int flat = t.output_shape().size();
    t.layers.emplace_back(Linear{flat, 500});
    t.layers.emplace_back(Relu{});
    t.layers.emplace_back(Linear{500, classes});
    return t;
  }

  friend bool operator==(const Topology& a, const Topology& b) {
    if (!(a.input == b.input) || a.layers.size() != b.layers.size()) return false;
    for (std::size_t i = 0; i < a.layers.size(); ++i) {
      if (a.layers[i].index() != b.layers[i].index()) return false;
      const bool same = std::visit(
          [&](const auto& x) {
            using L = std::decay_t<decltype(x)>;
            const auto& y = std::get<L>(b.layers[i]);
            if constexpr (std::is_same_v<L, Linear>) return x.in == y.in && x.out == y.out;
            else if constexpr (std::is_same_v<L, Conv>)
              return x.in_channels == y.in_channels && x.out_channels == y.out_channels &&
                     x.kernel == y.kernel && x.stride == y.stride && x.padding == y.padding;
            else if constexpr (std::is_same_v<L, AvgPool>) return x.size == y.size;
            else return true;
          },
          a.layers[i]);
      if (!same) return false;
    }
    return true;
  }
};

}  // namespace ral
