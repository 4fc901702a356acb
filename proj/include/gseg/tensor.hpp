// Dense rank-3 tensor (channels x height x width) and convolution kernel bank.
#ifndef GSEG_TENSOR_HPP_
#define GSEG_TENSOR_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "gseg/common.hpp"

namespace gseg {

// Channel-major, then row, then column. Production code uses float storage;
// double instantiations back the finite-difference test oracles.
template <class S>
struct TensorT {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<S> data;

  TensorT() = default;
  TensorT(int c, int h, int w, S fill = S(0))
      : channels(c), height(h), width(w),
        data(static_cast<std::size_t>(c) * h * w, fill) {
    if (c < 0 || h < 0 || w < 0)
      raise<DataError>("tensor: negative dimension ", c, "x", h, "x", w);
  }

  std::size_t size() const { return data.size(); }
  bool same_shape(const TensorT& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }

  S& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  S at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  S* channel(int c) { return data.data() + static_cast<std::size_t>(c) * height * width; }
  const S* channel(int c) const {
    return data.data() + static_cast<std::size_t>(c) * height * width;
  }

  bool all_finite() const {
    for (S v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <class T>
  TensorT<T> cast() const {
    TensorT<T> out(channels, height, width);
    for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<T>(data[i]);
    return out;
  }
};

using Tensor = TensorT<float>;

// Weights for one convolutional layer: out_maps x in_channels x n x n kernels
// plus one bias per output map. For a maxout block, out_maps already counts
// the K competing maps (layer maps x K).
template <class S>
struct KernelBankT {
  int out_maps = 0;     // S
  int in_channels = 0;  // R
  int kernel = 0;       // N, square
  std::vector<S> weights;  // S*R*N*N, kernel-major rows
  std::vector<S> bias;     // S

  KernelBankT() = default;
  KernelBankT(int s, int r, int n)
      : out_maps(s), in_channels(r), kernel(n),
        weights(static_cast<std::size_t>(s) * r * n * n, S(0)),
        bias(static_cast<std::size_t>(s), S(0)) {
    if (s <= 0 || r <= 0 || n <= 0)
      raise<DataError>("kernel bank: bad shape S=", s, " R=", r, " N=", n);
  }

  std::size_t weight_count() const { return weights.size(); }

  S* kernel_at(int s, int r) {
    return weights.data() + ((static_cast<std::size_t>(s) * in_channels + r) * kernel) * kernel;
  }
  const S* kernel_at(int s, int r) const {
    return weights.data() + ((static_cast<std::size_t>(s) * in_channels + r) * kernel) * kernel;
  }

  template <class T>
  KernelBankT<T> cast() const {
    KernelBankT<T> out(out_maps, in_channels, kernel);
    for (std::size_t i = 0; i < weights.size(); ++i) out.weights[i] = static_cast<T>(weights[i]);
    for (std::size_t i = 0; i < bias.size(); ++i) out.bias[i] = static_cast<T>(bias[i]);
    return out;
  }
};

using KernelBank = KernelBankT<float>;

}  // namespace gseg

#endif  // GSEG_TENSOR_HPP_
