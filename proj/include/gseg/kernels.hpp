// The four numerical primitives: valid-mode convolution, maxout, max-pooling
// and per-position channel softmax, each with its reverse-mode gradient.
//
// Convolution is implemented as cross-correlation; learned kernels absorb the
// flip, and the brute-force test oracle uses the same orientation. Per output
// pixel the reduction runs over (r, u, v) in fixed ascending order with a
// 64-bit accumulator, so patchwise and dense inference produce identical bits.
#ifndef GSEG_KERNELS_HPP_
#define GSEG_KERNELS_HPP_

#include <cstdint>
#include <vector>

#include "gseg/common.hpp"
#include "gseg/tensor.hpp"

namespace gseg {

template <class S>
TensorT<S> conv2d_valid(const TensorT<S>& input, const KernelBankT<S>& bank) {
  if (bank.in_channels != input.channels)
    raise<DataError>("conv2d_valid: input has ", input.channels,
                     " channels but bank expects ", bank.in_channels);
  if (input.height < bank.kernel || input.width < bank.kernel)
    raise<DataError>("conv2d_valid: input ", input.height, "x", input.width,
                     " smaller than kernel ", bank.kernel, "x", bank.kernel);
  const int n = bank.kernel;
  const int oh = input.height - n + 1;
  const int ow = input.width - n + 1;
  TensorT<S> out(bank.out_maps, oh, ow);
  parallel_for(bank.out_maps, [&](std::int64_t s) {
    S* dst = out.channel(static_cast<int>(s));
    for (int oy = 0; oy < oh; ++oy) {
      for (int ox = 0; ox < ow; ++ox) {
        double acc = static_cast<double>(bank.bias[s]);
        for (int r = 0; r < input.channels; ++r) {
          const S* w = bank.kernel_at(static_cast<int>(s), r);
          const S* src = input.channel(r) + static_cast<std::size_t>(oy) * input.width + ox;
          for (int u = 0; u < n; ++u) {
            const S* wrow = w + static_cast<std::size_t>(u) * n;
            const S* xrow = src + static_cast<std::size_t>(u) * input.width;
            for (int v = 0; v < n; ++v)
              acc += static_cast<double>(wrow[v]) * static_cast<double>(xrow[v]);
          }
        }
        dst[static_cast<std::size_t>(oy) * ow + ox] = static_cast<S>(acc);
      }
    }
  });
  return out;
}

// Gradients of conv2d_valid w.r.t. input, weights and bias given the upstream
// gradient at the output. grad_input may be skipped when the input is a graph
// source (nothing upstream needs it).
template <class S>
struct ConvGrads {
  TensorT<S> input;
  KernelBankT<S> bank;
};

template <class S>
ConvGrads<S> conv2d_valid_grad(const TensorT<S>& input, const KernelBankT<S>& bank,
                               const TensorT<S>& upstream, bool want_input_grad = true) {
  const int n = bank.kernel;
  const int oh = input.height - n + 1;
  const int ow = input.width - n + 1;
  if (upstream.channels != bank.out_maps || upstream.height != oh || upstream.width != ow)
    raise<DataError>("conv2d_valid_grad: upstream ", upstream.channels, "x",
                     upstream.height, "x", upstream.width, " does not match output ",
                     bank.out_maps, "x", oh, "x", ow);

  ConvGrads<S> g;
  g.bank = KernelBankT<S>(bank.out_maps, bank.in_channels, n);
  for (int s = 0; s < bank.out_maps; ++s) {
    const S* up = upstream.channel(s);
    double bacc = 0.0;
    for (std::size_t i = 0, e = static_cast<std::size_t>(oh) * ow; i < e; ++i)
      bacc += static_cast<double>(up[i]);
    g.bank.bias[s] = static_cast<S>(bacc);
    for (int r = 0; r < input.channels; ++r) {
      S* gw = g.bank.kernel_at(s, r);
      const S* src = input.channel(r);
      for (int u = 0; u < n; ++u) {
        for (int v = 0; v < n; ++v) {
          double acc = 0.0;
          for (int oy = 0; oy < oh; ++oy) {
            const S* xrow = src + static_cast<std::size_t>(oy + u) * input.width + v;
            const S* urow = up + static_cast<std::size_t>(oy) * ow;
            for (int ox = 0; ox < ow; ++ox)
              acc += static_cast<double>(urow[ox]) * static_cast<double>(xrow[ox]);
          }
          gw[static_cast<std::size_t>(u) * n + v] = static_cast<S>(acc);
        }
      }
    }
  }

  if (want_input_grad) {
    g.input = TensorT<S>(input.channels, input.height, input.width);
    for (int r = 0; r < input.channels; ++r) {
      S* dst = g.input.channel(r);
      for (int y = 0; y < input.height; ++y) {
        for (int x = 0; x < input.width; ++x) {
          double acc = 0.0;
          for (int s = 0; s < bank.out_maps; ++s) {
            const S* w = bank.kernel_at(s, r);
            const S* up = upstream.channel(s);
            const int u_lo = std::max(0, y - oh + 1), u_hi = std::min(n - 1, y);
            const int v_lo = std::max(0, x - ow + 1), v_hi = std::min(n - 1, x);
            for (int u = u_lo; u <= u_hi; ++u) {
              const S* urow = up + static_cast<std::size_t>(y - u) * ow;
              const S* wrow = w + static_cast<std::size_t>(u) * n;
              for (int v = v_lo; v <= v_hi; ++v)
                acc += static_cast<double>(urow[x - v]) * static_cast<double>(wrow[v]);
            }
          }
          dst[static_cast<std::size_t>(y) * input.width + x] = static_cast<S>(acc);
        }
      }
    }
  }
  return g;
}

// Maxout over groups of k consecutive channels; group g owns channels
// [g*k, (g+1)*k). Ties go to the lowest channel, recorded in argmax for the
// backward pass.
template <class S>
TensorT<S> maxout(const TensorT<S>& input, int k, std::vector<std::int32_t>* argmax = nullptr) {
  if (k <= 0 || input.channels % k != 0)
    raise<DataError>("maxout: channel count ", input.channels, " not divisible by K=", k);
  const int groups = input.channels / k;
  TensorT<S> out(groups, input.height, input.width);
  const std::size_t plane = static_cast<std::size_t>(input.height) * input.width;
  if (argmax) argmax->assign(out.size(), 0);
  for (int g = 0; g < groups; ++g) {
    S* dst = out.channel(g);
    const S* first = input.channel(g * k);
    for (std::size_t i = 0; i < plane; ++i) dst[i] = first[i];
    if (argmax) {
      std::int32_t* am = argmax->data() + static_cast<std::size_t>(g) * plane;
      for (int j = 1; j < k; ++j) {
        const S* cand = input.channel(g * k + j);
        for (std::size_t i = 0; i < plane; ++i)
          if (cand[i] > dst[i]) { dst[i] = cand[i]; am[i] = j; }
      }
    } else {
      for (int j = 1; j < k; ++j) {
        const S* cand = input.channel(g * k + j);
        for (std::size_t i = 0; i < plane; ++i)
          if (cand[i] > dst[i]) dst[i] = cand[i];
      }
    }
  }
  return out;
}

template <class S>
TensorT<S> maxout_grad(int in_channels, int k, const TensorT<S>& upstream,
                       const std::vector<std::int32_t>& argmax) {
  if (argmax.size() != upstream.size())
    raise<DataError>("maxout_grad: missing forward argmax cache");
  TensorT<S> g(in_channels, upstream.height, upstream.width);
  const std::size_t plane = static_cast<std::size_t>(upstream.height) * upstream.width;
  for (int grp = 0; grp < upstream.channels; ++grp) {
    const S* up = upstream.channel(grp);
    const std::int32_t* am = argmax.data() + static_cast<std::size_t>(grp) * plane;
    for (std::size_t i = 0; i < plane; ++i)
      g.channel(grp * k + am[i])[i] += up[i];
  }
  return g;
}

// Max pooling over p x p windows. Geometry must divide exactly; no padding.
// argmax stores the flat y*W+x winner position per output element.
template <class S>
TensorT<S> max_pool(const TensorT<S>& input, int p, int stride,
                    std::vector<std::int32_t>* argmax = nullptr) {
  if (p <= 0 || stride <= 0 || p > input.height || p > input.width)
    raise<DataError>("max_pool: window ", p, " does not fit input ",
                     input.height, "x", input.width);
  if ((input.height - p) % stride != 0 || (input.width - p) % stride != 0)
    raise<DataError>("max_pool: geometry (", input.height, "x", input.width,
                     " - ", p, ") not divisible by stride ", stride);
  const int dh = (input.height - p) / stride + 1;
  const int dw = (input.width - p) / stride + 1;
  TensorT<S> out(input.channels, dh, dw);
  if (argmax) argmax->assign(out.size(), 0);
  for (int c = 0; c < input.channels; ++c) {
    const S* src = input.channel(c);
    S* dst = out.channel(c);
    std::int32_t* am = argmax ? argmax->data() + static_cast<std::size_t>(c) * dh * dw : nullptr;
    for (int oy = 0; oy < dh; ++oy) {
      for (int ox = 0; ox < dw; ++ox) {
        const int y0 = oy * stride, x0 = ox * stride;
        S best = src[static_cast<std::size_t>(y0) * input.width + x0];
        std::int32_t best_at = y0 * input.width + x0;
        for (int u = 0; u < p; ++u) {
          const S* row = src + static_cast<std::size_t>(y0 + u) * input.width + x0;
          for (int v = 0; v < p; ++v) {
            if (row[v] > best) { best = row[v]; best_at = (y0 + u) * input.width + x0 + v; }
          }
        }
        dst[static_cast<std::size_t>(oy) * dw + ox] = best;
        if (am) am[static_cast<std::size_t>(oy) * dw + ox] = best_at;
      }
    }
  }
  return out;
}

template <class S>
TensorT<S> max_pool_grad(int in_h, int in_w, const TensorT<S>& upstream,
                         const std::vector<std::int32_t>& argmax) {
  if (argmax.size() != upstream.size())
    raise<DataError>("max_pool_grad: missing forward argmax cache");
  TensorT<S> g(upstream.channels, in_h, in_w);
  const std::size_t plane = static_cast<std::size_t>(upstream.height) * upstream.width;
  for (int c = 0; c < upstream.channels; ++c) {
    const S* up = upstream.channel(c);
    const std::int32_t* am = argmax.data() + static_cast<std::size_t>(c) * plane;
    S* dst = g.channel(c);
    for (std::size_t i = 0; i < plane; ++i) dst[am[i]] += up[i];
  }
  return g;
}

// Per-position softmax across channels, computed max-subtracted.
template <class S>
TensorT<S> softmax_channels(const TensorT<S>& input) {
  TensorT<S> out(input.channels, input.height, input.width);
  const std::size_t plane = static_cast<std::size_t>(input.height) * input.width;
  for (std::size_t i = 0; i < plane; ++i) {
    double top = static_cast<double>(input.data[i]);
    for (int c = 1; c < input.channels; ++c)
      top = std::max(top, static_cast<double>(input.data[c * plane + i]));
    double z = 0.0;
    for (int c = 0; c < input.channels; ++c)
      z += std::exp(static_cast<double>(input.data[c * plane + i]) - top);
    for (int c = 0; c < input.channels; ++c)
      out.data[c * plane + i] =
          static_cast<S>(std::exp(static_cast<double>(input.data[c * plane + i]) - top) / z);
  }
  return out;
}

// Negative log-likelihood of the per-position labels under softmax output,
// summed over positions, with the fused gradient w.r.t. pre-softmax values:
// dL/da_c = p_c - [c == label].
template <class S>
double softmax_nll(const TensorT<S>& probs, const std::vector<std::uint8_t>& labels,
                   TensorT<S>* grad_logits = nullptr) {
  const std::size_t plane = static_cast<std::size_t>(probs.height) * probs.width;
  if (labels.size() != plane)
    raise<DataError>("softmax_nll: ", labels.size(), " labels for ", plane, " positions");
  if (grad_logits) *grad_logits = TensorT<S>(probs.channels, probs.height, probs.width);
  double loss = 0.0;
  for (std::size_t i = 0; i < plane; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= probs.channels)
      raise<DataError>("softmax_nll: label ", y, " outside [0, ", probs.channels, ")");
    const double p = static_cast<double>(probs.data[static_cast<std::size_t>(y) * plane + i]);
    loss -= std::log(std::max(p, 1e-30));
    if (grad_logits) {
      for (int c = 0; c < probs.channels; ++c)
        grad_logits->data[c * plane + i] =
            probs.data[c * plane + i] - (c == y ? S(1) : S(0));
    }
  }
  return loss;
}

}  // namespace gseg

#endif  // GSEG_KERNELS_HPP_
