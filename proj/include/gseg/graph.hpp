// Composable layer graph: convolution blocks (conv + maxout + pool),
// channel concatenation, dropout and the convolutional softmax output layer,
// with forward/backward execution over a parameter store.
//
// input_refs address predecessors by index; kInputRef is the graph's primary
// input and kAuxRef an optional auxiliary input (the probability channels a
// cascade's first net feeds into its second net).
#ifndef GSEG_GRAPH_HPP_
#define GSEG_GRAPH_HPP_

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "gseg/common.hpp"
#include "gseg/kernels.hpp"
#include "gseg/tensor.hpp"

namespace gseg {

enum class LayerKind { ConvMaxoutPool, ConcatChannels, Dropout, SoftmaxConvOutput };

constexpr int kInputRef = -1;
constexpr int kAuxRef = -2;

struct LayerSpec {
  LayerKind kind = LayerKind::ConvMaxoutPool;
  std::string name;
  int kernel = 0;        // N (conv layers)
  int out_maps = 0;      // maps after maxout (conv block) or label count (output)
  int maxout_k = 1;      // K competing maps per output map
  int pool_p = 1;        // pooling window; 1 = no pooling
  int pool_stride = 1;
  double dropout_prob = 0.0;
  std::vector<int> input_refs;

  bool parametric() const {
    return kind == LayerKind::ConvMaxoutPool || kind == LayerKind::SoftmaxConvOutput;
  }
  // kernels held by this layer's bank (counts the K competing maps)
  int bank_maps() const {
    return kind == LayerKind::ConvMaxoutPool ? out_maps * maxout_k : out_maps;
  }
};

struct ModelGraph {
  std::vector<LayerSpec> layers;  // topological order; last layer is the sink
  int input_channels = 4;
  int aux_channels = 0;  // 0 when the graph takes no auxiliary input
  int label_count = 5;

  const LayerSpec& sink() const {
    if (layers.empty()) raise<DataError>("graph has no layers");
    return layers.back();
  }
};

template <class S>
struct ParameterStoreT {
  std::uint32_t version = 1;
  std::vector<std::pair<std::string, KernelBankT<S>>> banks;  // graph order

  KernelBankT<S>& find(const std::string& name) {
    for (auto& [n, b] : banks)
      if (n == name) return b;
    raise<DataError>("parameter store has no bank named '", name, "'");
  }
  const KernelBankT<S>& find(const std::string& name) const {
    for (const auto& [n, b] : banks)
      if (n == name) return b;
    raise<DataError>("parameter store has no bank named '", name, "'");
  }
  bool has(const std::string& name) const {
    for (const auto& [n, b] : banks)
      if (n == name) return true;
    return false;
  }

  template <class T>
  ParameterStoreT<T> cast() const {
    ParameterStoreT<T> out;
    out.version = version;
    for (const auto& [n, b] : banks) out.banks.emplace_back(n, b.template cast<T>());
    return out;
  }
};

using ParameterStore = ParameterStoreT<float>;

namespace detail {

inline void check_ref(const ModelGraph& g, int layer_idx, int ref) {
  if (ref == kInputRef) return;
  if (ref == kAuxRef) {
    if (g.aux_channels <= 0)
      raise<DataError>("layer ", layer_idx, " references aux input but graph declares none");
    return;
  }
  if (ref < 0 || ref >= layer_idx)
    raise<DataError>("layer ", layer_idx, " has non-topological input ref ", ref);
}

}  // namespace detail

// Channel count produced by each layer, also validating ref ordering,
// uniqueness of names and the single-sink contract.
inline std::vector<int> layer_channels(const ModelGraph& g) {
  std::vector<int> ch(g.layers.size());
  std::map<std::string, int> names;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const LayerSpec& l = g.layers[i];
    if (l.parametric()) {
      if (l.name.empty()) raise<DataError>("parametric layer ", i, " has no name");
      if (++names[l.name] > 1) raise<DataError>("duplicate layer name '", l.name, "'");
    }
    if (l.input_refs.empty()) raise<DataError>("layer ", i, " has no inputs");
    int in_ch = 0;
    for (int ref : l.input_refs) {
      detail::check_ref(g, static_cast<int>(i), ref);
      in_ch += ref == kInputRef ? g.input_channels
             : ref == kAuxRef   ? g.aux_channels
                                : ch[ref];
    }
    switch (l.kind) {
      case LayerKind::ConvMaxoutPool:
      case LayerKind::SoftmaxConvOutput:
        if (l.input_refs.size() != 1)
          raise<DataError>("layer ", i, ": conv layers take exactly one input");
        ch[i] = l.out_maps;
        break;
      case LayerKind::ConcatChannels:
        if (l.input_refs.size() < 2)
          raise<DataError>("layer ", i, ": concat needs at least two inputs");
        ch[i] = in_ch;
        break;
      case LayerKind::Dropout:
        if (l.input_refs.size() != 1)
          raise<DataError>("layer ", i, ": dropout takes exactly one input");
        if (l.dropout_prob < 0.0 || l.dropout_prob >= 1.0)
          raise<DataError>("layer ", i, ": dropout probability ", l.dropout_prob,
                           " outside [0, 1)");
        ch[i] = in_ch;
        break;
    }
  }
  if (g.sink().kind != LayerKind::SoftmaxConvOutput)
    raise<DataError>("graph sink must be the softmax output layer");
  for (std::size_t i = 0; i + 1 < g.layers.size(); ++i)
    if (g.layers[i].kind == LayerKind::SoftmaxConvOutput)
      raise<DataError>("softmax output layer must be the unique sink");
  return ch;
}

// Input channel count seen by layer i.
inline int layer_in_channels(const ModelGraph& g, const std::vector<int>& ch, int i) {
  int in_ch = 0;
  for (int ref : g.layers[i].input_refs)
    in_ch += ref == kInputRef ? g.input_channels
           : ref == kAuxRef   ? g.aux_channels
                              : ch[ref];
  return in_ch;
}

// Spatial size per layer on a hypothetical square input of the given size;
// aux maps are assumed to arrive already sized to match (the cascade driver
// guarantees it). Rejects non-positive sizes and concat disagreements.
struct ShapeSim {
  std::vector<int> sizes;    // per layer
  int aux_size = -1;         // size required of the aux input, if referenced
};

inline ShapeSim simulate_shapes(const ModelGraph& g, int input_size) {
  ShapeSim sim;
  sim.sizes.resize(g.layers.size());
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const LayerSpec& l = g.layers[i];
    auto ref_size = [&](int ref) -> int {
      if (ref == kInputRef) return input_size;
      if (ref == kAuxRef) return -1;  // fixed by siblings
      return sim.sizes[ref];
    };
    switch (l.kind) {
      case LayerKind::ConvMaxoutPool:
      case LayerKind::SoftmaxConvOutput: {
        int in = ref_size(l.input_refs[0]);
        if (in < 0) raise<DataError>("conv layer ", i, " cannot consume the aux input directly");
        int q = in - l.kernel + 1;
        if (q <= 0)
          raise<DataError>("layer '", l.name, "': input ", in, " smaller than kernel ", l.kernel);
        if (l.kind == LayerKind::ConvMaxoutPool && l.pool_p > 1) {
          if ((q - l.pool_p) % l.pool_stride != 0 || l.pool_p > q)
            raise<DataError>("layer '", l.name, "': pool ", l.pool_p, "/", l.pool_stride,
                             " does not divide map of size ", q);
          q = (q - l.pool_p) / l.pool_stride + 1;
        }
        sim.sizes[i] = q;
        break;
      }
      case LayerKind::ConcatChannels: {
        int got = -1;
        bool has_aux = false;
        for (int ref : l.input_refs) {
          if (ref == kAuxRef) { has_aux = true; continue; }
          int s = ref_size(ref);
          if (got == -1) got = s;
          else if (got != s)
            raise<DataError>("concat layer ", i, ": spatial sizes disagree (", got, " vs ", s, ")");
        }
        if (got == -1) raise<DataError>("concat layer ", i, " has only aux inputs");
        if (has_aux) {
          if (sim.aux_size != -1 && sim.aux_size != got)
            raise<DataError>("aux input used at two different sizes (", sim.aux_size, " vs ", got, ")");
          sim.aux_size = got;
        }
        sim.sizes[i] = got;
        break;
      }
      case LayerKind::Dropout:
        sim.sizes[i] = ref_size(l.input_refs[0]);
        break;
    }
  }
  return sim;
}

// 1 + sum of (N-1) + (p-1)*stride terms along every sink-to-input path;
// all paths must agree or the architecture is invalid.
inline int receptive_field(const ModelGraph& g) {
  layer_channels(g);  // structural validation
  const int n = static_cast<int>(g.layers.size());
  // shrink[i]: total spatial shrink from layer i's output back to the input
  std::vector<int> shrink(n, -1);
  std::vector<bool> reaches_input(n, false);
  for (int i = 0; i < n; ++i) {
    const LayerSpec& l = g.layers[i];
    int own = 0;
    if (l.kind == LayerKind::ConvMaxoutPool)
      own = (l.kernel - 1) + (l.pool_p - 1);
    else if (l.kind == LayerKind::SoftmaxConvOutput)
      own = l.kernel - 1;
    int agreed = -1;
    for (int ref : l.input_refs) {
      int below = -1;
      if (ref == kInputRef) below = 0;
      else if (ref == kAuxRef) continue;  // aux paths carry no geometry
      else if (reaches_input[ref]) below = shrink[ref];
      else continue;
      const int total = own + below;
      if (agreed == -1) agreed = total;
      else if (agreed != total)
        raise<DataError>("receptive fields disagree across paths at layer ", i, ": ",
                         agreed + 1, " vs ", total + 1);
      reaches_input[i] = true;
    }
    shrink[i] = agreed;
  }
  if (!reaches_input[n - 1])
    raise<DataError>("sink is not connected to the primary input");
  return shrink[n - 1] + 1;
}

// Forward-pass record; train mode keeps argmax provenance and dropout masks
// for the backward pass.
template <class S>
struct LayerTraceT {
  TensorT<S> out;
  std::vector<std::int32_t> maxout_arg;
  std::vector<std::int32_t> pool_arg;
  std::vector<std::uint8_t> drop_mask;
  int conv_h = 0, conv_w = 0;  // conv output dims before pooling
};

template <class S>
struct ForwardTraceT {
  std::vector<LayerTraceT<S>> layers;
  bool train_mode = false;

  const TensorT<S>& sink() const { return layers.back().out; }
};

using ForwardTrace = ForwardTraceT<float>;

template <class S>
TensorT<S> apply_dropout(const TensorT<S>& x, double prob, bool train_mode, Rng& rng,
                         std::vector<std::uint8_t>* mask = nullptr) {
  if (prob < 0.0 || prob >= 1.0)
    raise<DataError>("dropout probability ", prob, " outside [0, 1)");
  TensorT<S> out = x;
  if (train_mode) {
    if (mask) mask->assign(x.size(), 1);
    if (prob > 0.0) {
      for (std::size_t i = 0; i < out.size(); ++i) {
        const bool keep = !rng.bernoulli(prob);
        if (!keep) out.data[i] = S(0);
        if (mask) (*mask)[i] = keep ? 1 : 0;
      }
    }
  } else if (prob > 0.0) {
    const S scale = static_cast<S>(1.0 - prob);
    for (auto& v : out.data) v *= scale;
  }
  return out;
}

template <class S>
ForwardTraceT<S> forward(const ModelGraph& g, const ParameterStoreT<S>& store,
                         const TensorT<S>& input, bool train_mode = false,
                         std::uint64_t rng_seed = 0,
                         const TensorT<S>* aux = nullptr) {
  const std::vector<int> ch = layer_channels(g);
  if (input.channels != g.input_channels)
    raise<DataError>("forward: input has ", input.channels, " channels, graph expects ",
                     g.input_channels);
  if (g.aux_channels > 0) {
    if (!aux) raise<DataError>("forward: graph expects an aux input");
    if (aux->channels != g.aux_channels)
      raise<DataError>("forward: aux input has ", aux->channels, " channels, graph expects ",
                       g.aux_channels);
  }
  const int rf = receptive_field(g);
  if (input.height < rf || input.width < rf)
    raise<DataError>("forward: input ", input.height, "x", input.width,
                     " smaller than receptive field ", rf);

  Rng rng(rng_seed);
  ForwardTraceT<S> trace;
  trace.train_mode = train_mode;
  trace.layers.resize(g.layers.size());

  auto fetch = [&](int ref) -> const TensorT<S>& {
    if (ref == kInputRef) return input;
    if (ref == kAuxRef) return *aux;
    return trace.layers[ref].out;
  };

  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const LayerSpec& l = g.layers[i];
    LayerTraceT<S>& t = trace.layers[i];
    switch (l.kind) {
      case LayerKind::ConvMaxoutPool: {
        const TensorT<S>& x = fetch(l.input_refs[0]);
        TensorT<S> o = conv2d_valid(x, store.find(l.name));
        t.conv_h = o.height;
        t.conv_w = o.width;
        TensorT<S> z = l.maxout_k > 1
                           ? maxout(o, l.maxout_k, train_mode ? &t.maxout_arg : nullptr)
                           : std::move(o);
        t.out = l.pool_p > 1
                    ? max_pool(z, l.pool_p, l.pool_stride, train_mode ? &t.pool_arg : nullptr)
                    : std::move(z);
        break;
      }
      case LayerKind::ConcatChannels: {
        int h = -1, w = -1, total_ch = 0;
        for (int ref : l.input_refs) {
          const TensorT<S>& x = fetch(ref);
          if (h == -1) { h = x.height; w = x.width; }
          else if (x.height != h || x.width != w)
            raise<DataError>("concat layer ", i, ": spatial sizes disagree (", h, "x", w,
                             " vs ", x.height, "x", x.width, ")");
          total_ch += x.channels;
        }
        TensorT<S> cat(total_ch, h, w);
        int at = 0;
        for (int ref : l.input_refs) {
          const TensorT<S>& x = fetch(ref);
          std::copy(x.data.begin(), x.data.end(), cat.channel(at));
          at += x.channels;
        }
        t.out = std::move(cat);
        break;
      }
      case LayerKind::Dropout: {
        t.out = apply_dropout(fetch(l.input_refs[0]), l.dropout_prob, train_mode, rng,
                              train_mode ? &t.drop_mask : nullptr);
        break;
      }
      case LayerKind::SoftmaxConvOutput: {
        const TensorT<S>& x = fetch(l.input_refs[0]);
        t.out = softmax_channels(conv2d_valid(x, store.find(l.name)));
        break;
      }
    }
  }
  return trace;
}

// Zero-initialized gradient container matching a store's bank shapes.
template <class S>
ParameterStoreT<S> zeros_like(const ParameterStoreT<S>& store) {
  ParameterStoreT<S> z;
  z.version = store.version;
  for (const auto& [n, b] : store.banks)
    z.banks.emplace_back(n, KernelBankT<S>(b.out_maps, b.in_channels, b.kernel));
  return z;
}

template <class S>
struct BackwardResultT {
  ParameterStoreT<S> grads;
  double loss = 0.0;       // NLL + regularizers
  double data_loss = 0.0;  // NLL only
};

// Reverse pass over a train-mode trace. labels are the per-position targets
// at the sink (row-major, sink.height * sink.width entries). Regularizer
// terms (lambda1 |W|_1 + lambda2 |W|^2, kernel weights only) are added to the
// loss and gradients here. sink_only limits gradient computation to the
// output bank (phase-2 training, where everything else is frozen).
template <class S>
BackwardResultT<S> backward(const ModelGraph& g, const ParameterStoreT<S>& store,
                            const ForwardTraceT<S>& trace, const TensorT<S>& input,
                            const std::vector<std::uint8_t>& labels, double lambda1 = 0.0,
                            double lambda2 = 0.0, const TensorT<S>* aux = nullptr,
                            bool sink_only = false) {
  if (!trace.train_mode)
    raise<DataError>("backward: forward trace was not recorded in train mode");
  const std::vector<int> ch = layer_channels(g);

  BackwardResultT<S> res;
  res.grads = zeros_like(store);

  const int n = static_cast<int>(g.layers.size());
  std::vector<TensorT<S>> grad_out(n);  // d loss / d layer-output
  auto add_grad = [&](int ref, TensorT<S>&& gt) {
    if (ref < 0) return;  // no parameters upstream of a graph input
    TensorT<S>& slot = grad_out[ref];
    if (slot.size() == 0) slot = std::move(gt);
    else {
      if (!slot.same_shape(gt)) raise<DataError>("backward: gradient shape mismatch");
      for (std::size_t i = 0; i < slot.size(); ++i) slot.data[i] += gt.data[i];
    }
  };
  auto fetch = [&](int ref) -> const TensorT<S>& {
    if (ref == kInputRef) return input;
    if (ref == kAuxRef) {
      if (!aux) raise<DataError>("backward: graph expects an aux input");
      return *aux;
    }
    return trace.layers[ref].out;
  };

  // sink: fused softmax + NLL
  {
    const LayerSpec& l = g.layers[n - 1];
    const TensorT<S>& probs = trace.layers[n - 1].out;
    TensorT<S> dlogits;
    res.data_loss = softmax_nll(probs, labels, &dlogits);
    const int ref = l.input_refs[0];
    const TensorT<S>& x = fetch(ref);
    auto cg = conv2d_valid_grad(x, store.find(l.name), dlogits, ref >= 0 && !sink_only);
    res.grads.find(l.name) = std::move(cg.bank);
    if (ref >= 0 && !sink_only) add_grad(ref, std::move(cg.input));
  }

  for (int i = sink_only ? -1 : n - 2; i >= 0; --i) {
    const LayerSpec& l = g.layers[i];
    if (grad_out[i].size() == 0) continue;  // dead branch
    TensorT<S>& up = grad_out[i];
    switch (l.kind) {
      case LayerKind::ConvMaxoutPool: {
        const LayerTraceT<S>& t = trace.layers[i];
        TensorT<S> dz = l.pool_p > 1 ? max_pool_grad(t.conv_h, t.conv_w, up, t.pool_arg)
                                     : std::move(up);
        TensorT<S> dconv = l.maxout_k > 1
                               ? maxout_grad(l.out_maps * l.maxout_k, l.maxout_k, dz, t.maxout_arg)
                               : std::move(dz);
        const int ref = l.input_refs[0];
        const TensorT<S>& x = fetch(ref);
        auto cg = conv2d_valid_grad(x, store.find(l.name), dconv, ref >= 0);
        res.grads.find(l.name) = std::move(cg.bank);
        if (ref >= 0) add_grad(ref, std::move(cg.input));
        break;
      }
      case LayerKind::ConcatChannels: {
        int at = 0;
        for (int ref : l.input_refs) {
          const TensorT<S>& x = fetch(ref);
          if (ref >= 0) {
            TensorT<S> part(x.channels, up.height, up.width);
            std::copy(up.channel(at), up.channel(at) + part.size(), part.data.begin());
            add_grad(ref, std::move(part));
          }
          at += x.channels;
        }
        break;
      }
      case LayerKind::Dropout: {
        const std::vector<std::uint8_t>& mask = trace.layers[i].drop_mask;
        if (l.dropout_prob > 0.0) {
          if (mask.size() != up.size())
            raise<DataError>("backward: dropout mask missing from forward trace");
          for (std::size_t j = 0; j < up.size(); ++j)
            if (!mask[j]) up.data[j] = S(0);
        }
        add_grad(l.input_refs[0], std::move(up));
        break;
      }
      case LayerKind::SoftmaxConvOutput:
        raise<DataError>("softmax output layer cannot appear mid-graph");
    }
  }

  // L1/L2 regularization on kernel weights (biases exempt)
  res.loss = res.data_loss;
  if (lambda1 != 0.0 || lambda2 != 0.0) {
    double l1 = 0.0, l2 = 0.0;
    for (std::size_t b = 0; b < store.banks.size(); ++b) {
      const auto& w = store.banks[b].second.weights;
      auto& gw = res.grads.banks[b].second.weights;
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double wj = static_cast<double>(w[j]);
        l1 += std::abs(wj);
        l2 += wj * wj;
        gw[j] += static_cast<S>(lambda1 * (wj > 0.0 ? 1.0 : wj < 0.0 ? -1.0 : 0.0) +
                                2.0 * lambda2 * wj);
      }
    }
    res.loss += lambda1 * l1 + lambda2 * l2;
  }
  return res;
}

// Kernel weights ~ U(-0.005, 0.005); biases zero except the output layer's,
// set to log label frequencies.
template <class S>
ParameterStoreT<S> init_parameters(const ModelGraph& g, const std::vector<double>& label_freqs,
                                   std::uint64_t seed) {
  const std::vector<int> ch = layer_channels(g);
  if (static_cast<int>(label_freqs.size()) != g.label_count)
    raise<DataError>("init: ", label_freqs.size(), " label frequencies for ", g.label_count,
                     " labels");
  double sum = 0.0;
  for (double f : label_freqs) {
    if (f <= 0.0) raise<DataError>("init: nonpositive label frequency ", f);
    sum += f;
  }
  // tolerance admits rounded frequency tables (e.g. 0.98 + 0.0018 + 0.011
  // + 0.0012 + 0.0038 = 0.9978); biases use the raw values
  if (std::abs(sum - 1.0) > 5e-3)
    raise<DataError>("init: label frequencies sum to ", sum, ", expected 1");

  Rng rng(seed);
  ParameterStoreT<S> store;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const LayerSpec& l = g.layers[i];
    if (!l.parametric()) continue;
    KernelBankT<S> bank(l.bank_maps(), layer_in_channels(g, ch, static_cast<int>(i)), l.kernel);
    for (auto& w : bank.weights) w = static_cast<S>(rng.uniform(-0.005, 0.005));
    if (l.kind == LayerKind::SoftmaxConvOutput)
      for (int c = 0; c < l.out_maps; ++c) bank.bias[c] = static_cast<S>(std::log(label_freqs[c]));
    store.banks.emplace_back(l.name, std::move(bank));
  }
  return store;
}

}  // namespace gseg

#endif  // GSEG_GRAPH_HPP_
