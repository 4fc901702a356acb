// Builders for the seven named architectures and their cascade geometry.
//
// TwoPathCNN: a local pathway (7x7 conv block, pool 4, then 3x3 block,
// pool 2) in parallel with a global pathway (13x13 block, no pooling),
// channel-concatenated and fed to a 21x21 convolutional softmax output.
// Both pathways see an effective receptive field of 13 at the concat point;
// the full net sees 33. Cascades embed a frozen first TwoPathCNN whose
// 5-channel output map joins the second net at the input, after the first
// local block, or right before the output layer.
#ifndef GSEG_ARCHITECTURES_HPP_
#define GSEG_ARCHITECTURES_HPP_

#include <cctype>
#include <string>
#include <vector>

#include "gseg/graph.hpp"

namespace gseg {

enum class ArchName {
  LocalPathCNN,
  GlobalPathCNN,
  TwoPathCNN,
  AverageCNN,
  InputCascadeCNN,
  LocalCascadeCNN,
  MFCascadeCNN,
};

inline const char* to_string(ArchName a) {
  switch (a) {
    case ArchName::LocalPathCNN: return "LocalPathCNN";
    case ArchName::GlobalPathCNN: return "GlobalPathCNN";
    case ArchName::TwoPathCNN: return "TwoPathCNN";
    case ArchName::AverageCNN: return "AverageCNN";
    case ArchName::InputCascadeCNN: return "InputCascadeCNN";
    case ArchName::LocalCascadeCNN: return "LocalCascadeCNN";
    case ArchName::MFCascadeCNN: return "MFCascadeCNN";
  }
  return "?";
}

inline ArchName parse_arch(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  for (ArchName a : {ArchName::LocalPathCNN, ArchName::GlobalPathCNN, ArchName::TwoPathCNN,
                     ArchName::AverageCNN, ArchName::InputCascadeCNN, ArchName::LocalCascadeCNN,
                     ArchName::MFCascadeCNN}) {
    std::string t = to_string(a);
    for (char& c : t) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (s == t) return a;
  }
  raise<UsageError>("unknown architecture '", s, "'");
}

struct ArchConfig {
  // feature-map counts (after maxout) and maxout group size
  int local1_maps = 64;
  int local2_maps = 64;
  int global_maps = 160;
  int maxout_k = 2;
  // pathway geometry; defaults give the 33-pixel receptive field
  int local_kernel1 = 7, local_pool1 = 4;
  int local_kernel2 = 3, local_pool2 = 2;
  int global_kernel = 13, global_pool = 1;
  int out_kernel = 21;
  // dropout sites
  double dropout_input = 0.0;
  double dropout_hidden = 0.2;
  double dropout_output = 0.5;
  int input_channels = 4;
  int label_count = 5;
};

enum class BundleKind { Single, Average, Cascade };
enum class CascadePoint { AtInput, AtLocalHidden, PreOutput };

struct Architecture {
  ArchName name = ArchName::TwoPathCNN;
  BundleKind kind = BundleKind::Single;
  CascadePoint cascade_point = CascadePoint::AtInput;  // cascades only
  std::vector<ModelGraph> graphs;  // single: 1; average: {local, global}; cascade: {first, second}
  int patch_size = 0;        // input patch classifying one center pixel
  int concat_size = 0;       // cascades: aux map size at the concat point
  int second_offset = 0;     // cascades: top-left crop of the second net's raw input
};

namespace detail {

struct GraphBuilder {
  ModelGraph g;

  int add(LayerSpec l) {
    g.layers.push_back(std::move(l));
    return static_cast<int>(g.layers.size()) - 1;
  }
  int block(const std::string& name, int ref, int kernel, int maps, int k, int pool) {
    LayerSpec l;
    l.kind = LayerKind::ConvMaxoutPool;
    l.name = name;
    l.kernel = kernel;
    l.out_maps = maps;
    l.maxout_k = k;
    l.pool_p = pool;
    l.pool_stride = 1;
    l.input_refs = {ref};
    return add(std::move(l));
  }
  // zero-probability dropout is omitted rather than materialized
  int drop(int ref, double prob) {
    if (prob <= 0.0) return ref;
    LayerSpec l;
    l.kind = LayerKind::Dropout;
    l.dropout_prob = prob;
    l.input_refs = {ref};
    return add(std::move(l));
  }
  int concat(std::vector<int> refs) {
    LayerSpec l;
    l.kind = LayerKind::ConcatChannels;
    l.input_refs = std::move(refs);
    return add(std::move(l));
  }
  int output(int ref, int kernel, int labels) {
    LayerSpec l;
    l.kind = LayerKind::SoftmaxConvOutput;
    l.name = "output";
    l.kernel = kernel;
    l.out_maps = labels;
    l.input_refs = {ref};
    return add(std::move(l));
  }
};

enum class AuxJoin { None, AtInput, AtLocalHidden, PreOutput };

inline ModelGraph two_path_graph(const ArchConfig& c, AuxJoin join) {
  GraphBuilder b;
  b.g.input_channels = c.input_channels;
  b.g.label_count = c.label_count;
  b.g.aux_channels = join == AuxJoin::None ? 0 : c.label_count;

  int src = kInputRef;
  if (join == AuxJoin::AtInput) src = b.concat({kInputRef, kAuxRef});
  src = b.drop(src, c.dropout_input);

  int l1 = b.block("local1", src, c.local_kernel1, c.local1_maps, c.maxout_k, c.local_pool1);
  int l1d = b.drop(l1, c.dropout_hidden);
  if (join == AuxJoin::AtLocalHidden) l1d = b.concat({l1d, kAuxRef});
  int l2 = b.block("local2", l1d, c.local_kernel2, c.local2_maps, c.maxout_k, c.local_pool2);
  int l2d = b.drop(l2, c.dropout_hidden);

  int g1 = b.block("global1", src, c.global_kernel, c.global_maps, c.maxout_k, c.global_pool);
  int g1d = b.drop(g1, c.dropout_hidden);

  int cat = join == AuxJoin::PreOutput ? b.concat({l2d, g1d, kAuxRef}) : b.concat({l2d, g1d});
  int catd = b.drop(cat, c.dropout_output);
  b.output(catd, c.out_kernel, c.label_count);
  return b.g;
}

inline ModelGraph local_path_graph(const ArchConfig& c) {
  GraphBuilder b;
  b.g.input_channels = c.input_channels;
  b.g.label_count = c.label_count;
  int src = b.drop(kInputRef, c.dropout_input);
  int l1 = b.block("local1", src, c.local_kernel1, c.local1_maps, c.maxout_k, c.local_pool1);
  int l1d = b.drop(l1, c.dropout_hidden);
  int l2 = b.block("local2", l1d, c.local_kernel2, c.local2_maps, c.maxout_k, c.local_pool2);
  int l2d = b.drop(l2, c.dropout_output);
  b.output(l2d, c.out_kernel, c.label_count);
  return b.g;
}

inline ModelGraph global_path_graph(const ArchConfig& c) {
  GraphBuilder b;
  b.g.input_channels = c.input_channels;
  b.g.label_count = c.label_count;
  int src = b.drop(kInputRef, c.dropout_input);
  int g1 = b.block("global1", src, c.global_kernel, c.global_maps, c.maxout_k, c.global_pool);
  int g1d = b.drop(g1, c.dropout_output);
  b.output(g1d, c.out_kernel, c.label_count);
  return b.g;
}

// Validates that the graph collapses an exactly-receptive-field input to a
// 1x1 sink (simulate_shapes throws with both sizes on a concat mismatch) and
// that the receptive field is odd, so the center pixel is well-defined.
inline int validated_rf(const ModelGraph& g) {
  const int rf = receptive_field(g);
  if (rf % 2 == 0)
    raise<DataError>("architecture has an even receptive field (", rf,
                     "); no center pixel exists");
  ShapeSim sim = simulate_shapes(g, rf);
  if (sim.sizes.back() != 1)
    raise<DataError>("architecture does not reduce its receptive field to one pixel (got ",
                     sim.sizes.back(), ")");
  return rf;
}

}  // namespace detail

// Computes bundle kind and cascade geometry for graphs that already exist
// (freshly built or loaded from a model file).
inline Architecture assemble(ArchName name, std::vector<ModelGraph> graphs) {
  Architecture a;
  a.name = name;
  a.graphs = std::move(graphs);
  switch (name) {
    case ArchName::LocalPathCNN:
    case ArchName::GlobalPathCNN:
    case ArchName::TwoPathCNN:
      a.kind = BundleKind::Single;
      if (a.graphs.size() != 1)
        raise<DataError>(to_string(name), " is a single model, got ", a.graphs.size());
      a.patch_size = detail::validated_rf(a.graphs[0]);
      break;
    case ArchName::AverageCNN: {
      a.kind = BundleKind::Average;
      if (a.graphs.size() != 2)
        raise<DataError>("AverageCNN needs two pathway models, got ", a.graphs.size());
      const int r0 = detail::validated_rf(a.graphs[0]);
      const int r1 = detail::validated_rf(a.graphs[1]);
      if (r0 != r1)
        raise<DataError>("AverageCNN pathways have unequal receptive fields (", r0, " vs ", r1, ")");
      a.patch_size = r0;
      break;
    }
    case ArchName::InputCascadeCNN:
    case ArchName::LocalCascadeCNN:
    case ArchName::MFCascadeCNN: {
      a.kind = BundleKind::Cascade;
      a.cascade_point = name == ArchName::InputCascadeCNN ? CascadePoint::AtInput
                      : name == ArchName::LocalCascadeCNN ? CascadePoint::AtLocalHidden
                                                          : CascadePoint::PreOutput;
      if (a.graphs.size() != 2)
        raise<DataError>(to_string(name), " needs two models, got ", a.graphs.size());
      const int rf_first = detail::validated_rf(a.graphs[0]);
      const int rf_second = detail::validated_rf(a.graphs[1]);
      ShapeSim sim = simulate_shapes(a.graphs[1], rf_second);
      if (sim.aux_size <= 0)
        raise<DataError>("cascade second net does not consume the aux input");
      a.concat_size = sim.aux_size;
      a.patch_size = a.concat_size + rf_first - 1;
      a.second_offset = (a.patch_size - rf_second) / 2;
      break;
    }
  }
  return a;
}

inline Architecture build(ArchName name, const ArchConfig& cfg = {}) {
  std::vector<ModelGraph> graphs;
  switch (name) {
    case ArchName::LocalPathCNN:
      graphs = {detail::local_path_graph(cfg)};
      break;
    case ArchName::GlobalPathCNN:
      graphs = {detail::global_path_graph(cfg)};
      break;
    case ArchName::TwoPathCNN:
      graphs = {detail::two_path_graph(cfg, detail::AuxJoin::None)};
      break;
    case ArchName::AverageCNN:
      graphs = {detail::local_path_graph(cfg), detail::global_path_graph(cfg)};
      break;
    case ArchName::InputCascadeCNN:
    case ArchName::LocalCascadeCNN:
    case ArchName::MFCascadeCNN: {
      const auto join = name == ArchName::InputCascadeCNN ? detail::AuxJoin::AtInput
                      : name == ArchName::LocalCascadeCNN ? detail::AuxJoin::AtLocalHidden
                                                          : detail::AuxJoin::PreOutput;
      graphs = {detail::two_path_graph(cfg, detail::AuxJoin::None),
                detail::two_path_graph(cfg, join)};
      break;
    }
  }
  return assemble(name, std::move(graphs));
}

// Input patch the first net of a cascade must see so its output map matches
// the second net's concat point.
inline int cascade_first_input_size(const Architecture& a) {
  if (a.kind != BundleKind::Cascade)
    raise<UsageError>("cascade_first_input_size: ", to_string(a.name), " is not a cascade");
  return a.patch_size;
}

}  // namespace gseg

#endif  // GSEG_ARCHITECTURES_HPP_
