// Fully-convolutional dense prediction with its patchwise oracle, cascade
// chaining, connected-component post-processing and the dense-vs-patchwise
// benchmark. Slices are zero-padded by (RF-1)/2 per side so the output grid
// aligns 1:1 with input pixels; because both paths run the same kernels in
// the same accumulation order, dense and patchwise results are bit-identical.
#ifndef GSEG_INFERENCE_HPP_
#define GSEG_INFERENCE_HPP_

#include <chrono>
#include <cstdint>
#include <deque>
#include <vector>

#include "gseg/architectures.hpp"
#include "gseg/graph.hpp"
#include "gseg/trainer.hpp"
#include "gseg/volume.hpp"

namespace gseg {

// argmax across channels per position, ties to the lowest label
inline std::vector<std::uint8_t> labels_from_probs(const Tensor& probs) {
  const std::size_t plane = static_cast<std::size_t>(probs.height) * probs.width;
  std::vector<std::uint8_t> labels(plane, 0);
  for (std::size_t i = 0; i < plane; ++i) {
    float best = probs.data[i];
    int arg = 0;
    for (int c = 1; c < probs.channels; ++c) {
      const float v = probs.data[c * plane + i];
      if (v > best) { best = v; arg = c; }
    }
    labels[i] = static_cast<std::uint8_t>(arg);
  }
  return labels;
}

inline Tensor pad_slice(const Tensor& slice, int top_left, int bottom_right) {
  Tensor out(slice.channels, slice.height + top_left + bottom_right,
             slice.width + top_left + bottom_right);
  for (int c = 0; c < slice.channels; ++c)
    for (int y = 0; y < slice.height; ++y) {
      const float* src = slice.channel(c) + static_cast<std::size_t>(y) * slice.width;
      float* dst = out.channel(c) +
                   static_cast<std::size_t>(y + top_left) * out.width + top_left;
      std::copy(src, src + slice.width, dst);
    }
  return out;
}

// window of the slice starting at (y0, x0) — possibly negative — zero-padded
// where it leaves the slice
inline Tensor extract_window(const Tensor& slice, int y0, int x0, int size) {
  Tensor out(slice.channels, size, size);
  for (int c = 0; c < slice.channels; ++c)
    for (int y = 0; y < size; ++y) {
      const int sy = y0 + y;
      if (sy < 0 || sy >= slice.height) continue;
      for (int x = 0; x < size; ++x) {
        const int sx = x0 + x;
        if (sx >= 0 && sx < slice.width)
          out.at(c, y, x) = slice.at(c, sy, sx);
      }
    }
  return out;
}

struct SlicePrediction {
  Tensor probs;                      // [labels, H, W]
  std::vector<std::uint8_t> labels;  // H*W
};

namespace detail {

inline Tensor dense_probs_single(const ModelGraph& g, const ParameterStore& store,
                                 const Tensor& slice) {
  if (slice.channels != g.input_channels)
    raise<DataError>("predict: slice has ", slice.channels, " channels, model expects ",
                     g.input_channels);
  const int rf = receptive_field(g);
  const int left = (rf - 1) / 2;
  Tensor padded = pad_slice(slice, left, rf - 1 - left);
  auto trace = forward(g, store, padded);
  return std::move(trace.layers.back().out);
}

inline Tensor dense_probs_cascade(const Architecture& arch, const ParameterStore& first,
                                  const ParameterStore& second, const Tensor& slice) {
  if (slice.channels != arch.graphs[0].input_channels)
    raise<DataError>("predict: slice has ", slice.channels, " channels, model expects ",
                     arch.graphs[0].input_channels);
  const int rf_c = arch.patch_size;
  const int rf2 = receptive_field(arch.graphs[1]);
  const int left = (rf_c - 1) / 2;
  Tensor padded = pad_slice(slice, left, rf_c - 1 - left);

  auto first_trace = forward(arch.graphs[0], first, padded);
  const Tensor& aux = first_trace.layers.back().out;

  const int trim = rf_c - rf2;
  Tensor raw = crop_spatial(padded, arch.second_offset, arch.second_offset,
                            padded.height - trim, padded.width - trim);
  auto trace = forward(arch.graphs[1], second, raw, false, 0, &aux);
  return std::move(trace.layers.back().out);
}

inline Tensor mean_probs(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) raise<DataError>("averaging mismatched probability maps");
  Tensor out(a.channels, a.height, a.width);
  for (std::size_t i = 0; i < a.size(); ++i)
    out.data[i] = 0.5f * (a.data[i] + b.data[i]);
  return out;
}

}  // namespace detail

// Dense per-pixel class distribution for a whole slice under any bundle.
inline SlicePrediction predict_slice_dense(const Architecture& arch,
                                           const std::vector<ParameterStore>& stores,
                                           const Tensor& slice) {
  if (stores.size() != arch.graphs.size())
    raise<DataError>("predict: bundle expects ", arch.graphs.size(), " stores, got ",
                     stores.size());
  SlicePrediction out;
  switch (arch.kind) {
    case BundleKind::Single:
      out.probs = detail::dense_probs_single(arch.graphs[0], stores[0], slice);
      break;
    case BundleKind::Average:
      out.probs = detail::mean_probs(detail::dense_probs_single(arch.graphs[0], stores[0], slice),
                                     detail::dense_probs_single(arch.graphs[1], stores[1], slice));
      break;
    case BundleKind::Cascade:
      out.probs = detail::dense_probs_cascade(arch, stores[0], stores[1], slice);
      break;
  }
  if (out.probs.height != slice.height || out.probs.width != slice.width)
    raise<DataError>("dense prediction is ", out.probs.height, "x", out.probs.width,
                     " for a ", slice.height, "x", slice.width, " slice");
  out.labels = labels_from_probs(out.probs);
  return out;
}

struct PixelRef {
  int y = 0;
  int x = 0;
};

struct PatchwisePrediction {
  std::vector<std::uint8_t> labels;           // one per requested pixel
  std::vector<std::array<float, 5>> probs;    // per-pixel distributions
};

// The slow per-pixel baseline: every pixel gets its own receptive-field
// window and an independent forward pass.
inline PatchwisePrediction predict_patchwise(const Architecture& arch,
                                             const std::vector<ParameterStore>& stores,
                                             const Tensor& slice,
                                             const std::vector<PixelRef>& pixels) {
  if (stores.size() != arch.graphs.size())
    raise<DataError>("predict: bundle expects ", arch.graphs.size(), " stores, got ",
                     stores.size());
  const int rf = arch.patch_size;
  const int left = (rf - 1) / 2;

  PatchwisePrediction out;
  out.labels.reserve(pixels.size());
  out.probs.reserve(pixels.size());
  for (const PixelRef& p : pixels) {
    Tensor sink;
    switch (arch.kind) {
      case BundleKind::Single: {
        Tensor patch = extract_window(slice, p.y - left, p.x - left, rf);
        sink = std::move(forward(arch.graphs[0], stores[0], patch).layers.back().out);
        break;
      }
      case BundleKind::Average: {
        Tensor patch = extract_window(slice, p.y - left, p.x - left, rf);
        sink = detail::mean_probs(
            forward(arch.graphs[0], stores[0], patch).layers.back().out,
            forward(arch.graphs[1], stores[1], patch).layers.back().out);
        break;
      }
      case BundleKind::Cascade: {
        const int rf2 = receptive_field(arch.graphs[1]);
        Tensor patch = extract_window(slice, p.y - left, p.x - left, rf);
        auto first_trace = forward(arch.graphs[0], stores[0], patch);
        const Tensor& aux = first_trace.layers.back().out;
        Tensor raw = crop_spatial(patch, arch.second_offset, arch.second_offset, rf2, rf2);
        sink = std::move(forward(arch.graphs[1], stores[1], raw, false, 0, &aux)
                             .layers.back().out);
        break;
      }
    }
    if (sink.height != 1 || sink.width != 1)
      raise<DataError>("patchwise sink is ", sink.height, "x", sink.width, ", expected 1x1");
    std::array<float, 5> dist{};
    int arg = 0;
    for (int c = 0; c < sink.channels; ++c) {
      dist[c] = sink.data[c];
      if (sink.data[c] > dist[arg]) arg = c;
    }
    out.probs.push_back(dist);
    out.labels.push_back(static_cast<std::uint8_t>(arg));
  }
  return out;
}

// Removes 6-connected 3D components of the non-zero mask smaller than
// tau times the largest component.
inline std::vector<std::uint8_t> remove_flat_blobs(const std::vector<std::uint8_t>& labels,
                                                   int nx, int ny, int nz, double tau = 0.1) {
  const std::size_t n = static_cast<std::size_t>(nx) * ny * nz;
  if (labels.size() != n)
    raise<DataError>("remove_flat_blobs: ", labels.size(), " labels for ", n, " voxels");
  std::vector<std::int32_t> comp(n, -1);
  std::vector<std::uint64_t> sizes;
  std::deque<std::size_t> queue;

  for (std::size_t seed = 0; seed < n; ++seed) {
    if (labels[seed] == 0 || comp[seed] != -1) continue;
    const std::int32_t id = static_cast<std::int32_t>(sizes.size());
    sizes.push_back(0);
    comp[seed] = id;
    queue.push_back(seed);
    while (!queue.empty()) {
      const std::size_t i = queue.front();
      queue.pop_front();
      ++sizes[id];
      const int x = static_cast<int>(i % nx);
      const int y = static_cast<int>((i / nx) % ny);
      const int z = static_cast<int>(i / (static_cast<std::size_t>(nx) * ny));
      const int neigh[6][3] = {{x - 1, y, z}, {x + 1, y, z}, {x, y - 1, z},
                               {x, y + 1, z}, {x, y, z - 1}, {x, y, z + 1}};
      for (const auto& nb : neigh) {
        if (nb[0] < 0 || nb[0] >= nx || nb[1] < 0 || nb[1] >= ny || nb[2] < 0 || nb[2] >= nz)
          continue;
        const std::size_t j =
            (static_cast<std::size_t>(nb[2]) * ny + nb[1]) * nx + nb[0];
        if (labels[j] != 0 && comp[j] == -1) {
          comp[j] = id;
          queue.push_back(j);
        }
      }
    }
  }
  if (sizes.empty()) return labels;

  std::uint64_t largest = 0;
  for (std::uint64_t s : sizes) largest = std::max(largest, s);
  const double cutoff = tau * static_cast<double>(largest);
  std::vector<std::uint8_t> out = labels;
  for (std::size_t i = 0; i < n; ++i)
    if (comp[i] >= 0 && static_cast<double>(sizes[comp[i]]) < cutoff) out[i] = 0;
  return out;
}

// Dense prediction of every axial slice; returns a labels-only volume.
inline BrainVolume predict_volume(const Architecture& arch,
                                  const std::vector<ParameterStore>& stores,
                                  const BrainVolume& in, bool postprocess = true,
                                  double tau = 0.1) {
  if (in.modalities.size() != 4)
    raise<DataError>("predict: volume has ", in.modalities.size(), " modalities, expected 4");
  BrainVolume out;
  out.id = in.id;
  out.spacing = in.spacing;
  out.nx = in.nx;
  out.ny = in.ny;
  out.nz = in.nz;
  out.labels.assign(out.voxels(), 0);

  std::vector<std::vector<std::uint8_t>> slice_labels(in.nz);
  parallel_for(in.nz, [&](std::int64_t z) {
    SlicePrediction pred = predict_slice_dense(arch, stores, in.slice(static_cast<int>(z)));
    slice_labels[z] = std::move(pred.labels);
  });
  for (int z = 0; z < in.nz; ++z)
    std::copy(slice_labels[z].begin(), slice_labels[z].end(),
              out.labels.begin() + static_cast<std::size_t>(z) * in.ny * in.nx);
  if (postprocess)
    out.labels = remove_flat_blobs(out.labels, out.nx, out.ny, out.nz, tau);
  return out;
}

struct BenchReport {
  double dense_seconds = 0.0;
  double patchwise_seconds = 0.0;
  double ratio = 0.0;  // patchwise / dense
  bool equivalent = false;
  double max_prob_diff = 0.0;
  int repetitions = 0;
  int threads = 1;
  bool low_confidence = false;
};

// Times dense against patchwise over every pixel of a random slice, checking
// first that both produce the same arithmetic.
inline BenchReport bench_inference(const Architecture& arch,
                                   const std::vector<ParameterStore>& stores, int height,
                                   int width, int repetitions, std::uint64_t seed = 1) {
  if (repetitions < 1) raise<UsageError>("bench: repetitions must be at least 1");
  Rng rng(seed);
  Tensor slice(arch.graphs[0].input_channels, height, width);
  for (auto& v : slice.data) v = static_cast<float>(rng.uniform(-1.0, 1.0));

  std::vector<PixelRef> all;
  all.reserve(static_cast<std::size_t>(height) * width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) all.push_back({y, x});

  SlicePrediction dense = predict_slice_dense(arch, stores, slice);
  PatchwisePrediction patch = predict_patchwise(arch, stores, slice, all);

  BenchReport report;
  report.repetitions = repetitions;
  report.threads = thread_count();
  report.low_confidence = repetitions < 2;
  report.equivalent = true;
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  for (std::size_t i = 0; i < plane; ++i) {
    if (dense.labels[i] != patch.labels[i]) report.equivalent = false;
    for (int c = 0; c < 5; ++c)
      report.max_prob_diff =
          std::max(report.max_prob_diff,
                   static_cast<double>(std::abs(dense.probs.data[c * plane + i] -
                                                patch.probs[i][c])));
  }
  if (report.max_prob_diff > 1e-5) report.equivalent = false;

  auto median_time = [&](auto&& fn) {
    std::vector<double> times;
    for (int r = 0; r < repetitions; ++r) {
      const auto t0 = std::chrono::steady_clock::now();
      fn();
      times.push_back(
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    std::sort(times.begin(), times.end());
    return times[times.size() / 2];
  };
  report.dense_seconds = median_time([&] { predict_slice_dense(arch, stores, slice); });
  report.patchwise_seconds = median_time([&] { predict_patchwise(arch, stores, slice, all); });
  report.ratio = report.patchwise_seconds / report.dense_seconds;
  return report;
}

}  // namespace gseg

#endif  // GSEG_INFERENCE_HPP_
