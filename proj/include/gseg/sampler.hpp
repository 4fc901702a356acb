// Patch sampling over labeled volumes. Balanced mode draws center labels
// uniformly over the five classes (phase-1 training); natural mode draws
// centers uniformly over brain voxels (phase-2 training). Patches come from
// axial slices and are zero-padded where they overlap a border.
#ifndef GSEG_SAMPLER_HPP_
#define GSEG_SAMPLER_HPP_

#include <array>
#include <cstdint>
#include <vector>

#include "gseg/common.hpp"
#include "gseg/tensor.hpp"
#include "gseg/volume.hpp"

namespace gseg {

struct LabelHistogram {
  std::array<std::uint64_t, kLabelCount> counts{};

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts) t += c;
    return t;
  }
  double fraction(int label) const {
    const std::uint64_t t = total();
    return t == 0 ? 0.0 : static_cast<double>(counts[label]) / static_cast<double>(t);
  }
  void add(std::uint8_t label) { ++counts[label]; }
};

struct PatchExample {
  Tensor patch;  // [modalities, M, M]
  std::uint8_t label = 0;
  int volume = 0, z = 0, y = 0, x = 0;  // center voxel in its source volume
};

// M x M patch around (y, x) of axial slice z; the window starts (M-1)/2
// before the center (one pixel more after it when M is even).
inline Tensor extract_patch(const BrainVolume& v, int z, int y, int x, int size) {
  const int nmod = static_cast<int>(v.modalities.size());
  Tensor t(nmod, size, size);
  const int off = (size - 1) / 2;
  for (int m = 0; m < nmod; ++m) {
    const float* grid = v.modalities[m].data() + static_cast<std::size_t>(z) * v.ny * v.nx;
    float* dst = t.channel(m);
    for (int py = 0; py < size; ++py) {
      const int sy = y - off + py;
      if (sy < 0 || sy >= v.ny) continue;  // stays zero
      const float* row = grid + static_cast<std::size_t>(sy) * v.nx;
      for (int px = 0; px < size; ++px) {
        const int sx = x - off + px;
        if (sx >= 0 && sx < v.nx) dst[static_cast<std::size_t>(py) * size + px] = row[sx];
      }
    }
  }
  return t;
}

inline Tensor flip_lr(const Tensor& t) {
  Tensor out(t.channels, t.height, t.width);
  for (int c = 0; c < t.channels; ++c)
    for (int y = 0; y < t.height; ++y)
      for (int x = 0; x < t.width; ++x) out.at(c, y, x) = t.at(c, y, t.width - 1 - x);
  return out;
}

enum class SampleMode { Balanced, Natural };

class PatchSampler {
 public:
  PatchSampler(std::vector<const BrainVolume*> volumes, SampleMode mode, int patch_size,
               std::uint64_t seed)
      : volumes_(std::move(volumes)), mode_(mode), patch_size_(patch_size), rng_(seed) {
    if (volumes_.empty()) raise<DataError>("sampler: no volumes");
    if (patch_size_ <= 0) raise<DataError>("sampler: patch size must be positive");
    for (const BrainVolume* v : volumes_)
      if (!v->has_labels()) raise<DataError>("sampler: volume '", v->id, "' has no labels");

    for (std::uint32_t vi = 0; vi < volumes_.size(); ++vi) {
      const BrainVolume& v = *volumes_[vi];
      for (std::size_t i = 0; i < v.voxels(); ++i) {
        if (!v.in_brain(i)) continue;
        corpus_.add(v.labels[i]);
        by_class_[v.labels[i]].push_back({vi, static_cast<std::uint32_t>(i)});
      }
    }
    if (mode_ == SampleMode::Balanced) {
      for (int c = 0; c < kLabelCount; ++c)
        if (by_class_[c].empty())
          raise<DataError>("sampler: class ", c, " is absent from all volumes");
    } else {
      std::uint64_t brain = 0;
      for (const auto& cls : by_class_) brain += cls.size();
      if (brain == 0) raise<DataError>("sampler: no brain voxels");
    }
  }

  PatchExample next() {
    Coord c{};
    if (mode_ == SampleMode::Balanced) {
      const int cls = static_cast<int>(rng_.uniform_index(kLabelCount));
      const auto& list = by_class_[cls];
      c = list[rng_.uniform_index(list.size())];
    } else {
      std::uint64_t pick = rng_.uniform_index(corpus_.total());
      for (int cls = 0; cls < kLabelCount; ++cls) {
        if (pick < by_class_[cls].size()) {
          c = by_class_[cls][pick];
          break;
        }
        pick -= by_class_[cls].size();
      }
    }
    const BrainVolume& v = *volumes_[c.volume];
    PatchExample ex;
    ex.volume = static_cast<int>(c.volume);
    ex.x = static_cast<int>(c.index % v.nx);
    ex.y = static_cast<int>((c.index / v.nx) % v.ny);
    ex.z = static_cast<int>(c.index / (static_cast<std::size_t>(v.nx) * v.ny));
    ex.label = v.labels[c.index];
    ex.patch = extract_patch(v, ex.z, ex.y, ex.x, patch_size_);
    emitted_.add(ex.label);
    return ex;
  }

  std::vector<PatchExample> take(std::size_t n) {
    std::vector<PatchExample> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(next());
    return out;
  }

  const LabelHistogram& emitted() const { return emitted_; }
  // label distribution of the corpus over brain voxels
  const LabelHistogram& corpus_histogram() const { return corpus_; }
  int patch_size() const { return patch_size_; }

 private:
  struct Coord {
    std::uint32_t volume;
    std::uint32_t index;
  };

  std::vector<const BrainVolume*> volumes_;
  SampleMode mode_;
  int patch_size_;
  Rng rng_;
  std::array<std::vector<Coord>, kLabelCount> by_class_;
  LabelHistogram corpus_;
  LabelHistogram emitted_;
};

// When enabled, every patch is also emitted as its left-right mirror.
inline std::vector<PatchExample> flip_augment(std::vector<PatchExample> patches, bool enabled) {
  if (!enabled) return patches;
  std::vector<PatchExample> out;
  out.reserve(patches.size() * 2);
  for (auto& p : patches) {
    PatchExample mirrored = p;
    mirrored.patch = flip_lr(p.patch);
    out.push_back(std::move(p));
    out.push_back(std::move(mirrored));
  }
  return out;
}

// natural per-class frequencies of a corpus, for init_parameters
inline std::vector<double> label_frequencies(const std::vector<const BrainVolume*>& volumes) {
  LabelHistogram h;
  for (const BrainVolume* v : volumes) {
    if (!v->has_labels()) raise<DataError>("label_frequencies: volume '", v->id, "' has no labels");
    for (std::size_t i = 0; i < v->voxels(); ++i)
      if (v->in_brain(i)) h.add(v->labels[i]);
  }
  std::vector<double> f(kLabelCount);
  for (int c = 0; c < kLabelCount; ++c) {
    f[c] = h.fraction(c);
    if (f[c] <= 0.0)
      raise<DataError>("label_frequencies: class ", c, " is absent from the corpus");
  }
  return f;
}

}  // namespace gseg

#endif  // GSEG_SAMPLER_HPP_
