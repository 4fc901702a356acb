// Brain volumes: four co-registered modality grids plus optional labels.
//
// On disk a volume is a pair: <name>.json sidecar {dims [X,Y,Z],
// voxel_spacing, modalities (ordered names), has_labels, dtype "f32le"} and
// <name>.blob holding the modality grids (x fastest) concatenated, then one
// label byte per voxel when present.
#ifndef GSEG_VOLUME_HPP_
#define GSEG_VOLUME_HPP_

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gseg/common.hpp"
#include "gseg/tensor.hpp"

namespace gseg {

constexpr int kLabelCount = 5;  // 0 healthy, 1 necrosis, 2 edema, 3 non-enhancing, 4 enhancing

inline const std::vector<std::string>& known_modalities() {
  static const std::vector<std::string> names{"T1", "T1C", "T2", "FLAIR"};
  return names;
}

struct BrainVolume {
  std::string id;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  int nx = 0, ny = 0, nz = 0;
  std::vector<std::string> modality_names;
  std::vector<std::vector<float>> modalities;  // one grid per name, x fastest
  std::vector<std::uint8_t> labels;            // empty when absent

  std::size_t voxels() const {
    return static_cast<std::size_t>(nx) * ny * nz;
  }
  std::size_t index(int x, int y, int z) const {
    return (static_cast<std::size_t>(z) * ny + y) * nx + x;
  }
  bool has_labels() const { return !labels.empty(); }

  // brain mask: any modality nonzero at the voxel
  bool in_brain(std::size_t idx) const {
    for (const auto& m : modalities)
      if (m[idx] != 0.0f) return true;
    return false;
  }

  // axial slice z as a tensor [modalities, ny, nx]
  Tensor slice(int z) const {
    Tensor t(static_cast<int>(modalities.size()), ny, nx);
    for (std::size_t m = 0; m < modalities.size(); ++m) {
      const float* src = modalities[m].data() + static_cast<std::size_t>(z) * ny * nx;
      std::copy(src, src + static_cast<std::size_t>(ny) * nx, t.channel(static_cast<int>(m)));
    }
    return t;
  }
};

namespace detail {

inline std::string strip_json_ext(const std::string& path) {
  if (path.size() > 5 && path.compare(path.size() - 5, 5, ".json") == 0)
    return path.substr(0, path.size() - 5);
  return path;
}

}  // namespace detail

inline void save_volume(const BrainVolume& v, const std::string& path) {
  const std::string base = detail::strip_json_ext(path);
  for (const auto& m : v.modalities)
    if (m.size() != v.voxels())
      raise<DataError>("save_volume: modality grid has ", m.size(), " voxels, dims give ",
                       v.voxels());
  if (v.has_labels() && v.labels.size() != v.voxels())
    raise<DataError>("save_volume: label grid has ", v.labels.size(), " voxels, dims give ",
                     v.voxels());

  nlohmann::json sidecar{{"dims", {v.nx, v.ny, v.nz}},
                         {"voxel_spacing", {v.spacing[0], v.spacing[1], v.spacing[2]}},
                         {"modalities", v.modality_names},
                         {"has_labels", v.has_labels()},
                         {"dtype", "f32le"},
                         {"id", v.id}};
  std::ofstream js(base + ".json", std::ios::trunc);
  if (!js) raise<IoError>("cannot write '", base, ".json'");
  js << sidecar.dump(2) << "\n";

  std::ofstream bs(base + ".blob", std::ios::binary | std::ios::trunc);
  if (!bs) raise<IoError>("cannot write '", base, ".blob'");
  for (const auto& m : v.modalities)
    bs.write(reinterpret_cast<const char*>(m.data()),
             static_cast<std::streamsize>(m.size() * 4));
  if (v.has_labels())
    bs.write(reinterpret_cast<const char*>(v.labels.data()),
             static_cast<std::streamsize>(v.labels.size()));
  if (!bs) raise<IoError>("write failed for '", base, ".blob'");
}

inline BrainVolume load_volume(const std::string& path) {
  const std::string base = detail::strip_json_ext(path);
  std::ifstream js(base + ".json");
  if (!js) raise<IoError>("cannot open volume sidecar '", base, ".json'");
  nlohmann::json sidecar;
  try {
    js >> sidecar;
  } catch (const nlohmann::json::exception& e) {
    raise<DataError>("volume sidecar '", base, ".json' is not valid JSON: ", e.what());
  }

  BrainVolume v;
  const auto dims = sidecar.at("dims").get<std::vector<int>>();
  if (dims.size() != 3 || dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
    raise<DataError>("volume sidecar: dims must be three positive integers");
  v.nx = dims[0];
  v.ny = dims[1];
  v.nz = dims[2];
  const auto sp = sidecar.at("voxel_spacing").get<std::vector<double>>();
  if (sp.size() != 3) raise<DataError>("volume sidecar: voxel_spacing must have three entries");
  v.spacing = {sp[0], sp[1], sp[2]};
  v.id = sidecar.value("id", base);
  if (sidecar.at("dtype").get<std::string>() != "f32le")
    raise<DataError>("volume sidecar: unsupported dtype '",
                     sidecar.at("dtype").get<std::string>(), "'");
  v.modality_names = sidecar.at("modalities").get<std::vector<std::string>>();
  for (const auto& name : v.modality_names) {
    const auto& known = known_modalities();
    if (std::find(known.begin(), known.end(), name) == known.end())
      raise<DataError>("volume sidecar: unknown modality name '", name, "'");
  }
  const bool has_labels = sidecar.at("has_labels").get<bool>();

  std::ifstream bs(base + ".blob", std::ios::binary | std::ios::ate);
  if (!bs) raise<IoError>("cannot open volume blob '", base, ".blob'");
  const std::uint64_t actual = static_cast<std::uint64_t>(bs.tellg());
  const std::uint64_t expect =
      v.voxels() * 4 * v.modality_names.size() + (has_labels ? v.voxels() : 0);
  if (actual != expect)
    raise<DataError>("volume '", base, "': blob holds ", actual, " bytes but sidecar dims give ",
                     expect);
  bs.seekg(0);
  v.modalities.resize(v.modality_names.size());
  for (auto& m : v.modalities) {
    m.resize(v.voxels());
    bs.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * 4));
  }
  if (has_labels) {
    v.labels.resize(v.voxels());
    bs.read(reinterpret_cast<char*>(v.labels.data()),
            static_cast<std::streamsize>(v.labels.size()));
    for (std::uint8_t l : v.labels)
      if (l >= kLabelCount)
        raise<DataError>("volume '", base, "': label byte ", static_cast<int>(l),
                         " outside 0..4");
  }
  if (!bs) raise<IoError>("read failed for '", base, ".blob'");
  return v;
}

// value at the nearest-rank index round(q/100 * (n-1)) of the sorted sample
inline std::size_t percentile_rank(double q, std::size_t n) {
  const double pos = q / 100.0 * static_cast<double>(n - 1);
  const auto idx = static_cast<std::size_t>(pos + 0.5);
  return std::min(idx, n - 1);
}

// Per modality over brain voxels: clamp to the [1st, 99th] percentile band,
// then standardize to mean 0, sd 1. Background zeros stay zero.
inline BrainVolume preprocess(BrainVolume v) {
  std::vector<std::size_t> mask;
  mask.reserve(v.voxels() / 2);
  for (std::size_t i = 0; i < v.voxels(); ++i)
    if (v.in_brain(i)) mask.push_back(i);
  if (mask.empty()) raise<DataError>("preprocess: volume has no nonzero voxels");

  for (std::size_t mi = 0; mi < v.modalities.size(); ++mi) {
    auto& grid = v.modalities[mi];
    std::vector<float> vals(mask.size());
    for (std::size_t k = 0; k < mask.size(); ++k) vals[k] = grid[mask[k]];

    const std::size_t lo_i = percentile_rank(1.0, vals.size());
    const std::size_t hi_i = percentile_rank(99.0, vals.size());
    std::nth_element(vals.begin(), vals.begin() + lo_i, vals.end());
    const float lo = vals[lo_i];
    std::nth_element(vals.begin(), vals.begin() + hi_i, vals.end());
    const float hi = vals[hi_i];
    for (std::size_t k : mask) grid[k] = std::clamp(grid[k], lo, hi);

    double sum = 0.0;
    for (std::size_t k : mask) sum += grid[k];
    const double mean = sum / static_cast<double>(mask.size());
    double var = 0.0;
    for (std::size_t k : mask) {
      const double d = grid[k] - mean;
      var += d * d;
    }
    const double sd = std::sqrt(var / static_cast<double>(mask.size()));
    if (sd == 0.0)
      raise<DataError>("preprocess: modality '", v.modality_names[mi],
                       "' has constant intensity");
    for (std::size_t k : mask)
      grid[k] = static_cast<float>((grid[k] - mean) / sd);
  }
  return v;
}

}  // namespace gseg

#endif  // GSEG_VOLUME_HPP_
