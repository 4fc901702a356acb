// Synthetic brain phantoms: an ellipsoidal head with a nested tumor
// (edema shell containing an enhancing rim around a non-enhancing region
// and a necrotic core). Modality intensities are per-(label, modality) base
// levels plus a smooth low-frequency bias field and Gaussian noise, so the
// classes are separable but not trivially so.
#ifndef GSEG_PHANTOM_HPP_
#define GSEG_PHANTOM_HPP_

#include <array>
#include <cmath>
#include <cstdint>

#include "gseg/common.hpp"
#include "gseg/volume.hpp"

namespace gseg {

struct TumorParams {
  // fraction of brain voxels left healthy; sets the edema sphere radius
  double healthy_fraction = 0.98;
  // nested radii as fractions of the edema radius, giving the clinical class
  // mix (necrosis ~10%, non-enhancing ~7%, enhancing ~21%, edema ~62% of
  // tumor volume)
  double necrotic_frac = 0.466;
  double nonenh_frac = 0.552;
  double enhancing_frac = 0.726;
  // head ellipsoid semi-axes as fractions of the half-dimensions
  std::array<double, 3> head_frac{0.84, 0.92, 0.84};
  double noise_sigma = 4.0;  // intensity units; base levels are ~100
  double bias_amplitude = 5.0;
  // explicit override of the edema radius in voxels; <= 0 derives it from
  // healthy_fraction
  double edema_radius = 0.0;
};

namespace detail {

// rows: label 0..4; columns: T1, T1C, T2, FLAIR
inline const std::array<std::array<double, 4>, 5>& intensity_table() {
  static const std::array<std::array<double, 4>, 5> t{{
      {100.0, 100.0, 100.0, 100.0},  // healthy
      {62.0, 58.0, 148.0, 92.0},     // necrosis
      {82.0, 88.0, 150.0, 168.0},    // edema
      {75.0, 80.0, 128.0, 132.0},    // non-enhancing
      {78.0, 155.0, 120.0, 125.0},   // enhancing
  }};
  return t;
}

}  // namespace detail

inline BrainVolume make_phantom(std::uint64_t seed, std::array<int, 3> dims,
                                const TumorParams& params = {}) {
  const int nx = dims[0], ny = dims[1], nz = dims[2];
  if (nx < 16 || ny < 16 || nz < 16)
    raise<DataError>("make_phantom: dims must be at least 16 voxels per axis");

  Rng rng(seed);
  BrainVolume v;
  v.id = format_msg("phantom-", seed);
  v.nx = nx;
  v.ny = ny;
  v.nz = nz;
  v.modality_names = known_modalities();
  v.modalities.assign(4, std::vector<float>(v.voxels(), 0.0f));
  v.labels.assign(v.voxels(), 0);

  const double cx = (nx - 1) / 2.0, cy = (ny - 1) / 2.0, cz = (nz - 1) / 2.0;
  const double ax = params.head_frac[0] * nx / 2.0;
  const double ay = params.head_frac[1] * ny / 2.0;
  const double az = params.head_frac[2] * nz / 2.0;

  // head volume ~ 4/3 pi ax ay az; tumor sized for the target healthy share
  const double brain_vol = 4.0 / 3.0 * 3.14159265358979 * ax * ay * az;
  double r_edema = params.edema_radius;
  if (r_edema <= 0.0) {
    const double tumor_vol = (1.0 - params.healthy_fraction) * brain_vol;
    r_edema = std::cbrt(tumor_vol * 3.0 / (4.0 * 3.14159265358979));
  }
  const double r_min = std::min(ax, std::min(ay, az));
  if (r_edema >= 0.75 * r_min)
    raise<DataError>("make_phantom: tumor radius ", r_edema,
                     " does not fit inside head (min semi-axis ", r_min, ")");

  // tumor center placed so the whole edema sphere stays inside the head
  double tx, ty, tz;
  do {
    tx = cx + rng.uniform(-0.5, 0.5) * ax;
    ty = cy + rng.uniform(-0.5, 0.5) * ay;
    tz = cz + rng.uniform(-0.5, 0.5) * az;
    const double n2 = [&] {
      const double dx = (tx - cx) / ax, dy = (ty - cy) / ay, dz = (tz - cz) / az;
      return std::sqrt(dx * dx + dy * dy + dz * dz);
    }();
    if (n2 + r_edema / r_min <= 0.92) break;
  } while (true);

  const double r_necro = params.necrotic_frac * r_edema;
  const double r_nonenh = params.nonenh_frac * r_edema;
  const double r_enh = params.enhancing_frac * r_edema;

  // random low-frequency phases per modality
  std::array<std::array<double, 3>, 4> phase;
  for (auto& p : phase)
    for (double& q : p) q = rng.uniform(0.0, 6.28318530717958647);

  const auto& levels = detail::intensity_table();
  for (int z = 0; z < nz; ++z) {
    for (int y = 0; y < ny; ++y) {
      for (int x = 0; x < nx; ++x) {
        const double hx = (x - cx) / ax, hy = (y - cy) / ay, hz = (z - cz) / az;
        if (hx * hx + hy * hy + hz * hz > 1.0) continue;  // outside head

        const std::size_t i = v.index(x, y, z);
        const double dx = x - tx, dy = y - ty, dz = z - tz;
        const double d = std::sqrt(dx * dx + dy * dy + dz * dz);
        std::uint8_t label = 0;
        if (d < r_necro) label = 1;
        else if (d < r_nonenh) label = 3;
        else if (d < r_enh) label = 4;
        else if (d < r_edema) label = 2;
        v.labels[i] = label;

        for (int m = 0; m < 4; ++m) {
          const double bias =
              params.bias_amplitude *
              (std::sin(2.0 * 3.14159265358979 * x / nx + phase[m][0]) *
                   std::sin(2.0 * 3.14159265358979 * y / ny + phase[m][1]) +
               std::sin(2.0 * 3.14159265358979 * z / nz + phase[m][2]));
          const double value =
              levels[label][m] + bias + rng.normal(0.0, params.noise_sigma);
          // keep brain voxels off exact zero so the brain mask stays intact
          v.modalities[m][i] = static_cast<float>(value == 0.0 ? 1e-3 : value);
        }
      }
    }
  }
  return v;
}

}  // namespace gseg

#endif  // GSEG_PHANTOM_HPP_
