#pragma once

// Test-only reference for trilinear reads of a [D, T, S, H, W] feature volume.
// It evaluates the tent-kernel sum over every lattice point after clamping the
// continuous coordinate to the volume, so it shares no code with the stencil
// implementation under test.

#include <algorithm>
#include <cmath>
#include <vector>

#include "stmixer/feature_space.hpp"

namespace stmx::testing {

inline double tent(double d) { return std::max(0.0, 1.0 - std::abs(d)); }

inline std::vector<double> brute_force_read(const FeatureSpace4D& space, std::size_t t, double x, double y, double z) {
  const std::size_t nd = space.channels(), nt = space.frames(), ns = space.scales(), nh = space.grid_height(),
                    nw = space.grid_width();
  const double gx = std::clamp(x / 4.0 - 0.5, 0.0, static_cast<double>(nw - 1));
  const double gy = std::clamp(y / 4.0 - 0.5, 0.0, static_cast<double>(nh - 1));
  // Continuous slice coordinate from the (ascending) scale levels.
  const auto& lv = space.levels;
  const double zc = std::clamp(z, lv.front(), lv.back());
  double gs = 0.0;
  for (std::size_t i = 0; i + 1 < lv.size(); ++i) {
    if (zc >= lv[i] && zc <= lv[i + 1]) {
      gs = static_cast<double>(i) + (zc - lv[i]) / (lv[i + 1] - lv[i]);
      break;
    }
  }
  const auto& data = space.data.value();
  std::vector<double> out(nd, 0.0);
  for (std::size_t c = 0; c < nd; ++c)
    for (std::size_t s = 0; s < ns; ++s)
      for (std::size_t i = 0; i < nh; ++i)
        for (std::size_t j = 0; j < nw; ++j) {
          const double w = tent(gs - static_cast<double>(s)) * tent(gy - static_cast<double>(i)) *
                           tent(gx - static_cast<double>(j));
          if (w != 0.0) out[c] += w * data[(((c * nt + t) * ns + s) * nh + i) * nw + j];
        }
  return out;
}

}  // namespace stmx::testing
