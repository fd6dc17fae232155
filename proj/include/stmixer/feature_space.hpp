#pragma once

#include <vector>

#include "stmixer/autograd.hpp"
#include "stmixer/nn.hpp"

namespace stmx {

// Pixels per cell of the finest (stage-2) grid.
inline constexpr double kBaseStride = 4.0;

// One backbone stage X_z with data [C_z, T_in, H_z, W_z]; downsampling 2^z.
struct StageFeatureMap {
  int stage = 2;
  Tensor data;

  std::size_t channels() const { return data.dim(0); }
  std::size_t frames() const { return data.dim(1); }
  std::size_t height() const { return data.dim(2); }
  std::size_t width() const { return data.dim(3); }
};

// 1x1x1 convolution C_z -> D, i.e. a per-position linear map over channels.
struct LateralProjection {
  Var weight;  // [C_z, D]
  Var bias;    // [D]
};

// Stride-s head of the plain-backbone path. kernel has dims [k, k, C, D] with
// k = s for downsampling (s >= 1) and k = 1/s for deconvolution (s < 1).
struct PlainHead {
  enum class Kind { kDeconv, kConv };
  Kind kind = Kind::kConv;
  std::size_t factor = 1;  // deconv upsampling factor, or conv stride
  Var kernel;
  Var bias;
};

// Multi-scale video features aligned on the stage-2 grid.
//
// data is [D, T_in, S, H_2, W_2]. levels[s] is the scale index z of slice s
// (ascending, {2, 3, 4, 5} by default). The frame covers W_2 * 4 by H_2 * 4
// pixels.
struct FeatureSpace4D {
  Var data;
  std::vector<double> levels{2, 3, 4, 5};

  std::size_t channels() const { return data.dim(0); }
  std::size_t frames() const { return data.dim(1); }
  std::size_t scales() const { return data.dim(2); }
  std::size_t grid_height() const { return data.dim(3); }
  std::size_t grid_width() const { return data.dim(4); }
  double frame_width() const { return kBaseStride * static_cast<double>(grid_width()); }
  double frame_height() const { return kBaseStride * static_cast<double>(grid_height()); }
};

// Nearest-neighbour resize of [C, T, h, w] to [C, T, H, W] with pixel-centre
// alignment; exact half-way ties take the lower source index.
Var upsample_nearest(const Var& x, std::size_t height, std::size_t width);

// Projects stages (any ascending subset of z = 2..5 with consistent pyramid
// extents) to D channels, rescales them to the stage-2 grid and stacks them
// along the scale axis.
FeatureSpace4D build_from_hierarchy(const std::vector<StageFeatureMap>& stages,
                                    const std::vector<LateralProjection>& lateral);

// Builds the four-scale pyramid from a single stride-16 map [C, T, h, w]
// using heads of strides {1/4, 1/2, 1, 2}, then rescales and stacks.
FeatureSpace4D build_from_plain(const Tensor& last_map, const std::vector<PlainHead>& heads);
// Same, when the map itself carries gradients.
FeatureSpace4D build_from_plain(const Var& last_map, const std::vector<PlainHead>& heads);

Var conv_transpose_hw(const Var& x, const Var& kernel, const Var& bias, std::size_t factor);
Var conv_strided_hw(const Var& x, const Var& kernel, const Var& bias, std::size_t stride);

// Trilinear read of one point. t is the frame, (x, y) are frame pixels and z
// the scale index. Channels [channel_begin, channel_end) are returned.
Tensor read_point(const FeatureSpace4D& space, std::size_t t, double x, double y, double z);
Tensor read_point(const FeatureSpace4D& space, std::size_t t, double x, double y, double z,
                  std::size_t channel_begin, std::size_t channel_end);

// Batched differentiable read.
// points: [N, T, G, P, 3] holding (x, y, z) for frame t of query n.
// Returns [N, G, T, P, D/G]; group g reads channel slice g.
Var sample_features(const FeatureSpace4D& space, const Var& points);

}  // namespace stmx
