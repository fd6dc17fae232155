#pragma once

#include <array>
#include <string>

#include "stmixer/autograd.hpp"
#include "stmixer/nn.hpp"

namespace stmx {

enum class DetectorMode { kKeyframe, kTubelet };

DetectorMode parse_mode(const std::string& text);
std::string mode_name(DetectorMode mode);

// Corner box in frame pixels.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool operator==(const Box&) const = default;
};

// Centre (x, y) in pixels, z = log2 of the geometric-mean side, r = log2 of
// sqrt(height / width). Width is 2^(z-r) and height 2^(z+r).
struct PositionalQuery {
  double x = 0, y = 0, z = 0, r = 0;
};

PositionalQuery whole_frame_query(double width, double height);
Box decode_box(const PositionalQuery& q);
// Throws InputError unless the box has positive width and height.
PositionalQuery encode_box(const Box& box);

// Differentiable decode of [..., 4] (x, y, z, r) into [..., 4] corners.
Var decode_boxes(const Var& positional);

// Query state flowing through the decoder.
//   spatial    [N, L, D]   L = 1 (keyframe) or T (tubelet)
//   positional [N, L, 4]
//   temporal   [N, D]
struct QuerySet {
  Var spatial;
  Var positional;
  Var temporal;
  DetectorMode mode = DetectorMode::kKeyframe;

  std::size_t count() const { return spatial.dim(0); }
  std::size_t length() const { return spatial.dim(1); }
  std::size_t dim() const { return spatial.dim(2); }
};

// Learned initial spatial and temporal queries.
struct QueryInit {
  Parameter* spatial = nullptr;   // [N, D]
  Parameter* temporal = nullptr;  // [N, D]

  static QueryInit create(ParameterStore& store, const std::string& name, std::size_t count, std::size_t dim, Rng& rng);
  // Tubelet mode repeats the shared spatial initialization over `frames`.
  QuerySet make(DetectorMode mode, std::size_t frames, double frame_width, double frame_height) const;
};

enum class SamplingKind { kAdaptive, kFixedGrid };

// Per-group offset regression D -> G * P * 3, stored as one linear map whose
// output is laid out [G, P, (dx, dy, dz)].
struct OffsetHead {
  Linear proj;
  std::size_t groups = 1;
  std::size_t points = 1;

  // Zero weights; dx, dy biases uniform in [-0.5, 0.5]; dz biases zero.
  static OffsetHead create(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t groups,
                           std::size_t points, Rng& rng);
};

struct SamplingSpec {
  SamplingKind kind = SamplingKind::kAdaptive;
  std::size_t groups = 1;
  std::size_t points = 1;     // adaptive: P_in
  std::size_t grid_side = 0;  // fixed grid: m, giving m * m points
  std::size_t frames = 1;     // T_in

  std::size_t points_per_frame() const { return kind == SamplingKind::kFixedGrid ? grid_side * grid_side : points; }
};

// Sampling coordinates [N, T_in, G, P, 3] with (x, y, z).
// Keyframe queries (L = 1) are copied to every frame; tubelet queries (L = T_in)
// produce the points of their own frame. The offset head is ignored in fixed
// grid mode, which places an m x m lattice inside each decoded box.
Var generate_points(const QuerySet& queries, const OffsetHead* head, const SamplingSpec& spec);

// (x, y, z, r) += (dx * w, dy * h, dz, dr) with w, h the current box size.
// delta is [N, L, 4].
Var update_positional(const Var& positional, const Var& delta);

}  // namespace stmx
