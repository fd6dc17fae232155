#include "stmixer/feature_space.hpp"

#include <algorithm>
#include <cmath>

namespace stmx {

namespace {

// Linear interpolation stencil along one axis: value = (1-frac)*v[lo] + frac*v[hi].
struct AxisStencil {
  std::size_t lo = 0;
  std::size_t hi = 0;
  double frac = 0.0;
  double dfrac = 0.0;  // d frac / d input coordinate; 0 where clamped
};

AxisStencil grid_stencil(double g, std::size_t n, double dg) {
  AxisStencil s;
  if (n == 1) return s;
  const double top = static_cast<double>(n - 1);
  if (g < 0.0) {
    g = 0.0;
    dg = 0.0;
  } else if (g > top) {
    g = top;
    dg = 0.0;
  }
  s.lo = std::min(static_cast<std::size_t>(std::floor(g)), n - 2);
  s.hi = s.lo + 1;
  s.frac = g - static_cast<double>(s.lo);
  s.dfrac = dg;
  return s;
}

AxisStencil scale_stencil(double z, const std::vector<double>& levels) {
  AxisStencil s;
  const std::size_t n = levels.size();
  if (n == 1) return s;
  double d = 1.0;
  if (z <= levels.front()) {
    z = levels.front();
    d = 0.0;
  } else if (z >= levels.back()) {
    z = levels.back();
    d = 0.0;
  }
  std::size_t lo = 0;
  while (lo + 2 < n && levels[lo + 1] <= z) ++lo;
  const double gap = levels[lo + 1] - levels[lo];
  s.lo = lo;
  s.hi = lo + 1;
  s.frac = (z - levels[lo]) / gap;
  s.dfrac = d / gap;
  return s;
}

struct PointStencil {
  AxisStencil x, y, s;
};

PointStencil point_stencil(const FeatureSpace4D& space, double x, double y, double z) {
  if (!std::isfinite(x) || !std::isfinite(y) || !std::isfinite(z)) {
    throw InputError("read_point: non-finite coordinate");
  }
  const double inv = 1.0 / kBaseStride;
  return {grid_stencil(x * inv - 0.5, space.grid_width(), inv), grid_stencil(y * inv - 0.5, space.grid_height(), inv),
          scale_stencil(z, space.levels)};
}

void check_levels(const FeatureSpace4D& space) {
  if (space.levels.size() != space.scales()) throw ShapeError("feature space: scale levels do not match data");
  for (std::size_t i = 1; i < space.levels.size(); ++i) {
    if (!(space.levels[i] > space.levels[i - 1])) throw ShapeError("feature space: scale levels must ascend");
  }
}

// Permutes [C, T, H, W] -> [T, H, W, C] (or back) so a linear map acts on channels.
Var channels_last(const Var& x) { return permute(x, {1, 2, 3, 0}); }
Var channels_first(const Var& x) { return permute(x, {3, 0, 1, 2}); }

Var stack_scales(const std::vector<Var>& slices) {
  // Each slice is [D, T, H, W]; result [D, T, S, H, W].
  std::vector<Var> parts;
  for (const auto& s : slices) {
    parts.push_back(reshape(s, {s.dim(0), s.dim(1), 1, s.dim(2), s.dim(3)}));
  }
  return concat(parts, 2);
}

FeatureSpace4D assemble(const std::vector<Var>& maps, const std::vector<int>& stages) {
  // maps[i] has stride 2^stages[i]; rescale to the stage-2 grid.
  std::size_t h2 = 0, w2 = 0;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    const std::size_t f = std::size_t{1} << (stages[i] - 2);
    const std::size_t h = maps[i].dim(2) * f, w = maps[i].dim(3) * f;
    if (i == 0) {
      h2 = h;
      w2 = w;
    } else if (h != h2 || w != w2) {
      throw ShapeError("pyramid extents are inconsistent at stage " + std::to_string(stages[i]));
    }
  }
  std::vector<Var> slices;
  for (const auto& m : maps) slices.push_back(m.dim(2) == h2 && m.dim(3) == w2 ? m : upsample_nearest(m, h2, w2));
  FeatureSpace4D space;
  space.data = stack_scales(slices);
  space.levels.assign(stages.begin(), stages.end());
  return space;
}

}  // namespace

Var upsample_nearest(const Var& x, std::size_t height, std::size_t width) {
  if (x.dims().size() != 4) throw ShapeError("upsample_nearest expects [C, T, h, w], got " + shape_str(x.dims()));
  const std::size_t c = x.dim(0), t = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h == 0 || w == 0) throw ShapeError("upsample_nearest: empty input");
  auto nearest = [](std::size_t i, std::size_t in, std::size_t out) {
    const double s = (static_cast<double>(i) + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    const double r = std::ceil(s - 0.5);  // half-way rounds down
    return static_cast<std::size_t>(std::clamp(r, 0.0, static_cast<double>(in - 1)));
  };
  std::vector<std::size_t> row_src(height), col_src(width);
  for (std::size_t i = 0; i < height; ++i) row_src[i] = nearest(i, h, height);
  for (std::size_t j = 0; j < width; ++j) col_src[j] = nearest(j, w, width);
  std::vector<std::size_t> src;
  src.reserve(c * t * height * width);
  for (std::size_t ct = 0; ct < c * t; ++ct)
    for (std::size_t i = 0; i < height; ++i)
      for (std::size_t j = 0; j < width; ++j) src.push_back((ct * h + row_src[i]) * w + col_src[j]);
  return gather(x, {c, t, height, width}, std::move(src));
}

FeatureSpace4D build_from_hierarchy(const std::vector<StageFeatureMap>& stages,
                                    const std::vector<LateralProjection>& lateral) {
  if (stages.empty()) throw ShapeError("build_from_hierarchy: no stages");
  if (stages.size() != lateral.size()) throw ShapeError("build_from_hierarchy: one lateral projection per stage");
  std::vector<Var> maps;
  std::vector<int> ids;
  const std::size_t frames = stages[0].frames();
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& s = stages[i];
    if (s.stage < 2 || s.stage > 5 || (i > 0 && s.stage <= stages[i - 1].stage)) {
      throw ShapeError("build_from_hierarchy: stages must be ascending within 2..5");
    }
    if (s.data.rank() != 4 || s.frames() != frames) throw ShapeError("build_from_hierarchy: stage map dims");
    if (lateral[i].weight.dims().size() != 2 || lateral[i].weight.dim(0) != s.channels()) {
      throw ShapeError("build_from_hierarchy: lateral projection does not match C_z at stage " + std::to_string(s.stage));
    }
    maps.push_back(channels_first(linear(channels_last(constant(s.data)), lateral[i].weight, lateral[i].bias)));
    ids.push_back(s.stage);
  }
  const std::size_t d = maps[0].dim(0);
  for (const auto& m : maps)
    if (m.dim(0) != d) throw ShapeError("build_from_hierarchy: lateral projections disagree on D");
  return assemble(maps, ids);
}

Var conv_transpose_hw(const Var& x, const Var& kernel, const Var& bias, std::size_t factor) {
  const std::size_t c = x.dim(0), t = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (kernel.dims() != Shape{factor, factor, c, kernel.dim(3)}) throw ShapeError("deconv kernel " + shape_str(kernel.dims()));
  const std::size_t d = kernel.dim(3);
  // [C, k, k, D] so that each input position emits a k x k x D block.
  const Var k_flat = reshape(permute(kernel, {2, 0, 1, 3}), {c, factor * factor * d});
  const Var blocks = matmul(channels_last(x), k_flat);  // [T, h, w, k*k*D]
  const std::size_t oh = h * factor, ow = w * factor;
  std::vector<std::size_t> src;
  src.reserve(d * t * oh * ow);
  for (std::size_t o = 0; o < d; ++o)
    for (std::size_t ti = 0; ti < t; ++ti)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          const std::size_t a = i % factor, b = j % factor;
          src.push_back((((ti * h + i / factor) * w + j / factor) * factor + a) * factor * d + b * d + o);
        }
  const Var out = gather(blocks, {d, t, oh, ow}, std::move(src));
  return channels_first(add_bias(channels_last(out), bias));
}

Var conv_strided_hw(const Var& x, const Var& kernel, const Var& bias, std::size_t stride) {
  const std::size_t c = x.dim(0), t = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (kernel.dims() != Shape{stride, stride, c, kernel.dim(3)}) throw ShapeError("conv kernel " + shape_str(kernel.dims()));
  if (h % stride != 0 || w % stride != 0) {
    throw ShapeError("strided conv: extent " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by " +
                     std::to_string(stride));
  }
  const std::size_t d = kernel.dim(3);
  const std::size_t oh = h / stride, ow = w / stride;
  // Patches [T, oh, ow, k, k, C] flattened to rows of k*k*C.
  std::vector<std::size_t> src;
  src.reserve(t * oh * ow * stride * stride * c);
  for (std::size_t ti = 0; ti < t; ++ti)
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j)
        for (std::size_t a = 0; a < stride; ++a)
          for (std::size_t b = 0; b < stride; ++b)
            for (std::size_t ci = 0; ci < c; ++ci) src.push_back(((ci * t + ti) * h + i * stride + a) * w + j * stride + b);
  const Var patches = gather(x, {t, oh, ow, stride * stride * c}, std::move(src));
  const Var out = linear(patches, reshape(kernel, {stride * stride * c, d}), bias);
  return channels_first(out);
}

FeatureSpace4D build_from_plain(const Tensor& last_map, const std::vector<PlainHead>& heads) {
  return build_from_plain(constant(last_map), heads);
}

FeatureSpace4D build_from_plain(const Var& last_map, const std::vector<PlainHead>& heads) {
  if (last_map.dims().size() != 4) throw ShapeError("build_from_plain expects [C, T, h, w]");
  if (heads.size() != 4) throw ShapeError("build_from_plain: four heads of strides {1/4, 1/2, 1, 2} required");
  std::vector<Var> maps;
  for (const auto& head : heads) {
    maps.push_back(head.kind == PlainHead::Kind::kDeconv
                       ? conv_transpose_hw(last_map, head.kernel, head.bias, head.factor)
                       : conv_strided_hw(last_map, head.kernel, head.bias, head.factor));
  }
  // Strides relative to the input: 1/4, 1/2, 1, 2 -> downsampling 4, 8, 16, 32.
  const std::vector<int> stages{2, 3, 4, 5};
  const std::size_t h = last_map.dim(2), w = last_map.dim(3);
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t expect_h = (h * 4) >> i, expect_w = (w * 4) >> i;
    if (maps[i].dim(2) != expect_h || maps[i].dim(3) != expect_w) {
      throw ShapeError("build_from_plain: head " + std::to_string(i) + " produced " + shape_str(maps[i].dims()));
    }
  }
  return assemble(maps, stages);
}

Tensor read_point(const FeatureSpace4D& space, std::size_t t, double x, double y, double z) {
  return read_point(space, t, x, y, z, 0, space.channels());
}

Tensor read_point(const FeatureSpace4D& space, std::size_t t, double x, double y, double z,
                  std::size_t channel_begin, std::size_t channel_end) {
  check_levels(space);
  if (t >= space.frames()) throw InputError("read_point: frame index out of range");
  if (channel_begin > channel_end || channel_end > space.channels()) throw ShapeError("read_point: channel range");
  const auto st = point_stencil(space, x, y, z);
  const std::size_t nt = space.frames(), ns = space.scales(), nh = space.grid_height(), nw = space.grid_width();
  const auto data = space.data.value().data();
  Tensor out({channel_end - channel_begin});
  const std::size_t sx[2] = {st.x.lo, st.x.hi}, sy[2] = {st.y.lo, st.y.hi}, ss[2] = {st.s.lo, st.s.hi};
  const double wx[2] = {1.0 - st.x.frac, st.x.frac}, wy[2] = {1.0 - st.y.frac, st.y.frac},
               ws[2] = {1.0 - st.s.frac, st.s.frac};
  for (std::size_t c = channel_begin; c < channel_end; ++c) {
    double acc = 0.0;
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2; ++b)
        for (int e = 0; e < 2; ++e) {
          const double wgt = ws[a] * wy[b] * wx[e];
          if (wgt == 0.0) continue;
          acc += wgt * data[(((c * nt + t) * ns + ss[a]) * nh + sy[b]) * nw + sx[e]];
        }
    out[c - channel_begin] = acc;
  }
  return out;
}

Var sample_features(const FeatureSpace4D& space, const Var& points) {
  check_levels(space);
  const Shape& pd = points.dims();
  if (pd.size() != 5 || pd[4] != 3) throw ShapeError("sample_features: points must be [N, T, G, P, 3], got " + shape_str(pd));
  const std::size_t n = pd[0], t = pd[1], g = pd[2], p = pd[3];
  const std::size_t dims = space.channels();
  if (t != space.frames()) throw ShapeError("sample_features: point frames do not match feature space");
  if (g == 0 || dims % g != 0) throw ShapeError("sample_features: channels not divisible by groups");
  const std::size_t dg = dims / g;
  const std::size_t nt = space.frames(), ns = space.scales(), nh = space.grid_height(), nw = space.grid_width();

  // Output [N, G, T, P, dg]; stencils are kept for the backward pass.
  auto stencils = std::make_shared<std::vector<PointStencil>>();
  stencils->reserve(n * t * g * p);
  const auto pv = points.value().data();
  for (std::size_t i = 0; i < n * t * g * p; ++i) {
    stencils->push_back(point_stencil(space, pv[3 * i], pv[3 * i + 1], pv[3 * i + 2]));
  }
  auto offset = [=](std::size_t c, std::size_t ti, std::size_t s, std::size_t y, std::size_t x) {
    return (((c * nt + ti) * ns + s) * nh + y) * nw + x;
  };
  auto point_index = [=](std::size_t qi, std::size_t ti, std::size_t gi, std::size_t pi) {
    return ((qi * t + ti) * g + gi) * p + pi;
  };
  auto out_index = [=](std::size_t qi, std::size_t gi, std::size_t ti, std::size_t pi) {
    return (((qi * g + gi) * t + ti) * p + pi) * dg;
  };

  Tensor out({n, g, t, p, dg});
  const auto data = space.data.value().data();
  for (std::size_t qi = 0; qi < n; ++qi)
    for (std::size_t ti = 0; ti < t; ++ti)
      for (std::size_t gi = 0; gi < g; ++gi)
        for (std::size_t pi = 0; pi < p; ++pi) {
          const auto& st = (*stencils)[point_index(qi, ti, gi, pi)];
          const std::size_t sx[2] = {st.x.lo, st.x.hi}, sy[2] = {st.y.lo, st.y.hi}, ss[2] = {st.s.lo, st.s.hi};
          const double wx[2] = {1.0 - st.x.frac, st.x.frac}, wy[2] = {1.0 - st.y.frac, st.y.frac},
                       ws[2] = {1.0 - st.s.frac, st.s.frac};
          double* o = out.data().data() + out_index(qi, gi, ti, pi);
          for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b)
              for (int e = 0; e < 2; ++e) {
                const double wgt = ws[a] * wy[b] * wx[e];
                if (wgt == 0.0) continue;
                for (std::size_t c = 0; c < dg; ++c) o[c] += wgt * data[offset(gi * dg + c, ti, ss[a], sy[b], sx[e])];
              }
        }

  return make_op(std::move(out), {space.data, points}, [=](Node& self) {
    auto& pdata = *self.parents[0];
    auto& ppts = *self.parents[1];
    const auto fv = pdata.value.data();
    const auto gy = self.grad.data();
    for (std::size_t qi = 0; qi < n; ++qi)
      for (std::size_t ti = 0; ti < t; ++ti)
        for (std::size_t gi = 0; gi < g; ++gi)
          for (std::size_t pi = 0; pi < p; ++pi) {
            const std::size_t pidx = point_index(qi, ti, gi, pi);
            const auto& st = (*stencils)[pidx];
            const std::size_t sx[2] = {st.x.lo, st.x.hi}, sy[2] = {st.y.lo, st.y.hi}, ss[2] = {st.s.lo, st.s.hi};
            const double wx[2] = {1.0 - st.x.frac, st.x.frac}, wy[2] = {1.0 - st.y.frac, st.y.frac},
                         ws[2] = {1.0 - st.s.frac, st.s.frac};
            const double* go = gy.data() + out_index(qi, gi, ti, pi);
            if (pdata.requires_grad) {
              auto gf = pdata.grad_buffer().data();
              for (int a = 0; a < 2; ++a)
                for (int b = 0; b < 2; ++b)
                  for (int e = 0; e < 2; ++e) {
                    const double wgt = ws[a] * wy[b] * wx[e];
                    if (wgt == 0.0) continue;
                    for (std::size_t c = 0; c < dg; ++c) gf[offset(gi * dg + c, ti, ss[a], sy[b], sx[e])] += wgt * go[c];
                  }
            }
            if (ppts.requires_grad && (st.x.dfrac != 0.0 || st.y.dfrac != 0.0 || st.s.dfrac != 0.0)) {
              // d value / d frac along each axis: difference of the two faces.
              double dx = 0.0, dyy = 0.0, ds = 0.0;
              const double sgn[2] = {-1.0, 1.0};
              for (int a = 0; a < 2; ++a)
                for (int b = 0; b < 2; ++b)
                  for (int e = 0; e < 2; ++e) {
                    double dot = 0.0;
                    for (std::size_t c = 0; c < dg; ++c) dot += go[c] * fv[offset(gi * dg + c, ti, ss[a], sy[b], sx[e])];
                    dx += sgn[e] * ws[a] * wy[b] * dot;
                    dyy += sgn[b] * ws[a] * wx[e] * dot;
                    ds += sgn[a] * wy[b] * wx[e] * dot;
                  }
              auto gp = ppts.grad_buffer().data();
              gp[3 * pidx] += dx * st.x.dfrac;
              gp[3 * pidx + 1] += dyy * st.y.dfrac;
              gp[3 * pidx + 2] += ds * st.s.dfrac;
            }
          }
  });
}

}  // namespace stmx
