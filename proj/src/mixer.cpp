#include "stmixer/mixer.hpp"

#include <cmath>

namespace stmx {

namespace {

constexpr double kGeneratorStd = 1e-3;

Linear generator(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Linear l;
  l.weight = &store.add(name + ".weight", rng.normal_tensor({in, out}, kGeneratorStd));
  l.bias = &store.add(name + ".bias", rng.uniform_tensor({out}, -bound, bound));
  return l;
}

// Per-query matrices [B * G, rows, cols] from a generator or a static parameter.
Var mixing_matrices(const Linear& gen, const Parameter* fixed, const Var& q, std::size_t groups, std::size_t rows,
                    std::size_t cols) {
  const std::size_t b = q.dim(0);
  const Var flat = fixed != nullptr ? repeat_new_axis(fixed->var(), 0, b) : gen(q);
  return reshape(flat, {b * groups, rows, cols});
}

void check_inputs(const AdaptiveMixer& m, const Var& q, const Var& f) {
  if (q.dims().size() != 2 || q.dim(1) != m.dim) throw ShapeError("adaptive mixing: query must be [B, " + std::to_string(m.dim) + "], got " + shape_str(q.dims()));
  if (f.dims() != Shape{q.dim(0), m.points, m.dim})
    throw ShapeError("adaptive mixing: features must be [B, P, D], got " + shape_str(f.dims()));
}

// [B, P, D] -> grouped [B * G, P, d].
Var to_groups(const Var& f, std::size_t groups) {
  const std::size_t b = f.dim(0), p = f.dim(1), d = f.dim(2) / groups;
  return reshape(permute(reshape(f, {b, p, groups, d}), {0, 2, 1, 3}), {b * groups, p, d});
}

Var grouped_channel_mix(const AdaptiveMixer& m, const Var& q, const Var& f) {
  const std::size_t d = m.group_width();
  const Var mc = mixing_matrices(m.channel_gen, m.channel_static, q, m.groups, d, d);
  return relu(m.channel_norm(bmm(to_groups(f, m.groups), mc)));
}

// [B * G, P, d] -> [B * G, d, P'].
Var grouped_point_mix(const AdaptiveMixer& m, const Var& q, const Var& cm) {
  const Var mp = mixing_matrices(m.point_gen, m.point_static, q, m.groups, m.points, m.out_points);
  return relu(m.point_norm(bmm(permute(cm, {0, 2, 1}), mp)));
}

}  // namespace

AdaptiveMixer AdaptiveMixer::create(ParameterStore& store, const std::string& name, std::size_t dim,
                                    std::size_t groups, std::size_t points, std::size_t out_points, Rng& rng,
                                    bool fixed) {
  if (groups == 0 || dim % groups != 0) throw ConfigError("mixer: groups must divide D");
  if (points == 0 || out_points == 0) throw ConfigError("mixer: point counts must be positive");
  AdaptiveMixer m;
  m.dim = dim;
  m.groups = groups;
  m.points = points;
  m.out_points = out_points;
  m.fixed = fixed;
  const std::size_t d = dim / groups;
  if (fixed) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    m.channel_static = &store.add(name + ".channel_static", rng.uniform_tensor({groups * d * d}, -bound, bound));
    const double pbound = 1.0 / std::sqrt(static_cast<double>(points));
    m.point_static = &store.add(name + ".point_static", rng.uniform_tensor({groups * points * out_points}, -pbound, pbound));
  } else {
    m.channel_gen = generator(store, name + ".channel_gen", dim, groups * d * d, rng);
    m.point_gen = generator(store, name + ".point_gen", dim, groups * points * out_points, rng);
  }
  m.channel_norm = LayerNorm::create(store, name + ".channel_norm", d);
  m.point_norm = LayerNorm::create(store, name + ".point_norm", out_points);
  m.output = Linear::zeros(store, name + ".output", dim * out_points, dim);
  return m;
}

std::size_t AdaptiveMixer::channel_generator_size() const {
  if (fixed) return channel_static->value().size();
  return channel_gen.weight->value().size() + channel_gen.bias->value().size();
}

Var channel_mix(const AdaptiveMixer& mixer, const Var& q, const Var& f) {
  check_inputs(mixer, q, f);
  const std::size_t b = q.dim(0), p = mixer.points, g = mixer.groups, d = mixer.group_width();
  const Var cm = grouped_channel_mix(mixer, q, f);
  return reshape(permute(reshape(cm, {b, g, p, d}), {0, 2, 1, 3}), {b, p, mixer.dim});
}

Var point_mix(const AdaptiveMixer& mixer, const Var& q, const Var& cm) {
  check_inputs(mixer, q, cm);
  const Var pm = grouped_point_mix(mixer, q, to_groups(cm, mixer.groups));
  return reshape(pm, {q.dim(0), mixer.dim, mixer.out_points});
}

Var adaptive_mix(const AdaptiveMixer& mixer, const Var& q, const Var& f) {
  check_inputs(mixer, q, f);
  const Var pm = grouped_point_mix(mixer, q, grouped_channel_mix(mixer, q, f));
  return add(q, mixer.output(reshape(pm, {q.dim(0), mixer.dim * mixer.out_points})));
}

MixingStrategy parse_mixing(const std::string& text) {
  if (text == "decoupled") return MixingStrategy::kDecoupled;
  if (text == "coupled") return MixingStrategy::kCoupled;
  if (text == "sequential") return MixingStrategy::kSequential;
  if (text == "spatial_only") return MixingStrategy::kSpatialOnly;
  if (text == "temporal_only") return MixingStrategy::kTemporalOnly;
  throw ConfigError("unknown mixing strategy '" + text + "'");
}

std::string mixing_name(MixingStrategy strategy) {
  switch (strategy) {
    case MixingStrategy::kDecoupled: return "decoupled";
    case MixingStrategy::kCoupled: return "coupled";
    case MixingStrategy::kSequential: return "sequential";
    case MixingStrategy::kSpatialOnly: return "spatial_only";
    case MixingStrategy::kTemporalOnly: return "temporal_only";
  }
  return "decoupled";
}

MixingBlock MixingBlock::create(ParameterStore& store, const std::string& name, MixingStrategy strategy,
                                std::size_t dim, std::size_t groups, std::size_t points, std::size_t frames,
                                std::size_t point_ratio, std::size_t frame_ratio, Rng& rng, bool fixed) {
  MixingBlock block;
  block.strategy = strategy;
  block.has_spatial = strategy != MixingStrategy::kTemporalOnly;
  block.has_temporal = strategy != MixingStrategy::kSpatialOnly && strategy != MixingStrategy::kCoupled;
  const std::size_t spatial_points = strategy == MixingStrategy::kCoupled ? points * frames : points;
  if (block.has_spatial)
    block.spatial = AdaptiveMixer::create(store, name + ".spatial", dim, groups, spatial_points,
                                          point_ratio * spatial_points, rng, fixed);
  if (block.has_temporal)
    block.temporal = AdaptiveMixer::create(store, name + ".temporal", dim, groups, frames, frame_ratio * frames, rng, fixed);
  return block;
}

std::pair<Var, Var> mix_queries(const MixingBlock& block, DetectorMode mode, const Var& spatial,
                                const Var& temporal, const Var& features) {
  const std::size_t n = features.dim(0), t = features.dim(1), p = features.dim(2), d = features.dim(3);
  const std::size_t l = spatial.dim(1);
  if (spatial.dim(0) != n || temporal.dims() != Shape{n, d}) throw ShapeError("mix_queries: query/feature mismatch");
  const bool tubelet = mode == DetectorMode::kTubelet;
  if (tubelet ? l != t : l != 1) throw ShapeError("mix_queries: spatial query length does not match mode");

  const Var qs = reshape(spatial, {n * l, d});
  Var spatial_in;  // [N * L, P_spatial, D]
  if (block.strategy == MixingStrategy::kCoupled) {
    const Var all = reshape(features, {n, t * p, d});
    spatial_in = tubelet ? reshape(repeat_new_axis(all, 1, t), {n * t, t * p, d}) : all;
  } else {
    spatial_in = tubelet ? reshape(features, {n * t, p, d}) : mean_axis(features, 1);
  }
  const Var sp = mean_axis(features, 2);  // [N, T, D]

  Var qs_out = qs, qt_out = temporal;
  switch (block.strategy) {
    case MixingStrategy::kDecoupled:
    case MixingStrategy::kCoupled:
    case MixingStrategy::kSpatialOnly:
      qs_out = adaptive_mix(block.spatial, qs, spatial_in);
      if (block.has_temporal) qt_out = adaptive_mix(block.temporal, temporal, sp);
      break;
    case MixingStrategy::kTemporalOnly:
      qt_out = adaptive_mix(block.temporal, temporal, sp);
      break;
    case MixingStrategy::kSequential: {
      qs_out = adaptive_mix(block.spatial, qs, spatial_in);
      const Var sp_rows = tubelet ? reshape(repeat_new_axis(sp, 1, t), {n * t, t, d}) : sp;
      qs_out = adaptive_mix(block.temporal, qs_out, sp_rows);
      break;
    }
  }
  return {reshape(qs_out, {n, l, d}), qt_out};
}

}  // namespace stmx
