#include "stmixer/query_geometry.hpp"

#include <cmath>
#include <numbers>

namespace stmx {

namespace {

Var component(const Var& x, std::size_t i) {
  const std::size_t axis = x.dims().size() - 1;
  return slice(x, axis, i, i + 1);
}

// [..., 1] box width and height from [..., 4] (x, y, z, r).
Var box_width(const Var& q) { return exp(scale(sub(component(q, 2), component(q, 3)), std::numbers::ln2)); }
Var box_height(const Var& q) { return exp(scale(add(component(q, 2), component(q, 3)), std::numbers::ln2)); }

Var ones_like(const Var& x) { return constant(Tensor::full(x.dims(), 1.0)); }

}  // namespace

DetectorMode parse_mode(const std::string& text) {
  if (text == "keyframe") return DetectorMode::kKeyframe;
  if (text == "tubelet") return DetectorMode::kTubelet;
  throw ConfigError("unknown mode '" + text + "' (expected keyframe or tubelet)");
}

std::string mode_name(DetectorMode mode) { return mode == DetectorMode::kKeyframe ? "keyframe" : "tubelet"; }

PositionalQuery whole_frame_query(double width, double height) {
  return {width / 2, height / 2, 0.5 * std::log2(width * height), 0.5 * std::log2(height / width)};
}

Box decode_box(const PositionalQuery& q) {
  const double w = std::exp2(q.z - q.r), h = std::exp2(q.z + q.r);
  return {q.x - w / 2, q.y - h / 2, q.x + w / 2, q.y + h / 2};
}

PositionalQuery encode_box(const Box& box) {
  const double w = box.width(), h = box.height();
  if (!(w > 0) || !(h > 0)) throw InputError("encode_box: box must have positive width and height");
  return {(box.x1 + box.x2) / 2, (box.y1 + box.y2) / 2, 0.5 * std::log2(w * h), 0.5 * std::log2(h / w)};
}

Var decode_boxes(const Var& positional) {
  const Var x = component(positional, 0), y = component(positional, 1);
  const Var hw = scale(box_width(positional), 0.5), hh = scale(box_height(positional), 0.5);
  return concat({sub(x, hw), sub(y, hh), add(x, hw), add(y, hh)}, positional.dims().size() - 1);
}

QueryInit QueryInit::create(ParameterStore& store, const std::string& name, std::size_t count, std::size_t dim,
                            Rng& rng) {
  QueryInit init;
  init.spatial = &store.add(name + ".spatial", rng.normal_tensor({count, dim}, 1.0));
  init.temporal = &store.add(name + ".temporal", rng.normal_tensor({count, dim}, 1.0));
  return init;
}

QuerySet QueryInit::make(DetectorMode mode, std::size_t frames, double frame_width, double frame_height) const {
  const std::size_t n = spatial->value().dim(0);
  const std::size_t length = mode == DetectorMode::kKeyframe ? 1 : frames;
  if (length == 0) throw ConfigError("query length must be positive");
  const PositionalQuery whole = whole_frame_query(frame_width, frame_height);
  Tensor pos({n, length, 4});
  for (std::size_t i = 0; i < n * length; ++i) {
    pos[4 * i] = whole.x;
    pos[4 * i + 1] = whole.y;
    pos[4 * i + 2] = whole.z;
    pos[4 * i + 3] = whole.r;
  }
  QuerySet q;
  q.mode = mode;
  q.spatial = repeat_new_axis(spatial->var(), 1, length);
  q.positional = constant(std::move(pos));
  q.temporal = temporal->var();
  return q;
}

OffsetHead OffsetHead::create(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t groups,
                              std::size_t points, Rng& rng) {
  OffsetHead head;
  head.groups = groups;
  head.points = points;
  head.proj = Linear::zeros(store, name, dim, groups * points * 3);
  Tensor& b = head.proj.bias->value();
  for (std::size_t i = 0; i < b.size(); i += 3) {
    b[i] = rng.uniform(-0.5, 0.5);
    b[i + 1] = rng.uniform(-0.5, 0.5);
  }
  return head;
}

Var generate_points(const QuerySet& queries, const OffsetHead* head, const SamplingSpec& spec) {
  const std::size_t n = queries.count(), l = queries.length();
  const std::size_t g = spec.groups, p = spec.points_per_frame();
  if (queries.mode == DetectorMode::kTubelet && l != spec.frames)
    throw ShapeError("tubelet queries need one spatial query per frame");
  if (queries.mode == DetectorMode::kKeyframe && l != 1) throw ShapeError("keyframe queries have length 1");

  Var offsets;
  if (spec.kind == SamplingKind::kAdaptive) {
    if (head == nullptr || head->groups != g || head->points != p) throw ConfigError("offset head does not match");
    offsets = reshape(head->proj(queries.spatial), {n, l, g, p, 3});
  } else {
    const std::size_t m = spec.grid_side;
    if (m == 0) throw ConfigError("fixed grid sampling needs grid_side >= 1");
    Tensor grid({n, l, g, p, 3});
    for (std::size_t q = 0; q < n * l * g; ++q)
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          double* o = &grid[(q * p + i * m + j) * 3];
          o[0] = (static_cast<double>(j) + 0.5) / static_cast<double>(m) - 0.5;
          o[1] = (static_cast<double>(i) + 0.5) / static_cast<double>(m) - 0.5;
        }
    offsets = constant(std::move(grid));
  }

  const Var& pos = queries.positional;
  const Var xyz = slice(pos, 2, 0, 3);
  const Var w = box_width(pos);
  const Var step = concat({w, box_height(pos), ones_like(w)}, 2);
  auto expand = [&](const Var& v) { return repeat_new_axis(repeat_new_axis(v, 2, p), 2, g); };
  Var points = add(expand(xyz), mul(offsets, expand(step)));
  if (queries.mode == DetectorMode::kKeyframe) points = repeat_new_axis(reshape(points, {n, g, p, 3}), 1, spec.frames);
  return points;
}

Var update_positional(const Var& positional, const Var& delta) {
  if (positional.dims() != delta.dims()) throw ShapeError("update_positional: delta shape mismatch");
  const Var w = box_width(positional);
  const Var one = ones_like(w);
  const Var step = concat({w, box_height(positional), one, one}, positional.dims().size() - 1);
  return add(positional, mul(delta, step));
}

}  // namespace stmx
