#include "stmixer/decoder.hpp"

#include <algorithm>
#include <numeric>

namespace stmx {

namespace {

Var self_attend(const Var& x, const LayerNorm& norm, const AttentionParams& attn) {
  const Var h = norm(x);
  return add(x, multi_head_attention(h, h, h, attn));
}

}  // namespace

ClassifierKind parse_classifier(const std::string& text) {
  if (text == "short_term") return ClassifierKind::kShortTerm;
  if (text == "long_term") return ClassifierKind::kLongTerm;
  throw ConfigError("unknown classifier '" + text + "' (expected short_term or long_term)");
}

std::string classifier_name(ClassifierKind kind) {
  return kind == ClassifierKind::kShortTerm ? "short_term" : "long_term";
}

DecoderConfig DecoderConfig::defaults(DetectorMode mode) {
  DecoderConfig c;
  c.mode = mode;
  c.modules = mode == DetectorMode::kKeyframe ? 6 : 3;
  if (mode == DetectorMode::kTubelet) c.classes = 24;
  return c;
}

SamplingSpec DecoderConfig::sampling_spec() const { return {sampling, groups, points, grid_side, frames}; }

void DecoderConfig::validate() const {
  if (queries == 0) throw ConfigError("queries must be >= 1");
  if (modules == 0) throw ConfigError("modules must be >= 1");
  if (classes == 0) throw ConfigError("classes must be >= 1");
  if (frames == 0) throw ConfigError("frames must be >= 1");
  if (groups == 0 || dim % groups != 0) throw ConfigError("groups must divide dim");
  if (heads == 0 || dim % heads != 0) throw ConfigError("heads must divide dim");
  if (point_ratio == 0 || frame_ratio == 0) throw ConfigError("out-pattern ratios must be >= 1");
  if (sampling == SamplingKind::kAdaptive && points == 0) throw ConfigError("points must be >= 1");
  if (sampling == SamplingKind::kFixedGrid && grid_side == 0) throw ConfigError("grid_side must be >= 1");
  if (classifier == ClassifierKind::kLongTerm) {
    if (mode != DetectorMode::kKeyframe) throw ConfigError("the long-term classifier needs keyframe mode");
    if (bank_rows == 0 || bank_window == 0) throw ConfigError("bank_rows and bank_window must be >= 1");
    if (cross_layers == 0) throw ConfigError("cross_layers must be >= 1");
  }
}

LongTermClassifier LongTermClassifier::create(ParameterStore& store, const std::string& name, std::size_t dim,
                                              std::size_t heads, std::size_t layers, std::size_t classes, Rng& rng) {
  LongTermClassifier c;
  for (std::size_t i = 0; i < layers; ++i)
    c.layers.push_back(AttentionParams::create(store, name + ".cross" + std::to_string(i), 2 * dim, heads, rng));
  c.head = FFN::create(store, name + ".head", 4 * dim, 2 * dim, classes, rng);
  return c;
}

Decoder Decoder::create(ParameterStore& store, const DecoderConfig& config, Rng& rng) {
  config.validate();
  Decoder dec;
  dec.config = config;
  const std::size_t d = config.dim;
  const std::size_t sampled = config.sampling_spec().points_per_frame();
  dec.init = QueryInit::create(store, "query", config.queries, d, rng);
  for (std::size_t m = 0; m < config.modules; ++m) {
    const std::string p = "asam" + std::to_string(m);
    AsamModule mod;
    mod.spatial_norm = LayerNorm::create(store, p + ".spatial_norm", d);
    mod.spatial_attn = AttentionParams::create(store, p + ".spatial_attn", d, config.heads, rng);
    if (config.mode == DetectorMode::kTubelet) {
      mod.instance_norm = LayerNorm::create(store, p + ".instance_norm", d);
      mod.instance_attn = AttentionParams::create(store, p + ".instance_attn", d, config.heads, rng);
    }
    mod.temporal_norm = LayerNorm::create(store, p + ".temporal_norm", d);
    mod.temporal_attn = AttentionParams::create(store, p + ".temporal_attn", d, config.heads, rng);
    if (config.sampling == SamplingKind::kAdaptive)
      mod.offsets = OffsetHead::create(store, p + ".offsets", d, config.groups, config.points, rng);
    mod.mixing = MixingBlock::create(store, p + ".mix", config.mixing, d, config.groups, sampled, config.frames,
                                     config.point_ratio, config.frame_ratio, rng, config.fixed_mixing);
    mod.box_head = FFN::create(store, p + ".box_head", d, 2 * d, 4, rng, true);
    if (config.mode == DetectorMode::kKeyframe) {
      mod.human_head = FFN::create(store, p + ".human_head", d, 2 * d, 2, rng);
      if (config.classifier == ClassifierKind::kShortTerm)
        mod.action_head = FFN::create(store, p + ".action_head", 2 * d, 2 * d, config.classes, rng);
      else
        mod.long_term = LongTermClassifier::create(store, p + ".long_term", d, config.heads, config.cross_layers,
                                                   config.classes, rng);
    } else {
      mod.class_head = FFN::create(store, p + ".class_head", 2 * d, 2 * d, config.classes + 1, rng);
    }
    dec.modules.push_back(std::move(mod));
  }
  return dec;
}

QuerySet asam_forward(const AsamModule& module, const DecoderConfig& config, const QuerySet& queries,
                      const FeatureSpace4D& space) {
  if (queries.mode != config.mode) throw ConfigError("query mode does not match the decoder mode");
  if (space.frames() != config.frames)
    throw ShapeError("feature space has " + std::to_string(space.frames()) + " frames, decoder expects " +
                     std::to_string(config.frames));
  const std::size_t n = queries.count(), d = queries.dim();
  if (d != config.dim) throw ShapeError("query width does not match the decoder");

  // Self-attention.
  Var qs = queries.spatial;
  if (config.mode == DetectorMode::kKeyframe) {
    qs = reshape(self_attend(reshape(qs, {n, d}), module.spatial_norm, module.spatial_attn), {n, 1, d});
  } else {
    const Var per_frame = self_attend(permute(qs, {1, 0, 2}), module.spatial_norm, module.spatial_attn);
    qs = self_attend(permute(per_frame, {1, 0, 2}), module.instance_norm, module.instance_attn);
  }
  const Var qt = self_attend(queries.temporal, module.temporal_norm, module.temporal_attn);

  // Adaptive sampling.
  QuerySet attended{qs, queries.positional, qt, queries.mode};
  const SamplingSpec spec = config.sampling_spec();
  const Var points = generate_points(attended, config.sampling == SamplingKind::kAdaptive ? &module.offsets : nullptr, spec);
  const std::size_t t = config.frames, p = spec.points_per_frame();
  const Var sampled = sample_features(space, points);  // [N, G, T, P, d]
  const Var features = reshape(permute(sampled, {0, 2, 3, 1, 4}), {n, t, p, d});

  // Mixing and positional update.
  auto [qs_mixed, qt_mixed] = mix_queries(module.mixing, config.mode, qs, qt, features);
  const Var delta = module.box_head(qs_mixed);
  return {qs_mixed, update_positional(queries.positional, delta), qt_mixed, queries.mode};
}

Var long_term_classify(const LongTermClassifier& classifier, const Var& s, const Tensor& window) {
  if (window.rank() != 2 || window.dim(1) != s.dim(1))
    throw ShapeError("long-term window must be [rows, " + std::to_string(s.dim(1)) + "]");
  const Var bank = constant(window);
  Var s_prime = s;
  for (const auto& layer : classifier.layers) s_prime = multi_head_attention(s_prime, bank, bank, layer);
  return classifier.head(concat({s, s_prime}, 1));
}

DetectionOutput predict_heads_keyframe(const AsamModule& module, const DecoderConfig& config, const QuerySet& queries,
                                       const Tensor* bank_window) {
  if (queries.mode != DetectorMode::kKeyframe || queries.length() != 1)
    throw ConfigError("keyframe heads need keyframe queries");
  const std::size_t n = queries.count(), d = queries.dim();
  const Var qs = reshape(queries.spatial, {n, d});
  const Var s = concat({qs, queries.temporal}, 1);
  DetectionOutput out;
  out.boxes = reshape(decode_boxes(queries.positional), {n, 4});
  out.human = softmax(module.human_head(qs));
  if (config.classifier == ClassifierKind::kLongTerm) {
    if (bank_window == nullptr) throw ConfigError("the long-term classifier needs a query bank");
    out.action = sigmoid(long_term_classify(*module.long_term, s, *bank_window));
  } else {
    out.action = sigmoid(module.action_head(s));
  }
  out.queries = queries;
  return out;
}

DetectionOutput predict_heads_tubelet(const AsamModule& module, const QuerySet& queries) {
  if (queries.mode != DetectorMode::kTubelet) throw ConfigError("tubelet heads need tubelet queries");
  DetectionOutput out;
  out.boxes = decode_boxes(queries.positional);
  out.classes = softmax(module.class_head(concat({mean_axis(queries.spatial, 1), queries.temporal}, 1)));
  out.queries = queries;
  return out;
}

DecoderOutput decoder_forward(const Decoder& decoder, const FeatureSpace4D& space, const Tensor* bank_window) {
  const DecoderConfig& c = decoder.config;
  QuerySet q = decoder.init.make(c.mode, c.frames, space.frame_width(), space.frame_height());
  DecoderOutput out;
  for (const auto& module : decoder.modules) {
    q = asam_forward(module, c, q, space);
    out.stages.push_back(c.mode == DetectorMode::kKeyframe ? predict_heads_keyframe(module, c, q, bank_window)
                                                          : predict_heads_tubelet(module, q));
  }
  return out;
}

Tensor QueryBank::window(std::size_t t, std::size_t w) const {
  if (clips.empty()) throw ConfigError("query bank is empty");
  if (t >= clips.size()) throw InputError("clip index outside the query bank");
  Tensor out({w * rows, row_dim});
  const auto start = static_cast<long long>(t) - static_cast<long long>(w / 2);
  for (std::size_t i = 0; i < w; ++i) {
    const long long clip = start + static_cast<long long>(i);
    if (clip < 0 || clip >= static_cast<long long>(clips.size())) continue;
    const Tensor& src = clips[static_cast<std::size_t>(clip)];
    std::copy(src.data().begin(), src.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(i * rows * row_dim));
  }
  return out;
}

Tensor select_bank_rows(const DetectionOutput& output, std::size_t k) {
  const QuerySet& q = output.queries;
  if (q.mode != DetectorMode::kKeyframe) throw ConfigError("query banks are built from keyframe detectors");
  const std::size_t n = q.count(), d = q.dim();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  const Tensor& human = output.human.value();
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return human[2 * a] > human[2 * b]; });
  Tensor rows({k, 2 * d});
  for (std::size_t r = 0; r < std::min(k, n); ++r) {
    const std::size_t i = order[r];
    for (std::size_t c = 0; c < d; ++c) {
      rows.at({r, c}) = q.spatial.value()[i * d + c];
      rows.at({r, d + c}) = q.temporal.value()[i * d + c];
    }
  }
  return rows;
}

QueryBank build_query_bank(const Decoder& decoder, const std::vector<FeatureSpace4D>& clips, std::size_t k) {
  if (decoder.config.classifier != ClassifierKind::kShortTerm)
    throw ConfigError("build the query bank with a short-term keyframe detector");
  QueryBank bank;
  bank.rows = k;
  bank.row_dim = 2 * decoder.config.dim;
  NoGradGuard guard;
  for (const auto& clip : clips) bank.clips.push_back(select_bank_rows(decoder_forward(decoder, clip).final(), k));
  return bank;
}

}  // namespace stmx
