#pragma once

#include <optional>
#include <string>
#include <vector>

#include "stmixer/feature_space.hpp"
#include "stmixer/mixer.hpp"
#include "stmixer/nn.hpp"
#include "stmixer/query_geometry.hpp"

namespace stmx {

enum class ClassifierKind { kShortTerm, kLongTerm };

ClassifierKind parse_classifier(const std::string& text);
std::string classifier_name(ClassifierKind kind);

struct DecoderConfig {
  DetectorMode mode = DetectorMode::kKeyframe;
  std::size_t queries = 100;  // N
  std::size_t dim = 256;      // D
  std::size_t points = 32;    // P_in
  std::size_t groups = 4;     // G
  std::size_t heads = 8;
  std::size_t modules = 6;    // M
  std::size_t classes = 80;   // C
  std::size_t frames = 4;     // T_in (tubelet: T)
  std::size_t point_ratio = 4;  // P_out = point_ratio * P_in
  std::size_t frame_ratio = 4;  // T_out = frame_ratio * T_in
  SamplingKind sampling = SamplingKind::kAdaptive;
  std::size_t grid_side = 7;
  MixingStrategy mixing = MixingStrategy::kDecoupled;
  bool fixed_mixing = false;
  ClassifierKind classifier = ClassifierKind::kShortTerm;
  std::size_t bank_rows = 5;      // k
  std::size_t bank_window = 60;   // w
  std::size_t cross_layers = 3;

  // Full-size defaults; M is 6 for keyframe and 3 for tubelet detection.
  static DecoderConfig defaults(DetectorMode mode);
  std::size_t out_points() const { return point_ratio * points; }
  std::size_t out_frames() const { return frame_ratio * frames; }
  SamplingSpec sampling_spec() const;
  // Throws ConfigError on inconsistent settings.
  void validate() const;
};

// Cross-attention over a window of stored queries, then FFN(S || S').
struct LongTermClassifier {
  std::vector<AttentionParams> layers;  // attention only, width 2D
  FFN head;                             // 4D -> 2D -> C

  static LongTermClassifier create(ParameterStore& store, const std::string& name, std::size_t dim,
                                   std::size_t heads, std::size_t layers, std::size_t classes, Rng& rng);
};

// One ASAM module with its own prediction heads.
struct AsamModule {
  LayerNorm spatial_norm;
  AttentionParams spatial_attn;   // across instances (per frame in tubelet mode)
  LayerNorm instance_norm;
  AttentionParams instance_attn;  // tubelet only: across the frames of one instance
  LayerNorm temporal_norm;
  AttentionParams temporal_attn;
  OffsetHead offsets;
  MixingBlock mixing;
  FFN box_head;     // D -> 2D -> 4, zero output layer
  FFN human_head;   // keyframe: D -> 2D -> 2
  FFN action_head;  // keyframe short-term: 2D -> 2D -> C
  FFN class_head;   // tubelet: 2D -> 2D -> C + 1
  std::optional<LongTermClassifier> long_term;
};

struct Decoder {
  DecoderConfig config;
  QueryInit init;
  std::vector<AsamModule> modules;

  static Decoder create(ParameterStore& store, const DecoderConfig& config, Rng& rng);
};

// Predictions read off one module's output queries.
struct DetectionOutput {
  Var boxes;    // keyframe [N, 4], tubelet [N, T, 4]; corners in pixels
  Var human;    // keyframe [N, 2]; index 0 is the human probability
  Var action;   // keyframe [N, C] sigmoid scores
  Var classes;  // tubelet [N, C + 1] softmax, last index background
  QuerySet queries;
};

struct DecoderOutput {
  std::vector<DetectionOutput> stages;  // one per module, in order
  const DetectionOutput& final() const { return stages.back(); }
};

QuerySet asam_forward(const AsamModule& module, const DecoderConfig& config, const QuerySet& queries,
                      const FeatureSpace4D& space);

// `bank_window` is the stacked [w * k, 2D] window for the long-term classifier.
DetectionOutput predict_heads_keyframe(const AsamModule& module, const DecoderConfig& config, const QuerySet& queries,
                                       const Tensor* bank_window = nullptr);
DetectionOutput predict_heads_tubelet(const AsamModule& module, const QuerySet& queries);

DecoderOutput decoder_forward(const Decoder& decoder, const FeatureSpace4D& space, const Tensor* bank_window = nullptr);

// Logits [N, C] from S [N, 2D] and a constant window [rows, 2D].
Var long_term_classify(const LongTermClassifier& classifier, const Var& s, const Tensor& window);

// Stored spatial || temporal queries of the k highest human scores per clip.
struct QueryBank {
  std::size_t rows = 5;      // k
  std::size_t row_dim = 0;   // 2D
  std::vector<Tensor> clips;  // each [k, 2D]

  // Stack of clips t - w/2 .. t + w/2 - 1; out-of-range clips are zero rows.
  Tensor window(std::size_t t, std::size_t w) const;
};

// Top-k rows of S = Qs || Qt by human score (ties to the lower query index),
// padded with zero rows when fewer than k queries exist.
Tensor select_bank_rows(const DetectionOutput& output, std::size_t k);

QueryBank build_query_bank(const Decoder& decoder, const std::vector<FeatureSpace4D>& clips, std::size_t k);

}  // namespace stmx
