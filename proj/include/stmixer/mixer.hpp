#pragma once

#include <string>
#include <utility>

#include "stmixer/autograd.hpp"
#include "stmixer/nn.hpp"
#include "stmixer/query_geometry.hpp"

namespace stmx {

// Query-conditioned channel and point mixing of a sampled point set.
//
// For each of G channel groups (width d = D / G) the query generates a d x d
// channel-mixing matrix and a P x P' point-mixing matrix. In fixed mode both
// matrices are plain learned parameters shared by every query.
struct AdaptiveMixer {
  std::size_t dim = 0;
  std::size_t groups = 1;
  std::size_t points = 1;      // P
  std::size_t out_points = 1;  // P'
  bool fixed = false;

  Linear channel_gen;  // D -> G * d * d
  Linear point_gen;    // D -> G * P * P'
  Parameter* channel_static = nullptr;  // [G * d * d]
  Parameter* point_static = nullptr;    // [G * P * P']
  LayerNorm channel_norm;               // over d
  LayerNorm point_norm;                 // over P'
  Linear output;                        // D * P' -> D, zero at init

  static AdaptiveMixer create(ParameterStore& store, const std::string& name, std::size_t dim, std::size_t groups,
                              std::size_t points, std::size_t out_points, Rng& rng, bool fixed = false);

  std::size_t group_width() const { return dim / groups; }
  // Scalars in the channel-mixing generator (weights and biases).
  std::size_t channel_generator_size() const;
};

// q [B, D], f [B, P, D] -> ReLU(LN(f x M_c)) with shape [B, P, D].
Var channel_mix(const AdaptiveMixer& mixer, const Var& q, const Var& f);
// q [B, D], cm [B, P, D] -> ReLU(LN(cm^T x M_p)) with shape [B, D, P'].
Var point_mix(const AdaptiveMixer& mixer, const Var& q, const Var& cm);
// q + Linear(Flatten(point_mix(channel_mix(f)))), shape [B, D].
Var adaptive_mix(const AdaptiveMixer& mixer, const Var& q, const Var& f);

enum class MixingStrategy { kDecoupled, kCoupled, kSequential, kSpatialOnly, kTemporalOnly };

MixingStrategy parse_mixing(const std::string& text);
std::string mixing_name(MixingStrategy strategy);

// The spatial and temporal branches of one decoder module.
//
//   decoupled      spatial query mixes TP(F) (keyframe) or its own frame (tubelet);
//                  temporal query mixes SP(F)
//   coupled        spatial query mixes all T * P points; temporal query untouched
//   sequential     spatial mixing, then temporal mixing of SP(F), both driven by
//                  the spatial query; temporal query untouched
//   spatial_only   decoupled without the temporal branch
//   temporal_only  decoupled without the spatial branch
struct MixingBlock {
  MixingStrategy strategy = MixingStrategy::kDecoupled;
  bool has_spatial = false;
  bool has_temporal = false;
  AdaptiveMixer spatial;
  AdaptiveMixer temporal;

  static MixingBlock create(ParameterStore& store, const std::string& name, MixingStrategy strategy,
                            std::size_t dim, std::size_t groups, std::size_t points, std::size_t frames,
                            std::size_t point_ratio, std::size_t frame_ratio, Rng& rng, bool fixed = false);
};

// spatial [N, L, D], temporal [N, D], features [N, T, P, D].
// Returns updated (spatial, temporal).
std::pair<Var, Var> mix_queries(const MixingBlock& block, DetectorMode mode, const Var& spatial,
                                const Var& temporal, const Var& features);

}  // namespace stmx
