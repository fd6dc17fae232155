#pragma once

#include "stmixer/decoder.hpp"
#include "stmixer/rng.hpp"

namespace stmx::testing {

inline DecoderConfig small_config(DetectorMode mode) {
  DecoderConfig c = DecoderConfig::defaults(mode);
  c.queries = 4;
  c.dim = 8;
  c.points = 2;
  c.groups = 2;
  c.heads = 2;
  c.modules = 2;
  c.classes = 3;
  c.frames = 2;
  return c;
}

inline FeatureSpace4D random_space(Rng& rng, std::size_t dim, std::size_t frames, std::size_t side) {
  FeatureSpace4D s;
  s.data = Var(rng.normal_tensor({dim, frames, 4, side, side}, 1.0), false);
  return s;
}

inline void randomize(ParameterStore& store, Rng& rng, double sd = 0.3) {
  for (auto& p : store.all()) p.value() = rng.normal_tensor(p.value().dims(), sd);
}

}  // namespace stmx::testing
