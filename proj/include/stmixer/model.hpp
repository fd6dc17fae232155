#pragma once

#include <filesystem>
#include <memory>

#include "stmixer/decoder.hpp"
#include "stmixer/run_config.hpp"
#include "stmixer/scenario.hpp"

namespace stmx {

// Maps painted stage maps into the 4D feature space, through per-stage
// lateral projections or through the plain-backbone heads on the stride-16 map.
struct Backbone {
  BackboneKind kind = BackboneKind::kHierarchy;
  std::vector<int> scales;
  std::vector<LateralProjection> lateral;
  std::vector<PlainHead> heads;

  static Backbone create(ParameterStore& store, const RunConfig& config, std::size_t in_channels, Rng& rng);
  FeatureSpace4D operator()(const SyntheticClip& clip) const;
};

class Model {
 public:
  RunConfig config;
  ParameterStore store;
  Backbone backbone;
  Decoder decoder;

  static std::unique_ptr<Model> create(const RunConfig& config, std::uint64_t seed);

  FeatureSpace4D features(const SyntheticClip& clip) const { return backbone(clip); }
  DecoderOutput forward(const SyntheticClip& clip, const Tensor* bank_window = nullptr) const;

 private:
  explicit Model(const RunConfig& c) : config(c) {}
};

// Directory holding manifest.json and one STMX1 file per parameter.
void save_checkpoint(const Model& model, const std::filesystem::path& dir);
// Rebuilds the model from the stored configuration. Throws LoadError when
// the manifest, the parameter set or any shape disagrees.
std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& dir);
// Loads values into an existing model; same checks.
void load_parameters(Model& model, const std::filesystem::path& dir);

}  // namespace stmx
