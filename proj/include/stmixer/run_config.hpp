#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "stmixer/criterion.hpp"
#include "stmixer/decoder.hpp"

namespace stmx {

enum class BackboneKind { kHierarchy, kPlain };
enum class OptimizerKind { kSgd, kAdamW };

BackboneKind parse_backbone(const std::string& text);
std::string backbone_name(BackboneKind kind);
OptimizerKind parse_optimizer(const std::string& text);
std::string optimizer_name(OptimizerKind kind);

struct ScenarioConfig {
  std::string preset = "random";  // random | fast-motion | dropout | empty
  std::size_t width = 64;
  std::size_t height = 64;
  std::size_t clips = 3;
  std::size_t actors_min = 1;
  std::size_t actors_max = 2;
  double actor_min_size = 14;
  double actor_max_size = 28;
  double speed = 2.0;  // pixels per frame, random preset
  double jump = 28;    // fast-motion displacement at the middle frame
  double noise = 0.05;
};

struct OptimConfig {
  OptimizerKind kind = OptimizerKind::kAdamW;
  double lr = 2e-5;
  double momentum = 0.9;  // sgd
  double beta1 = 0.9;     // adamw
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
  double grad_clip = 0;  // global norm; 0 disables
  bool cosine = false;   // cosine decay of lr to zero over the run
  std::size_t warmup = 0;  // linear warmup steps
  std::size_t iterations = 100;
};

struct RunConfig {
  DecoderConfig decoder;
  LossWeights weights;
  FocalParams focal;
  OptimConfig optim;
  ScenarioConfig scenario;
  BackboneKind backbone = BackboneKind::kHierarchy;
  std::vector<int> scales{2, 3, 4, 5};
  double bg_threshold = 0.3;
  double link_tau = 0.5;
  double eval_iou = 0.5;
  std::uint64_t seed = 0;
  std::string out = "run";

  static RunConfig defaults(DetectorMode mode);
  // Small model and scenario that train in seconds on one core.
  static RunConfig desk(DetectorMode mode);

  // Throws ConfigError.
  void validate() const;
  // key=value pairs in a fixed order; parse_run_config(to_text()) round-trips.
  std::map<std::string, std::string> to_map() const;
  std::string to_text() const;
};

// Applies key=value lines on top of `base`. Blank lines and '#' comments are
// skipped; unknown keys and malformed values throw ConfigError.
RunConfig parse_run_config(const std::string& text, RunConfig base);
void apply_setting(RunConfig& config, const std::string& key, const std::string& value);
RunConfig load_run_config(const std::filesystem::path& path, RunConfig base);
std::vector<std::string> run_config_keys();

}  // namespace stmx
