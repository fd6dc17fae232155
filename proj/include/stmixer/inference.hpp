#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "stmixer/model.hpp"
#include "stmixer/tube.hpp"

namespace stmx {

// One emitted prediction. Keyframe mode: a single box on `frame` and one
// record per action class. Tubelet mode: frames_per_clip boxes from
// clip_start and the best foreground class.
struct Detection {
  std::size_t clip_start = 0;
  std::size_t frame = 0;
  std::vector<Box> boxes;
  std::size_t label = 0;
  double score = 0;
  std::size_t query = 0;
};

// Keeps queries whose background probability is below `bg_threshold`.
std::vector<Detection> detect(const DetectionOutput& out, DetectorMode mode, std::size_t clip_start,
                              std::size_t keyframe, double bg_threshold);

// Per clip, in clip order. A long-term classifier reads its window from
// `bank`, which is then required.
std::vector<std::vector<Detection>> infer(const Model& model, const Scenario& scenario, double bg_threshold,
                                          const QueryBank* bank = nullptr);

// Query bank of a short-term model over every clip of the scenario.
QueryBank build_bank(const Model& model, const Scenario& scenario);

nlohmann::json detections_to_json(const std::vector<std::vector<Detection>>& per_clip, DetectorMode mode);
std::vector<std::vector<Detection>> detections_from_json(const nlohmann::json& j);

std::vector<FrameDetection> as_frame_detections(const std::vector<std::vector<Detection>>& per_clip);
std::vector<std::vector<Tubelet>> as_tubelets(const std::vector<std::vector<Detection>>& per_clip);

struct EvalReport {
  double frame_map = 0;
  double video_map = 0;
  std::size_t detections = 0;
  std::size_t tubes = 0;

  std::map<std::string, double> as_map() const;
};

// Keyframe mode: frame mAP on the keyframes. Tubelet mode: tubelets are linked
// first; frame mAP then scores every tube frame, video mAP the tubes.
EvalReport evaluate(const std::vector<std::vector<Detection>>& per_clip, const Scenario& scenario, DetectorMode mode,
                    double iou_threshold, double link_tau);

nlohmann::json scenario_ground_truth_json(const Scenario& scenario, DetectorMode mode);

// Config snapshot, seed and metric summary.
void write_run_manifest(const std::filesystem::path& path, const RunConfig& config,
                        const std::map<std::string, double>& metrics);

}  // namespace stmx
