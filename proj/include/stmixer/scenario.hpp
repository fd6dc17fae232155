#pragma once

#include <cstdint>
#include <set>
#include <vector>

#include "stmixer/criterion.hpp"
#include "stmixer/feature_space.hpp"
#include "stmixer/run_config.hpp"
#include "stmixer/tube.hpp"

namespace stmx {

// One actor present in every frame of the video.
struct Actor {
  std::vector<Box> track;  // per video frame
  std::size_t label = 0;
  std::set<std::size_t> dropout;  // frames where the actor leaves no signature
};

struct SyntheticClip {
  std::size_t start = 0;                 // first video frame
  std::vector<StageFeatureMap> stages;  // z = 2..5, each [C_paint, T, H / 2^z, W / 2^z]
};

// A synthetic video cut into clips with stride one. Stage maps carry, inside
// each actor box, a one-hot class code, a presence flag and the box geometry
// relative to the cell, plus Gaussian noise everywhere.
struct Scenario {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t frames_per_clip = 0;
  std::size_t classes = 0;
  std::uint64_t seed = 0;
  std::vector<Actor> actors;
  std::vector<SyntheticClip> clips;

  std::size_t video_frames() const { return clips.empty() ? 0 : clips.size() + frames_per_clip - 1; }
  std::size_t keyframe(std::size_t clip) const { return clips[clip].start + frames_per_clip / 2; }
  FrameSize frame() const { return {static_cast<double>(width), static_cast<double>(height)}; }

  KeyframeTarget keyframe_target(std::size_t clip) const;
  TubeletTarget tubelet_target(std::size_t clip) const;
  std::vector<FrameDetection> keyframe_ground_truth() const;
  std::vector<ActionTube> tube_ground_truth() const;

  // What an ideal per-frame detector and an ideal tubelet detector report;
  // the per-frame detector misses dropout frames.
  std::vector<std::vector<FrameDetection>> ideal_frame_detections() const;
  std::vector<std::vector<Tubelet>> ideal_tubelets() const;
};

inline constexpr std::size_t kPaintExtraChannels = 5;
std::size_t paint_channels(std::size_t classes);

// Presets: random, fast-motion, dropout, empty. Throws ConfigError when an
// actor cannot stay inside the frame.
Scenario gen_scenario(const RunConfig& config, std::uint64_t seed);

}  // namespace stmx
