#pragma once

#include <cstddef>
#include <vector>

#include "stmixer/criterion.hpp"
#include "stmixer/query_geometry.hpp"

namespace stmx {

// T consecutive per-frame boxes of one actor starting at frame `start`.
struct Tubelet {
  std::size_t video = 0;
  std::size_t start = 0;
  std::vector<Box> boxes;
  std::size_t label = 0;
  double score = 0;

  std::size_t end() const { return start + boxes.size(); }  // one past the last frame
};

// A temporally contiguous linked track.
struct ActionTube {
  std::size_t video = 0;
  std::size_t start = 0;
  std::vector<Box> boxes;
  std::size_t label = 0;
  double score = 0;
  std::vector<std::size_t> members;  // linker-specific ids of the linked inputs

  std::size_t end() const { return start + boxes.size(); }
};

struct FrameDetection {
  std::size_t video = 0;
  std::size_t frame = 0;
  Box box;
  std::size_t label = 0;
  double score = 1.0;
};


// Temporal IoU times the mean spatial IoU over the shared frames.
double iou_3d(const ActionTube& a, const ActionTube& b);

// Greedy linking of tubelets from clips with stride one. clips[c] holds the
// tubelets of clip c of one video. Members are numbered by their position in
// the concatenation of all clips.
std::vector<ActionTube> link_tubelets(const std::vector<std::vector<Tubelet>>& clips, double tau = 0.5);

// Greedy adjacent-frame linking of per-frame boxes. frames[f] holds the
// detections of frame f of one video.
std::vector<ActionTube> link_keyframe_boxes(const std::vector<std::vector<FrameDetection>>& frames, double tau = 0.5);

// All-point interpolated AP of a score-sorted hit list against `positives`.
double average_precision(const std::vector<bool>& hits_by_rank, std::size_t positives);

// Mean over classes that have ground truth of the per-class AP.
double frame_map(const std::vector<FrameDetection>& detections, const std::vector<FrameDetection>& ground_truth,
                 double iou_threshold = 0.5);
double video_map(const std::vector<ActionTube>& tubes, const std::vector<ActionTube>& ground_truth,
                 double iou_threshold = 0.5);

}  // namespace stmx
