#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "stmixer/decoder.hpp"
#include "stmixer/query_geometry.hpp"

namespace stmx {

struct FrameSize {
  double width = 0;
  double height = 0;
};

struct LossWeights {
  double cls = 2.0;
  double l1 = 2.0;
  double giou = 2.0;
  double action = 24.0;
};

struct FocalParams {
  double gamma = 2.0;
  double alpha = 0.25;
};

// Keyframe ground truth: every box is a human with a multi-hot action row.
struct KeyframeTarget {
  std::vector<Box> boxes;
  Tensor actions;  // [K, C]; may be empty when K = 0

  std::size_t size() const { return boxes.size(); }
};

// Tubelet ground truth: one box per clip frame and a single class in [0, C).
struct TubeletTarget {
  std::vector<std::vector<Box>> boxes;  // [K][T]
  std::vector<std::size_t> labels;

  std::size_t size() const { return boxes.size(); }
};

// pred_to_gt[i] is the matched ground truth of prediction i or -1.
struct Assignment {
  std::vector<long> pred_to_gt;
  double cost = 0;

  std::size_t matched() const;
};

// 1 - GIoU; throws InputError for boxes without positive area.
double giou_loss(const Box& a, const Box& b);
double iou_2d(const Box& a, const Box& b);
// Mean absolute difference of frame-normalized (cx, cy, w, h).
double l1_box_loss(const Box& a, const Box& b, FrameSize frame);
// -alpha (1 - p_t)^gamma log p_t with p_t clamped below by 1e-12.
double focal_loss(std::span<const double> probs, std::size_t target, FocalParams focal);

// Differentiable 1 - GIoU of pred [K, 4] against constant target [K, 4].
Var giou_loss_rows(const Var& pred, const Tensor& target);
// [..., 4] corners -> frame-normalized (cx, cy, w, h).
Var normalize_boxes(const Var& corners, FrameSize frame);

// Minimum-cost assignment of every column (ground truth) to a distinct row
// (prediction). cost is [N, K] with K <= N; the reported cost sums matched
// entries in prediction order.
Assignment match(const Tensor& cost);

// Entry (i, j) is the change of the set loss when prediction i takes ground
// truth j instead of background:
//   w_cls (L_cls(i, j) - L_cls(i, bg)) + w_l1 L1(i, j) + w_giou GIoU(i, j).
Tensor matching_cost_keyframe(const DetectionOutput& pred, const KeyframeTarget& gt, FrameSize frame,
                              const LossWeights& weights);
Tensor matching_cost_tubelet(const DetectionOutput& pred, const TubeletTarget& gt, FrameSize frame,
                             const LossWeights& weights, const FocalParams& focal);

// Weighted components of the loss; `total` carries the gradient graph.
struct LossBreakdown {
  double cls = 0;
  double l1 = 0;
  double giou = 0;
  double action = 0;
  Var total;

  double value() const { return total.item(); }
};

LossBreakdown keyframe_loss(const DetectionOutput& pred, const KeyframeTarget& gt, const Assignment& sigma,
                            FrameSize frame, const LossWeights& weights);
LossBreakdown tubelet_loss(const DetectionOutput& pred, const TubeletTarget& gt, const Assignment& sigma,
                           FrameSize frame, const LossWeights& weights, const FocalParams& focal);

// Sum over every decoder stage, each with its own matching.
LossBreakdown training_loss(const DecoderOutput& out, const KeyframeTarget& gt, FrameSize frame,
                            const LossWeights& weights);
LossBreakdown training_loss(const DecoderOutput& out, const TubeletTarget& gt, FrameSize frame,
                            const LossWeights& weights, const FocalParams& focal);

}  // namespace stmx
