#include "stmixer/tube.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "stmixer/criterion.hpp"

namespace stmx {

namespace {

// Mean IoU of two tubelets over their shared frames; 0 without overlap.
double overlap_iou(const Tubelet& a, const Tubelet& b) {
  const std::size_t lo = std::max(a.start, b.start), hi = std::min(a.end(), b.end());
  if (lo >= hi) return 0.0;
  double s = 0;
  for (std::size_t f = lo; f < hi; ++f) s += iou_2d(a.boxes[f - a.start], b.boxes[f - b.start]);
  return s / static_cast<double>(hi - lo);
}

// Scores descending; ties keep the input order.
template <typename T>
std::vector<std::size_t> order_by_score(const std::vector<T>& items) {
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return items[a].score > items[b].score; });
  return order;
}

ActionTube tube_from_tubelets(const std::vector<const Tubelet*>& members, const std::vector<std::size_t>& ids) {
  ActionTube tube;
  tube.video = members.front()->video;
  tube.label = members.front()->label;
  tube.start = members.front()->start;
  std::size_t end = 0;
  double score = 0;
  for (const Tubelet* t : members) {
    tube.start = std::min(tube.start, t->start);
    end = std::max(end, t->end());
    score += t->score;
  }
  tube.score = score / static_cast<double>(members.size());
  tube.members = ids;
  for (std::size_t f = tube.start; f < end; ++f) {
    Box avg{0, 0, 0, 0};
    int count = 0;
    for (const Tubelet* t : members) {
      if (f < t->start || f >= t->end()) continue;
      const Box& b = t->boxes[f - t->start];
      avg.x1 += b.x1, avg.y1 += b.y1, avg.x2 += b.x2, avg.y2 += b.y2;
      ++count;
    }
    avg.x1 /= count, avg.y1 /= count, avg.x2 /= count, avg.y2 /= count;
    tube.boxes.push_back(avg);
  }
  return tube;
}

// Greedy score-descending matching against one class, then all-point AP.
template <typename Det, typename Gt, typename Overlap>
double class_ap(const std::vector<const Det*>& dets, const std::vector<const Gt*>& gts, double threshold,
                Overlap overlap) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dets[a]->score > dets[b]->score; });
  std::vector<bool> used(gts.size(), false), hits;
  for (std::size_t r : order) {
    double best = threshold;
    long best_gt = -1;
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g]) continue;
      const double o = overlap(*dets[r], *gts[g]);
      if (o >= best) {
        if (best_gt < 0 || o > best) {
          best = o;
          best_gt = static_cast<long>(g);
        }
      }
    }
    if (best_gt >= 0) used[static_cast<std::size_t>(best_gt)] = true;
    hits.push_back(best_gt >= 0);
  }
  return average_precision(hits, gts.size());
}

}  // namespace

double iou_3d(const ActionTube& a, const ActionTube& b) {
  if (a.video != b.video) return 0.0;
  const std::size_t lo = std::max(a.start, b.start), hi = std::min(a.end(), b.end());
  if (lo >= hi) return 0.0;
  const std::size_t union_len = std::max(a.end(), b.end()) - std::min(a.start, b.start);
  double s = 0;
  for (std::size_t f = lo; f < hi; ++f) s += iou_2d(a.boxes[f - a.start], b.boxes[f - b.start]);
  const double overlap = static_cast<double>(hi - lo);
  return overlap / static_cast<double>(union_len) * (s / overlap);
}

std::vector<ActionTube> link_tubelets(const std::vector<std::vector<Tubelet>>& clips, double tau) {
  struct Ref {
    std::size_t clip, index, id;
    double score;
  };
  std::vector<Ref> all;
  std::vector<std::size_t> offset(clips.size() + 1, 0);
  for (std::size_t c = 0; c < clips.size(); ++c) {
    offset[c + 1] = offset[c] + clips[c].size();
    for (std::size_t i = 0; i < clips[c].size(); ++i) all.push_back({c, i, offset[c] + i, clips[c][i].score});
  }
  std::vector<bool> taken(all.size(), false);
  const std::vector<std::size_t> seeds = order_by_score(all);

  // Best unassigned same-class tubelet of clip c overlapping `ref` by >= tau.
  auto best_in = [&](std::size_t c, const Tubelet& ref) -> long {
    long best = -1;
    double best_iou = -1, best_score = -1;
    for (std::size_t i = 0; i < clips[c].size(); ++i) {
      const std::size_t id = offset[c] + i;
      const Tubelet& cand = clips[c][i];
      if (taken[id] || cand.label != ref.label) continue;
      const double o = overlap_iou(ref, cand);
      if (o < tau) continue;
      if (o > best_iou || (o == best_iou && cand.score > best_score)) {
        best = static_cast<long>(i);
        best_iou = o;
        best_score = cand.score;
      }
    }
    return best;
  };

  std::vector<ActionTube> tubes;
  for (std::size_t s : seeds) {
    if (taken[all[s].id]) continue;
    taken[all[s].id] = true;
    std::vector<std::pair<std::size_t, std::size_t>> chain{{all[s].clip, all[s].index}};
    for (std::size_t c = all[s].clip + 1; c < clips.size(); ++c) {
      const long next = best_in(c, clips[chain.back().first][chain.back().second]);
      if (next < 0) break;
      taken[offset[c] + static_cast<std::size_t>(next)] = true;
      chain.push_back({c, static_cast<std::size_t>(next)});
    }
    for (std::size_t c = all[s].clip; c-- > 0;) {
      const long prev = best_in(c, clips[chain.front().first][chain.front().second]);
      if (prev < 0) break;
      taken[offset[c] + static_cast<std::size_t>(prev)] = true;
      chain.insert(chain.begin(), {c, static_cast<std::size_t>(prev)});
    }
    std::vector<const Tubelet*> members;
    std::vector<std::size_t> ids;
    for (const auto& [c, i] : chain) {
      members.push_back(&clips[c][i]);
      ids.push_back(offset[c] + i);
    }
    tubes.push_back(tube_from_tubelets(members, ids));
  }
  return tubes;
}

std::vector<ActionTube> link_keyframe_boxes(const std::vector<std::vector<FrameDetection>>& frames, double tau) {
  std::vector<FrameDetection> all;
  std::vector<std::size_t> offset(frames.size() + 1, 0);
  for (std::size_t f = 0; f < frames.size(); ++f) {
    offset[f + 1] = offset[f] + frames[f].size();
    all.insert(all.end(), frames[f].begin(), frames[f].end());
  }
  std::vector<std::size_t> frame_of(all.size());
  for (std::size_t f = 0; f < frames.size(); ++f)
    for (std::size_t i = offset[f]; i < offset[f + 1]; ++i) frame_of[i] = f;
  std::vector<bool> taken(all.size(), false);

  auto best_in = [&](std::size_t f, const FrameDetection& ref) -> long {
    long best = -1;
    double best_iou = -1, best_score = -1;
    for (std::size_t i = offset[f]; i < offset[f + 1]; ++i) {
      if (taken[i] || all[i].label != ref.label) continue;
      const double o = iou_2d(ref.box, all[i].box);
      if (o < tau) continue;
      if (o > best_iou || (o == best_iou && all[i].score > best_score)) {
        best = static_cast<long>(i);
        best_iou = o;
        best_score = all[i].score;
      }
    }
    return best;
  };

  std::vector<ActionTube> tubes;
  for (std::size_t s : order_by_score(all)) {
    if (taken[s]) continue;
    taken[s] = true;
    std::vector<std::size_t> chain{s};
    for (std::size_t f = frame_of[s] + 1; f < frames.size(); ++f) {
      const long next = best_in(f, all[chain.back()]);
      if (next < 0) break;
      taken[static_cast<std::size_t>(next)] = true;
      chain.push_back(static_cast<std::size_t>(next));
    }
    for (std::size_t f = frame_of[s]; f-- > 0;) {
      const long prev = best_in(f, all[chain.front()]);
      if (prev < 0) break;
      taken[static_cast<std::size_t>(prev)] = true;
      chain.insert(chain.begin(), static_cast<std::size_t>(prev));
    }
    ActionTube tube;
    tube.video = all[s].video;
    tube.label = all[s].label;
    tube.start = frame_of[chain.front()];
    double score = 0;
    for (std::size_t i : chain) {
      tube.boxes.push_back(all[i].box);
      score += all[i].score;
    }
    tube.score = score / static_cast<double>(chain.size());
    tube.members = chain;
    tubes.push_back(tube);
  }
  return tubes;
}

double average_precision(const std::vector<bool>& hits_by_rank, std::size_t positives) {
  if (positives == 0) return 0.0;
  std::vector<double> precision, recall;
  std::size_t tp = 0;
  for (std::size_t r = 0; r < hits_by_rank.size(); ++r) {
    if (hits_by_rank[r]) ++tp;
    precision.push_back(static_cast<double>(tp) / static_cast<double>(r + 1));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(positives));
  }
  // Monotone envelope from the right, then area under the step curve.
  for (std::size_t r = precision.size(); r-- > 1;) precision[r - 1] = std::max(precision[r - 1], precision[r]);
  double ap = 0, prev_recall = 0;
  for (std::size_t r = 0; r < precision.size(); ++r) {
    ap += (recall[r] - prev_recall) * precision[r];
    prev_recall = recall[r];
  }
  return ap;
}

double frame_map(const std::vector<FrameDetection>& detections, const std::vector<FrameDetection>& ground_truth,
                 double iou_threshold) {
  std::set<std::size_t> classes;
  for (const auto& g : ground_truth) classes.insert(g.label);
  if (classes.empty()) return 0.0;
  double total = 0;
  for (std::size_t c : classes) {
    std::vector<const FrameDetection*> dets, gts;
    for (const auto& d : detections)
      if (d.label == c) dets.push_back(&d);
    for (const auto& g : ground_truth)
      if (g.label == c) gts.push_back(&g);
    total += class_ap(dets, gts, iou_threshold, [](const FrameDetection& d, const FrameDetection& g) {
      return d.video == g.video && d.frame == g.frame ? iou_2d(d.box, g.box) : -1.0;
    });
  }
  return total / static_cast<double>(classes.size());
}

double video_map(const std::vector<ActionTube>& tubes, const std::vector<ActionTube>& ground_truth,
                 double iou_threshold) {
  std::set<std::size_t> classes;
  for (const auto& g : ground_truth) classes.insert(g.label);
  if (classes.empty()) return 0.0;
  double total = 0;
  for (std::size_t c : classes) {
    std::vector<const ActionTube*> dets, gts;
    for (const auto& d : tubes)
      if (d.label == c) dets.push_back(&d);
    for (const auto& g : ground_truth)
      if (g.label == c) gts.push_back(&g);
    total += class_ap(dets, gts, iou_threshold,
                      [](const ActionTube& d, const ActionTube& g) { return d.video == g.video ? iou_3d(d, g) : -1.0; });
  }
  return total / static_cast<double>(classes.size());
}

}  // namespace stmx
