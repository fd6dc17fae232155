#include "stmixer/criterion.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace stmx {

namespace {

constexpr double kProbFloor = 1e-12;

void check_box(const Box& b) {
  if (!(b.width() > 0) || !(b.height() > 0)) throw InputError("box without positive area");
}

Box row_box(const Tensor& t, std::size_t offset) { return {t[offset], t[offset + 1], t[offset + 2], t[offset + 3]}; }

struct GiouTerms {
  double loss;
  double d[4];  // d loss / d (x1, y1, x2, y2) of the first box
};

GiouTerms giou_terms(const Box& a, const Box& b) {
  check_box(a);
  check_box(b);
  const double aw = a.width(), ah = a.height();
  const double area_a = aw * ah, area_b = b.area();
  const double ix1 = std::max(a.x1, b.x1), iy1 = std::max(a.y1, b.y1);
  const double ix2 = std::min(a.x2, b.x2), iy2 = std::min(a.y2, b.y2);
  const double iw = std::max(0.0, ix2 - ix1), ih = std::max(0.0, iy2 - iy1);
  const double inter = iw * ih;
  const double uni = area_a + area_b - inter;
  const double cw = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
  const double ch = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
  const double hull = cw * ch;
  GiouTerms t{};
  // 1 - GIoU = 2 - I/U - U/C
  t.loss = 2.0 - inter / uni - uni / hull;

  const double d_inter = -(uni + inter) / (uni * uni) + 1.0 / hull;
  const double d_area = inter / (uni * uni) - 1.0 / hull;
  const double d_hull = uni / (hull * hull);

  double di[4] = {0, 0, 0, 0};
  if (iw > 0 && ih > 0) {
    di[0] = a.x1 > b.x1 ? -ih : 0.0;
    di[2] = a.x2 <= b.x2 ? ih : 0.0;
    di[1] = a.y1 > b.y1 ? -iw : 0.0;
    di[3] = a.y2 <= b.y2 ? iw : 0.0;
  }
  const double da[4] = {-ah, -aw, ah, aw};
  const double dc[4] = {a.x1 <= b.x1 ? -ch : 0.0, a.y1 <= b.y1 ? -cw : 0.0, a.x2 >= b.x2 ? ch : 0.0,
                        a.y2 >= b.y2 ? cw : 0.0};
  for (int k = 0; k < 4; ++k) t.d[k] = d_inter * di[k] + d_area * da[k] + d_hull * dc[k];
  return t;
}

Tensor normalized_rows(const std::vector<Box>& boxes, FrameSize frame) {
  Tensor out({boxes.size(), 4});
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const Box& b = boxes[i];
    out[4 * i] = (b.x1 + b.x2) / (2 * frame.width);
    out[4 * i + 1] = (b.y1 + b.y2) / (2 * frame.height);
    out[4 * i + 2] = b.width() / frame.width;
    out[4 * i + 3] = b.height() / frame.height;
  }
  return out;
}

Tensor corner_rows(const std::vector<Box>& boxes) {
  Tensor out({boxes.size(), 4});
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    out[4 * i] = boxes[i].x1;
    out[4 * i + 1] = boxes[i].y1;
    out[4 * i + 2] = boxes[i].x2;
    out[4 * i + 3] = boxes[i].y2;
  }
  return out;
}

// (1 - x)^gamma with the common small exponents kept exact.
Var one_minus_pow(const Var& p, double gamma) {
  const Var q = add_scalar(scale(p, -1.0), 1.0);
  if (gamma == 0.0) return constant(Tensor::full(p.dims(), 1.0));
  if (gamma == 1.0) return q;
  if (gamma == 2.0) return square(q);
  return exp(scale(log_clamped(q, kProbFloor), gamma));
}

double focal_value(double p, FocalParams focal) {
  const double pt = std::max(p, kProbFloor);
  return -focal.alpha * std::pow(1.0 - p, focal.gamma) * std::log(pt);
}

struct MatchedPairs {
  std::vector<std::size_t> preds;
  std::vector<std::size_t> gts;
};

MatchedPairs pairs_of(const Assignment& sigma) {
  MatchedPairs m;
  for (std::size_t i = 0; i < sigma.pred_to_gt.size(); ++i)
    if (sigma.pred_to_gt[i] >= 0) {
      m.preds.push_back(i);
      m.gts.push_back(static_cast<std::size_t>(sigma.pred_to_gt[i]));
    }
  return m;
}

void check_frame(FrameSize frame) {
  if (!(frame.width > 0) || !(frame.height > 0)) throw InputError("frame size must be positive");
}

}  // namespace

std::size_t Assignment::matched() const {
  return static_cast<std::size_t>(std::count_if(pred_to_gt.begin(), pred_to_gt.end(), [](long j) { return j >= 0; }));
}

double giou_loss(const Box& a, const Box& b) { return giou_terms(a, b).loss; }

double iou_2d(const Box& a, const Box& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

double l1_box_loss(const Box& a, const Box& b, FrameSize frame) {
  check_frame(frame);
  const Tensor na = normalized_rows({a}, frame), nb = normalized_rows({b}, frame);
  double s = 0;
  for (std::size_t k = 0; k < 4; ++k) s += std::abs(na[k] - nb[k]);
  return s / 4.0;
}

double focal_loss(std::span<const double> probs, std::size_t target, FocalParams focal) {
  if (target >= probs.size()) throw InputError("focal_loss: target outside the class range");
  return focal_value(probs[target], focal);
}

Var giou_loss_rows(const Var& pred, const Tensor& target) {
  if (pred.dims().size() != 2 || pred.dim(1) != 4 || target.dims() != pred.dims())
    throw ShapeError("giou_loss_rows: expected matching [K, 4] boxes");
  const std::size_t k = pred.dim(0);
  Tensor out({k});
  Tensor grads({k, 4});
  for (std::size_t i = 0; i < k; ++i) {
    const GiouTerms t = giou_terms(row_box(pred.value(), 4 * i), row_box(target, 4 * i));
    out[i] = t.loss;
    for (std::size_t c = 0; c < 4; ++c) grads[4 * i + c] = t.d[c];
  }
  return make_op(std::move(out), {pred}, [grads = std::move(grads)](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i / 4] * grads[i];
  });
}

Var normalize_boxes(const Var& corners, FrameSize frame) {
  check_frame(frame);
  const double w = frame.width, h = frame.height;
  // rows: x1, y1, x2, y2; columns: cx, cy, w, h
  const Tensor m({4, 4}, {0.5 / w, 0, -1 / w, 0,  //
                          0, 0.5 / h, 0, -1 / h,  //
                          0.5 / w, 0, 1 / w, 0,   //
                          0, 0.5 / h, 0, 1 / h});
  return matmul(corners, constant(m));
}

Assignment match(const Tensor& cost) {
  if (cost.rank() != 2) throw ShapeError("match: cost must be [N, K]");
  const std::size_t n = cost.dim(0), k = cost.dim(1);
  if (k > n) throw InputError("match: more ground truths than predictions");
  for (double c : cost.data())
    if (!std::isfinite(c)) throw InputError("match: non-finite cost");
  Assignment a;
  a.pred_to_gt.assign(n, -1);
  if (k == 0) return a;

  // Shortest augmenting paths with potentials. Rows are ground truths (1..k),
  // columns are predictions (1..n); column 0 is the virtual start.
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(k + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> owner(n + 1, 0), way(n + 1, 0);
  auto c = [&](std::size_t row, std::size_t col) { return cost[(col - 1) * k + (row - 1)]; };
  for (std::size_t row = 1; row <= k; ++row) {
    owner[0] = row;
    std::size_t col0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[col0] = 1;
      const std::size_t r0 = owner[col0];
      double delta = inf;
      std::size_t col1 = 0;
      for (std::size_t col = 1; col <= n; ++col) {
        if (used[col]) continue;
        const double cur = c(r0, col) - u[r0] - v[col];
        if (cur < minv[col]) {
          minv[col] = cur;
          way[col] = col0;
        }
        if (minv[col] < delta) {
          delta = minv[col];
          col1 = col;
        }
      }
      for (std::size_t col = 0; col <= n; ++col) {
        if (used[col]) {
          u[owner[col]] += delta;
          v[col] -= delta;
        } else {
          minv[col] -= delta;
        }
      }
      col0 = col1;
    } while (owner[col0] != 0);
    do {
      const std::size_t col1 = way[col0];
      owner[col0] = owner[col1];
      col0 = col1;
    } while (col0 != 0);
  }
  for (std::size_t col = 1; col <= n; ++col)
    if (owner[col] != 0) a.pred_to_gt[col - 1] = static_cast<long>(owner[col] - 1);
  for (std::size_t i = 0; i < n; ++i)
    if (a.pred_to_gt[i] >= 0) a.cost += cost[i * k + static_cast<std::size_t>(a.pred_to_gt[i])];
  return a;
}

Tensor matching_cost_keyframe(const DetectionOutput& pred, const KeyframeTarget& gt, FrameSize frame,
                              const LossWeights& weights) {
  const std::size_t n = pred.human.dim(0), k = gt.size();
  Tensor cost({n, k});
  const Tensor& human = pred.human.value();
  const Tensor& boxes = pred.boxes.value();
  for (std::size_t i = 0; i < n; ++i) {
    const double cls = -std::log(std::max(human[2 * i], kProbFloor)) + std::log(std::max(human[2 * i + 1], kProbFloor));
    const Box pb = row_box(boxes, 4 * i);
    for (std::size_t j = 0; j < k; ++j)
      cost[i * k + j] = weights.cls * cls + weights.l1 * l1_box_loss(pb, gt.boxes[j], frame) +
                        weights.giou * giou_loss(pb, gt.boxes[j]);
  }
  return cost;
}

Tensor matching_cost_tubelet(const DetectionOutput& pred, const TubeletTarget& gt, FrameSize frame,
                             const LossWeights& weights, const FocalParams& focal) {
  const std::size_t n = pred.classes.dim(0), t = pred.boxes.dim(1), c1 = pred.classes.dim(1), k = gt.size();
  Tensor cost({n, k});
  const Tensor& probs = pred.classes.value();
  const Tensor& boxes = pred.boxes.value();
  for (std::size_t i = 0; i < n; ++i) {
    const double* p = probs.data().data() + i * c1;
    const double bg = focal_value(p[c1 - 1], focal);
    for (std::size_t j = 0; j < k; ++j) {
      if (gt.boxes[j].size() != t) throw ShapeError("tubelet target length differs from the prediction");
      if (gt.labels[j] + 1 >= c1) throw InputError("tubelet label outside the class range");
      double l1 = 0, gi = 0;
      for (std::size_t f = 0; f < t; ++f) {
        const Box pb = row_box(boxes, (i * t + f) * 4);
        l1 += l1_box_loss(pb, gt.boxes[j][f], frame);
        gi += giou_loss(pb, gt.boxes[j][f]);
      }
      cost[i * k + j] = weights.cls * (focal_value(p[gt.labels[j]], focal) - bg) + weights.l1 * l1 / t +
                        weights.giou * gi / t;
    }
  }
  return cost;
}

LossBreakdown keyframe_loss(const DetectionOutput& pred, const KeyframeTarget& gt, const Assignment& sigma,
                            FrameSize frame, const LossWeights& weights) {
  const std::size_t n = pred.human.dim(0);
  if (sigma.pred_to_gt.size() != n) throw ShapeError("assignment does not cover the predictions");
  const MatchedPairs m = pairs_of(sigma);

  std::vector<std::size_t> cls_index(n);
  for (std::size_t i = 0; i < n; ++i) cls_index[i] = 2 * i + (sigma.pred_to_gt[i] >= 0 ? 0 : 1);
  LossBreakdown out;
  std::vector<Var> terms;
  terms.push_back(scale(sum(log_clamped(gather(pred.human, {n}, cls_index), kProbFloor)), -weights.cls));
  out.cls = terms.back().item();

  if (!m.preds.empty()) {
    std::vector<Box> targets;
    for (std::size_t j : m.gts) targets.push_back(gt.boxes[j]);
    const Var pb = index_select(pred.boxes, 0, m.preds);
    terms.push_back(scale(sum(abs(sub(normalize_boxes(pb, frame), constant(normalized_rows(targets, frame))))),
                          weights.l1 / 4.0));
    out.l1 = terms.back().item();
    terms.push_back(scale(sum(giou_loss_rows(pb, corner_rows(targets))), weights.giou));
    out.giou = terms.back().item();

    const std::size_t c = pred.action.dim(1);
    if (gt.actions.rank() != 2 || gt.actions.dim(1) != c) throw ShapeError("action targets must be [K, C]");
    Tensor y({m.preds.size(), c});
    for (std::size_t r = 0; r < m.gts.size(); ++r)
      for (std::size_t a = 0; a < c; ++a) y[r * c + a] = gt.actions[m.gts[r] * c + a];
    Tensor not_y(y.dims());
    for (std::size_t i = 0; i < y.size(); ++i) not_y[i] = 1.0 - y[i];
    const Var pa = index_select(pred.action, 0, m.preds);
    const Var log_p = log_clamped(pa, kProbFloor);
    const Var log_q = log_clamped(add_scalar(scale(pa, -1.0), 1.0), kProbFloor);
    const Var bce = add(mul(log_p, constant(y)), mul(log_q, constant(not_y)));
    terms.push_back(scale(sum(bce), -weights.action / static_cast<double>(c)));
    out.action = terms.back().item();
  }
  out.total = sum_of(terms);
  return out;
}

LossBreakdown tubelet_loss(const DetectionOutput& pred, const TubeletTarget& gt, const Assignment& sigma,
                           FrameSize frame, const LossWeights& weights, const FocalParams& focal) {
  const std::size_t n = pred.classes.dim(0), c1 = pred.classes.dim(1), t = pred.boxes.dim(1);
  if (sigma.pred_to_gt.size() != n) throw ShapeError("assignment does not cover the predictions");
  const MatchedPairs m = pairs_of(sigma);

  std::vector<std::size_t> cls_index(n);
  for (std::size_t i = 0; i < n; ++i) {
    const long j = sigma.pred_to_gt[i];
    cls_index[i] = i * c1 + (j >= 0 ? gt.labels[static_cast<std::size_t>(j)] : c1 - 1);
  }
  const Var pt = gather(pred.classes, {n}, cls_index);
  const Var focal_terms = mul(one_minus_pow(pt, focal.gamma), log_clamped(pt, kProbFloor));
  LossBreakdown out;
  std::vector<Var> terms;
  terms.push_back(scale(sum(focal_terms), -weights.cls * focal.alpha));
  out.cls = terms.back().item();

  if (!m.preds.empty()) {
    std::vector<Box> targets;
    for (std::size_t j : m.gts) {
      if (gt.boxes[j].size() != t) throw ShapeError("tubelet target length differs from the prediction");
      targets.insert(targets.end(), gt.boxes[j].begin(), gt.boxes[j].end());
    }
    const Var pb = reshape(index_select(pred.boxes, 0, m.preds), {m.preds.size() * t, 4});
    const double per_frame = 1.0 / static_cast<double>(t);
    terms.push_back(scale(sum(abs(sub(normalize_boxes(pb, frame), constant(normalized_rows(targets, frame))))),
                          weights.l1 * per_frame / 4.0));
    out.l1 = terms.back().item();
    terms.push_back(scale(sum(giou_loss_rows(pb, corner_rows(targets))), weights.giou * per_frame));
    out.giou = terms.back().item();
  }
  out.total = sum_of(terms);
  return out;
}

namespace {

void accumulate(LossBreakdown& into, const LossBreakdown& part, std::vector<Var>& totals) {
  into.cls += part.cls;
  into.l1 += part.l1;
  into.giou += part.giou;
  into.action += part.action;
  totals.push_back(part.total);
}

}  // namespace

LossBreakdown training_loss(const DecoderOutput& out, const KeyframeTarget& gt, FrameSize frame,
                            const LossWeights& weights) {
  LossBreakdown total;
  std::vector<Var> totals;
  for (const auto& stage : out.stages) {
    const Assignment sigma = match(matching_cost_keyframe(stage, gt, frame, weights));
    accumulate(total, keyframe_loss(stage, gt, sigma, frame, weights), totals);
  }
  total.total = sum_of(totals);
  return total;
}

LossBreakdown training_loss(const DecoderOutput& out, const TubeletTarget& gt, FrameSize frame,
                            const LossWeights& weights, const FocalParams& focal) {
  LossBreakdown total;
  std::vector<Var> totals;
  for (const auto& stage : out.stages) {
    const Assignment sigma = match(matching_cost_tubelet(stage, gt, frame, weights, focal));
    accumulate(total, tubelet_loss(stage, gt, sigma, frame, weights, focal), totals);
  }
  total.total = sum_of(totals);
  return total;
}

}  // namespace stmx
