#pragma once

// Exhaustive assignment search: every injective map from the K ground truths
// to the N predictions, with the total summed in prediction order.

#include <functional>
#include <limits>
#include <vector>

#include "stmixer/tensor.hpp"

namespace stmx::testing {

inline double brute_force_min_cost(const Tensor& cost) {
  const std::size_t n = cost.dim(0), k = cost.dim(1);
  std::vector<long> pred_to_gt(n, -1);
  double best = std::numeric_limits<double>::infinity();
  std::function<void(std::size_t)> place = [&](std::size_t j) {
    if (j == k) {
      double total = 0;
      for (std::size_t i = 0; i < n; ++i)
        if (pred_to_gt[i] >= 0) total += cost[i * k + static_cast<std::size_t>(pred_to_gt[i])];
      best = std::min(best, total);
      return;
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (pred_to_gt[i] >= 0) continue;
      pred_to_gt[i] = static_cast<long>(j);
      place(j + 1);
      pred_to_gt[i] = -1;
    }
  };
  place(0);
  return k == 0 ? 0.0 : best;
}

// Calls visit(pred_to_gt) for every injective assignment.
inline void for_each_assignment(std::size_t n, std::size_t k, const std::function<void(const std::vector<long>&)>& visit) {
  std::vector<long> pred_to_gt(n, -1);
  std::function<void(std::size_t)> place = [&](std::size_t j) {
    if (j == k) {
      visit(pred_to_gt);
      return;
    }
    for (std::size_t i = 0; i < n; ++i) {
      if (pred_to_gt[i] >= 0) continue;
      pred_to_gt[i] = static_cast<long>(j);
      place(j + 1);
      pred_to_gt[i] = -1;
    }
  };
  place(0);
}

}  // namespace stmx::testing
