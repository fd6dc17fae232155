#pragma once

#include <functional>
#include <vector>

#include "stmixer/model.hpp"

namespace stmx {

// Gradient descent with decoupled weight decay: SGD with momentum or AdamW.
class Optimizer {
 public:
  explicit Optimizer(const OptimConfig& config) : config_(config) {}

  // Uses the gradients currently held by the parameters.
  void step(ParameterStore& store);
  std::size_t steps() const { return steps_; }

 private:
  OptimConfig config_;
  std::vector<Tensor> first_, second_;
  std::size_t steps_ = 0;
};

double grad_norm(const ParameterStore& store);
// Learning rate of 0-based step `step` under warmup and cosine decay.
double scheduled_lr(const OptimConfig& config, std::size_t step);

struct IterationRecord {
  std::size_t iteration = 0;
  double cls = 0;
  double l1 = 0;
  double giou = 0;
  double action = 0;
  double total = 0;
};

// Full set loss of one clip, summed over decoder stages.
LossBreakdown clip_loss(const Model& model, const Scenario& scenario, std::size_t clip, const Tensor* bank_window = nullptr);

// Called before the update of each iteration and once after the last one
// with iteration == iterations.
using TrainHook = std::function<void(std::size_t iteration, const Model& model)>;

// Every iteration sums the loss over all clips, backpropagates once and
// updates. A long-term classifier reads its windows from `bank`. Throws
// NumericError naming the iteration on a non-finite loss.
std::vector<IterationRecord> train_toy(Model& model, const Scenario& scenario, const TrainHook& hook = {},
                                       const QueryBank* bank = nullptr);

// Trailing moving average with the given window.
std::vector<double> smooth(const std::vector<double>& values, std::size_t window);

}  // namespace stmx
