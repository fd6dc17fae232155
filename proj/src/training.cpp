#include "stmixer/training.hpp"

#include <cmath>
#include <sstream>

namespace stmx {

double grad_norm(const ParameterStore& store) {
  double s = 0;
  for (const auto& p : store.all())
    for (double g : p.grad().data()) s += g * g;
  return std::sqrt(s);
}

double scheduled_lr(const OptimConfig& config, std::size_t step) {
  double lr = config.lr;
  if (config.warmup > 0 && step < config.warmup) lr *= static_cast<double>(step + 1) / static_cast<double>(config.warmup);
  if (config.cosine && config.iterations > 0) {
    const double progress = std::min(1.0, static_cast<double>(step) / static_cast<double>(config.iterations));
    lr *= 0.5 * (1.0 + std::cos(M_PI * progress));
  }
  return lr;
}

void Optimizer::step(ParameterStore& store) {
  auto& params = store.all();
  if (first_.empty()) {
    for (const auto& p : params) {
      first_.emplace_back(p.value().dims());
      second_.emplace_back(p.value().dims());
    }
  }
  if (first_.size() != params.size()) throw ConfigError("optimizer: parameter set changed between steps");
  ++steps_;
  double clip = 1.0;
  if (config_.grad_clip > 0) {
    const double norm = grad_norm(store);
    if (norm > config_.grad_clip) clip = config_.grad_clip / norm;
  }
  const double lr = scheduled_lr(config_, steps_ - 1), decay = lr * config_.weight_decay;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].value().data();
    const auto g = params[i].grad().data();
    auto m = first_[i].data();
    auto v = second_[i].data();
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = g[j] * clip;
      w[j] -= decay * w[j];
      if (config_.kind == OptimizerKind::kSgd) {
        m[j] = config_.momentum * m[j] + gj;
        w[j] -= lr * m[j];
      } else {
        m[j] = config_.beta1 * m[j] + (1.0 - config_.beta1) * gj;
        v[j] = config_.beta2 * v[j] + (1.0 - config_.beta2) * gj * gj;
        w[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + config_.eps);
      }
    }
  }
}

namespace {

bool all_finite(const Var& v) {
  if (!v.node()) return true;
  for (double x : v.value().data())
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace

LossBreakdown clip_loss(const Model& model, const Scenario& scenario, std::size_t clip, const Tensor* bank_window) {
  const DecoderOutput out = model.forward(scenario.clips[clip], bank_window);
  for (std::size_t m = 0; m < out.stages.size(); ++m) {
    const DetectionOutput& o = out.stages[m];
    if (!all_finite(o.boxes) || !all_finite(o.human) || !all_finite(o.action) || !all_finite(o.classes)) {
      throw NumericError("non-finite predictions at stage " + std::to_string(m) + " of clip " + std::to_string(clip));
    }
  }
  if (model.config.decoder.mode == DetectorMode::kKeyframe) {
    return training_loss(out, scenario.keyframe_target(clip), scenario.frame(), model.config.weights);
  }
  return training_loss(out, scenario.tubelet_target(clip), scenario.frame(), model.config.weights, model.config.focal);
}

std::vector<IterationRecord> train_toy(Model& model, const Scenario& scenario, const TrainHook& hook,
                                       const QueryBank* bank) {
  const DecoderConfig& cfg = model.config.decoder;
  const bool long_term = cfg.mode == DetectorMode::kKeyframe && cfg.classifier == ClassifierKind::kLongTerm;
  if (long_term && bank == nullptr) throw ConfigError("long-term classifier needs a query bank");
  std::vector<Tensor> windows;
  if (long_term)
    for (std::size_t c = 0; c < scenario.clips.size(); ++c) windows.push_back(bank->window(c, cfg.bank_window));
  Optimizer optimizer(model.config.optim);
  std::vector<IterationRecord> trace;
  const std::size_t iterations = model.config.optim.iterations;
  for (std::size_t it = 0; it < iterations; ++it) {
    if (hook) hook(it, model);
    model.store.zero_grad();
    IterationRecord rec;
    rec.iteration = it;
    std::vector<Var> totals;
    for (std::size_t c = 0; c < scenario.clips.size(); ++c) {
      LossBreakdown l;
      try {
        l = clip_loss(model, scenario, c, long_term ? &windows[c] : nullptr);
      } catch (const NumericError& e) {
        throw NumericError("iteration " + std::to_string(it) + ": " + e.what());
      }
      rec.cls += l.cls;
      rec.l1 += l.l1;
      rec.giou += l.giou;
      rec.action += l.action;
      totals.push_back(l.total);
    }
    const Var total = sum_of(totals);
    rec.total = total.item();
    if (!std::isfinite(rec.total)) {
      std::ostringstream msg;
      msg << "non-finite loss at iteration " << it << " (cls " << rec.cls << ", l1 " << rec.l1 << ", giou " << rec.giou
          << ", action " << rec.action << ")";
      throw NumericError(msg.str());
    }
    total.backward();
    optimizer.step(model.store);
    trace.push_back(rec);
  }
  if (hook) hook(iterations, model);
  return trace;
}

std::vector<double> smooth(const std::vector<double>& values, std::size_t window) {
  std::vector<double> out;
  double acc = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    acc += values[i];
    if (i >= window) acc -= values[i - window];
    out.push_back(acc / static_cast<double>(std::min(i + 1, window)));
  }
  return out;
}

}  // namespace stmx
