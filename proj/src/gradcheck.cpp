#include "stmixer/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace stmx {

namespace {

double eval_scalar(const std::function<Var()>& f) {
  double v = 0.0;
  try {
    v = f().item();
  } catch (const NumericError& e) {
    throw NumericError(std::string("gradient check: function evaluation failed: ") + e.what());
  }
  if (!std::isfinite(v)) throw NumericError("gradient check: non-finite function value");
  return v;
}

}  // namespace

GradCheckReport check_gradients(const std::function<Var()>& f, const std::vector<GradTarget>& targets, double h,
                                double tol) {
  for (const auto& t : targets) {
    if (!t.leaf.requires_grad()) throw ConfigError("gradient check target '" + t.name + "' does not require grad");
  }
  for (auto t : targets) t.leaf.mutable_grad().fill(0.0);
  {
    Var out = f();
    if (!std::isfinite(out.item())) throw NumericError("gradient check: non-finite function value");
    out.backward();
  }
  GradCheckReport report;
  NoGradGuard no_grad;
  for (auto t : targets) {
    const Tensor analytic = t.leaf.grad();
    Tensor& value = t.leaf.mutable_value();
    for (std::size_t i = 0; i < value.size(); ++i) {
      const double original = value[i];
      value[i] = original + h;
      const double plus = eval_scalar(f);
      value[i] = original - h;
      const double minus = eval_scalar(f);
      value[i] = original;
      const double numeric = (plus - minus) / (2.0 * h);
      const double error = std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
      report.max_error = std::max(report.max_error, error);
      ++report.checked;
      if (!(error <= tol)) report.failures.push_back({t.name, i, analytic[i], numeric, error});
    }
  }
  return report;
}

GradCheckReport check_gradients(const std::function<Var()>& f, ParameterStore& store, double h, double tol) {
  std::vector<GradTarget> targets;
  for (auto& p : store.all()) targets.push_back({p.name(), p.var()});
  return check_gradients(f, targets, h, tol);
}

}  // namespace stmx
