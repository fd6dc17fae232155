#pragma once

#include <functional>
#include <string>
#include <vector>

#include "stmixer/autograd.hpp"
#include "stmixer/nn.hpp"

namespace stmx {

struct GradTarget {
  std::string name;
  Var leaf;  // must require grad
};

struct GradMismatch {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double error = 0.0;
};

struct GradCheckReport {
  std::size_t checked = 0;
  double max_error = 0.0;
  std::vector<GradMismatch> failures;

  bool passed() const { return failures.empty(); }
};

// Compares the reverse-mode gradient of a scalar function with central
// differences, coordinate by coordinate. The error measure is
// |analytic - numeric| / max(1, |analytic|). `f` is re-evaluated with graph
// recording disabled for the perturbed points. Throws NumericError if f is
// non-finite anywhere it is evaluated.
GradCheckReport check_gradients(const std::function<Var()>& f, const std::vector<GradTarget>& targets,
                                double h = 1e-5, double tol = 1e-4);

GradCheckReport check_gradients(const std::function<Var()>& f, ParameterStore& store, double h = 1e-5,
                                double tol = 1e-4);

}  // namespace stmx
