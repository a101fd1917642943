#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "attnembed/tensor.hpp"

namespace attnembed {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::map<std::string, double> per_parameter_errors;
  int checked_entries = 0;
  int skipped_entries = 0;  // entries where both gradients sit at numeric zero
};

// Compares the analytic gradient of loss_fn against central finite
// differences, parameter by parameter. loss_fn must rebuild the graph from
// the current parameter values on every call. Frozen parameters
// (requires_grad == false) are left out of the report. Entries where both
// the analytic and the difference quotient are below zero_tol carry no
// resolvable relative error and are skipped rather than divided.
inline GradCheckReport finite_difference_check(const std::function<Tensor()>& loss_fn,
                                               std::vector<NamedParam>& params, double step = 1e-5,
                                               double zero_tol = 1e-6) {
  GradCheckReport report;

  for (auto& p : params) p.tensor.zero_grad();
  Tensor loss = loss_fn();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.push_back(p.tensor.grad());

  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    if (!p.tensor.requires_grad()) continue;
    double worst = 0.0;
    auto& vals = p.tensor.values();
    for (size_t i = 0; i < vals.size(); ++i) {
      const double keep = vals[i];
      vals[i] = keep + step;
      const double up = loss_fn().item();
      vals[i] = keep - step;
      const double down = loss_fn().item();
      vals[i] = keep;
      const double fd = (up - down) / (2.0 * step);
      const double an = analytic[pi].empty() ? 0.0 : analytic[pi][i];
      const double denom = std::max(std::abs(fd), std::abs(an));
      if (denom <= zero_tol) {
        ++report.skipped_entries;
        continue;
      }
      ++report.checked_entries;
      worst = std::max(worst, std::abs(fd - an) / denom);
    }
    report.per_parameter_errors[p.name] = worst;
    if (worst >= report.max_relative_error) {
      // ties resolve to the later parameter; deterministic either way
      if (worst > report.max_relative_error || report.worst_parameter.empty()) {
        report.max_relative_error = worst;
        report.worst_parameter = p.name;
      }
    }
  }
  return report;
}

}  // namespace attnembed
