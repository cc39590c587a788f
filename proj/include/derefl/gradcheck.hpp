#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "derefl/autodiff.hpp"

namespace derefl::ad {

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::vector<GradCheckEntry> entries;
  bool passed(double tol) const { return max_rel_error < tol; }
};

/// Compares analytic gradients against central finite differences.
///
/// `build` must construct a fresh scalar graph reading the *current* values
/// of the checked leaves, so perturbing a leaf element and rebuilding yields
/// the perturbed objective.  For every element of every checked leaf:
///
///   numeric = (f(p + h) - f(p - h)) / (2h)
///   rel     = |analytic - numeric| / max(|analytic|, |numeric|, 1e-6)
///
/// The 1e-6 floor keeps the ratio meaningful when both sides are near zero.
/// Callers should keep activations away from ReLU kinks (|preactivation|
/// comfortably above h), otherwise the difference quotient itself is wrong.
inline GradCheckReport check_gradients(
    const std::function<VarPtr()>& build,
    const std::vector<std::pair<std::string, VarPtr>>& checked,
    double step = 1e-3) {
  GradCheckReport report;
  std::vector<VarPtr> leaves;
  leaves.reserve(checked.size());
  for (const auto& [name, var] : checked) leaves.push_back(var);
  zero_grads(leaves);
  backward(build());
  // Snapshot the analytic gradients before the finite-difference passes
  // rebuild the graph (each rebuild accumulates into the same slots).
  std::vector<std::vector<double>> analytic;
  analytic.reserve(checked.size());
  for (const auto& [name, var] : checked) {
    var->t.ensure_grad();
    analytic.push_back(var->t.g);
  }
  for (std::size_t ci = 0; ci < checked.size(); ++ci) {
    const auto& [name, var] = checked[ci];
    GradCheckEntry entry{name, 0.0, 0};
    for (std::size_t j = 0; j < var->t.numel(); ++j) {
      const double saved = var->t.v[j];
      var->t.v[j] = saved + step;
      const double f_plus = build()->t.v[0];
      var->t.v[j] = saved - step;
      const double f_minus = build()->t.v[0];
      var->t.v[j] = saved;
      const double numeric = (f_plus - f_minus) / (2.0 * step);
      const double a = analytic[ci][j];
      const double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), 1e-6});
      if (rel > entry.max_rel_error) {
        entry.max_rel_error = rel;
        entry.worst_index = j;
      }
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  return report;
}

}  // namespace derefl::ad
