#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "posealign/rng.hpp"
#include "posealign/tensor.hpp"

namespace posealign {

struct GradCheckOptions {
  /// Coordinates checked per parameter tensor; 0 means all of them.
  std::size_t max_coords_per_param = 0;
  /// Denominator floor of the relative error, so vanishing gradients are
  /// compared in absolute terms.
  double abs_floor = 1e-6;
  std::uint64_t sample_seed = 0;
};

struct GradCheckEntry {
  std::size_t param = 0;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  GradCheckEntry worst;
  /// Coordinates on or next to a kink of f: the one-sided differences
  /// disagree and the analytic value lies between them. Not counted as
  /// failures.
  std::vector<GradCheckEntry> excluded;
  std::vector<GradCheckEntry> failures;
  bool passed = true;
};

using ScalarFn = std::function<Tensor<double>(Graph<double>&)>;

namespace gradcheck_detail {
inline constexpr int kRetries = 6;
// Errors above this fraction of tol trigger step refinement.
inline constexpr double kRefine = 0.1;
}  // namespace gradcheck_detail

/// Compares reverse-mode gradients of f against central differences
/// (f(p + h e_i) - f(p - h e_i)) / 2h for every (sampled) coordinate of the
/// given parameter tensors. f must read the parameters by handle, so the
/// perturbation done here is visible to it.
inline GradCheckReport finite_diff_check(const ScalarFn& f, std::vector<Tensor<double>> params, double h, double tol,
                                         const GradCheckOptions& opts = {}) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Graph<double> graph;
    Tensor<double> loss = f(graph);
    graph.backward(loss);
  }

  auto eval = [&](std::size_t pi, std::size_t idx) {
    Graph<double> graph(false);
    const double v = f(graph).item();
    if (!std::isfinite(v)) {
      throw std::runtime_error("finite_diff_check: f is non-finite with parameter " + std::to_string(pi) +
                               " perturbed at index " + std::to_string(idx));
    }
    return v;
  };
  auto rel = [&](double a, double n) {
    return std::abs(a - n) / std::max({std::abs(a), std::abs(n), opts.abs_floor});
  };

  using gradcheck_detail::kRefine;
  using gradcheck_detail::kRetries;
  GradCheckReport report;
  CounterRng pick(opts.sample_seed, 0x9c4);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<double>& p = params[pi];
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());

    std::vector<std::size_t> coords;
    if (opts.max_coords_per_param == 0 || opts.max_coords_per_param >= p.numel()) {
      for (std::size_t i = 0; i < p.numel(); ++i) coords.push_back(i);
    } else {
      for (std::size_t k = 0; k < opts.max_coords_per_param; ++k) coords.push_back(pick.next_u64() % p.numel());
    }

    for (std::size_t idx : coords) {
      const double saved = p[idx];
      auto at = [&](double offset) {
        p[idx] = saved + offset;
        const double v = eval(pi, idx);
        p[idx] = saved;
        return v;
      };
      const double a = analytic[idx];
      double step = h;
      double numeric = (at(step) - at(-step)) / (2 * step);
      double err = rel(a, numeric);
      bool kink = false;
      if (err > kRefine * tol) {
        // Shrink the step and keep the best estimate. On (or within one step
        // of) a kink the one-sided slopes keep disagreeing and the analytic
        // value lies between them.
        const double f0 = at(0.0);
        for (int k = 0; k < kRetries && err > kRefine * tol; ++k) {
          step *= 0.5;
          const double fp = at(step), fm = at(-step);
          const double c = (fp - fm) / (2 * step);
          if (rel(a, c) < err) {
            err = rel(a, c);
            numeric = c;
          }
          const double fwd = (fp - f0) / step, bwd = (f0 - fm) / step;
          const double slack = tol * std::max({std::abs(fwd), std::abs(bwd), opts.abs_floor});
          kink = rel(fwd, bwd) > tol && a >= std::min(fwd, bwd) - slack && a <= std::max(fwd, bwd) + slack;
        }
        if (err <= tol) kink = false;
      }
      GradCheckEntry entry{pi, idx, a, numeric, err};
      if (kink) {
        report.excluded.push_back(entry);
        continue;
      }
      ++report.checked;
      if (report.checked == 1 || err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst = entry;
      }
      if (err > tol) {
        report.failures.push_back(entry);
        report.passed = false;
      }
    }
  }
  return report;
}

}  // namespace posealign
