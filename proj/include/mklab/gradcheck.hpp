#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mklab/tensor.hpp"

// Central-difference verification of reverse-mode gradients.
//
// Always runs at double precision: float step sizes near 1e-5 drown the
// difference quotient in rounding error.

namespace mklab {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  // (leaf index, flat coordinate) of every entry over tolerance.
  std::vector<std::pair<std::size_t, std::size_t>> failures;
  bool pass = true;

  std::string summary() const {
    std::ostringstream os;
    os << (pass ? "PASS" : "FAIL") << " coords=" << checked
       << " max_rel_err=" << max_rel_err << " failures=" << failures.size();
    if (!failures.empty()) {
      os << " first=(" << failures[0].first << "," << failures[0].second << ")";
    }
    return os.str();
  }
};

// fn maps the leaves to a scalar tensor. Every leaf is treated as a
// differentiable input; its values are perturbed in place for the numeric
// side and restored afterwards.
inline GradCheckReport gradcheck(const std::function<Tensor<double>(std::vector<Tensor<double>>&)>& fn,
                                 std::vector<Tensor<double>> leaves, double h = 1e-5,
                                 double tol = 1e-4) {
  for (auto& leaf : leaves) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
  }
  auto loss = fn(leaves);
  loss.backward();

  GradCheckReport report;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& leaf = leaves[li];
    const auto grads = leaf.grad();  // copy: fn reruns may touch buffers
    for (std::size_t ci = 0; ci < leaf.numel(); ++ci) {
      const double keep = leaf.data()[ci];
      double f_plus, f_minus;
      {
        NoGradGuard ng;
        leaf.data()[ci] = keep + h;
        f_plus = fn(leaves).item();
        leaf.data()[ci] = keep - h;
        f_minus = fn(leaves).item();
      }
      leaf.data()[ci] = keep;
      const double g_fd = (f_plus - f_minus) / (2.0 * h);
      const double g_ad = grads[ci];
      const double rel = std::abs(g_ad - g_fd) /
                         std::max({1.0, std::abs(g_ad), std::abs(g_fd)});
      report.max_rel_err = std::max(report.max_rel_err, rel);
      ++report.checked;
      if (rel > tol) report.failures.emplace_back(li, ci);
    }
  }
  report.pass = report.failures.empty();
  return report;
}

}  // namespace mklab
