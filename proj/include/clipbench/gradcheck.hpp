#pragma once

// Central finite-difference checks of reverse-mode gradients.

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "clipbench/tensor.hpp"

namespace clipbench {

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-6;
  // Elements whose analytic and numeric gradients are both below this are
  // not compared.
  double magnitude_floor = 1e-8;
};

struct GradCheckReport {
  std::size_t checked = 0;
  std::size_t passed = 0;
  std::size_t skipped = 0;  // below magnitude_floor
  double max_rel_error = 0.0;
  std::string worst;  // "<input index>[<element>]" of the largest error

  double pass_fraction() const {
    return checked == 0 ? 1.0 : static_cast<double>(passed) / static_cast<double>(checked);
  }
  bool all_passed() const { return passed == checked; }
};

inline double relative_error(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

// `loss` must rebuild its graph from the current values of `inputs` on every
// call. Inputs are perturbed in place and restored.
inline GradCheckReport check_gradients(const std::function<Tensor()>& loss,
                                       std::vector<Tensor> inputs,
                                       const GradCheckOptions& opt = {}) {
  for (auto& t : inputs) t.zero_grad();
  Tensor l = loss();
  backward(l);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) analytic.push_back(t.grad());

  GradCheckReport rep;
  NoGradGuard no_grad;
  for (std::size_t p = 0; p < inputs.size(); ++p) {
    auto values = inputs[p].mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double orig = values[i];
      values[i] = orig + opt.step;
      const double up = loss().item();
      values[i] = orig - opt.step;
      const double down = loss().item();
      values[i] = orig;
      const double numeric = (up - down) / (2.0 * opt.step);
      const double a = analytic[p][i];
      if (std::abs(a) <= opt.magnitude_floor && std::abs(numeric) <= opt.magnitude_floor) {
        ++rep.skipped;
        continue;
      }
      ++rep.checked;
      const double err = relative_error(a, numeric);
      if (err <= opt.tolerance) ++rep.passed;
      if (err > rep.max_rel_error) {
        rep.max_rel_error = err;
        rep.worst = std::to_string(p) + "[" + std::to_string(i) + "]";
      }
    }
  }
  for (auto& t : inputs) t.zero_grad();
  return rep;
}

}  // namespace clipbench
