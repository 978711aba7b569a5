#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "dsm/tensor.hpp"

namespace dsm {

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  std::size_t worst_coord = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coords_checked = 0;
  // Smallest analytic gradient magnitude seen. Coordinates near the 1e-8
  // denominator floor are where finite differences run out of precision.
  double min_abs_analytic = 0.0;
};

// Compares reverse-mode gradients against central finite differences.
//
// eval(true) must run a fresh forward pass, run backward, accumulate into
// each parameter's .grad, and return the loss; eval(false) must only return
// the loss. Every coordinate of every listed parameter is perturbed by
// +/- epsilon. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
// denominator. Throws std::runtime_error when any evaluation is non-finite,
// naming the parameter and coordinate being perturbed.
GradCheckReport gradient_check(
    const std::vector<std::pair<std::string, ad::Tensor*>>& params,
    const std::function<double(bool with_grad)>& eval, double epsilon = 1e-5);

}  // namespace dsm
