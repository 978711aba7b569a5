#include "dsm/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace dsm {

GradCheckReport gradient_check(
    const std::vector<std::pair<std::string, ad::Tensor*>>& params,
    const std::function<double(bool)>& eval, double epsilon) {
  for (const auto& [name, tp] : params) tp->zero_grad();
  double base = eval(true);
  if (!std::isfinite(base)) {
    throw std::runtime_error("gradient check: loss is not finite at the base point");
  }

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& [name, tp] : params) analytic.push_back(tp->grad);

  GradCheckReport report;
  report.min_abs_analytic = std::numeric_limits<double>::infinity();
  for (std::size_t p = 0; p < params.size(); ++p) {
    const std::string& name = params[p].first;
    ad::Tensor& t = *params[p].second;
    for (std::size_t i = 0; i < t.values.size(); ++i) {
      const double saved = t.values[i];
      t.values[i] = saved + epsilon;
      double fp = eval(false);
      t.values[i] = saved - epsilon;
      double fm = eval(false);
      t.values[i] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw std::runtime_error("gradient check: non-finite loss while perturbing " + name +
                                 "[" + std::to_string(i) + "]");
      }
      double numeric = (fp - fm) / (2.0 * epsilon);
      double a = analytic[p][i];
      double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      double rel = std::fabs(a - numeric) / denom;
      ++report.coords_checked;
      report.min_abs_analytic = std::min(report.min_abs_analytic, std::fabs(a));
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_param = name;
        report.worst_coord = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace dsm
