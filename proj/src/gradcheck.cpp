#include "captionforge/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "captionforge/errors.hpp"

namespace captionforge {

namespace {

double evaluate(const ScalarFn& f, const std::vector<Tensor>& inputs) {
  Graph g;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(g.param(t, false));
  return f(g, vars).value().item();
}

}  // namespace

GradCheckReport grad_check(const ScalarFn& f, std::vector<Tensor> inputs, double eps, Stencil stencil) {
  if (!(eps > 0.0)) throw ConfigError("grad_check: eps must be positive");

  Graph g;
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const auto& t : inputs) vars.push_back(g.param(t, true));
  const Var out = f(g, vars);
  if (const auto bad = g.first_non_finite(); bad < g.size()) {
    throw DataError(std::string("grad_check: non-finite value produced by op '") +
                    g.op_name(Var{&g, static_cast<std::uint32_t>(bad)}) + "' (node " +
                    std::to_string(bad) + ")");
  }
  g.backward(out);

  GradCheckReport report;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor analytic = g.grad(vars[i]);
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double saved = inputs[i][j];
      auto at = [&](double offset) {
        inputs[i][j] = saved + offset;
        const double y = evaluate(f, inputs);
        inputs[i][j] = saved;
        if (!std::isfinite(y)) {
          throw DataError("grad_check: non-finite output when perturbing input " + std::to_string(i) +
                          " element " + std::to_string(j));
        }
        return y;
      };
      const double numeric =
          stencil == Stencil::two_point
              ? (at(eps) - at(-eps)) / (2.0 * eps)
              : (8.0 * (at(eps) - at(-eps)) - (at(2.0 * eps) - at(-2.0 * eps))) / (12.0 * eps);
      const double a = analytic[j];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double rel = std::abs(a - numeric) / denom;
      ++report.checked;
      if (rel > report.max_relative_error) {
        report.max_relative_error = rel;
        report.worst_input = i;
        report.worst_index = j;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace captionforge
