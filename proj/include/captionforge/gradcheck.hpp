#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "captionforge/autograd.hpp"

namespace captionforge {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t checked = 0;
};

/// Builds a scalar from leaves bound to the given inputs.
using ScalarFn = std::function<Var(Graph&, std::span<const Var>)>;

/// Central-difference stencils. The 4-point rule has O(h^4) truncation, so it
/// tolerates a larger h and with it less round-off; used for deep composites
/// whose smallest gradients sit near the 2-point noise floor |f| * 1e-16 / h.
enum class Stencil { two_point, four_point };

/// Compares backward() against central differences, element by element.
/// Relative error is |a - n| / max(|a|, |n|, 1e-8). Throws DataError naming
/// the first op that produced a non-finite value.
GradCheckReport grad_check(const ScalarFn& f, std::vector<Tensor> inputs, double eps = 1e-6,
                           Stencil stencil = Stencil::two_point);

}  // namespace captionforge
