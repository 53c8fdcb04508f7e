#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "dualseg/tensor.hpp"

namespace dualseg {

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::size_t coordinates = 0;
    // Probe that produced the maximum, with both estimates.
    std::size_t worst_probe = 0;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;

    bool passed(double tolerance) const { return max_rel_error < tolerance; }
};

// |a - n| / max(|a|, |n|, 1e-8)
double relative_error(double analytic, double numeric);

// Compares the autodiff gradient of scalar `f` at `x` against central
// differences (f(x + h e_i) - f(x - h e_i)) / 2h over every coordinate.
// `x` is mutated during the sweep and restored afterwards. A non-scalar f
// raises ContractError. At nondifferentiable points the error is reported
// as large; it is never clipped.
GradCheckResult grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                           Tensor<double> x, double h = 1e-5);

// One probed coordinate: tensor + flat index.
struct GradProbe {
    Tensor<double> tensor;
    std::size_t index;
};

// Same comparison for a closure over captured leaves (e.g. model
// parameters). `loss` is evaluated once with grad recording, then twice per
// probe with grad recording disabled.
GradCheckResult grad_check_probes(const std::function<Tensor<double>()>& loss,
                                  std::vector<GradProbe> probes, double h = 1e-5);

}  // namespace dualseg
