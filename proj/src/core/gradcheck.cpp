#include "dualseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace dualseg {

double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

namespace {

double scalar_value(const Tensor<double>& y) {
    if (!y.defined() || y.size() != 1) {
        throw ContractError("grad_check: function must return a scalar, got " +
                            (y.defined() ? to_string(y.shape()) : std::string("undefined")));
    }
    return y.item();
}

}  // namespace

GradCheckResult grad_check_probes(const std::function<Tensor<double>()>& loss,
                                  std::vector<GradProbe> probes, double h) {
    if (!(h > 0.0)) {
        throw ParameterError("grad_check: step must be positive");
    }
    for (auto& probe : probes) {
        probe.tensor.set_requires_grad(true);
        probe.tensor.zero_grad();
    }
    Tensor<double> y = loss();
    scalar_value(y);
    backward(y);

    GradCheckResult result;
    result.coordinates = probes.size();
    NoGradGuard no_grad;
    for (std::size_t p = 0; p < probes.size(); ++p) {
        auto& t = probes[p].tensor;
        const std::size_t i = probes[p].index;
        const double analytic = t.has_grad() ? t.grad()[i] : 0.0;
        auto values = t.mutable_data();
        const double original = values[i];
        values[i] = original + h;
        const double plus = scalar_value(loss());
        values[i] = original - h;
        const double minus = scalar_value(loss());
        values[i] = original;
        const double numeric = (plus - minus) / (2.0 * h);
        const double err = relative_error(analytic, numeric);
        if (p == 0 || err > result.max_rel_error) {
            result.max_rel_error = err;
            result.worst_probe = p;
            result.worst_index = i;
            result.worst_analytic = analytic;
            result.worst_numeric = numeric;
        }
    }
    return result;
}

GradCheckResult grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                           Tensor<double> x, double h) {
    std::vector<GradProbe> probes;
    probes.reserve(static_cast<std::size_t>(x.size()));
    for (std::size_t i = 0; i < static_cast<std::size_t>(x.size()); ++i) {
        probes.push_back({x, i});
    }
    return grad_check_probes([&] { return f(x); }, std::move(probes), h);
}

}  // namespace dualseg
