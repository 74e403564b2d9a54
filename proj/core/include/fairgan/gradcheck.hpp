#pragma once

#include <functional>
#include <vector>

#include "fairgan/graph.hpp"

namespace fairgan {

// Central-difference comparison for autodiff gradients.
//
// The function under test rebuilds its graph on a fresh tape from the given
// input tensors and returns the scalar output, so the checker can re-evaluate
// it at perturbed points. The analytic gradient comes from Tape::grad on one
// build; every entry of every input is then perturbed by +-h.
struct GradCheckReport {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    size_t entries = 0;
};

using ScalarFn = std::function<double(const std::vector<Tensor>&)>;
using ScalarGraphFn = std::function<Value(Tape&, const std::vector<Value>&)>;

// rel = |ad - fd| / max(|ad|, |fd|, floor)
double rel_error(double ad, double fd, double floor = 1e-6);

// Checks d(build(...))/d(inputs) against central differences with step h.
GradCheckReport check_gradients(const ScalarGraphFn& build,
                                std::vector<Tensor> inputs,
                                double h = 1e-3);

// Central differences for an arbitrary scalar function of flat inputs; the
// independent oracle used by tests that cannot rebuild via a tape.
std::vector<double> central_differences(const ScalarFn& f,
                                        const std::vector<Tensor>& inputs,
                                        double h = 1e-3);

}  // namespace fairgan
