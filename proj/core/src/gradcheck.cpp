#include "fairgan/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "fairgan/errors.hpp"

namespace fairgan {

double rel_error(double ad, double fd, double floor) {
    const double denom = std::max({std::fabs(ad), std::fabs(fd), floor});
    return std::fabs(ad - fd) / denom;
}

std::vector<double> central_differences(const ScalarFn& f,
                                        const std::vector<Tensor>& inputs,
                                        double h) {
    std::vector<Tensor> work = inputs;
    std::vector<double> out;
    for (size_t t = 0; t < work.size(); ++t) {
        for (size_t i = 0; i < work[t].numel(); ++i) {
            const double x0 = work[t].v[i];
            work[t].v[i] = x0 + h;
            const double fp = f(work);
            work[t].v[i] = x0 - h;
            const double fm = f(work);
            work[t].v[i] = x0;
            out.push_back((fp - fm) / (2.0 * h));
        }
    }
    return out;
}

GradCheckReport check_gradients(const ScalarGraphFn& build,
                                std::vector<Tensor> inputs,
                                double h) {
    // Analytic gradients from one build.
    std::vector<Tensor> analytic;
    {
        Tape tape;
        std::vector<Value> leaves;
        leaves.reserve(inputs.size());
        for (const Tensor& t : inputs) leaves.push_back(tape.input(t, true));
        Value out = build(tape, leaves);
        if (out.t().numel() != 1) throw UsageError("gradcheck: build must return a scalar");
        for (Value leaf : leaves) analytic.push_back(tape.grad(out, leaf).t());
    }

    // Leaves stay differentiable here too: builds that take an inner
    // gradient (R1-style) need it during re-evaluation.
    ScalarFn f = [&](const std::vector<Tensor>& xs) {
        Tape tape;
        std::vector<Value> leaves;
        leaves.reserve(xs.size());
        for (const Tensor& t : xs) leaves.push_back(tape.input(t, true));
        return tape.scalar(build(tape, leaves));
    };
    std::vector<double> fd = central_differences(f, inputs, h);

    GradCheckReport rep;
    size_t k = 0;
    for (const Tensor& g : analytic) {
        for (size_t i = 0; i < g.numel(); ++i, ++k) {
            rep.max_rel_err = std::max(rep.max_rel_err, rel_error(g.v[i], fd[k]));
            rep.max_abs_err = std::max(rep.max_abs_err, std::fabs(g.v[i] - fd[k]));
        }
    }
    rep.entries = k;
    return rep;
}

}  // namespace fairgan
