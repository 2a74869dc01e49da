#pragma once

// Finite-difference verification of reverse-mode gradients.
//
// check_gradient perturbs every coordinate of every parameter by +/-h,
// recomputes the scalar loss, and compares the central difference against
// the gradient produced by a single backward pass. The comparison uses a
// relative error normalized by max(1, |analytic|, |numeric|) so that both
// tiny and large gradients are judged on the same scale.

#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace tokpo {

struct GradCheckResult {
    bool ok = true;
    double max_rel_error = 0.0;
    // Coordinates of the worst mismatch, for diagnostics.
    std::size_t worst_param = 0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::string message;
};

// `loss_fn` must rebuild the computation from the current parameter values
// every time it is called (the tape passed to it is fresh on each call).
inline GradCheckResult check_gradient(const std::function<Tensor(Tape&)>& loss_fn,
                                      const std::vector<Tensor*>& params, double tol = 1e-4,
                                      double h = 1e-5) {
    GradCheckResult res;

    for (Tensor* p : params) p->zero_grad();
    {
        Tape tape;
        Tape::Scope scope(tape);
        Tensor loss = loss_fn(tape);
        if (!std::isfinite(loss.item())) {
            res.ok = false;
            res.message = "loss is not finite";
            return res;
        }
        tape.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (Tensor* p : params) analytic.push_back(p->grad());

    auto eval = [&]() {
        Tape tape;
        Tape::Scope scope(tape);
        return loss_fn(tape).item();
    };

    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor* p = params[pi];
        auto& vals = p->data();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double keep = vals[i];
            vals[i] = keep + h;
            const double up = eval();
            vals[i] = keep - h;
            const double down = eval();
            vals[i] = keep;

            const double num = (up - down) / (2.0 * h);
            const double ana = analytic[pi][i];
            if (!std::isfinite(num) || !std::isfinite(ana)) {
                res.ok = false;
                res.max_rel_error = std::numeric_limits<double>::infinity();
                res.worst_param = pi;
                res.worst_index = i;
                res.analytic = ana;
                res.numeric = num;
                res.message = "non-finite gradient encountered";
                return res;
            }
            const double denom = std::max({1.0, std::fabs(ana), std::fabs(num)});
            const double rel = std::fabs(ana - num) / denom;
            if (rel > res.max_rel_error) {
                res.max_rel_error = rel;
                res.worst_param = pi;
                res.worst_index = i;
                res.analytic = ana;
                res.numeric = num;
            }
        }
    }

    if (res.max_rel_error > tol) {
        res.ok = false;
        std::ostringstream os;
        os << "gradient mismatch at param " << res.worst_param << " index " << res.worst_index
           << ": analytic " << res.analytic << " vs numeric " << res.numeric << " (rel "
           << res.max_rel_error << ", tol " << tol << ")";
        res.message = os.str();
    }
    return res;
}

}  // namespace tokpo
