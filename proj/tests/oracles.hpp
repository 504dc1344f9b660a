#pragma once

// Test-only oracles: finite differences and straight-line brute-force
// re-implementations, kept independent of the library code they check.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "msfuse/nn.hpp"
#include "msfuse/tape.hpp"
#include "msfuse/tensor.hpp"

namespace oracles {

struct FdReport {
    double max_rel_err = 0.0;
    std::string worst;  // "param[idx]" of the worst coordinate
    int coords_checked = 0;
};

/// Central finite differences over every coordinate of every parameter.
/// build_loss must construct the forward pass from current parameter values
/// and bind each listed tensor with tape.param().
/// Relative error per coordinate: |a - n| / max(|a|, |n|, floor).
inline FdReport fd_check(const msfuse::nn::ParamRefs& params,
                         const std::function<msfuse::ad::Var(msfuse::ad::Tape&)>& build_loss,
                         double step = 1e-5, double denom_floor = 1e-3) {
    using msfuse::Tensor;
    using msfuse::ad::Tape;
    using msfuse::ad::Var;

    Tape tape;
    Var loss = build_loss(tape);
    tape.backward(loss);
    std::vector<Tensor> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) analytic.push_back(tape.grad_for(p.tensor));

    auto eval = [&]() {
        Tape t;
        return t.val(build_loss(t))[0];
    };

    FdReport rep;
    for (size_t k = 0; k < params.size(); ++k) {
        Tensor& t = *params[k].tensor;
        for (int i = 0; i < t.size(); ++i) {
            double orig = t[i];
            t[i] = orig + step;
            double fp = eval();
            t[i] = orig - step;
            double fm = eval();
            t[i] = orig;
            double numeric = (fp - fm) / (2.0 * step);
            double a = analytic[k][i];
            double rel = std::abs(a - numeric) /
                         std::max({std::abs(a), std::abs(numeric), denom_floor});
            ++rep.coords_checked;
            if (rel > rep.max_rel_err) {
                rep.max_rel_err = rel;
                rep.worst = params[k].name + "[" + std::to_string(i) + "]";
            }
        }
    }
    return rep;
}

inline msfuse::Tensor random_tensor(std::vector<int> shape, msfuse::Rng& rng,
                                    double lo = -1.0, double hi = 1.0) {
    msfuse::Tensor t(std::move(shape));
    for (int i = 0; i < t.size(); ++i) t[i] = msfuse::runif(rng, lo, hi);
    return t;
}

}  // namespace oracles
