#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "strode/autodiff.hpp"
#include "strode/errors.hpp"
#include "strode/nn.hpp"

namespace strode {

struct IVPSpec {
    std::function<std::vector<double>(std::span<const double>, double)> rhs;
    std::vector<double> y0;
    double t0 = 0.0;
    double t1 = 0.0;
    double step = 0.1;
    std::size_t max_steps = 1000000;
};

struct Trajectory {
    std::vector<double> times;
    std::vector<std::vector<double>> states;
};

namespace detail {

// Shared grid rule: full steps of `step` from t0, with the last step
// shortened to land exactly on t1. Both solver variants use this so their
// arithmetic agrees bit for bit.
inline std::size_t euler_step_count(double t0, double t1, double step, std::size_t max_steps) {
    if (!(step > 0.0) || !std::isfinite(step)) {
        throw ParameterError("euler: step must be positive and finite");
    }
    if (!std::isfinite(t0) || !std::isfinite(t1)) {
        throw ContractError("euler: non-finite integration bounds");
    }
    const double span = t1 - t0;
    if (span < 0.0) throw ContractError("euler: t1 must not precede t0");
    if (span == 0.0) return 0;
    // The slack keeps span == k*step from rounding up to an extra sliver step.
    const double raw = std::ceil(span / step - 1e-12);
    const std::size_t n = raw < 1.0 ? 1 : static_cast<std::size_t>(raw);
    if (n > max_steps) {
        throw ParameterError("euler: " + std::to_string(n) + " steps exceeds budget of " +
                             std::to_string(max_steps));
    }
    return n;
}

}  // namespace detail

inline std::vector<double> euler_solve(const IVPSpec& spec, Trajectory* traj = nullptr) {
    const std::size_t n = detail::euler_step_count(spec.t0, spec.t1, spec.step, spec.max_steps);
    std::vector<double> y = spec.y0;
    if (traj != nullptr) {
        traj->times.clear();
        traj->states.clear();
        traj->times.push_back(spec.t0);
        traj->states.push_back(y);
    }
    for (std::size_t k = 0; k < n; ++k) {
        const double tk = spec.t0 + static_cast<double>(k) * spec.step;
        const std::vector<double> f = spec.rhs(y, tk);
        if (f.size() != y.size()) {
            throw DimensionError("euler_solve: rhs returned " + std::to_string(f.size()) +
                                 " components for state of size " + std::to_string(y.size()));
        }
        const bool last = (k + 1 == n);
        const double delta = last ? spec.t1 - tk : spec.step;
        const double tnext = last ? spec.t1 : spec.t0 + static_cast<double>(k + 1) * spec.step;
        for (std::size_t i = 0; i < y.size(); ++i) {
            y[i] = y[i] + delta * f[i];
            if (!std::isfinite(y[i])) {
                throw NumericError("euler_solve: non-finite state at step " + std::to_string(k) +
                                   ", t=" + std::to_string(tk));
            }
        }
        if (traj != nullptr) {
            traj->times.push_back(tnext);
            traj->states.push_back(y);
        }
    }
    return y;
}

// Differentiable fixed-step Euler with tape-valued bounds. Grid times are
// t0 + k*step as nodes, so d(state)/d(t0) and d(state)/d(t1) both flow: the
// former through every rhs time input, the latter through the final sliver.
inline ad::DiffValue euler_solve_tape(
    const std::function<ad::DiffValue(const ad::DiffValue&, const ad::DiffValue&)>& rhs,
    const ad::DiffValue& y0, const ad::DiffValue& t0, const ad::DiffValue& t1, double step,
    std::size_t max_steps = 1000000) {
    if (t0.size() != 1 || t1.size() != 1) {
        throw ContractError("euler_solve_tape: integration bounds must be scalar");
    }
    const std::size_t n = detail::euler_step_count(t0.value(), t1.value(), step, max_steps);
    ad::DiffValue y = y0;
    for (std::size_t k = 0; k < n; ++k) {
        const ad::DiffValue tk =
            k == 0 ? t0 : ad::offset(t0, static_cast<double>(k) * step);
        const ad::DiffValue f = rhs(y, tk);
        if (f.size() != y.size()) {
            throw DimensionError("euler_solve_tape: rhs dimension mismatch");
        }
        if (k + 1 < n) {
            y = ad::add(y, ad::scale(f, step));
        } else {
            y = ad::add(y, ad::scale_node(f, ad::sub(t1, tk)));
        }
        for (double v : y.data()) {
            if (!std::isfinite(v)) {
                throw NumericError("euler_solve_tape: non-finite state at step " +
                                   std::to_string(k));
            }
        }
    }
    return y;
}

// Latent dynamics h'(t) = f([h; t]) integrated over one boundary segment.
inline ad::DiffValue ode_solve_dynamics(const ConstrainedMLP& dyn, const ad::DiffValue& h0,
                                        const ad::DiffValue& t0, const ad::DiffValue& t1,
                                        double step, std::size_t max_steps = 1000000) {
    if (dyn.input_dim() != h0.rows() + 1 || dyn.output_dim() != h0.rows()) {
        throw DimensionError("ode_solve_dynamics: net must map [h;t] (" +
                             std::to_string(h0.rows() + 1) + ") to h (" +
                             std::to_string(h0.rows()) + ")");
    }
    auto rhs = [&dyn](const ad::DiffValue& y, const ad::DiffValue& t) {
        return dyn.forward(ad::concat(y, t));
    };
    return euler_solve_tape(rhs, h0, t0, t1, step, max_steps);
}

// Tape-free twin of ode_solve_dynamics for inference paths.
inline std::vector<double> ode_eval_dynamics(const ConstrainedMLP& dyn,
                                             std::vector<double> h0, double t0, double t1,
                                             double step, std::size_t max_steps = 1000000) {
    if (dyn.input_dim() != static_cast<int>(h0.size()) + 1 ||
        dyn.output_dim() != static_cast<int>(h0.size())) {
        throw DimensionError("ode_eval_dynamics: net/state dimension mismatch");
    }
    IVPSpec spec;
    spec.rhs = [&dyn](std::span<const double> y, double t) {
        std::vector<double> in(y.begin(), y.end());
        in.push_back(t);
        return dyn.eval(in);
    };
    spec.y0 = std::move(h0);
    spec.t0 = t0;
    spec.t1 = t1;
    spec.step = step;
    spec.max_steps = max_steps;
    return euler_solve(spec);
}

}  // namespace strode
