#pragma once

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "strode/autodiff.hpp"
#include "strode/errors.hpp"
#include "strode/nn.hpp"
#include "strode/ode.hpp"
#include "strode/rng.hpp"

namespace strode {

// Floor applied to the time argument of the posterior density; q carries a
// 1/t factor that must not blow up at the origin of the KL grid.
inline constexpr double kTimeFloor = 1e-6;
// Floor applied to densities inside the KL log ratio only.
inline constexpr double kDensityFloor = 1e-12;

// Next-boundary-time network. All three linear maps are NonPositive and the
// hidden activations are nondecreasing, so t -> net([t; enc]) is
// nonincreasing and the derived density -d(net)/dt / t stays nonnegative.
struct PosteriorTimeNet {
    ConstrainedMLP net;
    int conditioning_dim = 0;

    static PosteriorTimeNet make(int conditioning_dim, int hidden, Rng& rng) {
        if (conditioning_dim < 0) throw ParameterError("PosteriorTimeNet: bad conditioning_dim");
        PosteriorTimeNet p;
        p.conditioning_dim = conditioning_dim;
        p.net = ConstrainedMLP::make(
            {{1 + conditioning_dim, hidden, Activation::Tanh, SignConstraint::NonPositive},
             {hidden, hidden, Activation::Tanh, SignConstraint::NonPositive},
             {hidden, 1, Activation::Softplus, SignConstraint::NonPositive}},
            rng);
        return p;
    }

    void validate() const {
        if (net.layers.size() != 3) {
            throw ContractError("PosteriorTimeNet: expected 3 linear maps");
        }
        for (std::size_t i = 0; i < net.layers.size(); ++i) {
            if (net.layers[i].constraint != SignConstraint::NonPositive) {
                throw ContractError("PosteriorTimeNet: layer " + std::to_string(i) +
                                    " must be NonPositive");
            }
            for (double w : net.layers[i].weight.data()) {
                if (w > 0.0) {
                    throw ContractError("PosteriorTimeNet: positive weight in layer " +
                                        std::to_string(i));
                }
            }
        }
    }
};

// Cumulative conditional intensity network for the regenerative prior.
// phi(t) = net(t) - net(0) is exactly zero at t=0 and nondecreasing because
// every weight is nonnegative.
struct PriorIntensityNet {
    ConstrainedMLP net;

    static PriorIntensityNet make(int hidden, Rng& rng) {
        PriorIntensityNet p;
        p.net = ConstrainedMLP::make(
            {{1, hidden, Activation::Tanh, SignConstraint::NonNegative},
             {hidden, hidden, Activation::Tanh, SignConstraint::NonNegative},
             {hidden, 1, Activation::Softplus, SignConstraint::NonNegative}},
            rng);
        return p;
    }

    void validate() const {
        if (net.layers.size() != 3) {
            throw ContractError("PriorIntensityNet: expected 3 linear maps");
        }
        for (std::size_t i = 0; i < net.layers.size(); ++i) {
            if (net.layers[i].constraint != SignConstraint::NonNegative) {
                throw ContractError("PriorIntensityNet: layer " + std::to_string(i) +
                                    " must be NonNegative");
            }
            for (double w : net.layers[i].weight.data()) {
                if (w < 0.0) {
                    throw ContractError("PriorIntensityNet: negative weight in layer " +
                                        std::to_string(i));
                }
            }
        }
    }
};

struct BoundaryTimes {
    std::vector<double> times;  // t_1..t_N; the implicit origin t_0 is 0

    void validate() const {
        double prev = 0.0;
        for (std::size_t i = 0; i < times.size(); ++i) {
            if (!(times[i] > prev)) {
                throw ContractError("BoundaryTimes: times must be strictly increasing and "
                                    "positive (index " + std::to_string(i) + ")");
            }
            prev = times[i];
        }
    }
};

// ---------------------------------------------------------------- sampling --

// Draws the next boundary time as t_prev plus the softplus-headed network
// output, so the sequence is strictly increasing for any parameters.
inline ad::DiffValue sample_next_time(const PosteriorTimeNet& post, const ad::DiffValue& t_prev,
                                      const ad::DiffValue& x_enc,
                                      const DropoutPlan* plan = nullptr) {
    if (t_prev.size() != 1) throw ContractError("sample_next_time: t_prev must be scalar");
    if (t_prev.value() < 0.0) {
        throw ContractError("sample_next_time: t_prev must be nonnegative");
    }
    if (x_enc.rows() != post.conditioning_dim || x_enc.cols() != 1) {
        throw DimensionError("sample_next_time: conditioning size mismatch");
    }
    const ad::DiffValue out = post.net.forward(ad::concat(t_prev, x_enc), plan);
    return ad::add(out, t_prev);
}

inline ad::DiffValue sample_next_time(const PosteriorTimeNet& post, double t_prev,
                                      const ad::DiffValue& x_enc,
                                      const DropoutPlan* plan = nullptr) {
    return sample_next_time(post, ad::scalar_constant(t_prev), x_enc, plan);
}

// --------------------------------------------------------------- densities --

// q(t) = -Phi'(t)/t with t clamped to the floor; Phi' is the derivative of
// the network output with respect to its time input.
inline ad::DiffValue posterior_density(const PosteriorTimeNet& post, const ad::DiffValue& t,
                                       const ad::DiffValue& x_enc,
                                       const DropoutPlan* plan = nullptr) {
    if (t.size() != 1) throw ContractError("posterior_density: t must be scalar");
    const ad::DiffValue tf = ad::clamp_min(t, kTimeFloor);
    const ad::DiffValue dphi = forward_derivative(post.net, ad::concat(tf, x_enc), 0, plan);
    return ad::mul(ad::neg(dphi), ad::recip(tf));
}

inline double posterior_density(const PosteriorTimeNet& post, double t,
                                std::span<const double> x_enc) {
    if (static_cast<int>(x_enc.size()) != post.conditioning_dim) {
        throw DimensionError("posterior_density: conditioning size mismatch");
    }
    const double tf = std::max(t, kTimeFloor);
    std::vector<double> in;
    in.reserve(1 + x_enc.size());
    in.push_back(tf);
    in.insert(in.end(), x_enc.begin(), x_enc.end());
    const double dphi = post.net.eval_with_input_derivative(in, 0).second[0];
    return -dphi / tf;
}

inline ad::DiffValue prior_phi(const PriorIntensityNet& prior, const ad::DiffValue& t,
                               const DropoutPlan* plan = nullptr) {
    if (t.size() != 1) throw ContractError("prior_phi: t must be scalar");
    // net(0) is evaluated under the same dropout plan, keeping phi(0) = 0
    // exact for the dropped-out function as well.
    const ad::DiffValue at_zero = prior.net.forward(ad::scalar_constant(0.0), plan);
    return ad::sub(prior.net.forward(t, plan), at_zero);
}

inline double prior_phi(const PriorIntensityNet& prior, double t) {
    const double at_zero = prior.net.eval(std::vector<double>{0.0})[0];
    return prior.net.eval(std::vector<double>{t})[0] - at_zero;
}

inline double prior_phi_prime(const PriorIntensityNet& prior, double t) {
    return prior.net.eval_with_input_derivative(std::vector<double>{t}, 0).second[0];
}

// p(t) = phi'(t) * exp(-phi(t)).
inline ad::DiffValue prior_density(const PriorIntensityNet& prior, const ad::DiffValue& t,
                                   const DropoutPlan* plan = nullptr) {
    if (t.size() != 1) throw ContractError("prior_density: t must be scalar");
    const ad::DiffValue dphi = forward_derivative(prior.net, t, 0, plan);
    return ad::mul(dphi, ad::exp_(ad::neg(prior_phi(prior, t, plan))));
}

inline double prior_density(const PriorIntensityNet& prior, double t) {
    return prior_phi_prime(prior, t) * std::exp(-prior_phi(prior, t));
}

inline double prior_survival(const PriorIntensityNet& prior, double t) {
    return std::exp(-prior_phi(prior, t));
}

// ---------------------------------------------------------------- KL bound --

struct KlBreakdown {
    double g_eps = 0.0;      // G(-eps)
    double g_two_eps = 0.0;  // G(-2*eps)
    double bound = 0.0;
};

using DensityFn = std::function<ad::DiffValue(const ad::DiffValue&)>;

// Theorem-1 bound on KL(q || p), generic over the two densities.
//
// With m = -e^{-t} (so t = M(m) = -log(-m)) the KL integral becomes
// int_{-1}^{0} g(m) dm with g(m) = (q(M)/(-m)) * log(q(M)/p(M)). G solves
// G'(m) = g(m), G(-1) = 0 by Euler with step eps, run as two chained
// segments [-1,-2eps] and [-2eps,-eps] so G(-2eps) is an exact grid state.
// The returned bound is G(-eps) + |G(-2eps) - G(-eps)|.
inline ad::DiffValue kl_upper_bound_densities(const DensityFn& q_at, const DensityFn& p_at,
                                              double eps, KlBreakdown* breakdown = nullptr) {
    if (!(eps > 0.0) || eps > 0.5) {
        throw ParameterError("kl_upper_bound: eps must lie in (0, 0.5]");
    }
    auto rhs = [&](const ad::DiffValue&, const ad::DiffValue& m) {
        const ad::DiffValue mneg = ad::neg(m);                 // -m in (0, 1]
        const ad::DiffValue big_t = ad::neg(ad::log_(mneg));   // M = -log(-m)
        const ad::DiffValue q = q_at(big_t);
        const ad::DiffValue p = p_at(big_t);
        if (q.size() != 1 || p.size() != 1) {
            throw ContractError("kl_upper_bound: densities must be scalar");
        }
        const ad::DiffValue logratio = ad::sub(ad::log_(ad::clamp_min(q, kDensityFloor)),
                                               ad::log_(ad::clamp_min(p, kDensityFloor)));
        const ad::DiffValue g = ad::mul(ad::mul(q, ad::recip(mneg)), logratio);
        if (!std::isfinite(g.value())) {
            throw NumericError("kl_upper_bound: non-finite integrand at m=" +
                               std::to_string(m.value()));
        }
        return g;
    };
    const ad::DiffValue zero = ad::scalar_constant(0.0);
    // Fixed-step Euler over the m grid; both bounds are constants so only
    // density parameters receive gradients.
    ad::DiffValue g_two_eps = zero;
    if (1.0 - 2.0 * eps > 0.0) {
        g_two_eps = euler_solve_tape(rhs, zero, ad::scalar_constant(-1.0),
                                     ad::scalar_constant(-2.0 * eps), eps);
    }
    const ad::DiffValue g_eps = euler_solve_tape(rhs, g_two_eps, ad::scalar_constant(-2.0 * eps),
                                                 ad::scalar_constant(-eps), eps);
    const ad::DiffValue bound = ad::add(g_eps, ad::abs_(ad::sub(g_two_eps, g_eps)));
    if (breakdown != nullptr) {
        breakdown->g_eps = g_eps.value();
        breakdown->g_two_eps = g_two_eps.value();
        breakdown->bound = bound.value();
    }
    return bound;
}

inline ad::DiffValue kl_upper_bound(const PosteriorTimeNet& post, const PriorIntensityNet& prior,
                                    const ad::DiffValue& x_enc, double eps = 0.1,
                                    KlBreakdown* breakdown = nullptr,
                                    const DropoutPlan* post_plan = nullptr,
                                    const DropoutPlan* prior_plan = nullptr) {
    DensityFn q_at = [&post, &x_enc, post_plan](const ad::DiffValue& t) {
        return posterior_density(post, t, x_enc, post_plan);
    };
    DensityFn p_at = [&prior, prior_plan](const ad::DiffValue& t) {
        return prior_density(prior, t, prior_plan);
    };
    return kl_upper_bound_densities(q_at, p_at, eps, breakdown);
}

// -------------------------------------------------------------- diagnostics --

// Mean of the next arrival under the restarted prior clock, by trapezoid
// quadrature of t * p(t - t_prev) over [t_prev, horizon]. Diagnostic only.
inline double expected_next_arrival(const PriorIntensityNet& prior, double t_prev,
                                    double horizon, int n_points = 20001) {
    if (!(horizon > t_prev)) {
        throw ParameterError("expected_next_arrival: horizon must exceed t_prev");
    }
    if (n_points < 2) throw ParameterError("expected_next_arrival: need at least 2 points");
    const double h = (horizon - t_prev) / (n_points - 1);
    double acc = 0.0;
    for (int i = 0; i < n_points; ++i) {
        const double t = t_prev + i * h;
        const double f = t * prior_density(prior, t - t_prev);
        acc += (i == 0 || i + 1 == n_points) ? 0.5 * f : f;
    }
    return acc * h;
}

}  // namespace strode
