#pragma once

#include <cmath>
#include <cstdio>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "strode/autodiff.hpp"
#include "strode/errors.hpp"
#include "strode/rng.hpp"

namespace strode {

enum class Activation { Identity, Tanh, ReLU, LeakyReLU, Softplus };
enum class SignConstraint { Free, NonPositive, NonNegative };

inline constexpr double kLeakySlope = 0.01;

inline double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

// Overflow-safe softplus: max(x, 0) + log1p(exp(-|x|)).
inline double softplus(double x) {
    return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x)));
}

inline double act_f(Activation a, double x) {
    switch (a) {
        case Activation::Identity: return x;
        case Activation::Tanh: return std::tanh(x);
        case Activation::ReLU: return x > 0.0 ? x : 0.0;
        case Activation::LeakyReLU: return x > 0.0 ? x : kLeakySlope * x;
        case Activation::Softplus: return softplus(x);
    }
    throw ParameterError("act_f: unknown activation");
}

inline double act_df(Activation a, double x) {
    switch (a) {
        case Activation::Identity: return 1.0;
        case Activation::Tanh: {
            const double t = std::tanh(x);
            return 1.0 - t * t;
        }
        case Activation::ReLU: return x > 0.0 ? 1.0 : 0.0;
        case Activation::LeakyReLU: return x > 0.0 ? 1.0 : kLeakySlope;
        case Activation::Softplus: return sigmoid(x);
    }
    throw ParameterError("act_df: unknown activation");
}

inline ad::DiffValue activation(const ad::DiffValue& x, Activation a) {
    switch (a) {
        case Activation::Identity:
            return x;
        case Activation::Tanh:
            return ad::unary(
                x, "tanh", [](double v) { return std::tanh(v); },
                [](double v) {
                    const double t = std::tanh(v);
                    return 1.0 - t * t;
                },
                [](double v) {
                    const double t = std::tanh(v);
                    return -2.0 * t * (1.0 - t * t);
                });
        case Activation::ReLU:
            return ad::unary(
                x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
                [](double v) { return v > 0.0 ? 1.0 : 0.0; },
                [](double) { return 0.0; });
        case Activation::LeakyReLU:
            return ad::unary(
                x, "leaky_relu",
                [](double v) { return v > 0.0 ? v : kLeakySlope * v; },
                [](double v) { return v > 0.0 ? 1.0 : kLeakySlope; },
                [](double) { return 0.0; });
        case Activation::Softplus:
            return ad::unary(
                x, "softplus", [](double v) { return softplus(v); },
                [](double v) { return sigmoid(v); },
                [](double v) {
                    const double s = sigmoid(v);
                    return s * (1.0 - s);
                });
    }
    throw ParameterError("activation: unknown activation");
}

inline const char* activation_name(Activation a) {
    switch (a) {
        case Activation::Identity: return "identity";
        case Activation::Tanh: return "tanh";
        case Activation::ReLU: return "relu";
        case Activation::LeakyReLU: return "leaky_relu";
        case Activation::Softplus: return "softplus";
    }
    return "?";
}

inline Activation activation_from_name(const std::string& s) {
    if (s == "identity") return Activation::Identity;
    if (s == "tanh") return Activation::Tanh;
    if (s == "relu") return Activation::ReLU;
    if (s == "leaky_relu") return Activation::LeakyReLU;
    if (s == "softplus") return Activation::Softplus;
    throw IoError("unknown activation name: " + s);
}

inline const char* constraint_name(SignConstraint c) {
    switch (c) {
        case SignConstraint::Free: return "free";
        case SignConstraint::NonPositive: return "non_positive";
        case SignConstraint::NonNegative: return "non_negative";
    }
    return "?";
}

inline SignConstraint constraint_from_name(const std::string& s) {
    if (s == "free") return SignConstraint::Free;
    if (s == "non_positive") return SignConstraint::NonPositive;
    if (s == "non_negative") return SignConstraint::NonNegative;
    throw IoError("unknown constraint name: " + s);
}

// ----------------------------------------------------------------- dropout --

// Inverted dropout: kept coordinates are scaled by 1/(1-rate) so inference
// needs no rescaling. Not applied (returns x) outside of training.
inline ad::DiffValue dropout(const ad::DiffValue& x, double rate, Rng& rng, bool training) {
    if (rate < 0.0 || rate >= 1.0) {
        throw ParameterError("dropout: rate must lie in [0, 1), got " + std::to_string(rate));
    }
    if (!training || rate == 0.0) return x;
    std::vector<double> mask(x.size());
    const double keep_scale = 1.0 / (1.0 - rate);
    for (auto& m : mask) m = rng.bernoulli(rate) ? 0.0 : keep_scale;
    return ad::maskmul(x, std::move(mask));
}

// --------------------------------------------------------------------- MLP --

struct LayerSpec {
    int in = 0;
    int out = 0;
    Activation act = Activation::Identity;
    SignConstraint constraint = SignConstraint::Free;
};

struct Layer {
    ad::DiffValue weight;  // out x in
    ad::DiffValue bias;    // out
    Activation act = Activation::Identity;
    SignConstraint constraint = SignConstraint::Free;

    int in_dim() const { return weight.cols(); }
    int out_dim() const { return weight.rows(); }
};

struct NamedParam {
    std::string path;
    ad::NodePtr node;
};

// Pre-drawn dropout masks, one per interior layer boundary of a specific net.
// Reusing one plan across several forwards evaluates the *same* dropped-out
// function each time — required when a density is probed at many points.
struct DropoutPlan {
    double rate = 0.0;
    std::vector<std::vector<double>> masks;

    bool active() const { return rate > 0.0 && !masks.empty(); }
};

class ConstrainedMLP {
  public:
    std::vector<Layer> layers;

    static ConstrainedMLP make(const std::vector<LayerSpec>& specs, Rng& rng) {
        if (specs.empty()) throw ParameterError("ConstrainedMLP::make: no layers");
        ConstrainedMLP net;
        for (std::size_t i = 0; i < specs.size(); ++i) {
            const auto& s = specs[i];
            if (s.in <= 0 || s.out <= 0) {
                throw DimensionError("ConstrainedMLP::make: nonpositive layer size");
            }
            if (i > 0 && specs[i - 1].out != s.in) {
                throw DimensionError("ConstrainedMLP::make: layer " + std::to_string(i) +
                                     " input does not match previous output");
            }
            const double scale = 1.0 / std::sqrt(static_cast<double>(s.in));
            std::vector<double> w(static_cast<std::size_t>(s.out) * s.in);
            for (auto& v : w) v = draw_weight(rng, s.constraint, scale);
            Layer layer;
            layer.weight = ad::parameter(std::move(w), s.out, s.in);
            layer.bias = ad::parameter(std::vector<double>(s.out, 0.0), s.out, 1);
            layer.act = s.act;
            layer.constraint = s.constraint;
            net.layers.push_back(std::move(layer));
        }
        return net;
    }

    int input_dim() const { return layers.front().in_dim(); }
    int output_dim() const { return layers.back().out_dim(); }

    // Re-draws all weights/biases at the given magnitude (constraint kept);
    // used by tests and fixtures that want non-vanishing random nets.
    void randomize(Rng& rng, double weight_scale, double bias_scale = 0.0) {
        for (auto& layer : layers) {
            for (auto& v : layer.weight.mutable_data()) {
                v = draw_weight(rng, layer.constraint, weight_scale);
            }
            for (auto& v : layer.bias.mutable_data()) {
                v = bias_scale == 0.0 ? 0.0 : rng.uniform(-bias_scale, bias_scale);
            }
        }
    }

    ad::DiffValue forward(const ad::DiffValue& x, const DropoutPlan* dp = nullptr) const {
        if (x.cols() != 1 || x.rows() != input_dim()) {
            throw DimensionError("ConstrainedMLP::forward: expected input of size " +
                                 std::to_string(input_dim()) + ", got " +
                                 std::to_string(x.rows()) + "x" + std::to_string(x.cols()));
        }
        ad::DiffValue h = x;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const Layer& layer = layers[i];
            h = activation(ad::add(ad::matvec(layer.weight, h), layer.bias), layer.act);
            if (dp != nullptr && dp->active() && i + 1 < layers.size()) {
                h = ad::maskmul(h, dp->masks.at(i));
            }
        }
        return h;
    }

    // Straight-line evaluation, no tape. The reference oracle for forward()
    // and the workhorse for sampling, metrics and data-sized scans.
    std::vector<double> eval(std::span<const double> x) const {
        if (x.size() != static_cast<std::size_t>(input_dim())) {
            throw DimensionError("ConstrainedMLP::eval: input size mismatch");
        }
        std::vector<double> h(x.begin(), x.end());
        std::vector<double> nxt;
        for (const Layer& layer : layers) {
            const int m = layer.out_dim(), n = layer.in_dim();
            nxt.assign(m, 0.0);
            const auto w = layer.weight.data();
            const auto b = layer.bias.data();
            for (int r = 0; r < m; ++r) {
                // Dot product first, bias last: same operation order as the
                // tape path (matvec then add), so the two agree bit for bit.
                double acc = 0.0;
                for (int c = 0; c < n; ++c) acc += w[static_cast<std::size_t>(r) * n + c] * h[c];
                nxt[r] = act_f(layer.act, acc + b[r]);
            }
            h.swap(nxt);
        }
        return h;
    }

    // Dual-number evaluation: value plus directional derivative d/dx[k].
    std::pair<std::vector<double>, std::vector<double>> eval_with_input_derivative(
        std::span<const double> x, int k) const {
        if (x.size() != static_cast<std::size_t>(input_dim())) {
            throw DimensionError("ConstrainedMLP::eval_with_input_derivative: input size mismatch");
        }
        if (k < 0 || k >= input_dim()) {
            throw DimensionError("ConstrainedMLP::eval_with_input_derivative: bad coordinate");
        }
        std::vector<double> h(x.begin(), x.end());
        std::vector<double> hd(x.size(), 0.0);
        hd[k] = 1.0;
        std::vector<double> nh, nhd;
        for (const Layer& layer : layers) {
            const int m = layer.out_dim(), n = layer.in_dim();
            nh.assign(m, 0.0);
            nhd.assign(m, 0.0);
            const auto w = layer.weight.data();
            const auto b = layer.bias.data();
            for (int r = 0; r < m; ++r) {
                double acc = 0.0, dacc = 0.0;
                for (int c = 0; c < n; ++c) {
                    const double wv = w[static_cast<std::size_t>(r) * n + c];
                    acc += wv * h[c];
                    dacc += wv * hd[c];
                }
                const double pre = acc + b[r];
                nh[r] = act_f(layer.act, pre);
                nhd[r] = act_df(layer.act, pre) * dacc;
            }
            h.swap(nh);
            hd.swap(nhd);
        }
        return {std::move(h), std::move(hd)};
    }

    // Clamps weights that violate their sign constraint to exactly 0.0;
    // biases are never constrained. Idempotent bit for bit.
    void project_weights() {
        for (auto& layer : layers) {
            if (layer.constraint == SignConstraint::Free) continue;
            for (auto& v : layer.weight.mutable_data()) {
                if (layer.constraint == SignConstraint::NonPositive && v > 0.0) v = 0.0;
                if (layer.constraint == SignConstraint::NonNegative && v < 0.0) v = 0.0;
            }
        }
    }

    void zero_grad() {
        for (auto& layer : layers) {
            ad::zero_grad(layer.weight);
            ad::zero_grad(layer.bias);
        }
    }

    void append_parameters(const std::string& prefix, std::vector<NamedParam>& out) const {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            out.push_back({prefix + ".layer" + std::to_string(i) + ".weight",
                           layers[i].weight.node()});
            out.push_back({prefix + ".layer" + std::to_string(i) + ".bias",
                           layers[i].bias.node()});
        }
    }

    std::vector<NamedParam> parameters(const std::string& prefix) const {
        std::vector<NamedParam> out;
        append_parameters(prefix, out);
        return out;
    }

    // Checkpoint format: {"<layer index>": {weights, bias, activation,
    // constraint}} with insertion-ordered keys.
    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j = nlohmann::ordered_json::object();
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const Layer& layer = layers[i];
            const int m = layer.out_dim(), n = layer.in_dim();
            nlohmann::ordered_json rows = nlohmann::ordered_json::array();
            for (int r = 0; r < m; ++r) {
                nlohmann::ordered_json row = nlohmann::ordered_json::array();
                for (int c = 0; c < n; ++c) {
                    row.push_back(layer.weight.data()[static_cast<std::size_t>(r) * n + c]);
                }
                rows.push_back(std::move(row));
            }
            nlohmann::ordered_json bias = nlohmann::ordered_json::array();
            for (int r = 0; r < m; ++r) bias.push_back(layer.bias.data()[r]);
            nlohmann::ordered_json lj = nlohmann::ordered_json::object();
            lj["weights"] = std::move(rows);
            lj["bias"] = std::move(bias);
            lj["activation"] = activation_name(layer.act);
            lj["constraint"] = constraint_name(layer.constraint);
            j[std::to_string(i)] = std::move(lj);
        }
        return j;
    }

    static ConstrainedMLP from_json(const nlohmann::ordered_json& j) {
        if (!j.is_object() || j.empty()) throw IoError("ConstrainedMLP::from_json: not an object");
        ConstrainedMLP net;
        for (std::size_t i = 0; i < j.size(); ++i) {
            const std::string key = std::to_string(i);
            if (!j.contains(key)) throw IoError("ConstrainedMLP::from_json: missing layer " + key);
            const auto& lj = j.at(key);
            const auto& rows = lj.at("weights");
            const int m = static_cast<int>(rows.size());
            if (m == 0) throw IoError("ConstrainedMLP::from_json: empty weight matrix");
            const int n = static_cast<int>(rows.at(0).size());
            std::vector<double> w;
            w.reserve(static_cast<std::size_t>(m) * n);
            for (const auto& row : rows) {
                if (static_cast<int>(row.size()) != n) {
                    throw IoError("ConstrainedMLP::from_json: ragged weight matrix");
                }
                for (const auto& v : row) w.push_back(v.get<double>());
            }
            const auto& bj = lj.at("bias");
            if (static_cast<int>(bj.size()) != m) {
                throw IoError("ConstrainedMLP::from_json: bias size mismatch");
            }
            std::vector<double> b;
            for (const auto& v : bj) b.push_back(v.get<double>());
            Layer layer;
            layer.weight = ad::parameter(std::move(w), m, n);
            layer.bias = ad::parameter(std::move(b), m, 1);
            layer.act = activation_from_name(lj.at("activation").get<std::string>());
            layer.constraint = constraint_from_name(lj.at("constraint").get<std::string>());
            if (i > 0 && net.layers.back().out_dim() != n) {
                throw IoError("ConstrainedMLP::from_json: layer size chain mismatch");
            }
            net.layers.push_back(std::move(layer));
        }
        return net;
    }

  private:
    static double draw_weight(Rng& rng, SignConstraint c, double scale) {
        switch (c) {
            case SignConstraint::Free: return rng.uniform(-scale, scale);
            case SignConstraint::NonPositive: return rng.uniform(-scale, 0.0);
            case SignConstraint::NonNegative: return rng.uniform(0.0, scale);
        }
        throw ParameterError("draw_weight: unknown constraint");
    }
};

inline DropoutPlan make_dropout_plan(const ConstrainedMLP& net, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) {
        throw ParameterError("make_dropout_plan: rate must lie in [0, 1)");
    }
    DropoutPlan plan;
    plan.rate = rate;
    if (rate == 0.0 || net.layers.size() < 2) return plan;
    const double keep_scale = 1.0 / (1.0 - rate);
    for (std::size_t i = 0; i + 1 < net.layers.size(); ++i) {
        std::vector<double> mask(net.layers[i].out_dim());
        for (auto& m : mask) m = rng.bernoulli(rate) ? 0.0 : keep_scale;
        plan.masks.push_back(std::move(mask));
    }
    return plan;
}

// d net(x) / d x[k] on the tape; the scalar-output requirement makes the
// result a 1x1 node whose adjoint reaches parameters through the tangent.
inline ad::DiffValue forward_derivative(const ConstrainedMLP& net, const ad::DiffValue& x,
                                        int direction_index, const DropoutPlan* dp = nullptr) {
    if (net.output_dim() != 1) {
        throw ContractError("forward_derivative: net output must be scalar");
    }
    return ad::tangent_view(net.forward(ad::seed_tangent(x, direction_index), dp));
}

inline double forward_derivative_value(const ConstrainedMLP& net, std::span<const double> x,
                                       int direction_index) {
    if (net.output_dim() != 1) {
        throw ContractError("forward_derivative_value: net output must be scalar");
    }
    return net.eval_with_input_derivative(x, direction_index).second[0];
}

// -------------------------------------------------------------- optimizers --

inline void check_finite_grad(const NamedParam& p, std::span<const double> g) {
    for (double v : g) {
        if (!std::isfinite(v)) {
            throw TrainingError("non-finite gradient for parameter " + p.path);
        }
    }
}

// Plain SGD over node-resident gradients. An empty gradient means no
// contribution was accumulated and the parameter stays put.
inline void sgd_step(std::vector<NamedParam>& params, double lr) {
    for (auto& p : params) {
        if (p.node->grad.empty()) continue;
        check_finite_grad(p, p.node->grad);
        for (std::size_t i = 0; i < p.node->data.size(); ++i) {
            p.node->data[i] -= lr * p.node->grad[i];
        }
    }
}

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long step_count = 0;
    struct Slot {
        std::vector<double> m, v;
    };
    std::vector<Slot> slots;
};

inline void adam_step(std::vector<NamedParam>& params, AdamState& st, double lr) {
    if (st.slots.empty()) st.slots.resize(params.size());
    if (st.slots.size() != params.size()) {
        throw ParameterError("adam_step: state does not match parameter list");
    }
    st.step_count += 1;
    const double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step_count));
    const double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step_count));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto& p = params[pi];
        auto& slot = st.slots[pi];
        const std::size_t n = p.node->data.size();
        if (slot.m.empty()) {
            slot.m.assign(n, 0.0);
            slot.v.assign(n, 0.0);
        }
        const bool has_grad = !p.node->grad.empty();
        if (has_grad) check_finite_grad(p, p.node->grad);
        for (std::size_t i = 0; i < n; ++i) {
            const double g = has_grad ? p.node->grad[i] : 0.0;
            slot.m[i] = st.beta1 * slot.m[i] + (1.0 - st.beta1) * g;
            slot.v[i] = st.beta2 * slot.v[i] + (1.0 - st.beta2) * g * g;
            const double mhat = slot.m[i] / bc1;
            const double vhat = slot.v[i] / bc2;
            p.node->data[i] -= lr * mhat / (std::sqrt(vhat) + st.eps);
        }
    }
}

// Single-net convenience wrappers; projection is part of the step contract.
inline void sgd_step(ConstrainedMLP& net, double lr) {
    auto params = net.parameters("net");
    sgd_step(params, lr);
    net.project_weights();
}

inline void adam_step(ConstrainedMLP& net, AdamState& st, double lr) {
    auto params = net.parameters("net");
    adam_step(params, st, lr);
    net.project_weights();
}

}  // namespace strode
