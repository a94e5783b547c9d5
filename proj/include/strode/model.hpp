#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <exception>
#include <fstream>
#include <limits>
#include <map>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include <json.hpp>

#include "strode/autodiff.hpp"
#include "strode/datagen.hpp"
#include "strode/errors.hpp"
#include "strode/metrics.hpp"
#include "strode/nn.hpp"
#include "strode/ode.hpp"
#include "strode/point_process.hpp"
#include "strode/rng.hpp"

namespace strode {

inline constexpr double kRegenEpsilon0 = 1e-6;  // clock origin offset for range sampling
inline constexpr double kLog2Pi = 1.8378770664093453;

enum class Likelihood { MSE, Gaussian };
enum class Variant { Standard, Regenerative };
enum class Optimizer { Adam, SGD };
enum class Rollout { TeacherForced, FreeRun };

inline const char* likelihood_name(Likelihood l) {
    return l == Likelihood::MSE ? "mse" : "gaussian";
}
inline Likelihood likelihood_from_name(const std::string& s) {
    if (s == "mse") return Likelihood::MSE;
    if (s == "gaussian") return Likelihood::Gaussian;
    throw ParameterError("unknown likelihood: " + s);
}
inline const char* variant_name(Variant v) {
    return v == Variant::Standard ? "standard" : "regenerative";
}
inline Variant variant_from_name(const std::string& s) {
    if (s == "standard") return Variant::Standard;
    if (s == "regenerative") return Variant::Regenerative;
    throw ParameterError("unknown variant: " + s);
}
inline const char* optimizer_name(Optimizer o) { return o == Optimizer::Adam ? "adam" : "sgd"; }
inline Optimizer optimizer_from_name(const std::string& s) {
    if (s == "adam") return Optimizer::Adam;
    if (s == "sgd") return Optimizer::SGD;
    throw ParameterError("unknown optimizer: " + s);
}

// ------------------------------------------------------------------ config --

struct TrainConfig {
    double lr = 4e-4;
    double beta_kl = 1e-4;
    int epochs = 200;
    int batch = 32;
    double euler_step = 0.1;
    double kl_eps = 0.1;
    double dropout = 0.1;
    std::int64_t seed = 1;
    Optimizer optimizer = Optimizer::Adam;
    Variant variant = Variant::Standard;
    double gamma_prior = 1e-3;
    int patience = 20;
    Likelihood likelihood = Likelihood::MSE;
    bool ablate_lookahead = false;
    int n_threads = 1;

    void validate() const {
        if (lr < 0.0) throw ParameterError("TrainConfig: lr must be nonnegative");
        if (beta_kl < 0.0) throw ParameterError("TrainConfig: beta_kl must be nonnegative");
        if (epochs < 1) throw ParameterError("TrainConfig: epochs must be >= 1");
        if (batch < 1) throw ParameterError("TrainConfig: batch must be >= 1");
        if (!(euler_step > 0.0)) throw ParameterError("TrainConfig: euler_step must be positive");
        if (!(kl_eps > 0.0) || kl_eps > 0.5) {
            throw ParameterError("TrainConfig: kl_eps must lie in (0, 0.5]");
        }
        if (dropout < 0.0 || dropout >= 1.0) {
            throw ParameterError("TrainConfig: dropout must lie in [0, 1)");
        }
        if (gamma_prior < 0.0) throw ParameterError("TrainConfig: gamma_prior must be nonnegative");
        if (patience < 1) throw ParameterError("TrainConfig: patience must be >= 1");
        if (n_threads < 1) throw ParameterError("TrainConfig: n_threads must be >= 1");
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j = nlohmann::ordered_json::object();
        j["lr"] = lr;
        j["beta_kl"] = beta_kl;
        j["epochs"] = epochs;
        j["batch"] = batch;
        j["euler_step"] = euler_step;
        j["kl_eps"] = kl_eps;
        j["dropout"] = dropout;
        j["seed"] = seed;
        j["optimizer"] = optimizer_name(optimizer);
        j["variant"] = variant_name(variant);
        j["gamma_prior"] = gamma_prior;
        j["patience"] = patience;
        j["likelihood"] = likelihood_name(likelihood);
        j["ablate_lookahead"] = ablate_lookahead;
        j["n_threads"] = n_threads;
        return j;
    }

    static const std::vector<std::string>& keys() {
        static const std::vector<std::string> k = {
            "lr", "beta_kl", "epochs", "batch", "euler_step", "kl_eps", "dropout", "seed",
            "optimizer", "variant", "gamma_prior", "patience", "likelihood",
            "ablate_lookahead", "n_threads"};
        return k;
    }

    // Strict: unknown keys are rejected, known keys override defaults.
    static TrainConfig from_json(const nlohmann::ordered_json& j) {
        TrainConfig c;
        for (const auto& [key, val] : j.items()) {
            if (key == "lr") c.lr = val.get<double>();
            else if (key == "beta_kl") c.beta_kl = val.get<double>();
            else if (key == "epochs") c.epochs = val.get<int>();
            else if (key == "batch") c.batch = val.get<int>();
            else if (key == "euler_step") c.euler_step = val.get<double>();
            else if (key == "kl_eps") c.kl_eps = val.get<double>();
            else if (key == "dropout") c.dropout = val.get<double>();
            else if (key == "seed") c.seed = val.get<std::int64_t>();
            else if (key == "optimizer") c.optimizer = optimizer_from_name(val.get<std::string>());
            else if (key == "variant") c.variant = variant_from_name(val.get<std::string>());
            else if (key == "gamma_prior") c.gamma_prior = val.get<double>();
            else if (key == "patience") c.patience = val.get<int>();
            else if (key == "likelihood") c.likelihood = likelihood_from_name(val.get<std::string>());
            else if (key == "ablate_lookahead") c.ablate_lookahead = val.get<bool>();
            else if (key == "n_threads") c.n_threads = val.get<int>();
            else throw ParameterError("TrainConfig: unknown key '" + key + "'");
        }
        c.validate();
        return c;
    }
};

struct StrodeNetConfig {
    int obs_dim = 1;
    int state_dim = 8;
    int enc_hidden = 8;
    int dyn_hidden = 8;
    int pp_hidden = 16;
    int cls_hidden = 16;
    int n_classes = 2;
    Likelihood likelihood = Likelihood::MSE;
    Variant variant = Variant::Standard;

    void validate() const {
        if (obs_dim < 1 || state_dim < 1 || enc_hidden < 1 || dyn_hidden < 1 || pp_hidden < 1 ||
            cls_hidden < 1 || n_classes < 2) {
            throw ParameterError("StrodeNetConfig: all sizes must be positive (n_classes >= 2)");
        }
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j = nlohmann::ordered_json::object();
        j["obs_dim"] = obs_dim;
        j["state_dim"] = state_dim;
        j["enc_hidden"] = enc_hidden;
        j["dyn_hidden"] = dyn_hidden;
        j["pp_hidden"] = pp_hidden;
        j["cls_hidden"] = cls_hidden;
        j["n_classes"] = n_classes;
        j["likelihood"] = likelihood_name(likelihood);
        j["variant"] = variant_name(variant);
        return j;
    }

    static const std::vector<std::string>& keys() {
        static const std::vector<std::string> k = {"obs_dim",  "state_dim", "enc_hidden",
                                                   "dyn_hidden", "pp_hidden", "cls_hidden",
                                                   "n_classes", "likelihood", "variant"};
        return k;
    }

    static StrodeNetConfig from_json(const nlohmann::ordered_json& j) {
        StrodeNetConfig c;
        for (const auto& [key, val] : j.items()) {
            if (key == "obs_dim") c.obs_dim = val.get<int>();
            else if (key == "state_dim") c.state_dim = val.get<int>();
            else if (key == "enc_hidden") c.enc_hidden = val.get<int>();
            else if (key == "dyn_hidden") c.dyn_hidden = val.get<int>();
            else if (key == "pp_hidden") c.pp_hidden = val.get<int>();
            else if (key == "cls_hidden") c.cls_hidden = val.get<int>();
            else if (key == "n_classes") c.n_classes = val.get<int>();
            else if (key == "likelihood") c.likelihood = likelihood_from_name(val.get<std::string>());
            else if (key == "variant") c.variant = variant_from_name(val.get<std::string>());
            else throw ParameterError("StrodeNetConfig: unknown key '" + key + "'");
        }
        c.validate();
        return c;
    }
};

// ------------------------------------------------------------------- model --

struct ElboReport {
    double recon = 0.0;
    double kl = 0.0;
    double prior_ll = 0.0;
    double total_loss = 0.0;
};

struct StrodeNet {
    StrodeNetConfig cfg;
    ConstrainedMLP encoder;
    ConstrainedMLP dynamics;
    ConstrainedMLP decoder;
    PosteriorTimeNet posterior;
    PriorIntensityNet prior;
    ConstrainedMLP classifier;    // regenerative variant only
    ConstrainedMLP future_prior;  // regenerative variant only

    static StrodeNet make(const StrodeNetConfig& c, std::uint64_t seed) {
        c.validate();
        StrodeNet m;
        m.cfg = c;
        const int dec_out = c.obs_dim * (c.likelihood == Likelihood::Gaussian ? 2 : 1);
        {
            Rng r(Rng::mix(seed, 1));
            m.encoder = ConstrainedMLP::make(
                {{c.obs_dim, c.enc_hidden, Activation::ReLU, SignConstraint::Free},
                 {c.enc_hidden, c.state_dim, Activation::ReLU, SignConstraint::Free}},
                r);
        }
        {
            Rng r(Rng::mix(seed, 2));
            m.dynamics = ConstrainedMLP::make(
                {{c.state_dim + 1, c.dyn_hidden, Activation::Tanh, SignConstraint::Free},
                 {c.dyn_hidden, c.state_dim, Activation::Tanh, SignConstraint::Free}},
                r);
        }
        {
            Rng r(Rng::mix(seed, 3));
            m.decoder = ConstrainedMLP::make(
                {{c.state_dim, c.enc_hidden, Activation::ReLU, SignConstraint::Free},
                 {c.enc_hidden, dec_out, Activation::Identity, SignConstraint::Free}},
                r);
        }
        {
            Rng r(Rng::mix(seed, 4));
            m.posterior = PosteriorTimeNet::make(c.state_dim, c.pp_hidden, r);
        }
        {
            Rng r(Rng::mix(seed, 5));
            m.prior = PriorIntensityNet::make(c.pp_hidden, r);
        }
        if (c.variant == Variant::Regenerative) {
            Rng r1(Rng::mix(seed, 6));
            m.classifier = ConstrainedMLP::make(
                {{2 * c.state_dim, c.cls_hidden, Activation::Tanh, SignConstraint::Free},
                 {c.cls_hidden, c.n_classes, Activation::Identity, SignConstraint::Free}},
                r1);
            Rng r2(Rng::mix(seed, 7));
            m.future_prior = ConstrainedMLP::make(
                {{c.obs_dim, c.cls_hidden, Activation::Tanh, SignConstraint::Free},
                 {c.cls_hidden, 2 * c.state_dim, Activation::Identity, SignConstraint::Free}},
                r2);
        }
        m.assign_param_indices();
        return m;
    }

    int obs_dim() const { return cfg.obs_dim; }
    int state_dim() const { return cfg.state_dim; }
    bool has_regen_nets() const { return !classifier.layers.empty(); }

    std::vector<NamedParam> all_parameters() const {
        std::vector<NamedParam> out;
        encoder.append_parameters("encoder", out);
        dynamics.append_parameters("dynamics", out);
        decoder.append_parameters("decoder", out);
        posterior.net.append_parameters("posterior", out);
        prior.net.append_parameters("prior", out);
        if (has_regen_nets()) {
            classifier.append_parameters("classifier", out);
            future_prior.append_parameters("future_prior", out);
        }
        return out;
    }

    void assign_param_indices() {
        auto params = all_parameters();
        for (std::size_t i = 0; i < params.size(); ++i) {
            params[i].node->param_index = static_cast<int>(i);
        }
    }

    void project_all() {
        posterior.net.project_weights();
        prior.net.project_weights();
    }

    void zero_all_grads() {
        for (auto& p : all_parameters()) {
            p.node->grad.clear();
            p.node->grad_tangent.clear();
        }
    }

    void validate() const {
        cfg.validate();
        if (encoder.output_dim() != cfg.state_dim || decoder.input_dim() != cfg.state_dim ||
            dynamics.input_dim() != cfg.state_dim + 1 || dynamics.output_dim() != cfg.state_dim) {
            throw ContractError("StrodeNet: encoder/dynamics/decoder dimensions disagree");
        }
        posterior.validate();
        prior.validate();
    }

    std::vector<std::vector<double>> snapshot() const {
        std::vector<std::vector<double>> out;
        for (const auto& p : all_parameters()) {
            out.emplace_back(p.node->data.begin(), p.node->data.end());
        }
        return out;
    }

    void restore(const std::vector<std::vector<double>>& snap) {
        auto params = all_parameters();
        if (snap.size() != params.size()) throw ContractError("StrodeNet::restore: size mismatch");
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (snap[i].size() != params[i].node->data.size()) {
                throw ContractError("StrodeNet::restore: parameter shape mismatch");
            }
            params[i].node->data = snap[i];
        }
    }

    nlohmann::ordered_json nets_to_json() const {
        nlohmann::ordered_json j = nlohmann::ordered_json::object();
        j["encoder"] = encoder.to_json();
        j["dynamics"] = dynamics.to_json();
        j["decoder"] = decoder.to_json();
        j["posterior"] = posterior.net.to_json();
        j["prior"] = prior.net.to_json();
        if (has_regen_nets()) {
            j["classifier"] = classifier.to_json();
            j["future_prior"] = future_prior.to_json();
        }
        return j;
    }

    static StrodeNet from_json(const StrodeNetConfig& c, const nlohmann::ordered_json& nets) {
        StrodeNet m;
        m.cfg = c;
        m.encoder = ConstrainedMLP::from_json(nets.at("encoder"));
        m.dynamics = ConstrainedMLP::from_json(nets.at("dynamics"));
        m.decoder = ConstrainedMLP::from_json(nets.at("decoder"));
        m.posterior.net = ConstrainedMLP::from_json(nets.at("posterior"));
        m.posterior.conditioning_dim = c.state_dim;
        m.prior.net = ConstrainedMLP::from_json(nets.at("prior"));
        if (nets.contains("classifier")) {
            m.classifier = ConstrainedMLP::from_json(nets.at("classifier"));
            m.future_prior = ConstrainedMLP::from_json(nets.at("future_prior"));
        }
        m.assign_param_indices();
        m.validate();
        return m;
    }
};

// Frozen per-sequence dropout state. One plan per net keeps every density
// probe inside a KL bound on the same dropped-out function.
struct SeqPlans {
    DropoutPlan enc, dec, post, prior, cls, fp;
    bool active = false;
};

inline SeqPlans make_seq_plans(const StrodeNet& model, double rate, Rng& rng) {
    SeqPlans p;
    if (rate == 0.0) return p;
    p.active = true;
    p.enc = make_dropout_plan(model.encoder, rate, rng);
    p.dec = make_dropout_plan(model.decoder, rate, rng);
    p.post = make_dropout_plan(model.posterior.net, rate, rng);
    p.prior = make_dropout_plan(model.prior.net, rate, rng);
    if (model.has_regen_nets()) {
        p.cls = make_dropout_plan(model.classifier, rate, rng);
        p.fp = make_dropout_plan(model.future_prior, rate, rng);
    }
    return p;
}

namespace detail {

// The recomposition here must mirror the tape assembly operation for
// operation so the report identity holds bit for bit.
inline void check_decomposition(const ElboReport& r, double beta, double gamma, bool regen) {
    const double recomposed = regen ? (r.recon + beta * r.kl) - gamma * r.prior_ll
                                    : r.recon + beta * r.kl;
    if (!(recomposed == r.total_loss)) {
        throw TrainingError("ElboReport decomposition violated: total " +
                            std::to_string(r.total_loss) + " vs recomposed " +
                            std::to_string(recomposed));
    }
}

// Memoizing view of the prior density: every per-step KL bound probes the
// same unconditioned p at the same grid times, so the subgraph is shared
// across steps of a sequence.
inline DensityFn memoized_prior(const StrodeNet& model, const DropoutPlan* plan,
                                std::map<double, ad::DiffValue>& cache) {
    return [&model, plan, &cache](const ad::DiffValue& t) {
        const auto it = cache.find(t.value());
        if (it != cache.end()) return it->second;
        const ad::DiffValue d = prior_density(model.prior, t, plan);
        cache.emplace(t.value(), d);
        return d;
    };
}

inline ad::DiffValue gaussian_nll(const ad::DiffValue& x, const ad::DiffValue& mu,
                                  const ad::DiffValue& var) {
    const ad::DiffValue diff = ad::sub(x, mu);
    const ad::DiffValue term =
        ad::add(ad::log_(var), ad::mul(ad::mul(diff, diff), ad::recip(var)));
    return ad::offset(ad::scale(ad::sum(term), 0.5),
                      0.5 * kLog2Pi * static_cast<double>(x.size()));
}

}  // namespace detail

// -------------------------------------------------------- standard forward --

struct SequenceForward {
    BoundaryTimes boundaries;
    std::vector<ad::DiffValue> boundary_nodes;
    std::vector<ad::DiffValue> reconstructions;
    ad::DiffValue recon_node, kl_node, total_node;
    ElboReport report;
};

// Builds the full per-sequence graph: boundary-time chain, per-segment ODE
// solves, reconstructions and per-step KL bounds. Teacher forcing starts
// segment i from encoder(x_{i-1}); free-run chains the solved states.
inline SequenceForward forward_sequence(const StrodeNet& model,
                                        const std::vector<std::vector<double>>& X,
                                        const TrainConfig& cfg,
                                        Rollout rollout = Rollout::TeacherForced,
                                        Rng* dropout_rng = nullptr) {
    if (X.size() < 2) throw ContractError("forward_sequence: need at least 2 observations");
    for (const auto& x : X) {
        if (static_cast<int>(x.size()) != model.obs_dim()) {
            throw DimensionError("forward_sequence: observation dim mismatch");
        }
    }
    SeqPlans plans;
    if (dropout_rng != nullptr && cfg.dropout > 0.0) {
        plans = make_seq_plans(model, cfg.dropout, *dropout_rng);
    }
    const DropoutPlan* enc_p = plans.active ? &plans.enc : nullptr;
    const DropoutPlan* dec_p = plans.active ? &plans.dec : nullptr;
    const DropoutPlan* post_p = plans.active ? &plans.post : nullptr;
    const DropoutPlan* prior_p = plans.active ? &plans.prior : nullptr;

    const std::size_t m = X.size();
    std::vector<ad::DiffValue> xin(m), enc(m);
    for (std::size_t i = 0; i < m; ++i) {
        xin[i] = ad::input(X[i]);
        enc[i] = model.encoder.forward(xin[i], enc_p);
    }

    auto dyn_rhs = [&model](const ad::DiffValue& y, const ad::DiffValue& t) {
        return model.dynamics.forward(ad::concat(y, t));
    };
    std::map<double, ad::DiffValue> prior_cache;
    const DensityFn p_at = detail::memoized_prior(model, prior_p, prior_cache);

    SequenceForward out;
    ad::DiffValue t_prev = ad::scalar_constant(0.0);
    ad::DiffValue h_prev = enc[0];
    const int d = model.obs_dim();
    for (std::size_t i = 1; i < m; ++i) {
        const ad::DiffValue t_i = sample_next_time(model.posterior, t_prev, enc[i], post_p);
        out.boundary_nodes.push_back(t_i);
        out.boundaries.times.push_back(t_i.value());

        const ad::DiffValue start = rollout == Rollout::TeacherForced ? enc[i - 1] : h_prev;
        const ad::DiffValue h_i =
            euler_solve_tape(dyn_rhs, start, t_prev, t_i, cfg.euler_step);
        const ad::DiffValue dec_out = model.decoder.forward(h_i, dec_p);

        ad::DiffValue recon_i;
        if (model.cfg.likelihood == Likelihood::MSE) {
            const ad::DiffValue diff = ad::sub(dec_out, xin[i]);
            recon_i = ad::sum(ad::mul(diff, diff));
            out.reconstructions.push_back(dec_out);
        } else {
            const ad::DiffValue mu = ad::slice(dec_out, 0, d);
            const ad::DiffValue var = activation(ad::slice(dec_out, d, d), Activation::Softplus);
            recon_i = detail::gaussian_nll(xin[i], mu, var);
            out.reconstructions.push_back(mu);
        }
        out.recon_node = i == 1 ? recon_i : ad::add(out.recon_node, recon_i);

        if (cfg.beta_kl != 0.0) {
            const ad::DiffValue& e = enc[i];
            const DensityFn q_at = [&model, &e, post_p](const ad::DiffValue& t) {
                return posterior_density(model.posterior, t, e, post_p);
            };
            const ad::DiffValue kl_i = kl_upper_bound_densities(q_at, p_at, cfg.kl_eps);
            out.kl_node = i == 1 ? kl_i : ad::add(out.kl_node, kl_i);
        }

        t_prev = t_i;
        h_prev = h_i;
    }

    if (cfg.beta_kl != 0.0) {
        out.total_node = ad::add(out.recon_node, ad::scale(out.kl_node, cfg.beta_kl));
    } else {
        out.kl_node = ad::scalar_constant(0.0);
        out.total_node = out.recon_node;
    }
    out.boundaries.validate();
    out.report.recon = out.recon_node.value();
    out.report.kl = out.kl_node.value();
    out.report.prior_ll = 0.0;
    out.report.total_loss = out.total_node.value();
    if (!std::isfinite(out.report.total_loss)) {
        throw TrainingError("forward_sequence: non-finite loss");
    }
    detail::check_decomposition(out.report, cfg.beta_kl, 0.0, false);
    return out;
}

inline ElboReport loss(const StrodeNet& model, const std::vector<std::vector<double>>& X,
                       const TrainConfig& cfg) {
    return forward_sequence(model, X, cfg).report;
}

// ----------------------------------------------------------- plain inference --

// Boundary times for observations 1..N-1 via the deterministic sampler.
inline std::vector<double> infer_times(const StrodeNet& model,
                                       const std::vector<std::vector<double>>& X) {
    if (X.size() < 2) throw ContractError("infer_times: need at least 2 observations");
    std::vector<double> out;
    out.reserve(X.size() - 1);
    double t_prev = 0.0;
    for (std::size_t i = 1; i < X.size(); ++i) {
        const std::vector<double> e = model.encoder.eval(X[i]);
        std::vector<double> in;
        in.reserve(1 + e.size());
        in.push_back(t_prev);
        in.insert(in.end(), e.begin(), e.end());
        t_prev += model.posterior.net.eval(in)[0];
        out.push_back(t_prev);
    }
    return out;
}

inline TimingInfer timing_infer(const StrodeNet& model) {
    return [&model](const std::vector<std::vector<double>>& values) {
        return infer_times(model, values);
    };
}

inline MetricReport evaluate_model(const StrodeNet& model, const Dataset& test) {
    return evaluate_timings(timing_infer(model), test);
}

// Per-element teacher-forced reconstruction MSE, tape-free.
inline double teacher_forced_mse(const StrodeNet& model,
                                 const std::vector<std::vector<double>>& X, double euler_step) {
    if (X.size() < 2) throw ContractError("teacher_forced_mse: need at least 2 observations");
    const int d = model.obs_dim();
    double t_prev = 0.0;
    double sse = 0.0;
    std::size_t count = 0;
    std::vector<double> enc_prev = model.encoder.eval(X[0]);
    for (std::size_t i = 1; i < X.size(); ++i) {
        const std::vector<double> enc_i = model.encoder.eval(X[i]);
        std::vector<double> in;
        in.reserve(1 + enc_i.size());
        in.push_back(t_prev);
        in.insert(in.end(), enc_i.begin(), enc_i.end());
        const double t_i = t_prev + model.posterior.net.eval(in)[0];
        const std::vector<double> h =
            ode_eval_dynamics(model.dynamics, enc_prev, t_prev, t_i, euler_step);
        const std::vector<double> dec = model.decoder.eval(h);
        for (int k = 0; k < d; ++k) {
            const double diff = dec[k] - X[i][k];
            sse += diff * diff;
        }
        count += static_cast<std::size_t>(d);
        t_prev = t_i;
        enc_prev = enc_i;
    }
    return sse / static_cast<double>(count);
}

// ------------------------------------------------------ regenerative forward --

struct RegenForward {
    std::vector<double> ranges;                  // t range per frame
    std::vector<std::vector<double>> lookahead;  // solved future state per frame
    ad::DiffValue ce_node, kl_node, pll_node, total_node;
    ElboReport report;
};

// Evenly sampled frames: the clock restarts at every frame, the sampled
// range t_i spans [i, i+t_i], and the classifier reads the encoding next to
// the ODE-evolved lookahead state. The prior term ties that state to a
// learned function of the next frame.
inline RegenForward regenerative_forward(const StrodeNet& model,
                                         const std::vector<std::vector<double>>& X,
                                         const std::vector<int>& Y, const TrainConfig& cfg,
                                         Rng* dropout_rng = nullptr) {
    if (!model.has_regen_nets()) {
        throw ContractError("regenerative_forward: model lacks classifier nets");
    }
    if (X.empty() || X.size() != Y.size()) {
        throw ContractError("regenerative_forward: need matching nonempty X and Y");
    }
    for (int y : Y) {
        if (y < 0 || y >= model.cfg.n_classes) {
            throw ContractError("regenerative_forward: label out of range");
        }
    }
    SeqPlans plans;
    if (dropout_rng != nullptr && cfg.dropout > 0.0) {
        plans = make_seq_plans(model, cfg.dropout, *dropout_rng);
    }
    const DropoutPlan* enc_p = plans.active ? &plans.enc : nullptr;
    const DropoutPlan* post_p = plans.active ? &plans.post : nullptr;
    const DropoutPlan* prior_p = plans.active ? &plans.prior : nullptr;
    const DropoutPlan* cls_p = plans.active ? &plans.cls : nullptr;
    const DropoutPlan* fp_p = plans.active ? &plans.fp : nullptr;

    auto dyn_rhs = [&model](const ad::DiffValue& y, const ad::DiffValue& t) {
        return model.dynamics.forward(ad::concat(y, t));
    };
    std::map<double, ad::DiffValue> prior_cache;
    const DensityFn p_at = detail::memoized_prior(model, prior_p, prior_cache);

    const int D = model.state_dim();
    const std::size_t m = X.size();
    const bool want_kl = cfg.beta_kl != 0.0;
    const bool want_pll = cfg.gamma_prior != 0.0;
    RegenForward out;
    for (std::size_t i = 0; i < m; ++i) {
        const ad::DiffValue xi = ad::input(X[i]);
        const ad::DiffValue enc_i = model.encoder.forward(xi, enc_p);
        const ad::DiffValue sampled =
            sample_next_time(model.posterior, kRegenEpsilon0, enc_i, post_p);
        const ad::DiffValue t_range = ad::offset(sampled, -kRegenEpsilon0);
        out.ranges.push_back(t_range.value());

        ad::DiffValue h_look;
        if (cfg.ablate_lookahead) {
            h_look = ad::constant_vector(std::vector<double>(static_cast<std::size_t>(D), 0.0));
        } else {
            h_look = euler_solve_tape(dyn_rhs, enc_i, ad::scalar_constant(0.0), t_range,
                                      cfg.euler_step);
        }
        out.lookahead.emplace_back(h_look.data().begin(), h_look.data().end());

        const ad::DiffValue logits = model.classifier.forward(ad::concat(enc_i, h_look), cls_p);
        const ad::DiffValue ce_i = ad::sub(ad::logsumexp(logits), ad::pick(logits, Y[i]));
        out.ce_node = i == 0 ? ce_i : ad::add(out.ce_node, ce_i);

        if (want_kl) {
            const ad::DiffValue& e = enc_i;
            const DensityFn q_at = [&model, &e, post_p](const ad::DiffValue& t) {
                return posterior_density(model.posterior, t, e, post_p);
            };
            const ad::DiffValue kl_i = kl_upper_bound_densities(q_at, p_at, cfg.kl_eps);
            out.kl_node = i == 0 ? kl_i : ad::add(out.kl_node, kl_i);
        }
        if (want_pll) {
            const std::size_t tgt = std::min(i + 1, m - 1);
            const ad::DiffValue fp_out =
                model.future_prior.forward(ad::input(X[tgt]), fp_p);
            const ad::DiffValue mu = ad::slice(fp_out, 0, D);
            const ad::DiffValue var = activation(ad::slice(fp_out, D, D), Activation::Softplus);
            const ad::DiffValue pll_i = ad::neg(detail::gaussian_nll(h_look, mu, var));
            out.pll_node = i == 0 ? pll_i : ad::add(out.pll_node, pll_i);
        }
    }

    ad::DiffValue t1 = want_kl ? ad::add(out.ce_node, ad::scale(out.kl_node, cfg.beta_kl))
                               : out.ce_node;
    out.total_node = want_pll ? ad::sub(t1, ad::scale(out.pll_node, cfg.gamma_prior)) : t1;
    if (!want_kl) out.kl_node = ad::scalar_constant(0.0);
    if (!want_pll) out.pll_node = ad::scalar_constant(0.0);

    out.report.recon = out.ce_node.value();
    out.report.kl = out.kl_node.value();
    out.report.prior_ll = out.pll_node.value();
    out.report.total_loss = out.total_node.value();
    if (!std::isfinite(out.report.total_loss)) {
        throw TrainingError("regenerative_forward: non-finite loss");
    }
    detail::check_decomposition(out.report, cfg.beta_kl, cfg.gamma_prior, true);
    return out;
}

// Tape-free classification pass; returns the predicted class per frame.
inline std::vector<int> regen_predict(const StrodeNet& model,
                                      const std::vector<std::vector<double>>& X,
                                      const TrainConfig& cfg) {
    if (!model.has_regen_nets()) throw ContractError("regen_predict: model lacks classifier");
    std::vector<int> preds;
    preds.reserve(X.size());
    const int D = model.state_dim();
    for (const auto& x : X) {
        const std::vector<double> enc = model.encoder.eval(x);
        std::vector<double> in;
        in.reserve(1 + enc.size());
        in.push_back(kRegenEpsilon0);
        in.insert(in.end(), enc.begin(), enc.end());
        const double t_range = model.posterior.net.eval(in)[0];
        std::vector<double> h(static_cast<std::size_t>(D), 0.0);
        if (!cfg.ablate_lookahead) {
            h = ode_eval_dynamics(model.dynamics, enc, 0.0, t_range, cfg.euler_step);
        }
        std::vector<double> cls_in = enc;
        cls_in.insert(cls_in.end(), h.begin(), h.end());
        const std::vector<double> logits = model.classifier.eval(cls_in);
        preds.push_back(static_cast<int>(
            std::max_element(logits.begin(), logits.end()) - logits.begin()));
    }
    return preds;
}

inline double regen_accuracy(const StrodeNet& model, const std::vector<LabeledSequence>& data,
                             const TrainConfig& cfg) {
    std::size_t correct = 0, total = 0;
    for (const auto& seq : data) {
        const std::vector<int> preds = regen_predict(model, seq.frames, cfg);
        for (std::size_t i = 0; i < preds.size(); ++i) {
            correct += preds[i] == seq.labels[i] ? 1 : 0;
        }
        total += preds.size();
    }
    if (total == 0) throw EvalError("regen_accuracy: empty dataset");
    return static_cast<double>(correct) / static_cast<double>(total);
}

// Mean per-frame cross-entropy, used as the validation objective.
inline double regen_mean_ce(const StrodeNet& model, const std::vector<LabeledSequence>& data,
                            const TrainConfig& cfg) {
    TrainConfig eval_cfg = cfg;
    eval_cfg.beta_kl = 0.0;
    eval_cfg.gamma_prior = 0.0;
    double ce = 0.0;
    std::size_t total = 0;
    for (const auto& seq : data) {
        const RegenForward f = regenerative_forward(model, seq.frames, seq.labels, eval_cfg);
        ce += f.report.recon;
        total += seq.frames.size();
    }
    if (total == 0) throw EvalError("regen_mean_ce: empty dataset");
    return ce / static_cast<double>(total);
}

// ---------------------------------------------------------------- training --

struct EpochRow {
    int epoch = 0;
    double train_loss = 0.0;
    double recon = 0.0;
    double kl = 0.0;
    double val_mse = 0.0;
    double val_cs = 0.0;
};

struct TrainLog {
    std::vector<EpochRow> rows;
    int best_epoch = -1;
    double best_val = std::numeric_limits<double>::infinity();
};

namespace detail {

inline void merge_store(const std::vector<NamedParam>& params, const ad::GradStore& store) {
    for (std::size_t i = 0; i < params.size(); ++i) {
        const std::vector<double>* g = store.slot(static_cast<int>(i));
        if (g == nullptr) continue;
        auto& node = *params[i].node;
        if (node.grad.empty()) node.grad.assign(node.data.size(), 0.0);
        for (std::size_t k = 0; k < node.data.size(); ++k) node.grad[k] += (*g)[k];
    }
}

inline void scale_grads(const std::vector<NamedParam>& params, double s) {
    for (auto& p : params) {
        for (auto& g : p.node->grad) g *= s;
    }
}

inline void clear_grads(const std::vector<NamedParam>& params) {
    for (auto& p : params) {
        p.node->grad.clear();
        p.node->grad_tangent.clear();
    }
}

inline void shuffle_indices(std::vector<std::size_t>& idx, Rng& rng) {
    for (std::size_t i = idx.size(); i > 1; --i) {
        const std::size_t j = static_cast<std::size_t>(rng.integer(i));
        std::swap(idx[i - 1], idx[j]);
    }
}

// Dense-grid guard run after every epoch: the sign constraints make the
// posterior density nonnegative, and a violation means projection broke.
inline void check_posterior_nonneg(const StrodeNet& model,
                                   const std::vector<std::vector<double>>& probe_frames,
                                   int epoch) {
    for (const auto& frame : probe_frames) {
        const std::vector<double> enc = model.encoder.eval(frame);
        for (int k = 1; k <= 1000; ++k) {
            const double t = 20.0 * k / 1000.0;
            if (posterior_density(model.posterior, t, enc) < -1e-9) {
                throw TrainingError("posterior density negative at t=" + std::to_string(t) +
                                    " after epoch " + std::to_string(epoch));
            }
        }
    }
}

// Builds graphs and runs backward for one batch, one GradStore per
// sequence, optionally on worker threads. Stores are merged in sequence
// order afterwards, so the gradient is independent of thread count.
template <typename BuildFn>
inline std::vector<ElboReport> batch_gradients(const std::vector<NamedParam>& params,
                                               std::size_t batch_n, int n_threads,
                                               const BuildFn& build) {
    std::vector<ad::GradStore> stores(batch_n);
    std::vector<ElboReport> reports(batch_n);
    std::vector<std::exception_ptr> errors(batch_n);
    auto run = [&](std::size_t b) {
        try {
            reports[b] = build(b, stores[b]);
        } catch (...) {
            errors[b] = std::current_exception();
        }
    };
    const int workers = std::min<int>(n_threads, static_cast<int>(batch_n));
    if (workers <= 1) {
        for (std::size_t b = 0; b < batch_n; ++b) run(b);
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(workers));
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back([&, w]() {
                for (std::size_t b = static_cast<std::size_t>(w); b < batch_n;
                     b += static_cast<std::size_t>(workers)) {
                    run(b);
                }
            });
        }
        for (auto& th : pool) th.join();
    }
    for (std::size_t b = 0; b < batch_n; ++b) {
        if (errors[b]) std::rethrow_exception(errors[b]);
    }
    for (std::size_t b = 0; b < batch_n; ++b) merge_store(params, stores[b]);
    return reports;
}

inline void optimizer_step(StrodeNet& model, std::vector<NamedParam>& params, AdamState& adam,
                           const TrainConfig& cfg) {
    if (cfg.optimizer == Optimizer::Adam) {
        adam_step(params, adam, cfg.lr);
    } else {
        sgd_step(params, cfg.lr);
    }
    model.project_all();
}

}  // namespace detail

// Minibatch ELBO training with per-epoch validation, best-checkpoint
// retention and patience-based early stopping.
inline TrainLog train(StrodeNet& model, const std::vector<ObservedSequence>& train_data,
                      const Dataset& val_data, const TrainConfig& cfg) {
    cfg.validate();
    if (train_data.empty()) throw ParameterError("train: empty training set");
    if (val_data.empty()) throw ParameterError("train: validation split required");
    if (cfg.variant != Variant::Standard) {
        throw ParameterError("train: config variant must be standard");
    }

    auto params = model.all_parameters();
    model.assign_param_indices();
    AdamState adam;
    TrainLog log;
    auto best_snapshot = model.snapshot();
    int since_best = 0;

    std::vector<std::size_t> order(train_data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng shuffle_rng(Rng::mix(static_cast<std::uint64_t>(cfg.seed), 0x73687566ULL,
                                 static_cast<std::uint64_t>(epoch)));
        detail::shuffle_indices(order, shuffle_rng);

        double ep_total = 0.0, ep_recon = 0.0, ep_kl = 0.0;
        std::size_t ep_count = 0;
        int step = 0;
        for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t batch_n =
                std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), order.size() - pos);
            ++step;
            detail::clear_grads(params);
            auto build = [&](std::size_t b, ad::GradStore& store) {
                const std::size_t seq_id = order[pos + b];
                Rng drng(Rng::mix(static_cast<std::uint64_t>(cfg.seed) ^ 0xd407u,
                                  static_cast<std::uint64_t>(epoch),
                                  static_cast<std::uint64_t>(seq_id)));
                SequenceForward fwd = forward_sequence(model, train_data[seq_id].values, cfg,
                                                       Rollout::TeacherForced, &drng);
                ad::backward(fwd.total_node, &store);
                return fwd.report;
            };
            std::vector<ElboReport> reports;
            try {
                reports = detail::batch_gradients(params, batch_n, cfg.n_threads, build);
            } catch (const Error& e) {
                throw TrainingError("training aborted at epoch " + std::to_string(epoch) +
                                    ", step " + std::to_string(step) + ": " + e.what());
            }
            double batch_total = 0.0;
            for (const auto& r : reports) {
                batch_total += r.total_loss;
                ep_total += r.total_loss;
                ep_recon += r.recon;
                ep_kl += r.kl;
            }
            ep_count += batch_n;
            batch_total /= static_cast<double>(batch_n);
            if (!std::isfinite(batch_total) || batch_total > 1e8) {
                throw TrainingError("training diverged at epoch " + std::to_string(epoch) +
                                    ", step " + std::to_string(step) + ": loss " +
                                    std::to_string(batch_total));
            }
            detail::scale_grads(params, 1.0 / static_cast<double>(batch_n));
            detail::optimizer_step(model, params, adam, cfg);
        }

        double val_mse = 0.0;
        for (const auto& seq : val_data) {
            val_mse += teacher_forced_mse(model, seq.values, cfg.euler_step);
        }
        val_mse /= static_cast<double>(val_data.size());
        const double val_cs = evaluate_model(model, val_data).cs_mean;

        detail::check_posterior_nonneg(model, val_data.front().values, epoch);
        model.posterior.validate();
        model.prior.validate();

        EpochRow row;
        row.epoch = epoch;
        row.train_loss = ep_total / static_cast<double>(ep_count);
        row.recon = ep_recon / static_cast<double>(ep_count);
        row.kl = ep_kl / static_cast<double>(ep_count);
        row.val_mse = val_mse;
        row.val_cs = val_cs;
        log.rows.push_back(row);

        if (val_mse < log.best_val) {
            log.best_val = val_mse;
            log.best_epoch = epoch;
            best_snapshot = model.snapshot();
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    model.restore(best_snapshot);
    return log;
}

// Regenerative twin of train(): cross-entropy objective on labeled frames,
// validation CE drives early stopping and val_cs carries accuracy.
inline TrainLog train_regenerative(StrodeNet& model,
                                   const std::vector<LabeledSequence>& train_data,
                                   const std::vector<LabeledSequence>& val_data,
                                   const TrainConfig& cfg) {
    cfg.validate();
    if (train_data.empty()) throw ParameterError("train_regenerative: empty training set");
    if (val_data.empty()) throw ParameterError("train_regenerative: validation split required");
    if (cfg.variant != Variant::Regenerative || !model.has_regen_nets()) {
        throw ParameterError("train_regenerative: regenerative variant required");
    }

    auto params = model.all_parameters();
    model.assign_param_indices();
    AdamState adam;
    TrainLog log;
    auto best_snapshot = model.snapshot();
    int since_best = 0;

    std::vector<std::size_t> order(train_data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng shuffle_rng(Rng::mix(static_cast<std::uint64_t>(cfg.seed), 0x73687566ULL,
                                 static_cast<std::uint64_t>(epoch)));
        detail::shuffle_indices(order, shuffle_rng);

        double ep_total = 0.0, ep_recon = 0.0, ep_kl = 0.0;
        std::size_t ep_count = 0;
        int step = 0;
        for (std::size_t pos = 0; pos < order.size(); pos += static_cast<std::size_t>(cfg.batch)) {
            const std::size_t batch_n =
                std::min<std::size_t>(static_cast<std::size_t>(cfg.batch), order.size() - pos);
            ++step;
            detail::clear_grads(params);
            auto build = [&](std::size_t b, ad::GradStore& store) {
                const std::size_t seq_id = order[pos + b];
                Rng drng(Rng::mix(static_cast<std::uint64_t>(cfg.seed) ^ 0xd407u,
                                  static_cast<std::uint64_t>(epoch),
                                  static_cast<std::uint64_t>(seq_id)));
                RegenForward fwd = regenerative_forward(model, train_data[seq_id].frames,
                                                        train_data[seq_id].labels, cfg, &drng);
                ad::backward(fwd.total_node, &store);
                return fwd.report;
            };
            std::vector<ElboReport> reports;
            try {
                reports = detail::batch_gradients(params, batch_n, cfg.n_threads, build);
            } catch (const Error& e) {
                throw TrainingError("training aborted at epoch " + std::to_string(epoch) +
                                    ", step " + std::to_string(step) + ": " + e.what());
            }
            double batch_total = 0.0;
            for (const auto& r : reports) {
                batch_total += r.total_loss;
                ep_total += r.total_loss;
                ep_recon += r.recon;
                ep_kl += r.kl;
            }
            ep_count += batch_n;
            batch_total /= static_cast<double>(batch_n);
            if (!std::isfinite(batch_total) || batch_total > 1e8) {
                throw TrainingError("training diverged at epoch " + std::to_string(epoch) +
                                    ", step " + std::to_string(step) + ": loss " +
                                    std::to_string(batch_total));
            }
            detail::scale_grads(params, 1.0 / static_cast<double>(batch_n));
            detail::optimizer_step(model, params, adam, cfg);
        }

        const double val_ce = regen_mean_ce(model, val_data, cfg);
        const double val_acc = regen_accuracy(model, val_data, cfg);
        detail::check_posterior_nonneg(model, val_data.front().frames, epoch);
        model.posterior.validate();
        model.prior.validate();

        EpochRow row;
        row.epoch = epoch;
        row.train_loss = ep_total / static_cast<double>(ep_count);
        row.recon = ep_recon / static_cast<double>(ep_count);
        row.kl = ep_kl / static_cast<double>(ep_count);
        row.val_mse = val_ce;
        row.val_cs = val_acc;
        log.rows.push_back(row);

        if (val_ce < log.best_val) {
            log.best_val = val_ce;
            log.best_epoch = epoch;
            best_snapshot = model.snapshot();
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    model.restore(best_snapshot);
    return log;
}

// -------------------------------------------------------------- checkpoints --

inline void save_model(const StrodeNet& model, const TrainConfig& train_cfg, const TrainLog& log,
                       const std::string& path) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    j["format"] = "strode-model";
    j["net_config"] = model.cfg.to_json();
    j["nets"] = model.nets_to_json();
    j["train_config"] = train_cfg.to_json();
    nlohmann::ordered_json rows = nlohmann::ordered_json::array();
    for (const auto& r : log.rows) {
        rows.push_back({r.epoch, r.train_loss, r.recon, r.kl, r.val_mse, r.val_cs});
    }
    j["metrics"] = std::move(rows);
    j["best_epoch"] = log.best_epoch;
    j["best_val"] = log.best_val;
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("save_model: cannot open " + path);
    f << j.dump(2) << '\n';
    if (!f) throw IoError("save_model: write failed for " + path);
}

struct LoadedModel {
    StrodeNet net;
    TrainConfig train_cfg;
    TrainLog log;
};

inline LoadedModel load_model(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("load_model: cannot open " + path);
    nlohmann::ordered_json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw IoError("load_model: " + path + ": " + e.what());
    }
    try {
        if (!j.contains("format") || j.at("format").get<std::string>() != "strode-model") {
            throw IoError("not a model file");
        }
        LoadedModel out;
        const StrodeNetConfig nc = StrodeNetConfig::from_json(j.at("net_config"));
        out.net = StrodeNet::from_json(nc, j.at("nets"));
        out.train_cfg = TrainConfig::from_json(j.at("train_config"));
        if (j.contains("metrics")) {
            for (const auto& r : j.at("metrics")) {
                EpochRow row;
                row.epoch = r.at(0).get<int>();
                row.train_loss = r.at(1).get<double>();
                row.recon = r.at(2).get<double>();
                row.kl = r.at(3).get<double>();
                row.val_mse = r.at(4).get<double>();
                row.val_cs = r.at(5).get<double>();
                out.log.rows.push_back(row);
            }
        }
        if (j.contains("best_epoch")) out.log.best_epoch = j.at("best_epoch").get<int>();
        if (j.contains("best_val")) out.log.best_val = j.at("best_val").get<double>();
        return out;
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        throw IoError("load_model: " + path + ": " + e.what());
    }
}

}  // namespace strode
