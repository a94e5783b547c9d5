#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "strode/errors.hpp"
#include "strode/rng.hpp"

namespace strode {

struct HawkesParams {
    double base = 10.0;   // background rate
    double alpha = 0.5;   // branching ratio, < 1 for stationarity
    double beta = 1.0;    // kernel decay

    void validate() const {
        if (!(base > 0.0)) throw ParameterError("HawkesParams: base rate must be positive");
        if (!(alpha >= 0.0 && alpha < 1.0)) {
            throw ParameterError("HawkesParams: alpha must lie in [0, 1) for stationarity");
        }
        if (!(beta > 0.0)) throw ParameterError("HawkesParams: beta must be positive");
    }
};

struct TimedSequence {
    std::vector<std::vector<double>> values;
    std::optional<std::vector<double>> times;  // ground truth, evaluation-only
    nlohmann::ordered_json meta = nlohmann::ordered_json::object();

    void validate() const {
        if (times.has_value()) {
            if (times->size() != values.size()) {
                throw ContractError("TimedSequence: |values| != |times|");
            }
            for (std::size_t i = 0; i < times->size(); ++i) {
                if (i == 0 && (*times)[0] != 0.0) {
                    throw ContractError("TimedSequence: times must start at 0");
                }
                if (i > 0 && !((*times)[i] > (*times)[i - 1])) {
                    throw ContractError("TimedSequence: times must strictly increase");
                }
            }
        }
    }
};

using Dataset = std::vector<TimedSequence>;

// Training-side view: carries observations only. Ground-truth times are
// structurally unreachable from anything built on this type.
struct ObservedSequence {
    std::vector<std::vector<double>> values;
};

inline std::vector<ObservedSequence> observed_view(const Dataset& data) {
    std::vector<ObservedSequence> out;
    out.reserve(data.size());
    for (const auto& seq : data) out.push_back({seq.values});
    return out;
}

// ------------------------------------------------------------- timing draws --

// Ogata thinning. The exponential kernel decays between events, so the
// intensity just after the current position dominates the whole next
// interval and the excitation state updates in O(1).
inline std::vector<double> sample_hawkes(const HawkesParams& params, int n_events, Rng& rng) {
    params.validate();
    if (n_events < 0) throw ParameterError("sample_hawkes: n_events must be nonnegative");
    std::vector<double> times;
    times.reserve(static_cast<std::size_t>(n_events));
    double t = 0.0;
    double excitation = 0.0;  // sum of alpha*beta*exp(-beta*(t - t_j)) at t
    while (static_cast<int>(times.size()) < n_events) {
        const double lam_bar = params.base + excitation;
        const double wait = rng.exponential(lam_bar);
        t += wait;
        excitation *= std::exp(-params.beta * wait);
        const double lam = params.base + excitation;
        if (rng.uniform01() * lam_bar <= lam) {
            times.push_back(t);
            excitation += params.alpha * params.beta;
        }
    }
    return times;
}

inline std::vector<double> sample_poisson(double rate, int n_events, Rng& rng) {
    if (!(rate > 0.0)) throw ParameterError("sample_poisson: rate must be positive");
    if (n_events < 0) throw ParameterError("sample_poisson: n_events must be nonnegative");
    std::vector<double> times;
    times.reserve(static_cast<std::size_t>(n_events));
    double t = 0.0;
    for (int i = 0; i < n_events; ++i) {
        t += rng.exponential(rate);
        times.push_back(t);
    }
    return times;
}

// t_k = e^{a_k} + eps with a evenly spaced on [0, 2]; sorted, shifted to
// start at 0 and nudged apart if noise produced a collision.
inline std::vector<double> sample_exponential_times(int n_events, double noise_sd, Rng& rng) {
    if (n_events < 1) throw ParameterError("sample_exponential_times: need n_events >= 1");
    if (noise_sd < 0.0) throw ParameterError("sample_exponential_times: negative noise_sd");
    std::vector<double> times(static_cast<std::size_t>(n_events));
    for (int k = 0; k < n_events; ++k) {
        const double a = n_events == 1 ? 0.0 : 2.0 * k / (n_events - 1);
        times[k] = std::exp(a);
        if (noise_sd > 0.0) times[k] += rng.normal(0.0, noise_sd);
    }
    std::sort(times.begin(), times.end());
    const double origin = times.front();
    for (auto& t : times) t -= origin;
    for (std::size_t i = 1; i < times.size(); ++i) {
        if (times[i] <= times[i - 1]) times[i] = times[i - 1] + 1e-9;
    }
    return times;
}

// ---------------------------------------------------------- sine datasets --

enum class TimingProcess { Hawkes, Poisson, Exponential };

inline const char* process_name(TimingProcess p) {
    switch (p) {
        case TimingProcess::Hawkes: return "hawkes";
        case TimingProcess::Poisson: return "poisson";
        case TimingProcess::Exponential: return "exponential";
    }
    return "?";
}

inline TimingProcess process_from_name(const std::string& s) {
    if (s == "hawkes") return TimingProcess::Hawkes;
    if (s == "poisson") return TimingProcess::Poisson;
    if (s == "exponential") return TimingProcess::Exponential;
    throw ParameterError("unknown timing process: " + s);
}

struct SineDatasetConfig {
    TimingProcess process = TimingProcess::Hawkes;
    HawkesParams hawkes;
    double poisson_rate = 10.0;
    double exp_noise_sd = 0.05;  // eps in t = e^a + eps
    double obs_noise_sd = 0.05;  // eta on the sine values
    int len = 10;
};

// Each sequence draws from its own RNG stream, so generation order (or a
// parallel split) cannot change the data for a given seed.
inline Dataset make_sine_dataset(const SineDatasetConfig& cfg, int n_seq, std::uint64_t seed) {
    if (n_seq < 0) throw ParameterError("make_sine_dataset: n_seq must be nonnegative");
    if (cfg.len < 1) throw ParameterError("make_sine_dataset: len must be >= 1");
    Dataset out;
    out.reserve(static_cast<std::size_t>(n_seq));
    for (int k = 0; k < n_seq; ++k) {
        Rng rng(Rng::mix(seed, 0x73696e65ULL, static_cast<std::uint64_t>(k)));
        std::vector<double> raw;
        switch (cfg.process) {
            case TimingProcess::Hawkes: raw = sample_hawkes(cfg.hawkes, cfg.len, rng); break;
            case TimingProcess::Poisson: raw = sample_poisson(cfg.poisson_rate, cfg.len, rng); break;
            case TimingProcess::Exponential:
                raw = sample_exponential_times(cfg.len, cfg.exp_noise_sd, rng);
                break;
        }
        TimedSequence seq;
        std::vector<double> times(raw.size());
        const double origin = raw.front();
        for (std::size_t i = 0; i < raw.size(); ++i) times[i] = raw[i] - origin;
        seq.values.reserve(times.size());
        for (double t : times) {
            double v = std::sin(t);
            if (cfg.obs_noise_sd > 0.0) v += rng.normal(0.0, cfg.obs_noise_sd);
            seq.values.push_back({v});
        }
        seq.times = std::move(times);
        seq.meta["generator"] = process_name(cfg.process);
        nlohmann::ordered_json params = nlohmann::ordered_json::object();
        switch (cfg.process) {
            case TimingProcess::Hawkes:
                params["base"] = cfg.hawkes.base;
                params["alpha"] = cfg.hawkes.alpha;
                params["beta"] = cfg.hawkes.beta;
                break;
            case TimingProcess::Poisson:
                params["rate"] = cfg.poisson_rate;
                break;
            case TimingProcess::Exponential:
                params["noise_sd"] = cfg.exp_noise_sd;
                break;
        }
        params["obs_noise_sd"] = cfg.obs_noise_sd;
        params["len"] = cfg.len;
        seq.meta["params"] = std::move(params);
        seq.meta["seed"] = seed;
        seq.meta["index"] = k;
        seq.validate();
        out.push_back(std::move(seq));
    }
    return out;
}

// ------------------------------------------------------- postdiction task --

inline constexpr double kPostdictionOmega = 0.7853981633974483;  // pi/4 phase step

struct LabeledSequence {
    std::vector<std::vector<double>> frames;  // [sin(theta)+noise, lag code]
    std::vector<int> labels;                  // sign of a future clean sine
    std::vector<int> lags;                    // diagnostic only, never trained on
    nlohmann::ordered_json meta = nlohmann::ordered_json::object();
};

// Frames walk a hidden phase by pi/4 per step. The label for frame i is the
// sign of the clean sine L_i steps ahead, with L_i drawn per frame from
// lag_set and exposed only through a scaled context coordinate. With only
// sin(theta) observed the cosine branch is ambiguous, so lookahead-free
// decisions are capped well below the future-frame readout.
inline std::vector<LabeledSequence> make_postdiction_dataset(int n_seq, int len,
                                                             const std::vector<int>& lag_set,
                                                             double noise_sd,
                                                             std::uint64_t seed) {
    if (n_seq < 0) throw ParameterError("make_postdiction_dataset: n_seq must be nonnegative");
    if (len < 1) throw ParameterError("make_postdiction_dataset: len must be >= 1");
    if (lag_set.empty()) throw ParameterError("make_postdiction_dataset: empty lag set");
    int max_lag = 0;
    for (int lag : lag_set) {
        if (lag < 0 || lag > 5) {
            throw ParameterError("make_postdiction_dataset: lags must lie in [0, 5]");
        }
        max_lag = std::max(max_lag, lag);
    }
    if (noise_sd < 0.0) throw ParameterError("make_postdiction_dataset: negative noise_sd");

    std::vector<LabeledSequence> out;
    out.reserve(static_cast<std::size_t>(n_seq));
    for (int k = 0; k < n_seq; ++k) {
        Rng rng(Rng::mix(seed, 0x706f7374ULL, static_cast<std::uint64_t>(k)));
        const double theta0 = rng.uniform(0.0, 6.283185307179586);
        const int total = len + max_lag;
        std::vector<double> clean(static_cast<std::size_t>(total));
        for (int i = 0; i < total; ++i) clean[i] = std::sin(theta0 + i * kPostdictionOmega);

        LabeledSequence seq;
        seq.frames.reserve(static_cast<std::size_t>(len));
        seq.labels.resize(static_cast<std::size_t>(len));
        seq.lags.resize(static_cast<std::size_t>(len));
        std::vector<double> noisy(static_cast<std::size_t>(len));
        for (int i = 0; i < len; ++i) {
            noisy[i] = clean[i];
            if (noise_sd > 0.0) noisy[i] += rng.normal(0.0, noise_sd);
        }
        for (int i = 0; i < len; ++i) {
            const int lag = lag_set[rng.integer(lag_set.size())];
            seq.lags[i] = lag;
            seq.labels[i] = clean[i + lag] > 0.0 ? 1 : 0;
            seq.frames.push_back({noisy[i], 0.25 * lag});
        }
        seq.meta["generator"] = "postdiction";
        seq.meta["lag_set"] = lag_set;
        seq.meta["noise_sd"] = noise_sd;
        seq.meta["omega"] = kPostdictionOmega;
        seq.meta["seed"] = seed;
        seq.meta["index"] = k;
        out.push_back(std::move(seq));
    }
    return out;
}

// ----------------------------------------------------------------- JSONL --

inline void write_dataset(const Dataset& data, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("write_dataset: cannot open " + path);
    for (const auto& seq : data) {
        nlohmann::ordered_json j = nlohmann::ordered_json::object();
        j["values"] = seq.values;
        if (seq.times.has_value()) j["times"] = *seq.times;
        j["meta"] = seq.meta;
        f << j.dump() << '\n';
    }
    if (!f) throw IoError("write_dataset: write failed for " + path);
}

inline Dataset read_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_dataset: cannot open " + path);
    Dataset out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() && f.peek() == std::char_traits<char>::eof()) break;
        nlohmann::ordered_json j;
        try {
            j = nlohmann::ordered_json::parse(line);
        } catch (const std::exception& e) {
            throw IoError("read_dataset: " + path + " line " + std::to_string(lineno) + ": " +
                          e.what());
        }
        try {
            TimedSequence seq;
            if (!j.contains("values") || !j.at("values").is_array()) {
                throw ContractError("missing values array");
            }
            seq.values = j.at("values").get<std::vector<std::vector<double>>>();
            for (const auto& v : seq.values) {
                if (v.size() != seq.values.front().size()) {
                    throw ContractError("ragged value vectors");
                }
            }
            if (j.contains("times")) {
                seq.times = j.at("times").get<std::vector<double>>();
            }
            if (j.contains("meta")) seq.meta = j.at("meta");
            seq.validate();
            out.push_back(std::move(seq));
        } catch (const std::exception& e) {
            throw IoError("read_dataset: " + path + " line " + std::to_string(lineno) + ": " +
                          e.what());
        }
    }
    return out;
}

inline void write_postdiction(const std::vector<LabeledSequence>& data, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("write_postdiction: cannot open " + path);
    for (const auto& seq : data) {
        nlohmann::ordered_json j = nlohmann::ordered_json::object();
        j["frames"] = seq.frames;
        j["labels"] = seq.labels;
        j["lags"] = seq.lags;
        j["meta"] = seq.meta;
        f << j.dump() << '\n';
    }
    if (!f) throw IoError("write_postdiction: write failed for " + path);
}

inline std::vector<LabeledSequence> read_postdiction(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_postdiction: cannot open " + path);
    std::vector<LabeledSequence> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() && f.peek() == std::char_traits<char>::eof()) break;
        try {
            nlohmann::ordered_json j = nlohmann::ordered_json::parse(line);
            LabeledSequence seq;
            seq.frames = j.at("frames").get<std::vector<std::vector<double>>>();
            seq.labels = j.at("labels").get<std::vector<int>>();
            if (j.contains("lags")) seq.lags = j.at("lags").get<std::vector<int>>();
            if (j.contains("meta")) seq.meta = j.at("meta");
            if (seq.labels.size() != seq.frames.size()) {
                throw ContractError("labels/frames size mismatch");
            }
            out.push_back(std::move(seq));
        } catch (const std::exception& e) {
            throw IoError("read_postdiction: " + path + " line " + std::to_string(lineno) +
                          ": " + e.what());
        }
    }
    return out;
}

}  // namespace strode
