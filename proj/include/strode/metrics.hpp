#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "strode/datagen.hpp"
#include "strode/errors.hpp"

namespace strode {

struct MetricReport {
    double cs_mean = 0.0;
    double cs_std = 0.0;
    double mse_mean = 0.0;
    double mse_std = 0.0;
    int n_sequences = 0;

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j = nlohmann::ordered_json::object();
        j["cs_mean"] = cs_mean;
        j["cs_std"] = cs_std;
        j["mse_mean"] = mse_mean;
        j["mse_std"] = mse_std;
        j["n_sequences"] = n_sequences;
        return j;
    }
};

// (v - min) / (max - min); a constant vector maps to all zeros.
inline std::vector<double> min_max_normalize(const std::vector<double>& v) {
    if (v.size() < 2) throw DimensionError("min_max_normalize: need at least 2 entries");
    const auto [lo_it, hi_it] = std::minmax_element(v.begin(), v.end());
    const double lo = *lo_it, hi = *hi_it;
    std::vector<double> out(v.size(), 0.0);
    if (hi > lo) {
        for (std::size_t i = 0; i < v.size(); ++i) out[i] = (v[i] - lo) / (hi - lo);
    }
    return out;
}

// Plain cosine; zero-norm input yields 0 by convention.
inline double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        throw DimensionError("cosine_similarity: length mismatch " + std::to_string(a.size()) +
                             " vs " + std::to_string(b.size()));
    }
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

inline double mean_of(const std::vector<double>& xs) {
    if (xs.empty()) return 0.0;
    double s = 0.0;
    for (double x : xs) s += x;
    return s / static_cast<double>(xs.size());
}

// Population standard deviation.
inline double std_of(const std::vector<double>& xs) {
    if (xs.size() < 2) return 0.0;
    const double mu = mean_of(xs);
    double s = 0.0;
    for (double x : xs) s += (x - mu) * (x - mu);
    return std::sqrt(s / static_cast<double>(xs.size()));
}

// Trapezoid KL(q || p) over [t_lo, t_hi] with both densities renormalized to
// the window. Test oracle only; shares nothing with the Theorem-1 bound
// beyond the density callbacks.
inline double truncated_kl_oracle(const std::function<double(double)>& q_fn,
                                  const std::function<double(double)>& p_fn,
                                  double t_lo = 1e-4, double t_hi = 20.0, int n = 100000) {
    if (!(t_hi > t_lo)) throw ParameterError("truncated_kl_oracle: empty window");
    if (n < 2) throw ParameterError("truncated_kl_oracle: need n >= 2");
    const double h = (t_hi - t_lo) / (n - 1);
    std::vector<double> q(static_cast<std::size_t>(n)), p(static_cast<std::size_t>(n));
    double zq = 0.0, zp = 0.0;
    for (int i = 0; i < n; ++i) {
        const double t = t_lo + i * h;
        q[i] = q_fn(t);
        p[i] = p_fn(t);
        if (q[i] < 0.0 || p[i] < 0.0) {
            throw ContractError("truncated_kl_oracle: negative density at t=" + std::to_string(t));
        }
        const double w = (i == 0 || i + 1 == n) ? 0.5 : 1.0;
        zq += w * q[i];
        zp += w * p[i];
    }
    zq *= h;
    zp *= h;
    if (!(zq > 0.0) || !(zp > 0.0)) {
        throw ContractError("truncated_kl_oracle: density has no mass in the window");
    }
    double kl = 0.0;
    for (int i = 0; i < n; ++i) {
        const double qn = q[i] / zq;
        const double pn = p[i] / zp;
        if (qn == 0.0) continue;  // q log q -> 0 limit
        const double f = qn * std::log(qn / pn);
        const double w = (i == 0 || i + 1 == n) ? 0.5 : 1.0;
        kl += w * f;
    }
    return kl * h;
}

// Per-sequence CS and MSE between min-max-normalized inferred and true
// boundary times, averaged over the test set. The anchored origin t_0 = 0
// (times[0]) carries no information and is excluded: the comparison is over
// t_1..t_N against an inferred vector of the same length.
using TimingInfer = std::function<std::vector<double>(const std::vector<std::vector<double>>&)>;

inline MetricReport evaluate_timings(const TimingInfer& infer, const Dataset& test) {
    std::vector<double> cs_list, mse_list;
    for (std::size_t s = 0; s < test.size(); ++s) {
        const auto& seq = test[s];
        if (!seq.times.has_value()) {
            throw EvalError("evaluate_timings: sequence " + std::to_string(s) +
                            " has no ground-truth times");
        }
        if (seq.times->size() < 3) {
            throw EvalError("evaluate_timings: sequence " + std::to_string(s) + " too short");
        }
        const std::vector<double> pred = infer(seq.values);
        if (pred.size() + 1 != seq.times->size()) {
            throw EvalError("evaluate_timings: inferred " + std::to_string(pred.size()) +
                            " boundary times for a sequence with " +
                            std::to_string(seq.times->size()) + " observations");
        }
        const std::vector<double> truth(seq.times->begin() + 1, seq.times->end());
        const std::vector<double> truth_n = min_max_normalize(truth);
        const std::vector<double> pred_n = min_max_normalize(pred);
        cs_list.push_back(cosine_similarity(pred_n, truth_n));
        double mse = 0.0;
        for (std::size_t i = 0; i < truth_n.size(); ++i) {
            const double d = pred_n[i] - truth_n[i];
            mse += d * d;
        }
        mse_list.push_back(mse / static_cast<double>(truth_n.size()));
    }
    MetricReport rep;
    rep.n_sequences = static_cast<int>(test.size());
    rep.cs_mean = mean_of(cs_list);
    rep.cs_std = std_of(cs_list);
    rep.mse_mean = mean_of(mse_list);
    rep.mse_std = std_of(mse_list);
    return rep;
}

// CSV pairs of normalized true vs inferred times, one row per boundary,
// ready for external plotting.
inline void write_timing_pairs_csv(const TimingInfer& infer, const Dataset& test,
                                   const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("write_timing_pairs_csv: cannot open " + path);
    f << "sequence,index,true_norm,inferred_norm\n";
    char buf[160];
    for (std::size_t s = 0; s < test.size(); ++s) {
        const auto& seq = test[s];
        if (!seq.times.has_value()) {
            throw EvalError("write_timing_pairs_csv: sequence " + std::to_string(s) +
                            " has no ground-truth times");
        }
        const std::vector<double> pred = infer(seq.values);
        if (pred.size() + 1 != seq.times->size()) {
            throw EvalError("write_timing_pairs_csv: inferred/true length mismatch");
        }
        const std::vector<double> truth(seq.times->begin() + 1, seq.times->end());
        const std::vector<double> truth_n = min_max_normalize(truth);
        const std::vector<double> pred_n = min_max_normalize(pred);
        for (std::size_t i = 0; i < truth_n.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%zu,%zu,%.17g,%.17g\n", s, i, truth_n[i], pred_n[i]);
            f << buf;
        }
    }
    if (!f) throw IoError("write_timing_pairs_csv: write failed for " + path);
}

}  // namespace strode
