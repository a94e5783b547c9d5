// Command-line front end: dataset generation, training, evaluation and
// KL-bound inspection with reproducible JSON configs.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "strode/strode.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

int env_thread_cap() {
    const char* raw = std::getenv("STRODE_NUM_THREADS");
    if (raw == nullptr) return std::numeric_limits<int>::max();
    const int v = std::atoi(raw);
    return v >= 1 ? v : 1;
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw strode::IoError("cannot open " + path + " for writing");
    f << text;
    if (!f) throw strode::IoError("write failed for " + path);
}

ordered_json read_json_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw strode::IoError("cannot open " + path);
    ordered_json j;
    try {
        f >> j;
    } catch (const std::exception& e) {
        throw strode::IoError(path + ": " + e.what());
    }
    return j;
}

std::vector<std::int64_t> parse_int_list(const std::string& s) {
    std::vector<std::int64_t> out;
    std::stringstream ss(s);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
        if (tok.empty()) continue;
        out.push_back(std::stoll(tok));
    }
    if (out.empty()) throw strode::ParameterError("empty integer list: '" + s + "'");
    return out;
}

// ------------------------------------------------------------------ generate --

struct GenerateArgs {
    std::string process;
    std::string out_dir;
    std::uint64_t seed = 1;
    int n_train = 5000;
    int n_val = 100;
    int n_test = 100;
    int len = 10;
    double hawkes_base = 10.0;
    double hawkes_alpha = 0.5;
    double hawkes_beta = 1.0;
    double poisson_rate = 10.0;
    double exp_noise_sd = 0.05;
    double obs_noise_sd = 0.05;
    std::string lags = "1,3";
    double noise_sd = 0.05;
};

int cmd_generate(const GenerateArgs& a) {
    fs::create_directories(a.out_dir);
    const std::string train_path = (fs::path(a.out_dir) / "train.jsonl").string();
    const std::string val_path = (fs::path(a.out_dir) / "val.jsonl").string();
    const std::string test_path = (fs::path(a.out_dir) / "test.jsonl").string();

    ordered_json manifest = ordered_json::object();
    manifest["process"] = a.process;
    manifest["seed"] = a.seed;
    manifest["n_train"] = a.n_train;
    manifest["n_val"] = a.n_val;
    manifest["n_test"] = a.n_test;

    // Each split draws from its own stream of the master seed.
    const std::uint64_t s_train = strode::Rng::mix(a.seed, 101);
    const std::uint64_t s_val = strode::Rng::mix(a.seed, 102);
    const std::uint64_t s_test = strode::Rng::mix(a.seed, 103);

    if (a.process == "postdiction") {
        std::vector<int> lag_set;
        for (std::int64_t v : parse_int_list(a.lags)) lag_set.push_back(static_cast<int>(v));
        strode::write_postdiction(
            strode::make_postdiction_dataset(a.n_train, a.len, lag_set, a.noise_sd, s_train),
            train_path);
        strode::write_postdiction(
            strode::make_postdiction_dataset(a.n_val, a.len, lag_set, a.noise_sd, s_val),
            val_path);
        strode::write_postdiction(
            strode::make_postdiction_dataset(a.n_test, a.len, lag_set, a.noise_sd, s_test),
            test_path);
        ordered_json params = ordered_json::object();
        params["len"] = a.len;
        params["lag_set"] = lag_set;
        params["noise_sd"] = a.noise_sd;
        params["omega"] = strode::kPostdictionOmega;
        manifest["params"] = std::move(params);
    } else {
        strode::SineDatasetConfig cfg;
        cfg.process = strode::process_from_name(a.process);
        cfg.hawkes = {a.hawkes_base, a.hawkes_alpha, a.hawkes_beta};
        cfg.poisson_rate = a.poisson_rate;
        cfg.exp_noise_sd = a.exp_noise_sd;
        cfg.obs_noise_sd = a.obs_noise_sd;
        cfg.len = a.len;
        strode::write_dataset(strode::make_sine_dataset(cfg, a.n_train, s_train), train_path);
        strode::write_dataset(strode::make_sine_dataset(cfg, a.n_val, s_val), val_path);
        strode::write_dataset(strode::make_sine_dataset(cfg, a.n_test, s_test), test_path);
        ordered_json params = ordered_json::object();
        params["len"] = a.len;
        params["obs_noise_sd"] = a.obs_noise_sd;
        if (cfg.process == strode::TimingProcess::Hawkes) {
            params["hawkes_base"] = a.hawkes_base;
            params["hawkes_alpha"] = a.hawkes_alpha;
            params["hawkes_beta"] = a.hawkes_beta;
        } else if (cfg.process == strode::TimingProcess::Poisson) {
            params["poisson_rate"] = a.poisson_rate;
        } else {
            params["exp_noise_sd"] = a.exp_noise_sd;
        }
        manifest["params"] = std::move(params);
    }

    ordered_json files = ordered_json::object();
    files["train"] = "train.jsonl";
    files["val"] = "val.jsonl";
    files["test"] = "test.jsonl";
    manifest["files"] = std::move(files);
    write_text((fs::path(a.out_dir) / "manifest.json").string(), manifest.dump(2) + "\n");
    std::cout << "wrote " << a.n_train << "/" << a.n_val << "/" << a.n_test << " sequences to "
              << a.out_dir << "\n";
    return 0;
}

// --------------------------------------------------------------------- train --

struct ResolvedConfig {
    strode::TrainConfig train;
    strode::StrodeNetConfig net;
    std::vector<std::int64_t> seeds;
    bool obs_dim_explicit = false;
    bool variant_explicit = false;
};

// The config file is one flat, strictly-checked object. Keys are routed to
// TrainConfig or StrodeNetConfig; "likelihood"/"variant" belong to both and
// "seeds" selects the runs.
ResolvedConfig parse_run_config(const ordered_json& j) {
    ResolvedConfig rc;
    ordered_json train_j = ordered_json::object();
    ordered_json net_j = ordered_json::object();
    const auto& tkeys = strode::TrainConfig::keys();
    const auto& nkeys = strode::StrodeNetConfig::keys();
    for (const auto& [key, val] : j.items()) {
        bool known = false;
        if (std::find(tkeys.begin(), tkeys.end(), key) != tkeys.end()) {
            train_j[key] = val;
            known = true;
        }
        if (std::find(nkeys.begin(), nkeys.end(), key) != nkeys.end()) {
            net_j[key] = val;
            known = true;
        }
        if (key == "seeds") {
            if (!val.is_array() || val.empty()) {
                throw strode::ParameterError("config: seeds must be a nonempty array");
            }
            for (const auto& s : val) rc.seeds.push_back(s.get<std::int64_t>());
            known = true;
        }
        if (!known) throw strode::ParameterError("config: unknown key '" + key + "'");
    }
    rc.train = strode::TrainConfig::from_json(train_j);
    rc.net = strode::StrodeNetConfig::from_json(net_j);
    rc.obs_dim_explicit = j.contains("obs_dim");
    rc.variant_explicit = j.contains("variant");
    if (rc.seeds.empty()) rc.seeds.push_back(rc.train.seed);
    return rc;
}

void write_metrics_csv(const strode::TrainLog& log, const std::string& path) {
    std::string text = "epoch,train_loss,recon,kl,val_mse,val_cs\n";
    for (const auto& r : log.rows) {
        text += std::to_string(r.epoch) + "," + fmt_double(r.train_loss) + "," +
                fmt_double(r.recon) + "," + fmt_double(r.kl) + "," + fmt_double(r.val_mse) + "," +
                fmt_double(r.val_cs) + "\n";
    }
    write_text(path, text);
}

struct TrainArgs {
    std::string data_dir;
    std::string config_path;
    std::string out_dir;
    std::string seeds_override;
    int parallel_seeds = 1;
};

int cmd_train(const TrainArgs& a) {
    if (!fs::is_directory(a.data_dir)) {
        throw strode::IoError("data directory not found: " + a.data_dir);
    }
    const ordered_json data_manifest =
        read_json_file((fs::path(a.data_dir) / "manifest.json").string());
    const std::string process = data_manifest.at("process").get<std::string>();
    const bool postdiction = process == "postdiction";

    ResolvedConfig rc = parse_run_config(read_json_file(a.config_path));
    if (!a.seeds_override.empty()) rc.seeds = parse_int_list(a.seeds_override);
    if (!rc.variant_explicit && postdiction) {
        rc.train.variant = strode::Variant::Regenerative;
        rc.net.variant = strode::Variant::Regenerative;
    }
    if (postdiction != (rc.train.variant == strode::Variant::Regenerative)) {
        throw strode::ParameterError("config variant does not match dataset type '" + process +
                                     "'");
    }

    const int cap = env_thread_cap();
    rc.train.n_threads = std::min(rc.train.n_threads, cap);
    const int parallel =
        std::max(1, std::min({a.parallel_seeds, cap, static_cast<int>(rc.seeds.size())}));

    // Load data once; splits are shared read-only across seeds.
    strode::Dataset train_set, val_set;
    std::vector<strode::LabeledSequence> train_lab, val_lab;
    int data_obs_dim = 0;
    if (postdiction) {
        train_lab = strode::read_postdiction((fs::path(a.data_dir) / "train.jsonl").string());
        val_lab = strode::read_postdiction((fs::path(a.data_dir) / "val.jsonl").string());
        if (train_lab.empty() || train_lab.front().frames.empty()) {
            throw strode::IoError("empty training data in " + a.data_dir);
        }
        data_obs_dim = static_cast<int>(train_lab.front().frames.front().size());
    } else {
        train_set = strode::read_dataset((fs::path(a.data_dir) / "train.jsonl").string());
        val_set = strode::read_dataset((fs::path(a.data_dir) / "val.jsonl").string());
        if (train_set.empty() || train_set.front().values.empty()) {
            throw strode::IoError("empty training data in " + a.data_dir);
        }
        data_obs_dim = static_cast<int>(train_set.front().values.front().size());
    }
    if (rc.obs_dim_explicit && rc.net.obs_dim != data_obs_dim) {
        throw strode::ParameterError("config obs_dim " + std::to_string(rc.net.obs_dim) +
                                     " does not match data obs_dim " +
                                     std::to_string(data_obs_dim));
    }
    rc.net.obs_dim = data_obs_dim;

    fs::create_directories(a.out_dir);
    ordered_json manifest = ordered_json::object();
    manifest["data_dir"] = a.data_dir;
    manifest["process"] = process;
    manifest["config"] = rc.train.to_json();
    manifest["net_config"] = rc.net.to_json();
    manifest["seeds"] = rc.seeds;
    manifest["parallel_seeds"] = parallel;
    write_text((fs::path(a.out_dir) / "manifest.json").string(), manifest.dump(2) + "\n");

    const std::vector<strode::ObservedSequence> train_obs =
        postdiction ? std::vector<strode::ObservedSequence>{} : strode::observed_view(train_set);

    std::vector<std::string> failures(rc.seeds.size());
    std::vector<bool> diverged(rc.seeds.size(), false);
    auto run_seed = [&](std::size_t si) {
        const std::int64_t seed = rc.seeds[si];
        try {
            strode::TrainConfig cfg = rc.train;
            cfg.seed = seed;
            strode::StrodeNet model =
                strode::StrodeNet::make(rc.net, static_cast<std::uint64_t>(seed));
            strode::TrainLog log;
            if (postdiction) {
                log = strode::train_regenerative(model, train_lab, val_lab, cfg);
            } else {
                log = strode::train(model, train_obs, val_set, cfg);
            }
            const std::string tag = std::to_string(seed);
            strode::save_model(model, cfg, log,
                               (fs::path(a.out_dir) / ("model_seed" + tag + ".json")).string());
            write_metrics_csv(log,
                              (fs::path(a.out_dir) / ("metrics_seed" + tag + ".csv")).string());
            std::cout << "seed " << seed << ": best epoch " << log.best_epoch << ", best val "
                      << fmt_double(log.best_val) << "\n";
        } catch (const strode::TrainingError& e) {
            diverged[si] = true;
            failures[si] = e.what();
        } catch (const strode::NumericError& e) {
            diverged[si] = true;
            failures[si] = e.what();
        } catch (const std::exception& e) {
            failures[si] = e.what();
        }
    };

    if (parallel <= 1) {
        for (std::size_t si = 0; si < rc.seeds.size(); ++si) run_seed(si);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < parallel; ++w) {
            pool.emplace_back([&, w]() {
                for (std::size_t si = static_cast<std::size_t>(w); si < rc.seeds.size();
                     si += static_cast<std::size_t>(parallel)) {
                    run_seed(si);
                }
            });
        }
        for (auto& th : pool) th.join();
    }

    int rc_exit = 0;
    for (std::size_t si = 0; si < rc.seeds.size(); ++si) {
        if (failures[si].empty()) continue;
        std::cerr << "seed " << rc.seeds[si] << " failed: " << failures[si] << "\n";
        rc_exit = diverged[si] ? 3 : 2;
    }
    return rc_exit;
}

// ---------------------------------------------------------------------- eval --

struct EvalArgs {
    std::string model_path;
    std::string data_path;
    std::string report_path;
    bool force = false;
};

bool is_postdiction_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw strode::IoError("cannot open " + path);
    std::string line;
    if (!std::getline(f, line)) throw strode::IoError("empty dataset: " + path);
    ordered_json j;
    try {
        j = ordered_json::parse(line);
    } catch (const std::exception& e) {
        throw strode::IoError(path + ": " + e.what());
    }
    return j.contains("frames");
}

int cmd_eval(const EvalArgs& a) {
    std::string data_file = a.data_path;
    if (fs::is_directory(data_file)) data_file = (fs::path(data_file) / "test.jsonl").string();
    if (!fs::exists(data_file)) throw strode::IoError("dataset not found: " + data_file);
    if (fs::exists(a.report_path) && !a.force) {
        throw strode::IoError("report exists, pass --force to overwrite: " + a.report_path);
    }
    const fs::path report_dir = fs::path(a.report_path).has_parent_path()
                                    ? fs::path(a.report_path).parent_path()
                                    : fs::path(".");
    fs::create_directories(report_dir);

    strode::LoadedModel loaded = strode::load_model(a.model_path);
    ordered_json report = ordered_json::object();
    if (is_postdiction_file(data_file)) {
        const std::vector<strode::LabeledSequence> data = strode::read_postdiction(data_file);
        report["accuracy"] = strode::regen_accuracy(loaded.net, data, loaded.train_cfg);
        report["mean_ce"] = strode::regen_mean_ce(loaded.net, data, loaded.train_cfg);
        report["n_sequences"] = data.size();
        write_text(a.report_path, report.dump(2) + "\n");
        std::cout << report.dump(2) << "\n";
        return 0;
    }

    const strode::Dataset data = strode::read_dataset(data_file);
    const strode::MetricReport mr =
        strode::evaluate_timings(strode::timing_infer(loaded.net), data);
    report = mr.to_json();
    write_text(a.report_path, report.dump(2) + "\n");
    const std::string timings_path = (report_dir / "timings.csv").string();
    if (fs::exists(timings_path) && !a.force) {
        throw strode::IoError("timings file exists, pass --force to overwrite: " + timings_path);
    }
    strode::write_timing_pairs_csv(strode::timing_infer(loaded.net), data, timings_path);
    std::cout << report.dump(2) << "\n";
    return 0;
}

// ---------------------------------------------------------------- inspect-kl --

struct InspectArgs {
    std::string fixture;
    std::string model_path;
    std::string data_path;
    double eps = 0.1;
    bool oracle = false;
    int max_sequences = 3;
};

void print_bound_line(const std::string& label, const strode::KlBreakdown& br, double bound,
                      const std::optional<double>& oracle) {
    std::cout << label << ": G(-eps)=" << fmt_double(br.g_eps)
              << " |G(-2eps)-G(-eps)|=" << fmt_double(std::fabs(br.g_two_eps - br.g_eps))
              << " bound=" << fmt_double(bound);
    if (oracle.has_value()) {
        std::cout << " oracle=" << fmt_double(*oracle) << " (window [1e-4,20])";
    }
    std::cout << "\n";
}

int cmd_inspect_kl(const InspectArgs& a) {
    using strode::ad::DiffValue;
    if (!a.fixture.empty()) {
        strode::KlBreakdown br;
        std::optional<double> oracle;
        if (a.fixture == "equal") {
            strode::Rng rng(42);
            const strode::PriorIntensityNet prior = strode::PriorIntensityNet::make(16, rng);
            const strode::DensityFn d = [&prior](const DiffValue& t) {
                return strode::prior_density(prior, t);
            };
            const DiffValue b = strode::kl_upper_bound_densities(d, d, a.eps, &br);
            if (a.oracle) {
                auto plain = [&prior](double t) { return strode::prior_density(prior, t); };
                oracle = strode::truncated_kl_oracle(plain, plain);
            }
            print_bound_line("fixture equal", br, b.value(), oracle);
        } else if (a.fixture == "exp21") {
            const strode::DensityFn q = [](const DiffValue& t) {
                return strode::ad::scale(strode::ad::exp_(strode::ad::scale(t, -2.0)), 2.0);
            };
            const strode::DensityFn p = [](const DiffValue& t) {
                return strode::ad::exp_(strode::ad::neg(t));
            };
            const DiffValue b = strode::kl_upper_bound_densities(q, p, a.eps, &br);
            if (a.oracle) {
                oracle = strode::truncated_kl_oracle(
                    [](double t) { return 2.0 * std::exp(-2.0 * t); },
                    [](double t) { return std::exp(-t); });
            }
            print_bound_line("fixture exp21", br, b.value(), oracle);
        } else {
            throw strode::ParameterError("unknown fixture: " + a.fixture +
                                         " (expected equal|exp21)");
        }
        return 0;
    }

    if (a.model_path.empty() || a.data_path.empty()) {
        throw strode::ParameterError("inspect-kl needs --fixture or both --model and --data");
    }
    strode::LoadedModel loaded = strode::load_model(a.model_path);
    std::string data_file = a.data_path;
    if (fs::is_directory(data_file)) data_file = (fs::path(data_file) / "test.jsonl").string();
    const strode::Dataset data = strode::read_dataset(data_file);
    const int n_seq = std::min<int>(a.max_sequences, static_cast<int>(data.size()));
    for (int s = 0; s < n_seq; ++s) {
        const auto& X = data[static_cast<std::size_t>(s)].values;
        for (std::size_t i = 1; i < X.size(); ++i) {
            const std::vector<double> enc = loaded.net.encoder.eval(X[i]);
            const DiffValue enc_node = strode::ad::constant_vector(enc);
            strode::KlBreakdown br;
            const DiffValue b = strode::kl_upper_bound(loaded.net.posterior, loaded.net.prior,
                                                       enc_node, a.eps, &br);
            std::optional<double> oracle;
            if (a.oracle) {
                oracle = strode::truncated_kl_oracle(
                    [&](double t) {
                        return strode::posterior_density(loaded.net.posterior, t, enc);
                    },
                    [&](double t) { return strode::prior_density(loaded.net.prior, t); });
            }
            print_bound_line("seq " + std::to_string(s) + " step " + std::to_string(i), br,
                             b.value(), oracle);
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Latent-ODE timing model: generate, train, evaluate, inspect"};
    app.require_subcommand(1);

    GenerateArgs g;
    CLI::App* gen = app.add_subcommand("generate", "Write train/val/test JSONL plus a manifest");
    gen->add_option("--process", g.process, "hawkes|poisson|exponential|postdiction")
        ->required()
        ->check(CLI::IsMember({"hawkes", "poisson", "exponential", "postdiction"}));
    gen->add_option("--out", g.out_dir, "output directory")->required();
    gen->add_option("--seed", g.seed, "master seed");
    gen->add_option("--n-train", g.n_train, "training sequences");
    gen->add_option("--n-val", g.n_val, "validation sequences");
    gen->add_option("--n-test", g.n_test, "test sequences");
    gen->add_option("--len", g.len, "observations (or frames) per sequence");
    gen->add_option("--hawkes-base", g.hawkes_base, "Hawkes base rate");
    gen->add_option("--hawkes-alpha", g.hawkes_alpha, "Hawkes branching ratio");
    gen->add_option("--hawkes-beta", g.hawkes_beta, "Hawkes decay");
    gen->add_option("--poisson-rate", g.poisson_rate, "Poisson rate");
    gen->add_option("--exp-noise-sd", g.exp_noise_sd, "noise on exponential grid times");
    gen->add_option("--obs-noise-sd", g.obs_noise_sd, "noise on sine observations");
    gen->add_option("--lags", g.lags, "postdiction lag set, comma separated");
    gen->add_option("--noise-sd", g.noise_sd, "postdiction frame noise");

    TrainArgs t;
    CLI::App* tr = app.add_subcommand("train", "Train one model per seed");
    tr->add_option("--data", t.data_dir, "dataset directory from generate")->required();
    tr->add_option("--config", t.config_path, "JSON config file")->required();
    tr->add_option("--out", t.out_dir, "output directory")->required();
    tr->add_option("--seeds", t.seeds_override, "comma-separated seed list override");
    tr->add_option("--parallel-seeds", t.parallel_seeds, "seeds trained concurrently");

    EvalArgs e;
    CLI::App* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    ev->add_option("--model", e.model_path, "model JSON")->required();
    ev->add_option("--data", e.data_path, "dataset directory or JSONL file")->required();
    ev->add_option("--report", e.report_path, "report JSON output path")->required();
    ev->add_flag("--force", e.force, "overwrite an existing report");

    InspectArgs k;
    CLI::App* ik = app.add_subcommand("inspect-kl", "Print KL bound components per step");
    ik->add_option("--fixture", k.fixture, "analytic fixture: equal|exp21");
    ik->add_option("--model", k.model_path, "model JSON");
    ik->add_option("--data", k.data_path, "dataset directory or JSONL file");
    ik->add_option("--eps", k.eps, "bound epsilon");
    ik->add_flag("--oracle", k.oracle, "also print the truncated numeric KL");
    ik->add_option("--max-sequences", k.max_sequences, "sequences to inspect in model mode");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& pe) {
        const int code = app.exit(pe);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) return cmd_generate(g);
        if (tr->parsed()) return cmd_train(t);
        if (ev->parsed()) return cmd_eval(e);
        if (ik->parsed()) return cmd_inspect_kl(k);
    } catch (const strode::TrainingError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 3;
    } catch (const strode::NumericError& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 3;
    } catch (const std::exception& err) {
        std::cerr << "error: " << err.what() << "\n";
        return 2;
    }
    return 2;
}
