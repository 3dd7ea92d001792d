// cli.cpp - subcommand wiring over the pipeline functions.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>

#include "tracer/cli.hpp"
#include "tracer/pipeline.hpp"

namespace tracer {

namespace fs = std::filesystem;

namespace {

// Flags shared by every subcommand. Unset optionals leave the config value.
struct CommonFlags {
    std::string config;
    std::optional<uint64_t> seed;
    std::optional<int> steps, int_steps;
    std::optional<double> lambda_smooth, lambda_pre, lambda_ob;
    std::vector<std::string> no_conditioning;
    bool optimize = false;
    std::string out;
};

void add_common(CLI::App *cmd, CommonFlags &f, bool needs_out) {
    cmd->add_option("--config", f.config, "JSON run config (schema_version 1)")->check(CLI::ExistingFile);
    cmd->add_option("--seed", f.seed, "seed for every random choice");
    cmd->add_option("--steps", f.steps, "recurrent steps T")->check(CLI::PositiveNumber);
    cmd->add_option("--int-steps", f.int_steps, "scaling-and-squaring steps")->check(CLI::PositiveNumber);
    cmd->add_option("--lambda-smooth", f.lambda_smooth, "smoothness weight")->check(CLI::NonNegativeNumber);
    cmd->add_option("--lambda-pre", f.lambda_pre, "tumour preservation weight")->check(CLI::NonNegativeNumber);
    cmd->add_option("--lambda-ob", f.lambda_ob, "tumour obliteration weight")->check(CLI::NonNegativeNumber);
    cmd->add_option("--no-conditioning", f.no_conditioning,
                    "drop tumour conditioning: forward, inverse, both or none (keeps both)")
        ->check(CLI::IsMember({"forward", "inverse", "both", "none"}));
    cmd->add_flag("--optimize-pair", f.optimize, "register by per-pair optimisation instead of a checkpoint");
    auto *o = cmd->add_option("--out", f.out, "output directory");
    if (needs_out) o->required();
}

RunConfig resolve(const CommonFlags &f, RunConfig base = {}) {
    RunConfig cfg = f.config.empty() ? std::move(base) : load_run_config(f.config, std::move(base));
    auto &e = cfg.engine;
    if (f.seed) {
        e.seed = *f.seed;
        cfg.phantom.seed = *f.seed;
    }
    if (f.steps) e.steps = *f.steps;
    if (f.int_steps) e.n_int = *f.int_steps;
    if (f.lambda_smooth) e.weights.lambda_smooth = *f.lambda_smooth;
    if (f.lambda_pre) e.weights.lambda_pre = *f.lambda_pre;
    if (f.lambda_ob) e.weights.lambda_ob = *f.lambda_ob;
    for (const auto &side : f.no_conditioning) {
        if (side == "forward" || side == "both") e.conditioning.forward = false;
        if (side == "inverse" || side == "both") e.conditioning.inverse = false;
    }
    e.validate();
    return cfg;
}

uint64_t seed_of(const RunConfig &cfg) { return cfg.engine.seed; }

void write_text(const fs::path &p, const std::string &text) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw io_error("cannot write " + p.string());
    out << text;
}

std::vector<SyntheticPair> select(std::vector<SyntheticPair> pairs, const std::string &only) {
    if (only.empty()) return pairs;
    for (auto &p : pairs)
        if (p.pair.name == only) return {std::move(p)};
    throw std::invalid_argument("pair '" + only + "' is not in the dataset");
}

struct Registrar {
    std::optional<NetworkParams> params;
    EngineConfig cfg;

    Registration operator()(const SyntheticPair &p) const {
        return params ? register_with_network(p, *params, cfg) : register_with_optimizer(p, cfg);
    }
    const char *method() const { return params ? "network" : "optimize_pair"; }
};

// Checkpoint weights with the flag-adjusted config (architecture must match).
Registrar make_registrar(const CommonFlags &f, const std::string &checkpoint, RunConfig &cfg) {
    Registrar r;
    if (f.optimize == !checkpoint.empty())
        throw std::invalid_argument("give exactly one of --checkpoint FILE or --optimize-pair");
    if (!checkpoint.empty()) {
        EngineConfig stored;
        NetworkParams params = load_checkpoint(checkpoint, &stored);
        // Architecture comes from the checkpoint; run-time flags may still change T and the weights.
        if (f.config.empty()) {
            RunConfig base = cfg;
            base.engine = stored;
            cfg = resolve(f, base);
        }
        if (cfg.engine.channels != stored.channels || cfg.engine.half_res_flow != stored.half_res_flow)
            throw std::invalid_argument("config architecture does not match the checkpoint");
        r.params = std::move(params);
    }
    r.cfg = cfg.engine;
    return r;
}

int cmd_phantom(const CommonFlags &f, std::optional<int> pairs, std::optional<std::string> scenario,
                std::optional<double> svf, std::ostream &out) {
    RunConfig cfg = resolve(f);
    if (pairs) cfg.data.pairs = *pairs;
    if (scenario) cfg.data.scenario = scenario_from_name(*scenario);
    if (svf) cfg.data.svf_magnitude = *svf;
    if (cfg.data.pairs < 1) throw std::invalid_argument("--pairs must be >= 1");
    const auto set = make_phantom_set(cfg, seed_of(cfg));
    const auto names = write_dataset(f.out, set, cfg, seed_of(cfg));
    out << "wrote " << names.size() << " pairs (" << cfg.phantom.extents.str() << ", "
        << scenario_name(cfg.data.scenario) << ") to " << f.out << "\n";
    return 0;
}

int cmd_train(const CommonFlags &f, const std::string &data, std::optional<int> epochs, std::optional<double> lr,
              std::ostream &out) {
    if (f.optimize) throw std::invalid_argument("--optimize-pair does not apply to train");
    RunConfig cfg = resolve(f);
    if (epochs) cfg.engine.epochs = *epochs;
    if (lr) cfg.engine.learning_rate = *lr;
    cfg.engine.validate();
    const auto set = read_dataset(data);
    std::vector<RegistrationPair> pairs;
    for (const auto &p : set) pairs.push_back(p.pair);
    const TrainResult r = train(pairs, cfg.engine, nullptr, [&](const EpochLog &l) {
        char line[160];
        std::snprintf(line, sizeof line, "epoch %d lr %.3g total %.6g sim %.6g sim_hat %.6g\n", l.epoch,
                      l.learning_rate, l.total, l.terms.sim, l.terms.sim_hat);
        out << line << std::flush;
    });
    fs::create_directories(f.out);
    save_checkpoint((fs::path(f.out) / "checkpoint.trcr").string(), r.params, cfg.engine);
    std::ofstream csv(fs::path(f.out) / "loss.csv");
    if (!csv) throw io_error("cannot write " + (fs::path(f.out) / "loss.csv").string());
    write_loss_csv(csv, r.history);
    write_text(fs::path(f.out) / "config.json", run_config_to_json(cfg) + "\n");
    out << "trained " << cfg.engine.epochs << " epochs on " << pairs.size() << " pairs -> " << f.out << "\n";
    return 0;
}

int cmd_register(const CommonFlags &f, const std::string &data, const std::string &pair, const std::string &ckpt,
                 std::ostream &out) {
    RunConfig cfg = resolve(f);
    const Registrar reg = make_registrar(f, ckpt, cfg);
    const auto set = select(read_dataset(data), pair);
    std::vector<std::string> names;
    for (const auto &p : set) {
        const Registration r = reg(p);
        write_registration(f.out, p, r);
        names.push_back(p.pair.name);
        out << p.pair.name << ": " << r.steps.size() << " steps, final image mse "
            << (r.steps.empty() ? 0.0 : r.steps.back().image_mse) << "\n";
    }
    write_registration_index(f.out, reg.method(), names);
    return 0;
}

int cmd_evaluate(const CommonFlags &f, const std::string &data, const std::string &registration,
                 const std::string &ckpt, double vba, std::ostream &out) {
    RunConfig cfg = resolve(f);
    const auto set = read_dataset(data);
    std::optional<Registrar> reg;
    if (registration.empty()) reg = make_registrar(f, ckpt, cfg);
    else if (f.optimize || !ckpt.empty())
        throw std::invalid_argument("--registration excludes --checkpoint and --optimize-pair");
    std::vector<MetricsReport> reports;
    for (const auto &p : set) {
        const Registration r = reg ? (*reg)(p) : read_registration(registration, p.pair.name);
        reports.push_back(evaluate_pair(p, r, vba));
    }
    fs::create_directories(f.out);
    const fs::path path = fs::path(f.out) / "report.csv";
    std::ofstream csv(path);
    if (!csv) throw io_error("cannot write " + path.string());
    write_report_csv(csv, reports);
    const auto excluded = std::count_if(reports.begin(), reports.end(), [](const auto &r) { return r.excluded; });
    out << "evaluated " << reports.size() << " pairs (" << excluded << " excluded by VBA) -> " << path.string()
        << "\n";
    return 0;
}

struct Stat {
    double sum = 0, sq = 0;
    int n = 0;
    void add(double v) {
        if (!std::isfinite(v)) return;
        sum += v;
        sq += v * v;
        ++n;
    }
    double mean() const { return n ? sum / n : std::nan(""); }
    double sd() const { return n > 1 ? std::sqrt(std::max(0.0, (sq - sum * sum / n) / (n - 1))) : std::nan(""); }
};

int cmd_ablate(const CommonFlags &f, const std::string &data, std::optional<int> pairs, std::ostream &out) {
    if (!f.no_conditioning.empty()) throw std::invalid_argument("ablate runs every conditioning mode; drop --no-conditioning");
    RunConfig cfg = resolve(f);
    if (pairs) cfg.data.pairs = *pairs;
    const auto set = data.empty() ? make_phantom_set(cfg, seed_of(cfg)) : read_dataset(data);
    fs::create_directories(f.out);
    const fs::path path = fs::path(f.out) / "ablation.csv";
    std::ofstream csv(path);
    if (!csv) throw io_error("cannot write " + path.string());
    csv << "conditioning,pairs,delta_T_mean,delta_T_sd,m_lexs_mean,tumor_mse_mean,obliteration_mean,lung_dsc_mean\n";
    for (const char *mode : {"none", "inverse", "forward", "both"}) {
        EngineConfig e = cfg.engine;
        e.conditioning = Conditioning::from_name(mode);
        Stat dT, lex, mse, ob, lung;
        for (const auto &p : set) {
            const Registration r = register_with_optimizer(p, e);
            const MetricsReport m = evaluate_pair(p, r);
            dT.add(m.delta_T_percent);
            lex.add(m.m_lexs_percent);
            mse.add(m.tumor_mse);
            ob.add(obliteration_stretch(p, r));
            lung.add(m.dsc.at(structures::left_lung));
            lung.add(m.dsc.at(structures::right_lung));
        }
        char row[256];
        std::snprintf(row, sizeof row, "%s,%zu,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g\n", mode, set.size(), dT.mean(),
                      dT.sd(), lex.mean(), mse.mean(), ob.mean(), lung.mean());
        csv << row;
        out << row << std::flush;
    }
    return 0;
}

} // namespace

int run_cli(const std::vector<std::string> &args, std::ostream &out, std::ostream &err) {
    CLI::App app{"Tumour-aware recurrent deformable registration on synthetic phantoms", "tracer"};
    app.require_subcommand(1);

    CommonFlags f;
    std::optional<int> pairs, epochs;
    std::optional<std::string> scenario;
    std::optional<double> svf, lr;
    std::string data, pair, checkpoint, registration;
    double vba = 0.8;

    auto *ph = app.add_subcommand("phantom", "generate a seeded phantom dataset");
    add_common(ph, f, true);
    ph->add_option("--pairs", pairs, "number of pairs");
    ph->add_option("--scenario", scenario, "none|moving_only|fixed_only|non_corresponding");
    ph->add_option("--svf-magnitude", svf, "max displacement of the known SVF (voxels)");

    auto *tr = app.add_subcommand("train", "train the network on a dataset");
    add_common(tr, f, true);
    tr->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
    tr->add_option("--epochs", epochs, "training epochs");
    tr->add_option("--lr", lr, "initial learning rate");

    auto *rg = app.add_subcommand("register", "register dataset pairs");
    add_common(rg, f, true);
    rg->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
    rg->add_option("--pair", pair, "register only this pair");
    rg->add_option("--checkpoint", checkpoint, "trained network")->check(CLI::ExistingFile);

    auto *ev = app.add_subcommand("evaluate", "metrics report for registered pairs");
    add_common(ev, f, true);
    ev->add_option("--data", data, "dataset directory")->required()->check(CLI::ExistingDirectory);
    ev->add_option("--registration", registration, "output directory of `register`")->check(CLI::ExistingDirectory);
    ev->add_option("--checkpoint", checkpoint, "register with this network first")->check(CLI::ExistingFile);
    ev->add_option("--vba-threshold", vba, "lung DSC below which a pair is excluded");

    auto *ab = app.add_subcommand("ablate", "conditioning on/off table via per-pair optimisation");
    add_common(ab, f, true);
    ab->add_option("--data", data, "dataset directory (default: phantoms from the config)")
        ->check(CLI::ExistingDirectory);
    ab->add_option("--pairs", pairs, "number of generated pairs");

    try {
        std::vector<std::string> reversed(args.rbegin(), args.rend());
        app.parse(reversed);
    } catch (const CLI::CallForHelp &) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp &) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError &e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (*ph) return cmd_phantom(f, pairs, scenario, svf, out);
        if (*tr) return cmd_train(f, data, epochs, lr, out);
        if (*rg) return cmd_register(f, data, pair, checkpoint, out);
        if (*ev) return cmd_evaluate(f, data, registration, checkpoint, vba, out);
        if (*ab) return cmd_ablate(f, data, pairs, out);
    } catch (const io_error &e) {
        err << "error: file: " << e.what() << "\n";
        return 3;
    } catch (const dimension_error &e) {
        err << "error: extents: " << e.what() << "\n";
        return 4;
    } catch (const std::invalid_argument &e) {
        err << "error: invalid: " << e.what() << "\n";
        return 5;
    } catch (const std::exception &e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

} // namespace tracer
