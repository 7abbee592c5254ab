#pragma once

// Pipeline commands behind the `kmpc` executable. Each command takes a resolved
// ExperimentConfig and an output directory; stages chain through files:
//   collect -> <out>/dataset.kbin
//   fit     -> <out>/model_grid_<g>.kbin for every grid, <out>/model_all.kbin
//   control -> trajectory.csv, controls.csv, grid_<g>.csv, plots.gp, metrics.json
//   simulate writes the same run files with mode none.

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "kmpc/controller.hpp"
#include "kmpc/data_gen.hpp"
#include "kmpc/edmd.hpp"
#include "kmpc/io.hpp"

namespace kmpc {

enum ExitCode : int { exit_ok = 0, exit_config = 1, exit_numerical = 2 };

struct ScenarioSettings {
    ControlMode mode = ControlMode::per_grid;
    double t_end = 20.0;
    double T_s = 0.05;
    double dt_int = 1e-3;
    std::optional<GridState> x0;  ///< empty: equilibrium of the first segment
    bool dump_qp = false;
};

struct ExperimentConfig {
    json resolved;  ///< the document with every path section replaced by its contents
    ParameterSchedule schedule;
    SamplingConfig sampling;
    FitOptions fit;
    MpcSettings mpc;
    ScenarioSettings scenario;
    std::uint64_t seed = 1;
    std::filesystem::path dataset_path;  ///< empty: <out>/dataset.kbin
    std::filesystem::path models_dir;    ///< empty: <out>

    std::string hash() const { return fnv1a_hex(resolved.dump()); }
    Provenance provenance() const { return {seed, hash()}; }
};

namespace detail {

/// A section given inline as an object or as a path (relative to `base`) to a JSON file.
inline json resolve_section(const json& j, const std::filesystem::path& base, const std::string& field) {
    if (j.is_string()) {
        const std::filesystem::path p = base / j.get<std::string>();
        if (!std::filesystem::exists(p)) throw field_error(field, "referenced file '" + p.string() + "' does not exist");
        return load_json(p);
    }
    if (!j.is_object()) throw field_error(field, "expected an object or a file path");
    return j;
}

inline ScenarioSettings parse_scenario(const json& j, Eigen::Index n_gen, const std::string& field) {
    if (!j.is_object()) throw field_error(field, "expected an object");
    ScenarioSettings s;
    for (const auto& [key, val] : j.items()) {
        const std::string f = field + "." + key;
        if (key == "mode") {
            try {
                s.mode = parse_control_mode(val.get<std::string>());
            } catch (const std::invalid_argument& e) {
                throw field_error(f, e.what());
            }
        } else if (key == "t_end") {
            s.t_end = get_number(val, f);
        } else if (key == "T_s") {
            s.T_s = get_number(val, f);
        } else if (key == "dt_int") {
            s.dt_int = get_number(val, f);
        } else if (key == "dump_qp") {
            s.dump_qp = val.get<bool>();
        } else if (key == "x0") {
            if (val.is_string() && val.get<std::string>() == "equilibrium") continue;
            if (!val.is_object() || !val.contains("delta") || !val.contains("omega")) {
                throw field_error(f, "expected \"equilibrium\" or {\"delta\": [...], \"omega\": [...]}");
            }
            s.x0 = GridState(get_vector(val["delta"], n_gen, f + ".delta"), get_vector(val["omega"], n_gen, f + ".omega"));
        } else {
            throw field_error(f, "unknown key");
        }
    }
    if (!(s.t_end > 0.0)) throw field_error(field + ".t_end", "must be positive");
    try {
        checked_ratio(s.T_s, s.dt_int, "T_s / dt_int");
    } catch (const std::invalid_argument& e) {
        throw field_error(field, e.what());
    }
    return s;
}

}  // namespace detail

/// Parses the top-level experiment document. Keys: seed, schedule, sampling, fit, mpc, scenario, artifacts.
inline ExperimentConfig parse_experiment(const json& doc, const std::filesystem::path& base = ".") {
    if (!doc.is_object()) throw ConfigError("experiment config must be a JSON object");
    static const char* known[] = {"seed", "schedule", "sampling", "fit", "mpc", "scenario", "artifacts"};
    for (const auto& item : doc.items()) {
        if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return item.key() == k; }) ==
            std::end(known)) {
            throw detail::field_error(item.key(), "unknown key");
        }
    }
    if (!doc.contains("schedule")) throw detail::field_error("schedule", "missing");

    json resolved = doc;
    for (const char* section : {"schedule", "sampling", "mpc", "fit", "scenario"}) {
        if (doc.contains(section)) resolved[section] = detail::resolve_section(doc[section], base, section);
    }
    resolved.erase("artifacts");

    ExperimentConfig cfg;
    cfg.resolved = resolved;
    cfg.schedule = parse_schedule(resolved["schedule"]);
    if (doc.contains("seed")) {
        if (!doc["seed"].is_number_unsigned()) throw detail::field_error("seed", "expected a non-negative integer");
        cfg.seed = doc["seed"].get<std::uint64_t>();
    }
    if (resolved.contains("sampling")) cfg.sampling = parse_sampling(resolved["sampling"]);
    if (resolved.contains("mpc")) cfg.mpc = parse_mpc(resolved["mpc"]);
    if (resolved.contains("fit")) {
        for (const auto& [key, val] : resolved["fit"].items()) {
            if (key == "regularization") {
                cfg.fit.regularization = detail::get_number(val, "fit.regularization");
                if (cfg.fit.regularization < 0.0) throw detail::field_error("fit.regularization", "must be >= 0");
            } else {
                throw detail::field_error("fit." + key, "unknown key");
            }
        }
    }
    if (resolved.contains("scenario")) {
        cfg.scenario = detail::parse_scenario(resolved["scenario"], cfg.schedule.n_gen(), "scenario");
    }
    if (doc.contains("artifacts")) {
        const json& a = doc["artifacts"];
        if (a.contains("dataset")) cfg.dataset_path = base / a["dataset"].get<std::string>();
        if (a.contains("models")) cfg.models_dir = base / a["models"].get<std::string>();
    }
    cfg.sampling.seed = cfg.seed;
    return cfg;
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw ConfigError("config file '" + path.string() + "' does not exist");
    return parse_experiment(load_json(path), path.parent_path());
}

/// Seed override from the command line; recorded in provenance and used for sampling.
inline void override_seed(ExperimentConfig& cfg, std::uint64_t seed) {
    cfg.seed = seed;
    cfg.sampling.seed = seed;
}

// ---------------------------------------------------------------------------------------------

inline int cmd_collect(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream& log = std::clog) {
    CollectionReport report;
    const Dataset ds = collect_dataset(cfg.schedule.front(), cfg.sampling, &report);
    if (ds.size() == 0) throw NumericalError("collect: every trajectory diverged");
    write_artifact(out / "dataset.kbin", dataset_artifact(ds, cfg.sampling.T_s, cfg.provenance()));
    log << "collect: " << ds.size() << " samples from " << report.requested - report.discarded << " of "
        << report.requested << " trajectories\n";
    return exit_ok;
}

inline int cmd_fit(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream& log = std::clog) {
    const std::filesystem::path src = cfg.dataset_path.empty() ? out / "dataset.kbin" : cfg.dataset_path;
    if (!std::filesystem::exists(src)) throw ConfigError("fit: missing upstream dataset '" + src.string() + "'");
    const Artifact art = read_artifact(src);
    const GridParameters& p = cfg.schedule.front();
    if (art.header.value("n_gen", Eigen::Index{-1}) != p.n_gen()) {
        throw ConfigError("fit: dataset n_gen " + art.header.value("n_gen", json(nullptr)).dump() +
                          " does not match the schedule (" + std::to_string(p.n_gen()) + ")");
    }
    if (std::abs(art.header.value("T_s", -1.0) - cfg.sampling.T_s) > 1e-12) {
        throw ConfigError("fit: dataset T_s does not match sampling.T_s");
    }
    const Dataset ds = dataset_from(art);
    const Provenance prov = cfg.provenance();
    for (int g = 1; g <= p.n_grids(); ++g) {
        const LiftedPredictor model = fit_predictor(split_per_grid(ds, p.grid_of, g), cfg.fit, cfg.sampling.T_s);
        write_artifact(out / ("model_grid_" + std::to_string(g) + ".kbin"), model_artifact(model, p.generators_in(g), prov));
        log << "fit: grid " << g << " residual " << model.residuals.dynamics << '\n';
    }
    std::vector<int> all(static_cast<std::size_t>(p.n_gen()));
    for (std::size_t j = 0; j < all.size(); ++j) all[j] = static_cast<int>(j);
    const LiftedPredictor central = fit_predictor(ds, cfg.fit, cfg.sampling.T_s);
    write_artifact(out / "model_all.kbin", model_artifact(central, all, prov));
    return exit_ok;
}

namespace detail {

inline LiftedPredictor load_model(const std::filesystem::path& path, const std::vector<int>& generators, double T_s) {
    if (!std::filesystem::exists(path)) throw ConfigError("control: missing upstream model '" + path.string() + "'");
    const Artifact art = read_artifact(path);
    if (art.header.value("generators", std::vector<int>{}) != generators) {
        throw ConfigError("control: model '" + path.string() + "' was fitted for different generators");
    }
    if (std::abs(art.header.value("T_s", -1.0) - T_s) > 1e-12) {
        throw ConfigError("control: model '" + path.string() + "' T_s does not match scenario.T_s");
    }
    return model_from(art);
}

/// Controllers for `mode`, reading models from `dir`.
inline std::vector<ControllerInstance> build_controllers(const ExperimentConfig& cfg, ControlMode mode,
                                                         const std::filesystem::path& dir) {
    const GridParameters& p = cfg.schedule.front();
    std::vector<ControllerInstance> out;
    const auto add = [&](const std::filesystem::path& file, const std::vector<int>& gens) {
        out.emplace_back(load_model(file, gens, cfg.scenario.T_s), cfg.mpc.make(static_cast<Eigen::Index>(gens.size())),
                         gens, cfg.mpc.qp);
    };
    if (mode == ControlMode::per_grid || mode == ControlMode::first_grid) {
        const int last = mode == ControlMode::first_grid ? 1 : p.n_grids();
        for (int g = 1; g <= last; ++g) add(dir / ("model_grid_" + std::to_string(g) + ".kbin"), p.generators_in(g));
    } else if (mode == ControlMode::centralized) {
        std::vector<int> all(static_cast<std::size_t>(p.n_gen()));
        for (std::size_t j = 0; j < all.size(); ++j) all[j] = static_cast<int>(j);
        add(dir / "model_all.kbin", all);
    }
    return out;
}

inline int write_run(const RunRecord& rec, const ExperimentConfig& cfg, const std::filesystem::path& out,
                     std::ostream& log) {
    const Provenance prov = cfg.provenance();
    write_trajectory_csv(out / "trajectory.csv", rec.trajectory, prov);
    write_controls_csv(out / "controls.csv", rec.trajectory, prov);
    write_grid_series(out, rec.trajectory, rec.grid_of, prov);
    const Metrics m = metrics(rec);
    write_json(out / "metrics.json", metrics_json(m, rec, prov));
    log << to_string(rec.mode) << ": max |df| = " << m.max_df << " Hz, settling time = " << m.settling_time << " s\n";
    if (rec.truncated) {
        log << "run truncated: " << rec.diagnostic << '\n';
        return exit_numerical;
    }
    return exit_ok;
}

inline GridState initial_state(const ExperimentConfig& cfg) {
    if (cfg.scenario.x0) return *cfg.scenario.x0;
    return find_equilibrium(cfg.schedule.front(), GridState::zeros(cfg.schedule.n_gen()));
}

}  // namespace detail

inline int cmd_control(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream& log = std::clog) {
    const ScenarioSettings& s = cfg.scenario;
    const std::filesystem::path dir = cfg.models_dir.empty() ? out : cfg.models_dir;
    Scenario sc{cfg.schedule, s.t_end, s.T_s, s.dt_int, s.mode, detail::build_controllers(cfg, s.mode, dir), {}};
    const GridState x0 = detail::initial_state(cfg);
    if (s.dump_qp) {
        for (std::size_t c = 0; c < sc.controllers.size(); ++c) {
            const auto& ctrl = sc.controllers[c];
            write_artifact(out / ("qp_" + std::to_string(c + 1) + ".kbin"),
                           qp_dump_artifact(ctrl.qp(), embed(scoped_state(x0, ctrl.scope())), cfg.provenance()));
        }
    }
    return detail::write_run(run_closed_loop(sc, x0), cfg, out, log);
}

inline int cmd_simulate(const ExperimentConfig& cfg, const std::filesystem::path& out, std::ostream& log = std::clog) {
    const ScenarioSettings& s = cfg.scenario;
    Scenario sc{cfg.schedule, s.t_end, s.T_s, s.dt_int, ControlMode::none, {}, {}};
    return detail::write_run(run_closed_loop(sc, detail::initial_state(cfg)), cfg, out, log);
}

/// Runs `command` and maps exceptions to exit codes: configuration problems 1, numerical failures 2.
inline int run_command(const std::string& command, const std::filesystem::path& config_path,
                       const std::filesystem::path& out, std::optional<std::uint64_t> seed = std::nullopt,
                       std::optional<std::string> mode = std::nullopt, std::ostream& log = std::clog) {
    try {
        ExperimentConfig cfg = load_experiment(config_path);
        if (seed) override_seed(cfg, *seed);
        if (mode) {
            try {
                cfg.scenario.mode = parse_control_mode(*mode);
            } catch (const std::invalid_argument& e) {
                throw ConfigError(std::string("--mode: ") + e.what());
            }
        }
        std::filesystem::create_directories(out);
        if (command == "simulate") return cmd_simulate(cfg, out, log);
        if (command == "collect") return cmd_collect(cfg, out, log);
        if (command == "fit") return cmd_fit(cfg, out, log);
        if (command == "control") return cmd_control(cfg, out, log);
        throw ConfigError("unknown command '" + command + "'");
    } catch (const NumericalError& e) {
        log << "numerical failure: " << e.what() << '\n';
        return exit_numerical;
    } catch (const ConfigError& e) {
        log << "config error: " << e.what() << '\n';
        return exit_config;
    } catch (const json::exception& e) {
        log << "config error: " << e.what() << '\n';
        return exit_config;
    } catch (const std::invalid_argument& e) {
        log << "config error: " << e.what() << '\n';
        return exit_config;
    } catch (const std::filesystem::filesystem_error& e) {
        log << "config error: " << e.what() << '\n';
        return exit_config;
    }
}

}  // namespace kmpc
