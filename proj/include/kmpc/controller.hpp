#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kmpc/data_gen.hpp"
#include "kmpc/edmd.hpp"
#include "kmpc/grid_model.hpp"
#include "kmpc/mpc.hpp"
#include "kmpc/qp.hpp"

namespace kmpc {

enum class ControlMode { none, per_grid, first_grid, centralized };

inline const char* to_string(ControlMode m) {
    switch (m) {
        case ControlMode::none: return "none";
        case ControlMode::per_grid: return "per-grid";
        case ControlMode::first_grid: return "first-grid";
        case ControlMode::centralized: return "centralized";
    }
    return "unknown";
}

inline ControlMode parse_control_mode(const std::string& s) {
    if (s == "none") return ControlMode::none;
    if (s == "per-grid") return ControlMode::per_grid;
    if (s == "first-grid" || s == "first-grid-only") return ControlMode::first_grid;
    if (s == "centralized") return ControlMode::centralized;
    throw std::invalid_argument("unknown control mode '" + s + "'");
}

struct StepResult {
    Eigen::VectorXd u;
    QpStatus status = QpStatus::solved;
    bool fallback = false;  ///< previous input was held because the QP failed
    int iterations = 0;
    double seconds = 0.0;
};

/// One Koopman MPC controller reading and actuating a fixed set of generators.
class ControllerInstance {
public:
    ControllerInstance(LiftedPredictor predictor, MpcConfig cfg, std::vector<int> scope, QpOptions qp_options = {})
        : predictor_(std::make_shared<const LiftedPredictor>(std::move(predictor))),
          cfg_(std::move(cfg)),
          scope_(std::move(scope)),
          qp_options_(qp_options) {
        const auto g = static_cast<Eigen::Index>(scope_.size());
        predictor_->validate();
        detail::require_size("ControllerInstance: predictor state dim vs scope", predictor_->state_dim(), 2 * g);
        detail::require_size("ControllerInstance: predictor input dim vs scope", predictor_->input_dim(), g);
        qp_ = std::make_shared<const DenseQP>(condense(*predictor_, cfg_));
        last_u_ = Eigen::VectorXd::Zero(g);
    }

    const LiftedPredictor& predictor() const noexcept { return *predictor_; }
    const DenseQP& qp() const noexcept { return *qp_; }
    const MpcConfig& config() const noexcept { return cfg_; }
    const std::vector<int>& scope() const noexcept { return scope_; }
    const QpOptions& qp_options() const noexcept { return qp_options_; }

    const std::optional<Eigen::VectorXd>& warm_start() const noexcept { return warm_; }
    const Eigen::VectorXd& last_input() const noexcept { return last_u_; }

    void reset() {
        warm_.reset();
        last_u_.setZero();
    }

private:
    friend StepResult mpc_step(ControllerInstance&, const Eigen::VectorXd&);

    std::shared_ptr<const LiftedPredictor> predictor_;
    std::shared_ptr<const DenseQP> qp_;
    MpcConfig cfg_;
    std::vector<int> scope_;
    QpOptions qp_options_;
    std::optional<Eigen::VectorXd> warm_;
    Eigen::VectorXd last_u_;
};

/// Algorithm: z0 = psi(x_k), solve the warm-started dense QP, apply the first input block.
/// `x_scoped` is the stacked (delta, omega) of the controller's scope.
inline StepResult mpc_step(ControllerInstance& ctrl, const Eigen::VectorXd& x_scoped) {
    const auto start = std::chrono::steady_clock::now();
    const auto m = static_cast<Eigen::Index>(ctrl.scope_.size());
    detail::require_size("mpc_step: scoped state", x_scoped.size(), 2 * m);

    const Eigen::VectorXd z0 = embed(x_scoped);
    QpSolution sol = solve_qp(*ctrl.qp_, z0, ctrl.warm_, ctrl.qp_options_);

    StepResult out;
    out.status = sol.status;
    out.iterations = sol.iterations;
    const auto& lo = ctrl.cfg_.u_min;
    const auto& hi = ctrl.cfg_.u_max;
    if (sol.status == QpStatus::solved || sol.status == QpStatus::inaccurate) {
        out.u = sol.U.head(m).cwiseMax(lo).cwiseMin(hi);
        ctrl.warm_ = std::move(sol.U);
    } else {
        out.u = ctrl.last_u_.cwiseMax(lo).cwiseMin(hi);
        out.fallback = true;
        ctrl.warm_.reset();
    }
    ctrl.last_u_ = out.u;
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return out;
}

/// Stacked (delta, omega) of the listed generators.
inline Eigen::VectorXd scoped_state(const GridState& x, const std::vector<int>& scope) {
    const auto g = static_cast<Eigen::Index>(scope.size());
    Eigen::VectorXd out(2 * g);
    for (Eigen::Index k = 0; k < g; ++k) {
        out(k) = x.delta(scope[static_cast<std::size_t>(k)]);
        out(g + k) = x.omega(scope[static_cast<std::size_t>(k)]);
    }
    return out;
}

struct Scenario {
    ParameterSchedule schedule;
    double t_end = 20.0;
    double T_s = 0.05;
    double dt_int = 1e-3;
    ControlMode mode = ControlMode::none;
    std::vector<ControllerInstance> controllers;
    /// Optional measurement hook applied to a copy of the plant state before controllers read it.
    std::function<void(std::size_t k, GridState&)> measurement;

    void validate() const {
        const auto n = static_cast<std::size_t>(schedule.n_gen());
        std::vector<int> owner(n, -1);
        for (std::size_t c = 0; c < controllers.size(); ++c) {
            for (int j : controllers[c].scope()) {
                if (j < 0 || static_cast<std::size_t>(j) >= n) {
                    throw DimensionError("Scenario: controller scope index " + std::to_string(j) + " out of range");
                }
                if (owner[static_cast<std::size_t>(j)] >= 0) {
                    throw std::invalid_argument("Scenario: generator " + std::to_string(j) +
                                                " is written by more than one controller");
                }
                owner[static_cast<std::size_t>(j)] = static_cast<int>(c);
            }
        }
        if (mode == ControlMode::none && !controllers.empty()) {
            throw std::invalid_argument("Scenario: mode none with controllers attached");
        }
        if (mode != ControlMode::none && controllers.empty()) {
            throw std::invalid_argument("Scenario: controlled mode without controllers");
        }
    }
};

struct RunRecord {
    Trajectory trajectory;
    std::vector<std::vector<double>> step_seconds;     ///< [k][controller]
    std::vector<std::vector<QpStatus>> statuses;       ///< [k][controller]
    std::vector<std::vector<bool>> fallbacks;          ///< [k][controller]
    std::vector<bool> controlled;                      ///< per generator
    Eigen::VectorXd u_lower;                           ///< per generator (0 when uncontrolled)
    Eigen::VectorXd u_upper;
    std::vector<int> grid_of;
    ControlMode mode = ControlMode::none;
    bool truncated = false;
    std::string diagnostic;
};

/// Closed loop: at every sampling instant the controllers read their scoped state, inputs are
/// assembled (zero for uncontrolled generators) and the plant is integrated one period.
inline RunRecord run_closed_loop(Scenario& sc, const GridState& x0) {
    sc.validate();
    const Eigen::Index n = sc.schedule.n_gen();
    detail::require_size("run_closed_loop: x0", x0.size(), n);
    detail::checked_ratio(sc.T_s, sc.dt_int, "T_s / dt_int");

    RunRecord rec;
    rec.mode = sc.mode;
    rec.grid_of = sc.schedule.front().grid_of;
    rec.controlled.assign(static_cast<std::size_t>(n), false);
    rec.u_lower = Eigen::VectorXd::Zero(n);
    rec.u_upper = Eigen::VectorXd::Zero(n);
    for (auto& c : sc.controllers) {
        c.reset();
        for (std::size_t k = 0; k < c.scope().size(); ++k) {
            const auto j = static_cast<std::size_t>(c.scope()[k]);
            rec.controlled[j] = true;
            rec.u_lower(c.scope()[k]) = c.config().u_min(static_cast<Eigen::Index>(k));
            rec.u_upper(c.scope()[k]) = c.config().u_max(static_cast<Eigen::Index>(k));
        }
    }

    auto& traj = rec.trajectory;
    traj.times.push_back(0.0);
    traj.states.push_back(x0);
    const auto samples = static_cast<std::size_t>(std::floor(sc.t_end / sc.T_s + 1e-9));
    for (std::size_t k = 0; k < samples; ++k) {
        const double t = static_cast<double>(k) * sc.T_s;
        GridState measured = traj.states.back();
        if (sc.measurement) sc.measurement(k, measured);

        Eigen::VectorXd u = Eigen::VectorXd::Zero(n);
        std::vector<double> secs;
        std::vector<QpStatus> stats;
        std::vector<bool> falls;
        for (auto& c : sc.controllers) {
            const StepResult r = mpc_step(c, scoped_state(measured, c.scope()));
            for (std::size_t j = 0; j < c.scope().size(); ++j) u(c.scope()[j]) = r.u(static_cast<Eigen::Index>(j));
            secs.push_back(r.seconds);
            stats.push_back(r.status);
            falls.push_back(r.fallback);
        }
        GridState next;
        try {
            next = detail::advance(traj.states.back(), sc.schedule, u, t, sc.T_s, sc.dt_int);
        } catch (const IntegrationError& e) {
            rec.truncated = true;
            rec.diagnostic = e.what();
            break;
        }
        traj.inputs.push_back(std::move(u));
        traj.times.push_back(static_cast<double>(k + 1) * sc.T_s);
        traj.states.push_back(std::move(next));
        rec.step_seconds.push_back(std::move(secs));
        rec.statuses.push_back(std::move(stats));
        rec.fallbacks.push_back(std::move(falls));
    }
    return rec;
}

/// One controller per unit grid, each with its own predictor (`models[g-1]` for grid g).
inline std::vector<ControllerInstance> per_grid_controllers(const GridParameters& params,
                                                            const std::vector<LiftedPredictor>& models,
                                                            const std::function<MpcConfig(Eigen::Index)>& make_cfg) {
    std::vector<ControllerInstance> out;
    for (int g = 1; g <= params.n_grids(); ++g) {
        const auto gens = params.generators_in(g);
        out.emplace_back(models.at(static_cast<std::size_t>(g - 1)), make_cfg(static_cast<Eigen::Index>(gens.size())),
                         gens);
    }
    return out;
}

struct Metrics {
    std::vector<double> max_df_per_grid;      ///< [Hz]
    double max_df = 0.0;                      ///< [Hz]
    double threshold = 0.01;                  ///< [Hz]
    double settling_time = 0.0;               ///< [s], +inf when never settled
    std::vector<double> settling_time_per_grid;
    double saturation_fraction = 0.0;
    double mean_step_seconds = 0.0;
    double max_step_seconds = 0.0;
    double final_time = 0.0;
};

/// Frequency deviation df = omega / (2 pi) [Hz].
inline double frequency_deviation(double omega) { return omega / (2.0 * std::numbers::pi); }

inline Metrics metrics(const RunRecord& rec, double threshold = 0.01) {
    Metrics mt;
    mt.threshold = threshold;
    const auto& tr = rec.trajectory;
    if (tr.states.empty()) return mt;
    const auto n = static_cast<std::size_t>(tr.states.front().size());
    std::vector<int> grid_of = rec.grid_of;
    if (grid_of.size() != n) grid_of.assign(n, 1);
    const int n_grids = *std::max_element(grid_of.begin(), grid_of.end());

    mt.max_df_per_grid.assign(static_cast<std::size_t>(n_grids), 0.0);
    mt.settling_time_per_grid.assign(static_cast<std::size_t>(n_grids), 0.0);
    std::vector<bool> settled(static_cast<std::size_t>(n_grids), true);
    bool all_settled = true;
    // walk backwards: the settling time is the earliest sample after which every sample is within threshold
    for (std::size_t s = tr.states.size(); s-- > 0;) {
        const auto& w = tr.states[s].omega;
        std::vector<double> peak(static_cast<std::size_t>(n_grids), 0.0);
        for (std::size_t j = 0; j < n; ++j) {
            const auto g = static_cast<std::size_t>(grid_of[j] - 1);
            peak[g] = std::max(peak[g], std::abs(frequency_deviation(w(static_cast<Eigen::Index>(j)))));
        }
        bool all_ok = true;
        for (std::size_t g = 0; g < peak.size(); ++g) {
            mt.max_df_per_grid[g] = std::max(mt.max_df_per_grid[g], peak[g]);
            if (peak[g] > threshold) {
                all_ok = false;
                if (settled[g]) {
                    settled[g] = false;
                    mt.settling_time_per_grid[g] = s + 1 < tr.times.size() ? tr.times[s + 1]
                                                                           : std::numeric_limits<double>::infinity();
                }
            }
        }
        if (!all_ok && all_settled) {
            all_settled = false;
            mt.settling_time = s + 1 < tr.times.size() ? tr.times[s + 1] : std::numeric_limits<double>::infinity();
        }
    }
    for (double v : mt.max_df_per_grid) mt.max_df = std::max(mt.max_df, v);
    mt.final_time = tr.times.back();

    std::size_t sat = 0, total = 0;
    for (const auto& u : tr.inputs) {
        for (std::size_t j = 0; j < n && j < rec.controlled.size(); ++j) {
            if (!rec.controlled[j]) continue;
            const auto jj = static_cast<Eigen::Index>(j);
            ++total;
            if (u(jj) <= rec.u_lower(jj) + 1e-9 || u(jj) >= rec.u_upper(jj) - 1e-9) ++sat;
        }
    }
    mt.saturation_fraction = total > 0 ? static_cast<double>(sat) / static_cast<double>(total) : 0.0;

    std::size_t count = 0;
    double sum = 0.0;
    for (const auto& step : rec.step_seconds) {
        for (double s : step) {
            sum += s;
            mt.max_step_seconds = std::max(mt.max_step_seconds, s);
            ++count;
        }
    }
    mt.mean_step_seconds = count > 0 ? sum / static_cast<double>(count) : 0.0;
    return mt;
}

}  // namespace kmpc
