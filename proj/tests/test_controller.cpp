#include <cmath>
#include <cstring>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "kmpc/controller.hpp"
#include "kmpc/synthetic.hpp"

using namespace kmpc;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

/// Fault schedule, pre-fault equilibrium and per-grid predictors shared by the closed-loop tests.
struct Pipeline {
    CascadeOptions opt;
    GridParameters pre;
    ParameterSchedule schedule;
    GridState x_eq;
    std::vector<LiftedPredictor> models;
    LiftedPredictor central;

    Pipeline() : pre(synthetic_cascade(opt)), schedule(synthetic_fault_schedule(opt)) {
        x_eq = find_equilibrium(pre, GridState::zeros(pre.n_gen()));
        SamplingConfig sc;
        sc.n_traj = 150;
        sc.seed = 7;
        const Dataset ds = collect_dataset(pre, sc);
        for (int g = 1; g <= pre.n_grids(); ++g) models.push_back(fit_predictor(split_per_grid(ds, pre.grid_of, g)));
        central = fit_predictor(ds);
    }

    static const Pipeline& get() {
        static const Pipeline p;
        return p;
    }

    std::vector<ControllerInstance> controllers(ControlMode mode) const {
        const auto cfg = [](Eigen::Index g) { return MpcConfig::frequency_regulation(g); };
        std::vector<ControllerInstance> out;
        if (mode == ControlMode::none) return out;
        if (mode == ControlMode::centralized) {
            std::vector<int> all(static_cast<std::size_t>(pre.n_gen()));
            for (std::size_t j = 0; j < all.size(); ++j) all[j] = static_cast<int>(j);
            out.emplace_back(central, cfg(pre.n_gen()), all);
            return out;
        }
        out = per_grid_controllers(pre, models, cfg);
        if (mode == ControlMode::first_grid) out.resize(1, out.front());
        return out;
    }

    Scenario scenario(ControlMode mode, double t_end, bool fault = true) const {
        Scenario sc{fault ? schedule : ParameterSchedule(pre), t_end, 0.05, 1e-3, mode, controllers(mode), {}};
        return sc;
    }
};

double max_abs_df(const RunRecord& rec) {
    double m = 0.0;
    for (const auto& s : rec.trajectory.states) m = std::max(m, s.omega.cwiseAbs().maxCoeff());
    return frequency_deviation(m);
}

/// Predictor whose angle block is the identity and whose frequency block decays with direct input action,
/// so every state with omega = 0 maps to a fixed point of z+ = A z.
LiftedPredictor decaying_predictor(Eigen::Index g) {
    LiftedPredictor p;
    p.embedding = Embedding::for_generators(g);
    p.T_s = 0.05;
    p.A = MatrixXd::Identity(3 * g, 3 * g);
    p.A.bottomRightCorner(g, g) *= 0.9;
    p.B = MatrixXd::Zero(3 * g, g);
    p.B.bottomRows(g) = 0.05 * MatrixXd::Identity(g, g);
    p.C = MatrixXd::Zero(2 * g, 3 * g);
    for (Eigen::Index j = 0; j < g; ++j) {
        p.C(j, g + j) = 1.0;  // sin recovers a small angle to first order
        p.C(g + j, 2 * g + j) = 1.0;
    }
    return p;
}

}  // namespace

TEST(ControlMode, ParseAndPrint) {
    for (auto m : {ControlMode::none, ControlMode::per_grid, ControlMode::first_grid, ControlMode::centralized}) {
        EXPECT_EQ(parse_control_mode(to_string(m)), m);
    }
    EXPECT_EQ(parse_control_mode("first-grid-only"), ControlMode::first_grid);
    EXPECT_THROW(parse_control_mode("everything"), std::invalid_argument);
}

TEST(ControllerInstance, ScopeMustMatchPredictor) {
    EXPECT_THROW(ControllerInstance(decaying_predictor(2), MpcConfig::frequency_regulation(2), {0, 1, 2}),
                 DimensionError);
    EXPECT_NO_THROW(ControllerInstance(decaying_predictor(2), MpcConfig::frequency_regulation(2), {3, 5}));
}

TEST(MpcStep, ZeroInputAtFixedPoint) {
    ControllerInstance ctrl(decaying_predictor(3), MpcConfig::frequency_regulation(3), {0, 1, 2});
    VectorXd x(6);
    x << 0.3, -0.1, 0.7, 0.0, 0.0, 0.0;
    const StepResult r = mpc_step(ctrl, x);
    EXPECT_EQ(r.status, QpStatus::solved);
    EXPECT_LE(r.u.norm(), 1e-6);
}

TEST(MpcStep, ZeroInputOnFittedModelWithExactFixedPoint) {
    // pairs of the decaying system, y = (delta, 0.9 omega + 0.05 u), are linear in the lifted coordinates
    const Eigen::Index g = 3, K = 400;
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> ang(-1.5, 1.5), w(-1.0, 1.0), in(-0.2, 0.2);
    Dataset ds{MatrixXd(2 * g, K), MatrixXd(2 * g, K), MatrixXd(g, K)};
    for (Eigen::Index k = 0; k < K; ++k) {
        for (Eigen::Index j = 0; j < g; ++j) {
            ds.X(j, k) = ang(rng);
            ds.X(g + j, k) = w(rng);
            ds.U(j, k) = in(rng);
            ds.Y(j, k) = ds.X(j, k);
            ds.Y(g + j, k) = 0.9 * ds.X(g + j, k) + 0.05 * ds.U(j, k);
        }
    }
    const LiftedPredictor fitted = fit_predictor(ds);
    ASSERT_LE(fitted.residuals.dynamics, 1e-6);
    ControllerInstance ctrl(fitted, MpcConfig::frequency_regulation(g), {0, 1, 2});
    VectorXd x(6);
    x << 0.4, -0.2, 0.9, 0.0, 0.0, 0.0;
    const StepResult r = mpc_step(ctrl, x);
    EXPECT_EQ(r.status, QpStatus::solved);
    EXPECT_LE(r.u.norm(), 1e-6);
}

TEST(MpcStep, FittedModelNearTrainingEquilibrium) {
    const auto& p = Pipeline::get();
    for (int g = 1; g <= p.pre.n_grids(); ++g) {
        const auto gens = p.pre.generators_in(g);
        ControllerInstance ctrl(p.models[static_cast<std::size_t>(g - 1)], MpcConfig::frequency_regulation(3), gens);
        const VectorXd x = scoped_state(p.x_eq, gens);
        const VectorXd z = embed(x);
        const double drift = (ctrl.predictor().A * z - z).norm();
        const StepResult r = mpc_step(ctrl, x);
        EXPECT_EQ(r.status, QpStatus::solved);
        // the optimal input only corrects the model's own drift away from the equilibrium
        EXPECT_LE(r.u.norm(), 10.0 * drift) << "grid " << g << " drift " << drift;
    }
}

TEST(MpcStep, OpposesFrequencyDeviation) {
    ControllerInstance ctrl(decaying_predictor(2), MpcConfig::frequency_regulation(2), {0, 1});
    VectorXd x(4);
    x << 0.1, 0.2, 1.0, -1.0;
    const StepResult r = mpc_step(ctrl, x);
    EXPECT_LT(r.u(0), 0.0);
    EXPECT_GT(r.u(1), 0.0);
    EXPECT_LE(r.u.cwiseAbs().maxCoeff(), 0.2);
}

TEST(MpcStep, BoundsAndWarmStartCache) {
    ControllerInstance ctrl(decaying_predictor(2), MpcConfig::frequency_regulation(2), {0, 1});
    EXPECT_FALSE(ctrl.warm_start().has_value());
    VectorXd x(4);
    x << 0.0, 0.0, 50.0, -50.0;
    const StepResult r = mpc_step(ctrl, x);
    EXPECT_DOUBLE_EQ(r.u(0), -0.2);
    EXPECT_DOUBLE_EQ(r.u(1), 0.2);
    ASSERT_TRUE(ctrl.warm_start().has_value());
    EXPECT_EQ(ctrl.warm_start()->size(), 40);
    EXPECT_EQ(ctrl.last_input(), r.u);
    ctrl.reset();
    EXPECT_FALSE(ctrl.warm_start().has_value());
}

TEST(MpcStep, IdenticalStatesGiveIdenticalInputs) {
    ControllerInstance a(decaying_predictor(2), MpcConfig::frequency_regulation(2), {0, 1});
    ControllerInstance b = a;
    VectorXd x(4);
    x << 0.2, -0.3, 0.4, 0.1;
    const StepResult ra = mpc_step(a, x);
    const StepResult rb = mpc_step(b, x);
    EXPECT_EQ(ra.u, rb.u);
    EXPECT_EQ(mpc_step(a, x).u, mpc_step(b, x).u);
}

TEST(MpcStep, InfeasibleFallsBackToHeldInput) {
    MpcConfig cfg = MpcConfig::frequency_regulation(1, 3);
    cfg.z_max(2) = 0.1;  // omega <= 0.1 at every step, already violated at step 0
    ControllerInstance ctrl(decaying_predictor(1), cfg, {0});
    VectorXd ok(2), bad(2);
    ok << 0.0, 0.05;
    bad << 0.0, 1.0;
    const StepResult first = mpc_step(ctrl, ok);
    ASSERT_EQ(first.status, QpStatus::solved);
    const StepResult r = mpc_step(ctrl, bad);
    EXPECT_EQ(r.status, QpStatus::infeasible);
    EXPECT_TRUE(r.fallback);
    EXPECT_EQ(r.u, first.u);
    EXPECT_FALSE(ctrl.warm_start().has_value());
}

TEST(ScopedState, PicksGenerators) {
    GridState x = GridState::zeros(4);
    x.delta << 1, 2, 3, 4;
    x.omega << 5, 6, 7, 8;
    VectorXd expect(4);
    expect << 4, 2, 8, 6;
    EXPECT_EQ(scoped_state(x, {3, 1}), expect);
}

TEST(Scenario, Validation) {
    const auto& p = Pipeline::get();
    Scenario sc = p.scenario(ControlMode::per_grid, 0.1);
    sc.controllers.push_back(sc.controllers.front());
    EXPECT_THROW(sc.validate(), std::invalid_argument);
    Scenario none = p.scenario(ControlMode::none, 0.1);
    none.controllers = p.controllers(ControlMode::first_grid);
    EXPECT_THROW(none.validate(), std::invalid_argument);
    Scenario empty = p.scenario(ControlMode::per_grid, 0.1);
    empty.controllers.clear();
    EXPECT_THROW(empty.validate(), std::invalid_argument);
}

TEST(RunClosedLoop, NoFaultFromEquilibriumIsFlat) {
    const auto& p = Pipeline::get();
    Scenario sc = p.scenario(ControlMode::none, 5.0, false);
    const RunRecord rec = run_closed_loop(sc, p.x_eq);
    EXPECT_EQ(rec.trajectory.states.size(), 101u);
    EXPECT_LE(max_abs_df(rec), 1e-8);
    EXPECT_EQ(metrics(rec).settling_time, 0.0);
}

TEST(RunClosedLoop, InputsWithinBoundsInEveryMode) {
    const auto& p = Pipeline::get();
    for (auto mode : {ControlMode::none, ControlMode::per_grid, ControlMode::first_grid, ControlMode::centralized}) {
        Scenario sc = p.scenario(mode, 6.0);
        const RunRecord rec = run_closed_loop(sc, p.x_eq);
        ASSERT_FALSE(rec.truncated) << to_string(mode);
        ASSERT_EQ(rec.trajectory.inputs.size(), 120u);
        for (const auto& u : rec.trajectory.inputs) {
            for (Eigen::Index j = 0; j < u.size(); ++j) {
                const auto jj = static_cast<std::size_t>(j);
                if (!rec.controlled[jj]) {
                    EXPECT_EQ(u(j), 0.0) << to_string(mode);
                    continue;
                }
                EXPECT_GE(u(j), -0.2 - 1e-9) << to_string(mode);
                EXPECT_LE(u(j), 0.2 + 1e-9) << to_string(mode);
            }
        }
        for (const auto& step : rec.statuses) EXPECT_EQ(step.size(), sc.controllers.size());
        for (const auto& step : rec.step_seconds) {
            for (double s : step) EXPECT_GT(s, 0.0);
        }
    }
}

TEST(RunClosedLoop, FirstGridModeLeavesOtherGridsUncontrolled) {
    const auto& p = Pipeline::get();
    Scenario sc = p.scenario(ControlMode::first_grid, 3.0);
    const RunRecord rec = run_closed_loop(sc, p.x_eq);
    for (const auto& u : rec.trajectory.inputs) {
        for (Eigen::Index j = 0; j < u.size(); ++j) {
            if (p.pre.grid_of[static_cast<std::size_t>(j)] != 1) {
                EXPECT_EQ(u(j), 0.0);
            }
        }
    }
    EXPECT_FALSE(rec.controlled[3]);
    EXPECT_TRUE(rec.controlled[0]);
}

TEST(RunClosedLoop, InformationLocality) {
    const auto& p = Pipeline::get();
    const std::size_t k_perturb = 25;
    Scenario base = p.scenario(ControlMode::per_grid, 2.0);
    Scenario perturbed = p.scenario(ControlMode::per_grid, 2.0);
    perturbed.measurement = [&](std::size_t k, GridState& x) {
        if (k != k_perturb) return;
        for (int j : p.pre.generators_in(2)) {
            x.delta(j) += 0.3;
            x.omega(j) -= 0.5;
        }
    };
    const RunRecord a = run_closed_loop(base, p.x_eq);
    const RunRecord b = run_closed_loop(perturbed, p.x_eq);
    for (std::size_t k = 0; k <= k_perturb; ++k) {
        for (int j : p.pre.generators_in(1)) EXPECT_EQ(a.trajectory.inputs[k](j), b.trajectory.inputs[k](j));
    }
    double diff = 0.0;
    for (int j : p.pre.generators_in(2)) {
        diff = std::max(diff, std::abs(a.trajectory.inputs[k_perturb](j) - b.trajectory.inputs[k_perturb](j)));
    }
    EXPECT_GT(diff, 0.0);
}

TEST(RunClosedLoop, DeterministicExceptTimings) {
    const auto& p = Pipeline::get();
    Scenario s1 = p.scenario(ControlMode::per_grid, 4.0);
    Scenario s2 = p.scenario(ControlMode::per_grid, 4.0);
    const RunRecord a = run_closed_loop(s1, p.x_eq);
    const RunRecord b = run_closed_loop(s2, p.x_eq);
    ASSERT_EQ(a.trajectory.states.size(), b.trajectory.states.size());
    for (std::size_t k = 0; k < a.trajectory.states.size(); ++k) {
        const VectorXd sa = a.trajectory.states[k].stacked();
        const VectorXd sb = b.trajectory.states[k].stacked();
        EXPECT_EQ(std::memcmp(sa.data(), sb.data(), sizeof(double) * static_cast<std::size_t>(sa.size())), 0);
        EXPECT_EQ(a.trajectory.times[k], b.trajectory.times[k]);
    }
    for (std::size_t k = 0; k < a.trajectory.inputs.size(); ++k) EXPECT_EQ(a.trajectory.inputs[k], b.trajectory.inputs[k]);
    EXPECT_EQ(a.statuses, b.statuses);
    EXPECT_EQ(a.fallbacks, b.fallbacks);
}

TEST(RunClosedLoop, ControlReducesPeakDeviation) {
    const auto& p = Pipeline::get();
    Scenario open = p.scenario(ControlMode::none, 8.0);
    Scenario closed = p.scenario(ControlMode::per_grid, 8.0);
    const Metrics mo = metrics(run_closed_loop(open, p.x_eq));
    const Metrics mc = metrics(run_closed_loop(closed, p.x_eq));
    EXPECT_GT(mo.max_df, 1.0);
    EXPECT_LT(mc.max_df, mo.max_df);
}

TEST(RunClosedLoop, BlowupIsTruncatedWithDiagnostic) {
    const auto& p = Pipeline::get();
    Scenario sc = p.scenario(ControlMode::none, 1.0, false);
    GridState x = p.x_eq;
    x.omega(0) = 1e308;
    const RunRecord rec = run_closed_loop(sc, x);
    EXPECT_TRUE(rec.truncated);
    EXPECT_FALSE(rec.diagnostic.empty());
    EXPECT_LT(rec.trajectory.states.size(), 21u);
}

TEST(Metrics, UnitConversion) {
    RunRecord rec;
    rec.grid_of = {1, 2};
    GridState x = GridState::zeros(2);
    rec.trajectory.times = {0.0};
    rec.trajectory.states = {x};
    Metrics m = metrics(rec);
    EXPECT_EQ(m.max_df, 0.0);
    EXPECT_EQ(m.settling_time, 0.0);

    x.omega(1) = 2.0 * std::numbers::pi * 0.2;
    rec.trajectory.states = {x};
    m = metrics(rec);
    EXPECT_DOUBLE_EQ(m.max_df, 0.2);
    EXPECT_DOUBLE_EQ(m.max_df_per_grid[1], 0.2);
    EXPECT_EQ(m.max_df_per_grid[0], 0.0);
    EXPECT_TRUE(std::isinf(m.settling_time));
}

TEST(Metrics, SettlingTimeAndSaturation) {
    RunRecord rec;
    rec.grid_of = {1, 2};
    rec.controlled = {true, false};
    rec.u_lower = VectorXd::Constant(2, -0.2);
    rec.u_upper = VectorXd::Constant(2, 0.2);
    const double w = 2.0 * std::numbers::pi;
    const std::vector<std::pair<double, double>> df{{0.5, 0.0}, {0.02, 0.3}, {0.005, 0.02}, {0.0, 0.001}, {0.0, 0.0}};
    for (std::size_t k = 0; k < df.size(); ++k) {
        GridState x = GridState::zeros(2);
        x.omega << w * df[k].first, w * df[k].second;
        rec.trajectory.times.push_back(0.1 * static_cast<double>(k));
        rec.trajectory.states.push_back(x);
        if (k + 1 < df.size()) rec.trajectory.inputs.push_back(VectorXd::Constant(2, k < 2 ? 0.2 : 0.1));
    }
    rec.step_seconds = {{0.001}, {0.003}, {0.002}, {0.002}};
    const Metrics m = metrics(rec);
    EXPECT_DOUBLE_EQ(m.settling_time_per_grid[0], 0.2);
    EXPECT_DOUBLE_EQ(m.settling_time_per_grid[1], 0.3);
    EXPECT_DOUBLE_EQ(m.settling_time, 0.3);
    EXPECT_DOUBLE_EQ(m.saturation_fraction, 0.5);
    EXPECT_DOUBLE_EQ(m.mean_step_seconds, 0.002);
    EXPECT_DOUBLE_EQ(m.max_step_seconds, 0.003);
    EXPECT_DOUBLE_EQ(m.final_time, 0.4);
}
