#pragma once

// Swing-equation model of a cascade of unit grids coupled to an infinite bus.
//
// Generators are indexed 0..n-1. Admittance matrices have size (n+1)x(n+1);
// index 0 is the infinite bus and generator j sits at index j+1. The infinite
// bus angle is the constant zero reference and is not part of the state.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "kmpc/errors.hpp"

namespace kmpc {

struct GridState {
    Eigen::VectorXd delta;  ///< rotor angles relative to the infinite bus [rad]
    Eigen::VectorXd omega;  ///< rotor speed deviations [rad/s]

    GridState() = default;
    GridState(Eigen::VectorXd d, Eigen::VectorXd w) : delta(std::move(d)), omega(std::move(w)) {
        detail::require_size("GridState.omega", omega.size(), delta.size());
    }
    static GridState zeros(Eigen::Index n) {
        return {Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n)};
    }

    Eigen::Index size() const noexcept { return delta.size(); }

    /// (delta, omega) stacked into one vector of length 2n.
    Eigen::VectorXd stacked() const {
        Eigen::VectorXd x(2 * size());
        x << delta, omega;
        return x;
    }
    static GridState from_stacked(const Eigen::Ref<const Eigen::VectorXd>& x) {
        if (x.size() % 2 != 0) throw DimensionError("stacked state must have even length");
        const Eigen::Index n = x.size() / 2;
        return {x.head(n), x.tail(n)};
    }

    bool finite() const { return delta.allFinite() && omega.allFinite(); }
};

struct GridParameters {
    double f_b = 60.0;      ///< base frequency [Hz]
    Eigen::VectorXd H;      ///< inertia constants [s]
    Eigen::VectorXd D;      ///< damping coefficients [s]
    Eigen::VectorXd P_m;    ///< nominal mechanical power [pu]
    Eigen::VectorXd V;      ///< internal voltages [pu]
    double V_inf = 1.0;     ///< infinite bus voltage [pu]
    Eigen::VectorXd G_self; ///< internal conductances [pu]
    Eigen::MatrixXd G;      ///< transfer conductances, (n+1)x(n+1), index 0 = infinite bus
    Eigen::MatrixXd B;      ///< transfer susceptances, same layout as G
    std::vector<int> grid_of;  ///< unit-grid id (1-based) of each generator

    Eigen::Index n_gen() const noexcept { return H.size(); }

    int n_grids() const {
        return grid_of.empty() ? 0 : *std::max_element(grid_of.begin(), grid_of.end());
    }

    /// Generator indices belonging to unit grid `g` (1-based), in ascending order.
    std::vector<int> generators_in(int g) const {
        if (g < 1 || g > n_grids()) {
            throw DimensionError("invalid grid index " + std::to_string(g));
        }
        std::vector<int> out;
        for (std::size_t j = 0; j < grid_of.size(); ++j) {
            if (grid_of[j] == g) out.push_back(static_cast<int>(j));
        }
        return out;
    }

    /// Throws DimensionError / std::invalid_argument when fields are inconsistent.
    void validate() const {
        const Eigen::Index n = n_gen();
        if (n == 0) throw DimensionError("GridParameters.H: no generators");
        detail::require_size("GridParameters.D", D.size(), n);
        detail::require_size("GridParameters.P_m", P_m.size(), n);
        detail::require_size("GridParameters.V", V.size(), n);
        detail::require_size("GridParameters.G_self", G_self.size(), n);
        detail::require_size("GridParameters.G rows", G.rows(), n + 1);
        detail::require_size("GridParameters.G cols", G.cols(), n + 1);
        detail::require_size("GridParameters.B rows", B.rows(), n + 1);
        detail::require_size("GridParameters.B cols", B.cols(), n + 1);
        detail::require_size("GridParameters.grid_of", static_cast<long>(grid_of.size()), n);
        if (!(f_b > 0.0)) throw std::invalid_argument("GridParameters.f_b must be positive");
        if ((H.array() <= 0.0).any()) throw std::invalid_argument("GridParameters.H must be positive");
        if ((D.array() < 0.0).any()) throw std::invalid_argument("GridParameters.D must be non-negative");
        const double tol = 1e-12 * std::max(1.0, G.cwiseAbs().maxCoeff() + B.cwiseAbs().maxCoeff());
        if ((G - G.transpose()).cwiseAbs().maxCoeff() > tol) {
            throw std::invalid_argument("GridParameters.G must be symmetric");
        }
        if ((B - B.transpose()).cwiseAbs().maxCoeff() > tol) {
            throw std::invalid_argument("GridParameters.B must be symmetric");
        }
        const int ng = n_grids();
        for (int g : grid_of) {
            if (g < 1) throw std::invalid_argument("GridParameters.grid_of entries must be >= 1");
        }
        for (int g = 1; g <= ng; ++g) {
            if (std::find(grid_of.begin(), grid_of.end(), g) == grid_of.end()) {
                throw std::invalid_argument("GridParameters.grid_of: grid " + std::to_string(g) +
                                            " has no generators");
            }
        }
    }
};

/// Piecewise-constant parameters; segment i is active on [t_start_i, t_start_{i+1}).
class ParameterSchedule {
public:
    struct Segment {
        double t_start;
        GridParameters params;
    };

    ParameterSchedule() = default;

    explicit ParameterSchedule(GridParameters single) {
        single.validate();
        segments_.push_back({0.0, std::move(single)});
    }

    explicit ParameterSchedule(std::vector<Segment> segments) : segments_(std::move(segments)) {
        if (segments_.empty()) throw std::invalid_argument("ParameterSchedule: no segments");
        if (segments_.front().t_start != 0.0) {
            throw std::invalid_argument("ParameterSchedule: first segment must start at t = 0");
        }
        for (std::size_t i = 0; i < segments_.size(); ++i) {
            segments_[i].params.validate();
            if (i == 0) continue;
            if (!(segments_[i].t_start > segments_[i - 1].t_start)) {
                throw std::invalid_argument("ParameterSchedule: t_start must be strictly increasing");
            }
            const auto& p0 = segments_.front().params;
            const auto& pi = segments_[i].params;
            if (pi.n_gen() != p0.n_gen()) {
                throw DimensionError("ParameterSchedule: segment " + std::to_string(i) +
                                     " has a different generator count");
            }
            if (pi.grid_of != p0.grid_of) {
                throw std::invalid_argument("ParameterSchedule: segment " + std::to_string(i) +
                                            " has a different grid_of map");
            }
        }
    }

    const std::vector<Segment>& segments() const noexcept { return segments_; }
    const GridParameters& front() const { return segments_.front().params; }
    Eigen::Index n_gen() const { return front().n_gen(); }

    /// Parameters active at time t.
    const GridParameters& at(double t) const {
        std::size_t i = 0;
        while (i + 1 < segments_.size() && segments_[i + 1].t_start <= t) ++i;
        return segments_[i].params;
    }

private:
    std::vector<Segment> segments_;
};

struct Trajectory {
    std::vector<double> times;
    std::vector<GridState> states;
    std::vector<Eigen::VectorXd> inputs;  ///< inputs[k] held on [times[k], times[k+1])
};

/// Right-hand side of the swing equations. Returns (d delta/dt, d omega/dt).
inline GridState swing_rhs(const GridState& x, const GridParameters& p, const Eigen::VectorXd& u) {
    const Eigen::Index n = p.n_gen();
    detail::require_size("state.delta", x.delta.size(), n);
    detail::require_size("state.omega", x.omega.size(), n);
    detail::require_size("input u", u.size(), n);
    detail::require_size("GridParameters.G rows", p.G.rows(), n + 1);
    detail::require_size("GridParameters.B rows", p.B.rows(), n + 1);

    const Eigen::ArrayXd c = x.delta.array().cos();
    const Eigen::ArrayXd s = x.delta.array().sin();
    const Eigen::VectorXd vc = (p.V.array() * c).matrix();
    const Eigen::VectorXd vs = (p.V.array() * s).matrix();

    const auto Gg = p.G.bottomRightCorner(n, n);
    const auto Bg = p.B.bottomRightCorner(n, n);
    const Eigen::ArrayXd Gvc = (Gg * vc).array();
    const Eigen::ArrayXd Gvs = (Gg * vs).array();
    const Eigen::ArrayXd Bvc = (Bg * vc).array();
    const Eigen::ArrayXd Bvs = (Bg * vs).array();

    // sum over k of V_k {G_jk cos(d_j - d_k) + B_jk sin(d_j - d_k)}, diagonal removed below
    Eigen::ArrayXd pairwise = c * Gvc + s * Gvs + s * Bvc - c * Bvs;
    pairwise -= p.V.array() * p.G.diagonal().tail(n).array();
    pairwise *= p.V.array();

    const Eigen::ArrayXd g_inf = p.G.col(0).tail(n).array();
    const Eigen::ArrayXd b_inf = p.B.col(0).tail(n).array();
    const Eigen::ArrayXd to_inf = p.V.array() * p.V_inf * (g_inf * c + b_inf * s);

    const Eigen::ArrayXd imbalance = p.P_m.array() * (1.0 + u.array()) - p.D.array() * x.omega.array() -
                                     to_inf - p.V.array().square() * p.G_self.array() - pairwise;

    GridState dx;
    dx.delta = x.omega;
    dx.omega = (std::numbers::pi * p.f_b * imbalance / p.H.array()).matrix();
    return dx;
}

/// One classical Runge-Kutta step of dx/dt = f(x) for a stacked state.
template <class VectorField>
Eigen::VectorXd rk4_step(VectorField&& f, const Eigen::VectorXd& x, double dt) {
    const Eigen::VectorXd k1 = f(x);
    const Eigen::VectorXd k2 = f(x + 0.5 * dt * k1);
    const Eigen::VectorXd k3 = f(x + 0.5 * dt * k2);
    const Eigen::VectorXd k4 = f(x + dt * k3);
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
}

/// RK4 step of the swing equations with u held constant. `t` is only used in error reports.
inline GridState step_rk4(const GridState& x, const GridParameters& p, const Eigen::VectorXd& u, double dt,
                          double t = 0.0) {
    if (!(dt > 0.0)) throw std::invalid_argument("step_rk4: dt must be positive");
    const auto field = [&](const Eigen::VectorXd& s) {
        return swing_rhs(GridState::from_stacked(s), p, u).stacked();
    };
    const Eigen::VectorXd next = rk4_step(field, x.stacked(), dt);
    if (!next.allFinite()) throw IntegrationError(t + dt, x.stacked().norm());
    return GridState::from_stacked(next);
}

/// Supplies the input held over sample interval k, starting at time t from state x.
using InputPolicy = std::function<Eigen::VectorXd(std::size_t k, double t, const GridState& x)>;

inline InputPolicy constant_input(Eigen::VectorXd u) {
    return [u = std::move(u)](std::size_t, double, const GridState&) { return u; };
}

inline InputPolicy sequence_input(std::vector<Eigen::VectorXd> seq) {
    return [seq = std::move(seq)](std::size_t k, double, const GridState&) {
        if (k >= seq.size()) throw DimensionError("input sequence exhausted at interval " + std::to_string(k));
        return seq[k];
    };
}

struct SimulationOptions {
    double t_end = 10.0;   ///< [s]
    double dt_int = 1e-3;  ///< integration step [s]
    double T_s = 0.05;     ///< sampling period [s]
};

namespace detail {

inline std::size_t checked_ratio(double num, double den, const char* what) {
    const double r = num / den;
    const double k = std::round(r);
    if (k < 1.0 || std::abs(r - k) > 1e-9 * std::max(1.0, r)) {
        throw std::invalid_argument(std::string(what) + " must be a positive integer multiple");
    }
    return static_cast<std::size_t>(k);
}

/// Integrates [t0, t0 + span] with steps of at most dt, splitting exactly at schedule switch times.
inline GridState advance(GridState x, const ParameterSchedule& schedule, const Eigen::VectorXd& u, double t0,
                         double span, double dt) {
    const double t1 = t0 + span;
    std::vector<double> breaks{t0};
    for (const auto& seg : schedule.segments()) {
        if (seg.t_start > t0 + 1e-12 && seg.t_start < t1 - 1e-12) breaks.push_back(seg.t_start);
    }
    breaks.push_back(t1);
    for (std::size_t b = 0; b + 1 < breaks.size(); ++b) {
        const double a = breaks[b];
        const double len = breaks[b + 1] - a;
        const auto steps = static_cast<std::size_t>(std::max(1.0, std::ceil(len / dt - 1e-9)));
        const double h = len / static_cast<double>(steps);
        const GridParameters& p = schedule.at(a + 0.5 * len);
        for (std::size_t i = 0; i < steps; ++i) {
            x = step_rk4(x, p, u, h, a + static_cast<double>(i) * h);
        }
    }
    return x;
}

}  // namespace detail

/// Integrates the swing equations under zero-order-hold inputs and records every sampling instant.
inline Trajectory simulate(const GridState& x0, const ParameterSchedule& schedule, const InputPolicy& input,
                           const SimulationOptions& opt) {
    const Eigen::Index n = schedule.n_gen();
    detail::require_size("x0.delta", x0.delta.size(), n);
    detail::require_size("x0.omega", x0.omega.size(), n);
    if (!(opt.dt_int > 0.0) || !(opt.T_s > 0.0)) throw std::invalid_argument("simulate: non-positive step");
    detail::checked_ratio(opt.T_s, opt.dt_int, "T_s / dt_int");
    const auto samples = static_cast<std::size_t>(std::floor(opt.t_end / opt.T_s + 1e-9));

    Trajectory traj;
    traj.times.reserve(samples + 1);
    traj.states.reserve(samples + 1);
    traj.inputs.reserve(samples);
    traj.times.push_back(0.0);
    traj.states.push_back(x0);
    for (std::size_t k = 0; k < samples; ++k) {
        const double t = static_cast<double>(k) * opt.T_s;
        Eigen::VectorXd u = input(k, t, traj.states.back());
        detail::require_size("input vector", u.size(), n);
        GridState next = detail::advance(traj.states.back(), schedule, u, t, opt.T_s, opt.dt_int);
        traj.inputs.push_back(std::move(u));
        traj.times.push_back(static_cast<double>(k + 1) * opt.T_s);
        traj.states.push_back(std::move(next));
    }
    return traj;
}

struct EquilibriumOptions {
    double tolerance = 1e-11;  ///< on ||swing_rhs||_inf
    int max_iterations = 100;
};

/// Steady state (delta*, 0) of the swing equations with u = 0, by damped Newton from `guess`.
inline GridState find_equilibrium(const GridParameters& p, const GridState& guess,
                                  const EquilibriumOptions& opt = {}) {
    p.validate();
    const Eigen::Index n = p.n_gen();
    detail::require_size("guess.delta", guess.delta.size(), n);
    if (!guess.delta.allFinite()) throw std::invalid_argument("find_equilibrium: guess must be finite");

    const Eigen::VectorXd u0 = Eigen::VectorXd::Zero(n);
    const Eigen::VectorXd w0 = Eigen::VectorXd::Zero(n);
    const auto residual = [&](const Eigen::VectorXd& d) { return swing_rhs({d, w0}, p, u0).omega; };

    const Eigen::ArrayXd scale = std::numbers::pi * p.f_b / p.H.array();
    const auto jacobian = [&](const Eigen::VectorXd& d) {
        // d/d delta of the bracketed power imbalance, rows scaled by pi f_b / H
        Eigen::MatrixXd J = Eigen::MatrixXd::Zero(n, n);
        for (Eigen::Index j = 0; j < n; ++j) {
            double diag = p.V(j) * p.V_inf * (p.G(j + 1, 0) * std::sin(d(j)) - p.B(j + 1, 0) * std::cos(d(j)));
            for (Eigen::Index k = 0; k < n; ++k) {
                if (k == j) continue;
                const double a = d(j) - d(k);
                const double e = -p.V(j) * p.V(k) * (-p.G(j + 1, k + 1) * std::sin(a) + p.B(j + 1, k + 1) * std::cos(a));
                J(j, k) = -e;
                diag += e;
            }
            J(j, j) = diag;
        }
        return Eigen::MatrixXd(scale.matrix().asDiagonal() * J);
    };

    Eigen::VectorXd d = guess.delta;
    Eigen::VectorXd r = residual(d);
    double rnorm = r.lpNorm<Eigen::Infinity>();
    for (int it = 0; it < opt.max_iterations && rnorm > opt.tolerance; ++it) {
        const Eigen::VectorXd step = jacobian(d).fullPivLu().solve(-r);
        if (!step.allFinite()) break;
        double alpha = 1.0;
        bool accepted = false;
        for (int ls = 0; ls < 30; ++ls, alpha *= 0.5) {
            const Eigen::VectorXd trial = d + alpha * step;
            const Eigen::VectorXd rt = residual(trial);
            const double tn = rt.lpNorm<Eigen::Infinity>();
            if (tn < rnorm) {
                d = trial;
                r = rt;
                rnorm = tn;
                accepted = true;
                break;
            }
        }
        if (!accepted) break;
    }
    if (!(rnorm <= opt.tolerance)) {
        throw ConvergenceError("find_equilibrium: Newton iteration did not converge", rnorm);
    }
    return {d, w0};
}

}  // namespace kmpc
