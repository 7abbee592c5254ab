#pragma once

// Synthetic cascade of unit grids for desk-scale experiments.
//
// Grid 1 is tied to the infinite bus, grid g > 1 is tied to grid g-1. Inside a
// grid all generators are coupled. The fault in grid 1 is represented by three
// admittance snapshots: pre-fault, fault-on (the infinite-bus ties collapse), and
// post-trip (the infinite-bus ties are weakened because one line is removed).

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "kmpc/grid_model.hpp"

namespace kmpc {

struct CascadeOptions {
    int n_grids = 2;
    int gens_per_grid = 3;
    double f_b = 60.0;
    double H = 9.0;            ///< mean inertia [s]; individual values are spread by +-20 %
    double D = 0.05;           ///< damping [s]
    double P_m = 0.6;          ///< mechanical power per generator [pu]
    double V = 1.0;
    double V_inf = 1.0;
    double G_self = 0.01;
    double b_intra = 2.0;      ///< susceptance between generators of the same grid
    double g_intra = 0.01;     ///< conductance between generators of the same grid
    double b_tie = 0.6;        ///< susceptance between generator k of grid g and generator k of grid g-1
    double b_inf = 1.6;        ///< pre-fault susceptance from each grid-1 generator to the infinite bus
    double fault_ratio = 0.05; ///< fault-on infinite-bus susceptance as a fraction of b_inf
    double trip_ratio = 0.97;  ///< post-trip infinite-bus susceptance as a fraction of b_inf
    double t_fault = 0.87;     ///< [s]
    double t_clear = 1.0;      ///< [s]
};

namespace detail {

inline void set_symmetric(Eigen::MatrixXd& M, Eigen::Index i, Eigen::Index j, double v) {
    M(i, j) = v;
    M(j, i) = v;
}

}  // namespace detail

/// Pre-fault parameter snapshot of the synthetic cascade.
inline GridParameters synthetic_cascade(const CascadeOptions& o) {
    const int gpg = o.gens_per_grid;
    const Eigen::Index n = static_cast<Eigen::Index>(o.n_grids) * gpg;
    GridParameters p;
    p.f_b = o.f_b;
    p.V_inf = o.V_inf;
    p.H.resize(n);
    p.D = Eigen::VectorXd::Constant(n, o.D);
    p.P_m = Eigen::VectorXd::Constant(n, o.P_m);
    p.V = Eigen::VectorXd::Constant(n, o.V);
    p.G_self = Eigen::VectorXd::Constant(n, o.G_self);
    p.G = Eigen::MatrixXd::Zero(n + 1, n + 1);
    p.B = Eigen::MatrixXd::Zero(n + 1, n + 1);
    p.grid_of.resize(static_cast<std::size_t>(n));
    for (Eigen::Index j = 0; j < n; ++j) {
        const int local = static_cast<int>(j % gpg);
        const int grid = static_cast<int>(j / gpg);
        p.grid_of[static_cast<std::size_t>(j)] = grid + 1;
        // spread inertia so that the generators are not identical
        p.H(j) = o.H * (1.0 + 0.2 * (gpg > 1 ? (2.0 * local / (gpg - 1) - 1.0) : 0.0));
        for (int k = local + 1; k < gpg; ++k) {
            const Eigen::Index jk = static_cast<Eigen::Index>(grid) * gpg + k;
            detail::set_symmetric(p.B, j + 1, jk + 1, o.b_intra);
            detail::set_symmetric(p.G, j + 1, jk + 1, o.g_intra);
        }
        if (grid == 0) {
            detail::set_symmetric(p.B, j + 1, 0, o.b_inf);
        } else {
            detail::set_symmetric(p.B, j + 1, j + 1 - gpg, o.b_tie);
        }
    }
    return p;
}

/// Pre-fault / fault-on / post-trip schedule of the synthetic cascade.
inline ParameterSchedule synthetic_fault_schedule(const CascadeOptions& o) {
    const GridParameters pre = synthetic_cascade(o);
    GridParameters fault = pre;
    GridParameters post = pre;
    for (int k = 0; k < o.gens_per_grid; ++k) {
        detail::set_symmetric(fault.B, k + 1, 0, o.b_inf * o.fault_ratio);
        detail::set_symmetric(post.B, k + 1, 0, o.b_inf * o.trip_ratio);
    }
    return ParameterSchedule({{0.0, pre}, {o.t_fault, fault}, {o.t_clear, post}});
}

}  // namespace kmpc
