#pragma once

#include <algorithm>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "kmpc/grid_model.hpp"

namespace kmpc {

/// Snapshot matrices: column i holds a state x_i, its successor y_i one sampling period later, and the held input u_i.
struct Dataset {
    Eigen::MatrixXd X;
    Eigen::MatrixXd Y;
    Eigen::MatrixXd U;

    Eigen::Index size() const noexcept { return X.cols(); }

    void validate() const {
        detail::require_size("Dataset.Y cols", Y.cols(), X.cols());
        detail::require_size("Dataset.U cols", U.cols(), X.cols());
        detail::require_size("Dataset.Y rows", Y.rows(), X.rows());
        if (X.rows() % 2 != 0) throw DimensionError("Dataset.X must have an even row count (delta, omega)");
    }
};

enum class AngleCenter { equilibrium, zero };

struct SamplingConfig {
    std::size_t n_traj = 10000;
    double traj_len = 2.5;  ///< [s]
    double T_s = 0.05;      ///< [s]
    double dt_int = 1e-3;   ///< [s]
    double delta_halfwidth = std::numbers::pi / 10.0;
    double omega_halfwidth = 0.05;
    double u_min = -0.2;
    double u_max = 0.2;
    AngleCenter center = AngleCenter::equilibrium;
    std::uint64_t seed = 1;
    unsigned threads = 0;  ///< 0 = hardware concurrency

    std::size_t samples_per_traj() const { return detail::checked_ratio(traj_len, T_s, "traj_len / T_s"); }

    void validate() const {
        if (n_traj == 0) throw std::invalid_argument("SamplingConfig.n_traj must be positive");
        samples_per_traj();
        detail::checked_ratio(T_s, dt_int, "T_s / dt_int");
        if (delta_halfwidth < 0.0 || omega_halfwidth < 0.0) {
            throw std::invalid_argument("SamplingConfig: negative range half-width");
        }
        if (u_min > u_max) throw std::invalid_argument("SamplingConfig: u_min > u_max");
    }
};

struct CollectionReport {
    std::size_t requested = 0;
    std::size_t discarded = 0;
    std::vector<std::size_t> discarded_indices;
    GridState center;  ///< center of the initial-condition box
};

namespace detail {

/// RNG stream for trajectory `index`, independent of how trajectories are scheduled on threads.
inline std::mt19937_64 trajectory_rng(std::uint64_t seed, std::size_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(std::uint64_t(index) >> 32)};
    return std::mt19937_64(seq);
}

struct TrajectoryBlock {
    Eigen::MatrixXd X, Y, U;
    bool ok = false;
};

inline TrajectoryBlock sample_trajectory(const ParameterSchedule& schedule, const SamplingConfig& cfg,
                                         const GridState& center, std::size_t index) {
    const Eigen::Index n = schedule.n_gen();
    const std::size_t len = cfg.samples_per_traj();
    auto rng = trajectory_rng(cfg.seed, index);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    std::uniform_real_distribution<double> input(cfg.u_min, cfg.u_max);

    GridState x0 = center;
    for (Eigen::Index j = 0; j < n; ++j) x0.delta(j) += cfg.delta_halfwidth * unit(rng);
    for (Eigen::Index j = 0; j < n; ++j) x0.omega(j) += cfg.omega_halfwidth * unit(rng);
    std::vector<Eigen::VectorXd> inputs(len, Eigen::VectorXd(n));
    for (auto& u : inputs) {
        for (Eigen::Index j = 0; j < n; ++j) u(j) = cfg.u_min == cfg.u_max ? cfg.u_min : input(rng);
    }

    TrajectoryBlock block;
    Trajectory traj;
    try {
        traj = simulate(x0, schedule, sequence_input(inputs), {cfg.traj_len, cfg.dt_int, cfg.T_s});
    } catch (const IntegrationError&) {
        return block;
    }
    block.X.resize(2 * n, static_cast<Eigen::Index>(len));
    block.Y.resize(2 * n, static_cast<Eigen::Index>(len));
    block.U.resize(n, static_cast<Eigen::Index>(len));
    for (std::size_t k = 0; k < len; ++k) {
        const auto c = static_cast<Eigen::Index>(k);
        block.X.col(c) = traj.states[k].stacked();
        block.Y.col(c) = traj.states[k + 1].stacked();
        block.U.col(c) = traj.inputs[k];
    }
    block.ok = block.X.allFinite() && block.Y.allFinite();
    return block;
}

}  // namespace detail

/// Center of the initial-condition box for the given config.
inline GridState sampling_center(const GridParameters& params, const SamplingConfig& cfg) {
    const GridState zero = GridState::zeros(params.n_gen());
    return cfg.center == AngleCenter::equilibrium ? find_equilibrium(params, zero) : zero;
}

/// Randomized-excitation dataset from the (pre-fault) parameter snapshot. Deterministic given cfg.seed
/// regardless of cfg.threads; diverged trajectories are dropped and listed in `report`.
inline Dataset collect_dataset(const GridParameters& params, const SamplingConfig& cfg,
                               CollectionReport* report = nullptr) {
    cfg.validate();
    const ParameterSchedule schedule(params);
    const GridState center = sampling_center(params, cfg);

    std::vector<detail::TrajectoryBlock> blocks(cfg.n_traj);
    unsigned workers = cfg.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : cfg.threads;
    workers = static_cast<unsigned>(std::min<std::size_t>(workers, cfg.n_traj));
    const auto work = [&](unsigned w) {
        for (std::size_t r = w; r < cfg.n_traj; r += workers) {
            blocks[r] = detail::sample_trajectory(schedule, cfg, center, r);
        }
    };
    if (workers <= 1) {
        work(0);
    } else {
        std::vector<std::jthread> pool;
        for (unsigned w = 0; w < workers; ++w) pool.emplace_back(work, w);
    }

    const Eigen::Index n = params.n_gen();
    const auto len = static_cast<Eigen::Index>(cfg.samples_per_traj());
    std::vector<std::size_t> dropped;
    for (std::size_t r = 0; r < blocks.size(); ++r) {
        if (!blocks[r].ok) dropped.push_back(r);
    }
    const Eigen::Index K = static_cast<Eigen::Index>(cfg.n_traj - dropped.size()) * len;
    Dataset ds{Eigen::MatrixXd(2 * n, K), Eigen::MatrixXd(2 * n, K), Eigen::MatrixXd(n, K)};
    Eigen::Index col = 0;
    for (const auto& b : blocks) {
        if (!b.ok) continue;
        ds.X.middleCols(col, len) = b.X;
        ds.Y.middleCols(col, len) = b.Y;
        ds.U.middleCols(col, len) = b.U;
        col += len;
    }
    if (report != nullptr) {
        report->requested = cfg.n_traj;
        report->discarded = dropped.size();
        report->discarded_indices = std::move(dropped);
        report->center = center;
    }
    return ds;
}

/// Row indices of the state vector (delta then omega) for the given generators.
inline std::vector<Eigen::Index> state_rows(const std::vector<int>& gens, Eigen::Index n_gen) {
    std::vector<Eigen::Index> rows;
    rows.reserve(2 * gens.size());
    for (int j : gens) rows.push_back(j);
    for (int j : gens) rows.push_back(n_gen + j);
    return rows;
}

/// Restriction of a dataset to the state and input rows of unit grid g (1-based).
inline Dataset split_per_grid(const Dataset& ds, const std::vector<int>& grid_of, int g) {
    ds.validate();
    const auto n = static_cast<Eigen::Index>(grid_of.size());
    detail::require_size("Dataset.X rows", ds.X.rows(), 2 * n);
    detail::require_size("Dataset.U rows", ds.U.rows(), n);
    std::vector<int> gens;
    for (std::size_t j = 0; j < grid_of.size(); ++j) {
        if (grid_of[j] == g) gens.push_back(static_cast<int>(j));
    }
    if (gens.empty()) throw DimensionError("split_per_grid: invalid grid index " + std::to_string(g));
    const auto rows = state_rows(gens, n);
    return {ds.X(rows, Eigen::all), ds.Y(rows, Eigen::all),
            ds.U(gens, Eigen::all)};
}

}  // namespace kmpc
