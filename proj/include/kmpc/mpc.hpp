#pragma once

// Condensing of the finite-horizon lifted MPC problem into a DenseQP.
//
// With Z = [z_0; ...; z_Np] = Abar z0 + Bbar U the objective sum_{i=0}^{Np} z_i^T Q z_i
// + sum_{i=0}^{Np-1} u_i^T R u_i becomes U^T H U + z0^T G U + z0^T Abar^T Qbar Abar z0, and
// the constant is dropped.
//
// Inequality rows are emitted step by step, i = 0..Np:
//   finite entries of z_max  (z_i <= z_max),
//   finite entries of z_min  (-z_i <= -z_min),
//   and for i < Np: finite entries of u_max, then u_min.
// Infinite bounds produce no rows, so the default configuration (no state bounds)
// yields exactly 2 m Np rows of simple input bounds.

#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "kmpc/edmd.hpp"
#include "kmpc/errors.hpp"
#include "kmpc/qp.hpp"

namespace kmpc {

struct MpcConfig {
    Eigen::Index N_p = 20;
    Eigen::MatrixXd Q;
    Eigen::MatrixXd R;
    Eigen::VectorXd u_min;
    Eigen::VectorXd u_max;
    Eigen::VectorXd z_min;  ///< entries may be -inf
    Eigen::VectorXd z_max;  ///< entries may be +inf

    /// Q penalizes the omega block of the lifted state, R = r I, symmetric input box, no state bounds.
    static MpcConfig frequency_regulation(Eigen::Index n_gen, Eigen::Index N_p = 20, double r = 0.01,
                                          double u_bound = 0.2) {
        MpcConfig cfg;
        cfg.N_p = N_p;
        cfg.Q = Eigen::MatrixXd::Zero(3 * n_gen, 3 * n_gen);
        cfg.Q.bottomRightCorner(n_gen, n_gen).setIdentity();
        cfg.R = r * Eigen::MatrixXd::Identity(n_gen, n_gen);
        cfg.u_min = Eigen::VectorXd::Constant(n_gen, -u_bound);
        cfg.u_max = Eigen::VectorXd::Constant(n_gen, u_bound);
        cfg.z_min = Eigen::VectorXd::Constant(3 * n_gen, -std::numeric_limits<double>::infinity());
        cfg.z_max = Eigen::VectorXd::Constant(3 * n_gen, std::numeric_limits<double>::infinity());
        return cfg;
    }

    /// Symmetric bounds on the lifted state: |cos|, |sin| <= (cos, sin)(theta_max), |omega| <= omega_max.
    /// The bounds act on the lifted coordinates literally; cos is not monotone in the angle.
    void set_angle_frequency_bounds(double theta_max, double omega_max) {
        const Eigen::Index g = Q.rows() / 3;
        z_max.resize(3 * g);
        z_max << Eigen::VectorXd::Constant(g, std::cos(theta_max)), Eigen::VectorXd::Constant(g, std::sin(theta_max)),
            Eigen::VectorXd::Constant(g, omega_max);
        z_min = -z_max;
    }

    void validate(Eigen::Index N, Eigen::Index m) const {
        if (N_p < 1) throw std::invalid_argument("MpcConfig.N_p must be >= 1");
        detail::require_size("MpcConfig.Q rows", Q.rows(), N);
        detail::require_size("MpcConfig.Q cols", Q.cols(), N);
        detail::require_size("MpcConfig.R rows", R.rows(), m);
        detail::require_size("MpcConfig.R cols", R.cols(), m);
        detail::require_size("MpcConfig.u_min", u_min.size(), m);
        detail::require_size("MpcConfig.u_max", u_max.size(), m);
        detail::require_size("MpcConfig.z_min", z_min.size(), N);
        detail::require_size("MpcConfig.z_max", z_max.size(), N);
        check_psd("MpcConfig.Q", Q);
        check_psd("MpcConfig.R", R);
        if ((u_min.array() > u_max.array()).any()) throw std::invalid_argument("MpcConfig: u_min > u_max");
        if ((z_min.array() > z_max.array()).any()) throw std::invalid_argument("MpcConfig: z_min > z_max");
    }

private:
    static void check_psd(const char* name, const Eigen::MatrixXd& S) {
        if (S.size() == 0) return;
        const double scale = std::max(1.0, S.cwiseAbs().maxCoeff());
        if ((S - S.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
            throw std::invalid_argument(std::string(name) + " must be symmetric");
        }
        const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(S, Eigen::EigenvaluesOnly);
        if (es.eigenvalues().minCoeff() < -1e-10) {
            throw std::invalid_argument(std::string(name) + " must be positive semidefinite");
        }
    }
};

/// Stacked prediction matrices: Z = Abar z0 + Bbar U over steps 0..N_p.
struct PredictionMatrices {
    Eigen::MatrixXd Abar;  ///< [I; A; ...; A^Np]
    Eigen::MatrixXd Bbar;  ///< block lower triangular, block (i, j) = A^{i-1-j} B for j < i
};

inline PredictionMatrices prediction_matrices(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, Eigen::Index N_p) {
    const Eigen::Index N = A.rows();
    const Eigen::Index m = B.cols();
    detail::require_size("prediction_matrices: A cols", A.cols(), N);
    detail::require_size("prediction_matrices: B rows", B.rows(), N);
    PredictionMatrices pm{Eigen::MatrixXd(N * (N_p + 1), N), Eigen::MatrixXd::Zero(N * (N_p + 1), m * N_p)};
    Eigen::MatrixXd power = Eigen::MatrixXd::Identity(N, N);
    std::vector<Eigen::MatrixXd> AkB;  // A^k B, k = 0..Np-1
    AkB.reserve(static_cast<std::size_t>(N_p));
    for (Eigen::Index i = 0; i <= N_p; ++i) {
        pm.Abar.middleRows(i * N, N) = power;
        if (i < N_p) AkB.push_back(power * B);
        power = (A * power).eval();
    }
    for (Eigen::Index i = 1; i <= N_p; ++i) {
        for (Eigen::Index j = 0; j < i; ++j) {
            pm.Bbar.block(i * N, j * m, N, m) = AkB[static_cast<std::size_t>(i - 1 - j)];
        }
    }
    return pm;
}

/// Dense-form QP data (H, G, L, M, c) for the lifted model (A, B) and configuration.
inline DenseQP condense(const Eigen::MatrixXd& A, const Eigen::MatrixXd& B, const MpcConfig& cfg) {
    const Eigen::Index N = A.rows();
    const Eigen::Index m = B.cols();
    cfg.validate(N, m);
    const Eigen::Index Np = cfg.N_p;
    const Eigen::Index nu = m * Np;
    const auto pm = prediction_matrices(A, B, Np);

    Eigen::MatrixXd H = Eigen::MatrixXd::Zero(nu, nu);
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(N, nu);
    for (Eigen::Index i = 0; i < Np; ++i) H.block(i * m, i * m, m, m) = cfg.R;
    for (Eigen::Index i = 0; i <= Np; ++i) {
        const auto Bi = pm.Bbar.middleRows(i * N, N);
        const auto Ai = pm.Abar.middleRows(i * N, N);
        const Eigen::MatrixXd QBi = cfg.Q * Bi;
        H.noalias() += Bi.transpose() * QBi;
        G.noalias() += 2.0 * Ai.transpose() * QBi;
    }
    H = 0.5 * (H + H.transpose()).eval();

    Eigen::Index rows = 0;
    const auto finite_count = [](const Eigen::VectorXd& v) {
        return static_cast<Eigen::Index>((v.array().abs() < std::numeric_limits<double>::infinity()).count());
    };
    rows += (Np + 1) * (finite_count(cfg.z_max) + finite_count(cfg.z_min));
    rows += Np * (finite_count(cfg.u_max) + finite_count(cfg.u_min));

    Eigen::MatrixXd L = Eigen::MatrixXd::Zero(rows, nu);
    Eigen::MatrixXd M = Eigen::MatrixXd::Zero(rows, N);
    Eigen::VectorXd c(rows);
    Eigen::Index r = 0;
    for (Eigen::Index i = 0; i <= Np; ++i) {
        for (Eigen::Index k = 0; k < N; ++k) {
            if (std::isfinite(cfg.z_max(k))) {
                L.row(r) = pm.Bbar.row(i * N + k);
                M.row(r) = pm.Abar.row(i * N + k);
                c(r++) = cfg.z_max(k);
            }
        }
        for (Eigen::Index k = 0; k < N; ++k) {
            if (std::isfinite(cfg.z_min(k))) {
                L.row(r) = -pm.Bbar.row(i * N + k);
                M.row(r) = -pm.Abar.row(i * N + k);
                c(r++) = -cfg.z_min(k);
            }
        }
        if (i == Np) break;
        for (Eigen::Index k = 0; k < m; ++k) {
            if (std::isfinite(cfg.u_max(k))) {
                L(r, i * m + k) = 1.0;
                c(r++) = cfg.u_max(k);
            }
        }
        for (Eigen::Index k = 0; k < m; ++k) {
            if (std::isfinite(cfg.u_min(k))) {
                L(r, i * m + k) = -1.0;
                c(r++) = -cfg.u_min(k);
            }
        }
    }
    return DenseQP(std::move(H), std::move(G), std::move(L), std::move(M), std::move(c), {N, m, Np});
}

inline DenseQP condense(const LiftedPredictor& model, const MpcConfig& cfg) {
    model.validate();
    return condense(model.A, model.B, cfg);
}

}  // namespace kmpc
