#include <cmath>
#include <limits>
#include <random>

#include <gtest/gtest.h>

#include "kmpc/mpc.hpp"
#include "oracles.hpp"

using namespace kmpc;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

constexpr double inf = std::numeric_limits<double>::infinity();

MpcConfig plain_config(Eigen::Index N, Eigen::Index m, Eigen::Index Np) {
    MpcConfig cfg;
    cfg.N_p = Np;
    cfg.Q = MatrixXd::Identity(N, N);
    cfg.R = MatrixXd::Identity(m, m);
    cfg.u_min = VectorXd::Constant(m, -inf);
    cfg.u_max = VectorXd::Constant(m, inf);
    cfg.z_min = VectorXd::Constant(N, -inf);
    cfg.z_max = VectorXd::Constant(N, inf);
    return cfg;
}

/// Random stable-ish system so that powers over the horizon stay moderate.
MatrixXd random_dynamics(Eigen::Index N, std::mt19937_64& rng) {
    MatrixXd A = oracle::random_matrix(N, N, rng);
    const double rho = Eigen::EigenSolver<MatrixXd>(A, false).eigenvalues().cwiseAbs().maxCoeff();
    return A * (0.95 / rho);
}

double constant_term(const MatrixXd& A, const MatrixXd& Q, Eigen::Index Np, const VectorXd& z0) {
    double sum = 0.0;
    VectorXd z = z0;
    for (Eigen::Index i = 0; i <= Np; ++i) {
        sum += z.dot(Q * z);
        z = A * z;
    }
    return sum;
}

}  // namespace

TEST(PredictionMatrices, ScalarExample) {
    const auto pm = prediction_matrices(MatrixXd::Constant(1, 1, 2.0), MatrixXd::Ones(1, 1), 2);
    MatrixXd Abar(3, 1), Bbar(3, 2);
    Abar << 1, 2, 4;
    Bbar << 0, 0, 1, 0, 2, 1;
    EXPECT_EQ(pm.Abar, Abar);
    EXPECT_EQ(pm.Bbar, Bbar);
}

TEST(PredictionMatrices, MatchesRecursion) {
    std::mt19937_64 rng(5);
    const MatrixXd A = random_dynamics(4, rng);
    const MatrixXd B = oracle::random_matrix(4, 2, rng);
    const Eigen::Index Np = 6;
    const auto pm = prediction_matrices(A, B, Np);
    const VectorXd z0 = oracle::random_matrix(4, 1, rng);
    const VectorXd U = oracle::random_matrix(2 * Np, 1, rng);
    const VectorXd Z = pm.Abar * z0 + pm.Bbar * U;
    VectorXd z = z0;
    for (Eigen::Index i = 0; i <= Np; ++i) {
        EXPECT_LT((Z.segment(4 * i, 4) - z).lpNorm<Eigen::Infinity>(), 1e-12);
        if (i < Np) z = A * z + B * U.segment(2 * i, 2);
    }
}

TEST(Condense, ZeroStateWeightGivesInputPenaltyOnly) {
    MpcConfig cfg = plain_config(1, 1, 2);
    cfg.Q.setZero();
    const DenseQP qp = condense(MatrixXd::Constant(1, 1, 2.0), MatrixXd::Ones(1, 1), cfg);
    EXPECT_EQ(qp.H(), MatrixXd::Identity(2, 2));
    EXPECT_EQ(qp.G(), MatrixXd::Zero(1, 2));
    EXPECT_EQ(qp.n_rows(), 0);
}

TEST(Condense, ScalarCostByHand) {
    // z1 = 2 z0 + u0, z2 = 4 z0 + 2 u0 + u1, Q = R = 1
    const DenseQP qp = condense(MatrixXd::Constant(1, 1, 2.0), MatrixXd::Ones(1, 1), plain_config(1, 1, 2));
    MatrixXd H(2, 2), G(1, 2);
    H << 6, 2, 2, 2;
    G << 20, 8;
    EXPECT_LT((qp.H() - H).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LT((qp.G() - G).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Condense, ObjectiveEqualsStageSum) {
    std::mt19937_64 rng(8);
    const Eigen::Index N = 5, m = 2, Np = 7;
    const MatrixXd A = random_dynamics(N, rng);
    const MatrixXd B = oracle::random_matrix(N, m, rng);
    MpcConfig cfg = plain_config(N, m, Np);
    const MatrixXd S = oracle::random_matrix(N, N, rng);
    cfg.Q = S * S.transpose();
    cfg.R = 0.3 * MatrixXd::Identity(m, m);
    const DenseQP qp = condense(A, B, cfg);
    for (int trial = 0; trial < 10; ++trial) {
        const VectorXd z0 = oracle::random_matrix(N, 1, rng);
        const VectorXd U = oracle::random_matrix(m * Np, 1, rng);
        double stage = 0.0;
        VectorXd z = z0;
        for (Eigen::Index i = 0; i <= Np; ++i) {
            stage += z.dot(cfg.Q * z);
            if (i < Np) {
                const VectorXd u = U.segment(i * m, m);
                stage += u.dot(cfg.R * u);
                z = A * z + B * u;
            }
        }
        const double dense = qp.objective(U, z0) + constant_term(A, cfg.Q, Np, z0);
        EXPECT_NEAR(dense, stage, 1e-10 * std::max(1.0, std::abs(stage)));
    }
}

TEST(Condense, RowLayoutInputBoundsOnly) {
    const MpcConfig cfg = MpcConfig::frequency_regulation(3, 4, 0.01, 0.2);
    std::mt19937_64 rng(1);
    const DenseQP qp = condense(random_dynamics(9, rng), oracle::random_matrix(9, 3, rng), cfg);
    ASSERT_EQ(qp.n_rows(), 2 * 3 * 4);
    for (Eigen::Index i = 0; i < 4; ++i) {
        for (Eigen::Index k = 0; k < 3; ++k) {
            const Eigen::Index up = i * 6 + k;
            const Eigen::Index lo = i * 6 + 3 + k;
            EXPECT_EQ(qp.L()(up, i * 3 + k), 1.0);
            EXPECT_EQ(qp.L()(lo, i * 3 + k), -1.0);
            EXPECT_EQ(qp.L().row(up).cwiseAbs().sum(), 1.0);
            EXPECT_EQ(qp.c()(up), 0.2);
            EXPECT_EQ(qp.c()(lo), 0.2);
        }
    }
    EXPECT_EQ(qp.M().cwiseAbs().maxCoeff(), 0.0);
}

TEST(Condense, StateBoundRows) {
    std::mt19937_64 rng(2);
    const Eigen::Index N = 3, m = 1, Np = 3;
    const MatrixXd A = random_dynamics(N, rng);
    const MatrixXd B = oracle::random_matrix(N, m, rng);
    MpcConfig cfg = plain_config(N, m, Np);
    cfg.z_max(1) = 0.5;
    cfg.z_min(2) = -0.25;
    cfg.u_max(0) = 1.0;
    const DenseQP qp = condense(A, B, cfg);
    ASSERT_EQ(qp.n_rows(), (Np + 1) * 2 + Np);
    const auto pm = prediction_matrices(A, B, Np);
    for (Eigen::Index i = 0; i <= Np; ++i) {
        const Eigen::Index base = i * 3;
        EXPECT_EQ(qp.L().row(base), pm.Bbar.row(i * N + 1));
        EXPECT_EQ(qp.M().row(base), pm.Abar.row(i * N + 1));
        EXPECT_EQ(qp.c()(base), 0.5);
        EXPECT_EQ(qp.L().row(base + 1), -pm.Bbar.row(i * N + 2));
        EXPECT_EQ(qp.c()(base + 1), 0.25);
        if (i < Np) {
            EXPECT_EQ(qp.L()(base + 2, i), 1.0);
        }
    }
}

TEST(Condense, DenseMatchesSparseFormulation) {
    std::mt19937_64 rng(77);
    int compared = 0;
    for (int trial = 0; trial < 60; ++trial) {
        const Eigen::Index N = 2 + trial % 2;
        const Eigen::Index m = 1 + trial % 2;
        const Eigen::Index Np = m == 1 ? 3 : 2;
        const MatrixXd A = random_dynamics(N, rng);
        const MatrixXd B = oracle::random_matrix(N, m, rng);
        MpcConfig cfg = plain_config(N, m, Np);
        const MatrixXd S = oracle::random_matrix(N, N, rng);
        cfg.Q = S * S.transpose();
        cfg.R = 0.05 * MatrixXd::Identity(m, m);
        cfg.u_max.setConstant(0.3);
        cfg.u_min.setConstant(-0.3);
        const VectorXd z0 = oracle::random_matrix(N, 1, rng);
        if (trial % 3 == 0) {
            cfg.z_max(0) = std::abs(z0(0)) + 0.5;
            cfg.z_min(0) = -cfg.z_max(0);
        }
        const DenseQP qp = condense(A, B, cfg);
        const QpSolution dense = solve_qp(qp, z0);
        const auto sparse = oracle::sparse_mpc(A, B, cfg.Q, cfg.R, cfg.u_min, cfg.u_max, cfg.z_min, cfg.z_max, Np, z0);
        if (!sparse.feasible) {
            EXPECT_EQ(dense.status, QpStatus::infeasible) << "trial " << trial;
            continue;
        }
        ASSERT_EQ(dense.status, QpStatus::solved) << "trial " << trial;
        EXPECT_LT((dense.U - sparse.U).lpNorm<Eigen::Infinity>(), 1e-6) << "trial " << trial;
        const double full = dense.objective + constant_term(A, cfg.Q, Np, z0);
        EXPECT_NEAR(full, sparse.objective, 1e-6 * std::max(1.0, std::abs(sparse.objective))) << "trial " << trial;
        ++compared;
    }
    EXPECT_GE(compared, 40);
}

TEST(Condense, FromPredictor) {
    LiftedPredictor model;
    model.embedding = Embedding::for_generators(2);
    model.T_s = 0.05;
    model.A = MatrixXd::Identity(6, 6) * 0.9;
    model.B = MatrixXd::Zero(6, 2);
    model.B.bottomRows(2).setIdentity();
    model.C = MatrixXd::Zero(4, 6);
    model.C.topLeftCorner(2, 2).setIdentity();
    model.C.bottomRightCorner(2, 2).setIdentity();
    const DenseQP qp = condense(model, MpcConfig::frequency_regulation(2, 5));
    EXPECT_EQ(qp.dims().N, 6);
    EXPECT_EQ(qp.dims().m, 2);
    EXPECT_EQ(qp.n_vars(), 10);
    EXPECT_EQ(qp.n_rows(), 20);
}

TEST(MpcConfig, Validation) {
    MpcConfig cfg = plain_config(2, 1, 3);
    EXPECT_NO_THROW(cfg.validate(2, 1));
    EXPECT_THROW(cfg.validate(3, 1), DimensionError);
    MpcConfig bad = cfg;
    bad.Q(0, 0) = -1.0;
    EXPECT_THROW(bad.validate(2, 1), std::invalid_argument);
    bad = cfg;
    bad.Q(0, 1) = 0.5;
    EXPECT_THROW(bad.validate(2, 1), std::invalid_argument);
    bad = cfg;
    bad.u_min(0) = 1.0;
    bad.u_max(0) = 0.0;
    EXPECT_THROW(bad.validate(2, 1), std::invalid_argument);
    bad = cfg;
    bad.N_p = 0;
    EXPECT_THROW(bad.validate(2, 1), std::invalid_argument);
}

TEST(MpcConfig, FrequencyRegulationLayout) {
    const MpcConfig cfg = MpcConfig::frequency_regulation(3);
    EXPECT_EQ(cfg.N_p, 20);
    EXPECT_EQ(cfg.Q.rows(), 9);
    EXPECT_EQ(cfg.Q.topLeftCorner(6, 6).cwiseAbs().maxCoeff(), 0.0);
    EXPECT_EQ(cfg.Q.bottomRightCorner(3, 3), MatrixXd::Identity(3, 3));
    EXPECT_EQ(cfg.R, 0.01 * MatrixXd::Identity(3, 3));
    EXPECT_EQ(cfg.u_max, VectorXd::Constant(3, 0.2));
    EXPECT_FALSE(std::isfinite(cfg.z_max(0)));

    MpcConfig bounded = cfg;
    bounded.set_angle_frequency_bounds(0.5, 0.1);
    EXPECT_DOUBLE_EQ(bounded.z_max(0), std::cos(0.5));
    EXPECT_DOUBLE_EQ(bounded.z_max(3), std::sin(0.5));
    EXPECT_DOUBLE_EQ(bounded.z_min(8), -0.1);
}
