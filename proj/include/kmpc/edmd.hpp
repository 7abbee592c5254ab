#pragma once

// Lifted linear predictor z+ = A z + B u, x_hat = C z fitted by least squares on
// the embedding psi(delta, omega) = (cos delta, sin delta, omega).

#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "kmpc/data_gen.hpp"
#include "kmpc/errors.hpp"

namespace kmpc {

struct Embedding {
    Eigen::Index n = 0;  ///< original state dimension (2 * n_gen)
    Eigen::Index N = 0;  ///< lifted dimension (3 * n_gen)

    static Embedding for_generators(Eigen::Index n_gen) { return {2 * n_gen, 3 * n_gen}; }
    Eigen::Index n_gen() const noexcept { return n / 2; }
};

/// psi(x) = (cos delta, sin delta, omega) for stacked x = (delta, omega).
inline Eigen::VectorXd embed(const Eigen::Ref<const Eigen::VectorXd>& x) {
    if (x.size() % 2 != 0) throw DimensionError("embed: state length must be even, got " + std::to_string(x.size()));
    const Eigen::Index g = x.size() / 2;
    Eigen::VectorXd z(3 * g);
    z.head(g) = x.head(g).array().cos().matrix();
    z.segment(g, g) = x.head(g).array().sin().matrix();
    z.tail(g) = x.tail(g);
    return z;
}

inline Eigen::VectorXd embed(const GridState& x) { return embed(x.stacked()); }

/// Columnwise embedding of a snapshot matrix.
inline Eigen::MatrixXd lift(const Eigen::MatrixXd& X) {
    if (X.rows() % 2 != 0) throw DimensionError("lift: state rows must be even, got " + std::to_string(X.rows()));
    const Eigen::Index g = X.rows() / 2;
    Eigen::MatrixXd Z(3 * g, X.cols());
    Z.topRows(g) = X.topRows(g).array().cos().matrix();
    Z.middleRows(g, g) = X.topRows(g).array().sin().matrix();
    Z.bottomRows(g) = X.bottomRows(g);
    return Z;
}

struct LiftedData {
    Eigen::MatrixXd X_lift;
    Eigen::MatrixXd Y_lift;
};

inline LiftedData lift_dataset(const Dataset& ds) {
    ds.validate();
    return {lift(ds.X), lift(ds.Y)};
}

struct FitResiduals {
    double dynamics = 0.0;  ///< ||Y_lift - A X_lift - B U||_F on the training set
    double output = 0.0;    ///< ||X - C X_lift||_F on the training set
    Eigen::Index samples = 0;
};

struct LiftedPredictor {
    Eigen::MatrixXd A;
    Eigen::MatrixXd B;
    Eigen::MatrixXd C;
    Embedding embedding;
    double T_s = 0.05;
    double regularization = 0.0;
    FitResiduals residuals;

    Eigen::Index lifted_dim() const noexcept { return A.rows(); }
    Eigen::Index input_dim() const noexcept { return B.cols(); }
    Eigen::Index state_dim() const noexcept { return C.rows(); }

    void validate() const {
        const Eigen::Index N = A.rows();
        detail::require_size("LiftedPredictor.A cols", A.cols(), N);
        detail::require_size("LiftedPredictor.B rows", B.rows(), N);
        detail::require_size("LiftedPredictor.C cols", C.cols(), N);
        detail::require_size("LiftedPredictor.embedding.N", embedding.N, N);
        detail::require_size("LiftedPredictor.C rows", C.rows(), embedding.n);
        if (2 * embedding.N != 3 * embedding.n) throw DimensionError("LiftedPredictor: N must equal 3n/2");
    }
};

struct FitOptions {
    double regularization = 1e-8;
    /// Gram matrices with reciprocal condition below this are treated as singular when regularization = 0.
    double singular_rcond = 1e-14;
};

namespace detail {

/// Minimizer of ||T - W S||_F^2 + reg ||W||_F^2 via the normal equations (S S^T + reg I) W^T = S T^T.
inline Eigen::MatrixXd ridge_solve(const Eigen::MatrixXd& T, const Eigen::MatrixXd& S, const FitOptions& opt) {
    Eigen::MatrixXd gram = S * S.transpose();
    gram.diagonal().array() += opt.regularization;
    const Eigen::MatrixXd rhs = S * T.transpose();
    Eigen::LLT<Eigen::MatrixXd> llt(gram);
    if (llt.info() != Eigen::Success || (opt.regularization == 0.0 && llt.rcond() < opt.singular_rcond)) {
        throw NumericalError("fit_predictor: Gram matrix is numerically singular; use a positive regularization");
    }
    return llt.solve(rhs).transpose();
}

}  // namespace detail

/// Least-squares fit of (A, B) and C from a dataset through the Gram-matrix normal equations.
inline LiftedPredictor fit_predictor(const Dataset& ds, const FitOptions& opt = {}, double T_s = 0.05) {
    ds.validate();
    if (ds.size() < 1) throw std::invalid_argument("fit_predictor: empty dataset");
    if (opt.regularization < 0.0) throw std::invalid_argument("fit_predictor: regularization must be >= 0");

    const auto [X_lift, Y_lift] = lift_dataset(ds);
    const Eigen::Index N = X_lift.rows();
    const Eigen::Index m = ds.U.rows();

    Eigen::MatrixXd W(N + m, ds.size());
    W << X_lift, ds.U;
    const Eigen::MatrixXd AB = detail::ridge_solve(Y_lift, W, opt);

    LiftedPredictor model;
    model.A = AB.leftCols(N);
    model.B = AB.rightCols(m);
    model.C = detail::ridge_solve(ds.X, X_lift, opt);
    model.embedding = Embedding::for_generators(ds.X.rows() / 2);
    model.T_s = T_s;
    model.regularization = opt.regularization;
    model.residuals.dynamics = (Y_lift - AB * W).norm();
    model.residuals.output = (ds.X - model.C * X_lift).norm();
    model.residuals.samples = ds.size();
    return model;
}

/// x_hat_0 .. x_hat_L for L = inputs.size(): z_0 = psi(x0), z_{i+1} = A z_i + B u_i, x_hat_i = C z_i.
inline std::vector<Eigen::VectorXd> predict(const LiftedPredictor& model, const Eigen::VectorXd& x0,
                                            const std::vector<Eigen::VectorXd>& inputs) {
    model.validate();
    detail::require_size("predict: x0", x0.size(), model.state_dim());
    Eigen::VectorXd z = embed(x0);
    std::vector<Eigen::VectorXd> out;
    out.reserve(inputs.size() + 1);
    out.push_back(model.C * z);
    for (const auto& u : inputs) {
        detail::require_size("predict: input", u.size(), model.input_dim());
        z = model.A * z + model.B * u;
        out.push_back(model.C * z);
    }
    return out;
}

}  // namespace kmpc
