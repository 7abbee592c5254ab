#pragma once

// Dense parametric QP
//
//     minimize    U^T H U + z0^T G U
//     subject to  L U + M z0 <= c
//
// and a primal active-set solver for it. H must be positive semidefinite; it is
// shifted by a small multiple of the identity when it is not numerically
// positive definite so the solver can work with a fixed Cholesky inverse.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "kmpc/errors.hpp"

namespace kmpc {

struct QpDims {
    Eigen::Index N = 0;    ///< lifted state dimension (length of z0)
    Eigen::Index m = 0;    ///< inputs per step
    Eigen::Index N_p = 0;  ///< horizon
};

class DenseQP {
public:
    /// Shift added to H when it is only semidefinite.
    static constexpr double kHessianShift = 1e-9;

    DenseQP() = default;

    DenseQP(Eigen::MatrixXd H, Eigen::MatrixXd G, Eigen::MatrixXd L, Eigen::MatrixXd M, Eigen::VectorXd c,
            QpDims dims)
        : H_(std::move(H)), G_(std::move(G)), L_(std::move(L)), M_(std::move(M)), c_(std::move(c)), dims_(dims) {
        const Eigen::Index nu = dims_.m * dims_.N_p;
        detail::require_size("DenseQP.H rows", H_.rows(), nu);
        detail::require_size("DenseQP.H cols", H_.cols(), nu);
        detail::require_size("DenseQP.G rows", G_.rows(), dims_.N);
        detail::require_size("DenseQP.G cols", G_.cols(), nu);
        detail::require_size("DenseQP.L cols", L_.cols(), nu);
        detail::require_size("DenseQP.M rows", M_.rows(), L_.rows());
        detail::require_size("DenseQP.M cols", M_.cols(), dims_.N);
        detail::require_size("DenseQP.c", c_.size(), L_.rows());
        if ((H_ - H_.transpose()).cwiseAbs().maxCoeff() > 1e-9 * std::max(1.0, H_.cwiseAbs().maxCoeff())) {
            throw std::invalid_argument("DenseQP.H must be symmetric");
        }
        factor();
        classify_rows();
    }

    const Eigen::MatrixXd& H() const noexcept { return H_; }
    const Eigen::MatrixXd& G() const noexcept { return G_; }
    const Eigen::MatrixXd& L() const noexcept { return L_; }
    const Eigen::MatrixXd& M() const noexcept { return M_; }
    const Eigen::VectorXd& c() const noexcept { return c_; }
    const QpDims& dims() const noexcept { return dims_; }

    Eigen::Index n_vars() const noexcept { return H_.rows(); }
    Eigen::Index n_rows() const noexcept { return L_.rows(); }

    /// Inverse of the (possibly shifted) objective Hessian 2H.
    const Eigen::MatrixXd& hessian_inverse() const noexcept { return P_inv_; }
    double hessian_shift() const noexcept { return shift_; }

    /// For rows of the form +-U_j <= rhs: the variable index j, else -1.
    const std::vector<Eigen::Index>& bound_index() const noexcept { return bound_index_; }
    const std::vector<double>& bound_sign() const noexcept { return bound_sign_; }

    double objective(const Eigen::VectorXd& U, const Eigen::VectorXd& z0) const {
        return U.dot(H_ * U) + z0.dot(G_ * U);
    }

    /// Right-hand side c - M z0 of the inequalities for a given parameter.
    Eigen::VectorXd rhs(const Eigen::VectorXd& z0) const {
        Eigen::VectorXd d = c_;
        for (Eigen::Index i : parametric_rows_) d(i) -= M_.row(i).dot(z0);
        return d;
    }

private:
    void factor() {
        const Eigen::Index n = H_.rows();
        Eigen::MatrixXd P = 2.0 * H_;
        Eigen::LLT<Eigen::MatrixXd> llt(P);
        if (llt.info() != Eigen::Success || llt.rcond() < 1e-13) {
            shift_ = kHessianShift;
            P.diagonal().array() += 2.0 * shift_;
            llt.compute(P);
            if (llt.info() != Eigen::Success) {
                throw std::invalid_argument("DenseQP.H is not positive semidefinite");
            }
        }
        P_inv_ = llt.solve(Eigen::MatrixXd::Identity(n, n));
        P_inv_ = 0.5 * (P_inv_ + P_inv_.transpose()).eval();
    }

    void classify_rows() {
        for (Eigen::Index i = 0; i < M_.rows(); ++i) {
            if ((M_.row(i).array() != 0.0).any()) parametric_rows_.push_back(i);
        }
        bound_index_.assign(static_cast<std::size_t>(L_.rows()), -1);
        bound_sign_.assign(static_cast<std::size_t>(L_.rows()), 0.0);
        for (Eigen::Index i = 0; i < L_.rows(); ++i) {
            Eigen::Index nz = -1;
            int count = 0;
            for (Eigen::Index j = 0; j < L_.cols(); ++j) {
                if (L_(i, j) != 0.0) {
                    nz = j;
                    ++count;
                }
            }
            if (count == 1 && std::abs(L_(i, nz)) == 1.0) {
                bound_index_[static_cast<std::size_t>(i)] = nz;
                bound_sign_[static_cast<std::size_t>(i)] = L_(i, nz);
            }
        }
    }

    Eigen::MatrixXd H_, G_, L_, M_;
    Eigen::VectorXd c_;
    QpDims dims_;
    Eigen::MatrixXd P_inv_;
    double shift_ = 0.0;
    std::vector<Eigen::Index> bound_index_;
    std::vector<double> bound_sign_;
    std::vector<Eigen::Index> parametric_rows_;  ///< rows with a nonzero M entry
};

enum class QpStatus { solved, max_iterations, infeasible, inaccurate };

inline const char* to_string(QpStatus s) {
    switch (s) {
        case QpStatus::solved: return "solved";
        case QpStatus::max_iterations: return "max-iterations";
        case QpStatus::infeasible: return "infeasible";
        case QpStatus::inaccurate: return "inaccurate";
    }
    return "unknown";
}

struct KktResiduals {
    double stationarity = 0.0;     ///< ||2HU + G^T z0 + L^T lambda||_inf
    double primal = 0.0;           ///< ||max(LU + M z0 - c, 0)||_inf
    double dual = 0.0;             ///< ||min(lambda, 0)||_inf
    double complementarity = 0.0;  ///< ||lambda .* (LU + M z0 - c)||_inf

    double max() const { return std::max({stationarity, primal, dual, complementarity}); }
};

struct QpSolution {
    Eigen::VectorXd U;
    Eigen::VectorXd lambda;
    double objective = 0.0;
    QpStatus status = QpStatus::max_iterations;
    int iterations = 0;
    KktResiduals kkt;
    Eigen::Index violated_row = -1;  ///< set when status == infeasible
    std::vector<Eigen::Index> active_set;
};

struct QpOptions {
    double kkt_tolerance = 1e-6;
    double feasibility_tolerance = 1e-9;
    int max_iterations = 0;  ///< 0 = 10 * (variables + rows)
};

inline KktResiduals kkt_residuals(const DenseQP& qp, const Eigen::VectorXd& z0, const Eigen::VectorXd& U,
                                  const Eigen::VectorXd& lambda) {
    detail::require_size("kkt_residuals: U", U.size(), qp.n_vars());
    detail::require_size("kkt_residuals: lambda", lambda.size(), qp.n_rows());
    detail::require_size("kkt_residuals: z0", z0.size(), qp.dims().N);
    KktResiduals r;
    const Eigen::VectorXd grad = 2.0 * qp.H() * U + qp.G().transpose() * z0 + qp.L().transpose() * lambda;
    r.stationarity = grad.lpNorm<Eigen::Infinity>();
    if (qp.n_rows() > 0) {
        const Eigen::VectorXd slack = qp.L() * U - qp.rhs(z0);
        r.primal = slack.cwiseMax(0.0).lpNorm<Eigen::Infinity>();
        r.dual = lambda.cwiseMin(0.0).cwiseAbs().lpNorm<Eigen::Infinity>();
        r.complementarity = lambda.cwiseProduct(slack).lpNorm<Eigen::Infinity>();
    }
    return r;
}

/// Previous horizon solution advanced by one step; the last input block is repeated.
inline Eigen::VectorXd shift_solution(const Eigen::VectorXd& U, Eigen::Index m) {
    if (m <= 0 || U.size() % m != 0) throw DimensionError("shift_solution: length not a multiple of m");
    Eigen::VectorXd out(U.size());
    const Eigen::Index n = U.size();
    out.head(n - m) = U.tail(n - m);
    out.tail(m) = U.tail(m);
    return out;
}

namespace detail {

/// Rows of an inequality system a_i^T x <= d_i, with optional single-variable shortcut.
struct RowSet {
    const Eigen::MatrixXd* A = nullptr;
    const std::vector<Eigen::Index>* bound_index = nullptr;
    const std::vector<double>* bound_sign = nullptr;

    Eigen::Index bound(Eigen::Index i) const {
        return bound_index == nullptr ? -1 : (*bound_index)[static_cast<std::size_t>(i)];
    }
    double sign(Eigen::Index i) const { return (*bound_sign)[static_cast<std::size_t>(i)]; }

    double dot(Eigen::Index i, const Eigen::VectorXd& v) const {
        const Eigen::Index b = bound(i);
        return b >= 0 ? sign(i) * v(b) : A->row(i).dot(v);
    }
};

struct CoreResult {
    Eigen::VectorXd x;
    Eigen::VectorXd lambda;
    std::vector<Eigen::Index> working;
    int iterations = 0;
    bool converged = false;
};

/// Keeps a linearly independent subset of candidate rows (modified Gram-Schmidt on the row vectors).
inline std::vector<Eigen::Index> independent_rows(const RowSet& rows, const std::vector<Eigen::Index>& cand,
                                                  Eigen::Index n) {
    std::vector<Eigen::Index> keep;
    std::vector<Eigen::VectorXd> basis;
    std::vector<bool> used_bound(static_cast<std::size_t>(n), false);
    for (Eigen::Index i : cand) {
        const Eigen::Index b = rows.bound(i);
        if (b >= 0 && basis.empty()) {
            if (used_bound[static_cast<std::size_t>(b)]) continue;
            used_bound[static_cast<std::size_t>(b)] = true;
            keep.push_back(i);
            continue;
        }
        Eigen::VectorXd v = b >= 0 ? Eigen::VectorXd(Eigen::VectorXd::Unit(n, b) * rows.sign(i))
                                   : Eigen::VectorXd(rows.A->row(i).transpose());
        if (basis.empty()) {
            // materialize the pure-bound rows accepted so far
            for (Eigen::Index k : keep) basis.push_back(Eigen::VectorXd::Unit(n, rows.bound(k)));
        }
        const double norm0 = v.norm();
        if (norm0 == 0.0) continue;
        for (const auto& q : basis) v -= q.dot(v) * q;
        if (v.norm() <= 1e-10 * norm0) continue;
        basis.push_back(v / v.norm());
        keep.push_back(i);
    }
    return keep;
}

/// Primal active-set iterations for  min 1/2 x^T P x + q^T x  s.t.  rows x <= d, from a feasible x.
inline CoreResult active_set_core(const Eigen::MatrixXd& P, const Eigen::MatrixXd& P_inv, const Eigen::VectorXd& q,
                                  const RowSet& rows, Eigen::Index n_rows, const Eigen::VectorXd& d,
                                  Eigen::VectorXd x, std::vector<Eigen::Index> working, int max_iter) {
    const Eigen::Index n = x.size();
    CoreResult out;
    std::vector<bool> in_w(static_cast<std::size_t>(n_rows), false);
    for (Eigen::Index i : working) in_w[static_cast<std::size_t>(i)] = true;

    const double xscale = std::max(1.0, x.lpNorm<Eigen::Infinity>());
    Eigen::VectorXd lam_w;
    for (int it = 0; it < max_iter; ++it) {
        out.iterations = it + 1;
        const Eigen::VectorXd g = P * x + q;
        const Eigen::VectorXd Pg = P_inv * g;
        const auto w = static_cast<Eigen::Index>(working.size());

        Eigen::VectorXd p = -Pg;
        lam_w.resize(w);
        if (w > 0) {
            // Y = P^-1 A_W^T,  S = A_W Y,  lambda = -S^-1 A_W P^-1 g,  p = -P^-1 g - Y lambda
            Eigen::MatrixXd Y(n, w);
            for (Eigen::Index k = 0; k < w; ++k) {
                const Eigen::Index i = working[static_cast<std::size_t>(k)];
                const Eigen::Index b = rows.bound(i);
                if (b >= 0) {
                    Y.col(k) = rows.sign(i) * P_inv.col(b);
                } else {
                    Y.col(k) = P_inv * rows.A->row(i).transpose();
                }
            }
            Eigen::MatrixXd S(w, w);
            Eigen::VectorXd rhs(w);
            for (Eigen::Index a = 0; a < w; ++a) {
                const Eigen::Index i = working[static_cast<std::size_t>(a)];
                const Eigen::Index b = rows.bound(i);
                if (b >= 0) {
                    S.row(a) = rows.sign(i) * Y.row(b);
                    rhs(a) = -rows.sign(i) * Pg(b);
                } else {
                    S.row(a) = rows.A->row(i) * Y;
                    rhs(a) = -rows.A->row(i).dot(Pg);
                }
            }
            S = 0.5 * (S + S.transpose()).eval();
            lam_w = S.ldlt().solve(rhs);
            p.noalias() -= Y * lam_w;
        }

        if (p.lpNorm<Eigen::Infinity>() <= 1e-11 * std::max(xscale, Pg.lpNorm<Eigen::Infinity>())) {
            Eigen::Index worst = -1;
            double most_negative = -1e-12 * std::max(1.0, lam_w.size() > 0 ? lam_w.cwiseAbs().maxCoeff() : 0.0);
            for (Eigen::Index k = 0; k < w; ++k) {
                if (lam_w(k) < most_negative) {
                    most_negative = lam_w(k);
                    worst = k;
                }
            }
            if (worst < 0) {
                out.converged = true;
                break;
            }
            in_w[static_cast<std::size_t>(working[static_cast<std::size_t>(worst)])] = false;
            working.erase(working.begin() + worst);
            continue;
        }

        double alpha = 1.0;
        Eigen::Index blocking = -1;
        for (Eigen::Index i = 0; i < n_rows; ++i) {
            if (in_w[static_cast<std::size_t>(i)]) continue;
            const double ap = rows.dot(i, p);
            if (ap <= 1e-14) continue;
            const double ratio = std::max(0.0, (d(i) - rows.dot(i, x)) / ap);
            if (ratio < alpha) {
                alpha = ratio;
                blocking = i;
            }
        }
        x.noalias() += alpha * p;
        if (blocking >= 0) {
            working.push_back(blocking);
            in_w[static_cast<std::size_t>(blocking)] = true;
        }
    }

    out.x = std::move(x);
    out.lambda = Eigen::VectorXd::Zero(n_rows);
    if (out.converged) {
        for (std::size_t k = 0; k < working.size(); ++k) out.lambda(working[k]) = lam_w(static_cast<Eigen::Index>(k));
    }
    out.working = std::move(working);
    return out;
}

/// Finds x with rows x <= d close to x0, or reports the smallest achievable maximal violation.
inline Eigen::VectorXd feasible_point(const DenseQP& qp, const Eigen::VectorXd& d, const Eigen::VectorXd& x0,
                                      double& violation, int max_iter) {
    const Eigen::Index n = qp.n_vars();
    const Eigen::Index r = qp.n_rows();
    // exact penalty on unit-norm rows:  min mu t + 1/2 (|x - x0|^2 + t^2)  s.t.  a_i x - t <= d_i,  -t <= 0
    constexpr double mu = 1e5;
    Eigen::MatrixXd A = Eigen::MatrixXd::Zero(r + 1, n + 1);
    Eigen::VectorXd d1 = Eigen::VectorXd::Zero(r + 1);
    for (Eigen::Index i = 0; i < r; ++i) {
        const double norm = qp.L().row(i).norm();
        const double s = norm > 0.0 ? 1.0 / norm : 1.0;
        A.row(i).head(n) = s * qp.L().row(i);
        d1(i) = s * d(i);
    }
    A.col(n).head(r).setConstant(-1.0);
    A(r, n) = -1.0;
    const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n + 1, n + 1);
    Eigen::VectorXd q(n + 1);
    q.head(n) = -x0;
    q(n) = mu;
    Eigen::VectorXd start(n + 1);
    start.head(n) = x0;
    start(n) = std::max(0.0, (A.topLeftCorner(r, n) * x0 - d1.head(r)).maxCoeff()) + 1.0;
    RowSet rows{&A, nullptr, nullptr};
    const auto res = active_set_core(I, I, q, rows, r + 1, d1, start, {}, max_iter);
    Eigen::VectorXd x = res.x.head(n);
    violation = r > 0 ? std::max(0.0, (qp.L() * x - d).maxCoeff()) : 0.0;
    return x;
}

}  // namespace detail

/// Solves the dense QP for parameter z0. When `previous` holds the solution of the preceding
/// sampling instant, it is shifted by one step and used as the starting iterate and working set.
inline QpSolution solve_qp(const DenseQP& qp, const Eigen::VectorXd& z0,
                           const std::optional<Eigen::VectorXd>& previous = std::nullopt, const QpOptions& opt = {}) {
    detail::require_size("solve_qp: z0", z0.size(), qp.dims().N);
    const Eigen::Index n = qp.n_vars();
    const Eigen::Index r = qp.n_rows();
    const int max_iter = opt.max_iterations > 0 ? opt.max_iterations : static_cast<int>(10 * (n + r) + 10);

    const Eigen::VectorXd q = qp.G().transpose() * z0;
    const Eigen::VectorXd d = qp.rhs(z0);
    const detail::RowSet rows{&qp.L(), &qp.bound_index(), &qp.bound_sign()};

    QpSolution sol;
    Eigen::VectorXd x;
    if (previous.has_value()) {
        detail::require_size("solve_qp: warm start", previous->size(), n);
        x = shift_solution(*previous, std::max<Eigen::Index>(1, qp.dims().m));
    } else {
        x = -(qp.hessian_inverse() * q);
    }

    const bool all_bounds = std::all_of(qp.bound_index().begin(), qp.bound_index().end(),
                                        [](Eigen::Index b) { return b >= 0; });
    const double ftol = opt.feasibility_tolerance;
    if (all_bounds) {
        // project onto the box; a crossed pair of bounds means the box is empty
        for (Eigen::Index i = 0; i < r; ++i) {
            const Eigen::Index b = rows.bound(i);
            const double lim = rows.sign(i) * d(i);
            x(b) = rows.sign(i) > 0 ? std::min(x(b), lim) : std::max(x(b), lim);
        }
    }
    if (r > 0) {
        double viol = std::max(0.0, (qp.L() * x - d).maxCoeff());
        if (viol > ftol) {
            x = detail::feasible_point(qp, d, x, viol, max_iter);
            if (viol > 10.0 * ftol * std::max(1.0, d.lpNorm<Eigen::Infinity>())) {
                sol.status = QpStatus::infeasible;
                (qp.L() * x - d).maxCoeff(&sol.violated_row);
                sol.U = x;
                sol.lambda = Eigen::VectorXd::Zero(r);
                sol.objective = qp.objective(x, z0);
                sol.kkt = kkt_residuals(qp, z0, sol.U, sol.lambda);
                return sol;
            }
        }
    }

    std::vector<Eigen::Index> candidates;
    if (r > 0) {
        const Eigen::VectorXd slack = d - qp.L() * x;
        const double atol = std::max(ftol, 1e-12 * std::max(1.0, d.lpNorm<Eigen::Infinity>()));
        for (Eigen::Index i = 0; i < r; ++i) {
            if (std::abs(slack(i)) <= atol) candidates.push_back(i);
        }
    }
    auto working = detail::independent_rows(rows, candidates, n);

    Eigen::MatrixXd P = 2.0 * qp.H();
    P.diagonal().array() += 2.0 * qp.hessian_shift();
    auto core = detail::active_set_core(P, qp.hessian_inverse(), q, rows, r, d, std::move(x), std::move(working),
                                        max_iter);

    sol.U = std::move(core.x);
    // active simple bounds hold exactly rather than to rounding
    for (Eigen::Index i : core.working) {
        const Eigen::Index b = rows.bound(i);
        if (b >= 0) sol.U(b) = rows.sign(i) * d(i);
    }
    sol.lambda = std::move(core.lambda);
    sol.iterations = core.iterations;
    sol.objective = qp.objective(sol.U, z0);
    sol.active_set = std::move(core.working);
    sol.kkt = kkt_residuals(qp, z0, sol.U, sol.lambda);
    if (!core.converged) {
        sol.status = QpStatus::max_iterations;
    } else {
        sol.status = sol.kkt.max() <= opt.kkt_tolerance ? QpStatus::solved : QpStatus::inaccurate;
    }
    return sol;
}

}  // namespace kmpc
