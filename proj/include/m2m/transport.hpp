#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "m2m/common.hpp"
#include "m2m/pointcloud.hpp"

namespace m2m {

// Pairwise cost matrix C_jk = ||x_j - y_k||^p for p in {1, 2}.
inline Mat cost_matrix(const Mat& x, const Mat& y, int p) {
    if (x.cols() != y.cols()) throw ShapeError("cost_matrix: dimension mismatch");
    if (p != 1 && p != 2) throw ValueError("cost_matrix: p must be 1 or 2");
    Mat sq = (x.rowwise().squaredNorm().replicate(1, y.rows()) +
              y.rowwise().squaredNorm().transpose().replicate(x.rows(), 1) -
              2.0 * x * y.transpose())
                 .cwiseMax(0.0);
    if (p == 2) return sq;
    return sq.cwiseSqrt();
}

struct CouplingPlan {
    enum class Kind { Permutation, Dense };
    Kind kind = Kind::Permutation;
    std::vector<Eigen::Index> perm;  // Permutation: row j of x pairs with row perm[j] of y
    Mat plan;                        // Dense: N x M, rows sum to 1/N, columns to 1/M
    double cost = 0.0;               // Permutation: exact W_p; Dense: entropic cost <plan, C>
    bool converged = true;           // Dense only: marginal tolerance reached
};

namespace detail {

// Shortest-augmenting-path assignment (Jonker-Volgenant style potentials),
// O(n^3). Returns col_of_row: row i is assigned column col_of_row[i].
inline std::vector<Eigen::Index> solve_assignment(const Mat& cost) {
    const Eigen::Index n = cost.rows();
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(n) + 1, 0.0);
    std::vector<Eigen::Index> row_of_col(static_cast<size_t>(n) + 1, 0);  // 1-based, 0 = free
    std::vector<Eigen::Index> way(static_cast<size_t>(n) + 1, 0);
    for (Eigen::Index i = 1; i <= n; ++i) {
        row_of_col[0] = i;
        Eigen::Index j0 = 0;
        std::vector<double> minv(static_cast<size_t>(n) + 1, inf);
        std::vector<char> used(static_cast<size_t>(n) + 1, 0);
        do {
            used[static_cast<size_t>(j0)] = 1;
            Eigen::Index i0 = row_of_col[static_cast<size_t>(j0)], j1 = -1;
            double delta = inf;
            for (Eigen::Index j = 1; j <= n; ++j) {
                if (used[static_cast<size_t>(j)]) continue;
                double cur = cost(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] - v[static_cast<size_t>(j)];
                if (cur < minv[static_cast<size_t>(j)]) {
                    minv[static_cast<size_t>(j)] = cur;
                    way[static_cast<size_t>(j)] = j0;
                }
                if (minv[static_cast<size_t>(j)] < delta) {
                    delta = minv[static_cast<size_t>(j)];
                    j1 = j;
                }
            }
            for (Eigen::Index j = 0; j <= n; ++j) {
                if (used[static_cast<size_t>(j)]) {
                    u[static_cast<size_t>(row_of_col[static_cast<size_t>(j)])] += delta;
                    v[static_cast<size_t>(j)] -= delta;
                } else {
                    minv[static_cast<size_t>(j)] -= delta;
                }
            }
            j0 = j1;
        } while (row_of_col[static_cast<size_t>(j0)] != 0);
        do {
            Eigen::Index j1 = way[static_cast<size_t>(j0)];
            row_of_col[static_cast<size_t>(j0)] = row_of_col[static_cast<size_t>(j1)];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<Eigen::Index> col_of_row(static_cast<size_t>(n));
    for (Eigen::Index j = 1; j <= n; ++j)
        if (row_of_col[static_cast<size_t>(j)] != 0)
            col_of_row[static_cast<size_t>(row_of_col[static_cast<size_t>(j)]) - 1] = j - 1;
    return col_of_row;
}

// Cost-neutral 2-swaps toward the lowest-index permutation among minimizers,
// so exact ties (duplicate points) resolve deterministically.
inline void lexicographic_tiebreak(const Mat& cost, std::vector<Eigen::Index>& perm) {
    const Eigen::Index n = cost.rows();
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i + 1; j < n; ++j) {
            if (perm[static_cast<size_t>(j)] >= perm[static_cast<size_t>(i)]) continue;
            double cur = cost(i, perm[static_cast<size_t>(i)]) + cost(j, perm[static_cast<size_t>(j)]);
            double swapped = cost(i, perm[static_cast<size_t>(j)]) + cost(j, perm[static_cast<size_t>(i)]);
            if (swapped == cur) std::swap(perm[static_cast<size_t>(i)], perm[static_cast<size_t>(j)]);
        }
}

}  // namespace detail

// Minimum-cost perfect matching between equal-size clouds. cost field is the
// exact W_p = (min_perm sum_j ||x_j - y_perm(j)||^p / N)^(1/p).
inline CouplingPlan exact_coupling(const PointCloud& x, const PointCloud& y, int p) {
    if (x.n() != y.n()) throw ShapeError("exact_coupling: clouds must have equal N");
    Mat cost = cost_matrix(x.points, y.points, p);
    CouplingPlan cp;
    cp.kind = CouplingPlan::Kind::Permutation;
    cp.perm = detail::solve_assignment(cost);
    detail::lexicographic_tiebreak(cost, cp.perm);
    double total = 0.0;
    for (Eigen::Index j = 0; j < x.n(); ++j) total += cost(j, cp.perm[static_cast<size_t>(j)]);
    cp.cost = std::pow(total / static_cast<double>(x.n()), 1.0 / p);
    return cp;
}

struct SinkhornOptions {
    double epsilon = 0.0;  // absolute regularization; must be > 0
    int max_iters = 200;
    double tol = 1e-6;  // max marginal violation
};

// Log-domain Sinkhorn on C_jk = ||x_j - y_k||^p with uniform marginals.
// plan_jk = exp((alpha_j + beta_k - C_jk) / epsilon); cost = <plan, C>.
inline CouplingPlan sinkhorn_plan(const PointCloud& x, const PointCloud& y, int p,
                                  const SinkhornOptions& opt) {
    if (opt.epsilon <= 0.0) throw ValueError("sinkhorn_plan: epsilon must be > 0");
    const Eigen::Index n = x.n(), m = y.n();
    const Mat cost = cost_matrix(x.points, y.points, p);
    const double eps = opt.epsilon;
    const double log_a = -std::log(static_cast<double>(n));
    const double log_b = -std::log(static_cast<double>(m));

    Vec alpha = Vec::Zero(n), beta = Vec::Zero(m);
    auto lse_rows = [&](const Mat& s) -> Vec {  // log-sum-exp over each row
        Vec mx = s.rowwise().maxCoeff();
        return (mx.array() +
                ((s.colwise() - mx).array().exp().rowwise().sum()).log())
            .matrix();
    };

    CouplingPlan cp;
    cp.kind = CouplingPlan::Kind::Dense;
    cp.converged = false;
    for (int it = 0; it < opt.max_iters; ++it) {
        // alpha update: row marginals exact afterwards.
        Mat s = ((beta.transpose().replicate(n, 1) - cost) / eps);
        alpha = eps * (Vec::Constant(n, log_a) - lse_rows(s));
        // beta update: column marginals exact afterwards.
        Mat st = ((alpha.replicate(1, m) - cost) / eps).transpose();
        beta = eps * (Vec::Constant(m, log_b) - lse_rows(st));

        Mat logp = ((alpha.replicate(1, m) + beta.transpose().replicate(n, 1) - cost) / eps);
        cp.plan = logp.array().exp().matrix();
        double row_dev = (cp.plan.rowwise().sum().array() - 1.0 / static_cast<double>(n))
                             .abs()
                             .maxCoeff();
        double col_dev = (cp.plan.colwise().sum().array() - 1.0 / static_cast<double>(m))
                             .abs()
                             .maxCoeff();
        if (std::max(row_dev, col_dev) < opt.tol) {
            cp.converged = true;
            break;
        }
    }
    cp.cost = (cp.plan.array() * cost.array()).sum();
    return cp;
}

// Relative default for the entropic regularization: 0.05 x mean cost.
inline double default_sinkhorn_epsilon(const Mat& cost) {
    double mean = cost.mean();
    return std::max(0.05 * mean, 1e-12);
}

// Exact solver when the clouds have equal size up to 256 points; entropic
// approximation (epsilon = 0.05 x mean cost) otherwise.
inline double wasserstein_p(const PointCloud& x, const PointCloud& y, int p) {
    if (x.dim() != y.dim()) throw ShapeError("wasserstein_p: dimension mismatch");
    if (x.n() == y.n() && x.n() <= 256) return exact_coupling(x, y, p).cost;
    Mat cost = cost_matrix(x.points, y.points, p);
    SinkhornOptions opt;
    opt.epsilon = default_sinkhorn_epsilon(cost);
    CouplingPlan cp = sinkhorn_plan(x, y, p, opt);
    return std::pow(std::max(cp.cost, 0.0), 1.0 / p);
}

// Row-aligns a coupled mini-batch: returns y reordered so row j of x is
// matched with row j of the result under the optimal assignment.
inline std::pair<Mat, Mat> minibatch_ot_pairs(const Mat& x_batch, const Mat& y_batch, int p) {
    if (x_batch.rows() != y_batch.rows())
        throw ShapeError("minibatch_ot_pairs: row counts differ");
    CouplingPlan cp = exact_coupling(PointCloud{x_batch}, PointCloud{y_batch}, p);
    Mat y_aligned(y_batch.rows(), y_batch.cols());
    for (Eigen::Index j = 0; j < y_batch.rows(); ++j)
        y_aligned.row(j) = y_batch.row(cp.perm[static_cast<size_t>(j)]);
    return {x_batch, y_aligned};
}

}  // namespace m2m
