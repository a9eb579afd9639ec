#pragma once

#include "grouped_glm/dataset.hpp"
#include "grouped_glm/family.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

namespace testutil {

using grouped_glm::FamilyKind;
using grouped_glm::FamilySpec;
using grouped_glm::GroupedDataset;

struct Raw {
    Eigen::VectorXd y;
    Eigen::MatrixXd x;
    std::vector<std::int64_t> ids;
};

// Random-intercept data drawn with the standard library, independent of the package RNG.
inline Raw random_intercept_data(FamilyKind kind, int groups, int per_group, unsigned seed, double beta0 = 0.3,
                                 double beta1 = 0.8, double omega = 0.8, double sigma = 1.0) {
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> n01(0.0, 1.0);
    std::uniform_int_distribution<int> extra(0, 2);
    Raw r;
    std::vector<double> ys;
    std::vector<double> xs;
    for (int g = 0; g < groups; ++g) {
        const double gamma = omega * n01(gen);
        const int n = per_group + extra(gen);
        for (int i = 0; i < n; ++i) {
            const double x = 0.5 * gamma + n01(gen);
            const double eta = beta0 + beta1 * x + gamma;
            double y = 0.0;
            if (kind == FamilyKind::Gaussian) {
                y = eta + sigma * n01(gen);
            } else if (kind == FamilyKind::Bernoulli) {
                y = std::bernoulli_distribution(1.0 / (1.0 + std::exp(-eta)))(gen) ? 1.0 : 0.0;
            } else {
                y = static_cast<double>(std::poisson_distribution<int>(std::exp(eta))(gen));
            }
            ys.push_back(y);
            xs.push_back(x);
            r.ids.push_back(100 + 7 * g);
        }
    }
    const auto n = static_cast<Eigen::Index>(ys.size());
    r.y = Eigen::Map<Eigen::VectorXd>(ys.data(), n);
    r.x.resize(n, 2);
    r.x.col(0).setOnes();
    r.x.col(1) = Eigen::Map<Eigen::VectorXd>(xs.data(), n);
    return r;
}

inline GroupedDataset make(const Raw& r, std::vector<int> z_cols = {}) {
    return GroupedDataset::build(r.y, r.x, r.ids, std::move(z_cols));
}

inline FamilySpec family_of(FamilyKind k) {
    switch (k) {
        case FamilyKind::Gaussian: return FamilySpec::gaussian(1.0);
        case FamilyKind::Bernoulli: return FamilySpec::bernoulli();
        default: return FamilySpec::poisson();
    }
}

// Per-observation log-likelihood written out directly.
inline double obs_loglik(FamilyKind kind, double y, double eta, double sigma_sq = 1.0) {
    switch (kind) {
        case FamilyKind::Gaussian:
            return -0.5 * std::log(2.0 * M_PI * sigma_sq) - (y - eta) * (y - eta) / (2.0 * sigma_sq);
        case FamilyKind::Bernoulli: {
            const double p = 1.0 / (1.0 + std::exp(-eta));
            return y * std::log(p) + (1.0 - y) * std::log1p(-p);
        }
        case FamilyKind::Poisson: return y * eta - std::exp(eta) - std::lgamma(y + 1.0);
    }
    return 0.0;
}

// Plain Nelder-Mead simplex search.
inline Eigen::VectorXd nelder_mead(const std::function<double(const Eigen::VectorXd&)>& f, Eigen::VectorXd x0,
                                   double step = 0.5, int max_iter = 20000, double tol = 1e-14) {
    const int n = static_cast<int>(x0.size());
    std::vector<Eigen::VectorXd> pts(static_cast<std::size_t>(n + 1), x0);
    std::vector<double> vals(static_cast<std::size_t>(n + 1));
    for (int i = 0; i < n; ++i) pts[static_cast<std::size_t>(i + 1)](i) += step;
    for (int i = 0; i <= n; ++i) vals[static_cast<std::size_t>(i)] = f(pts[static_cast<std::size_t>(i)]);
    for (int it = 0; it < max_iter; ++it) {
        std::vector<int> idx(static_cast<std::size_t>(n + 1));
        for (int i = 0; i <= n; ++i) idx[static_cast<std::size_t>(i)] = i;
        std::sort(idx.begin(), idx.end(), [&](int a, int b) { return vals[a] < vals[b]; });
        std::vector<Eigen::VectorXd> p2;
        std::vector<double> v2;
        for (int i : idx) {
            p2.push_back(pts[static_cast<std::size_t>(i)]);
            v2.push_back(vals[static_cast<std::size_t>(i)]);
        }
        pts = p2;
        vals = v2;
        if (std::abs(vals[static_cast<std::size_t>(n)] - vals[0]) < tol * (1.0 + std::abs(vals[0]))) {
            double spread = 0.0;
            for (int i = 1; i <= n; ++i) spread = std::max(spread, (pts[static_cast<std::size_t>(i)] - pts[0]).cwiseAbs().maxCoeff());
            if (spread < 1e-9) break;
        }
        Eigen::VectorXd centroid = Eigen::VectorXd::Zero(n);
        for (int i = 0; i < n; ++i) centroid += pts[static_cast<std::size_t>(i)];
        centroid /= n;
        const Eigen::VectorXd& worst = pts[static_cast<std::size_t>(n)];
        const Eigen::VectorXd xr = centroid + (centroid - worst);
        const double fr = f(xr);
        if (fr < vals[0]) {
            const Eigen::VectorXd xe = centroid + 2.0 * (centroid - worst);
            const double fe = f(xe);
            if (fe < fr) {
                pts[static_cast<std::size_t>(n)] = xe;
                vals[static_cast<std::size_t>(n)] = fe;
            } else {
                pts[static_cast<std::size_t>(n)] = xr;
                vals[static_cast<std::size_t>(n)] = fr;
            }
        } else if (fr < vals[static_cast<std::size_t>(n - 1)]) {
            pts[static_cast<std::size_t>(n)] = xr;
            vals[static_cast<std::size_t>(n)] = fr;
        } else {
            const Eigen::VectorXd xc = centroid + 0.5 * (worst - centroid);
            const double fc = f(xc);
            if (fc < vals[static_cast<std::size_t>(n)]) {
                pts[static_cast<std::size_t>(n)] = xc;
                vals[static_cast<std::size_t>(n)] = fc;
            } else {
                for (int i = 1; i <= n; ++i) {
                    pts[static_cast<std::size_t>(i)] = pts[0] + 0.5 * (pts[static_cast<std::size_t>(i)] - pts[0]);
                    vals[static_cast<std::size_t>(i)] = f(pts[static_cast<std::size_t>(i)]);
                }
            }
        }
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < vals.size(); ++i) {
        if (vals[i] < vals[best]) best = i;
    }
    return pts[best];
}

// Repeated restarts make Nelder-Mead reliable enough for an oracle.
inline Eigen::VectorXd nelder_mead_restarts(const std::function<double(const Eigen::VectorXd&)>& f,
                                            Eigen::VectorXd x0, int restarts = 6) {
    double step = 0.5;
    for (int r = 0; r < restarts; ++r) {
        x0 = nelder_mead(f, x0, step);
        step *= 0.3;
    }
    return x0;
}

// Trapezoid rule over [lo, hi] with `points` nodes.
inline double trapezoid(const std::function<double(double)>& f, double lo, double hi, int points) {
    const double h = (hi - lo) / (points - 1);
    double s = 0.5 * (f(lo) + f(hi));
    for (int k = 1; k < points - 1; ++k) s += f(lo + k * h);
    return s * h;
}

// Rows of stored group g, test-side.
inline std::vector<int> rows_of(const GroupedDataset& ds, int g) {
    std::vector<int> out;
    for (int i = 0; i < ds.n_obs(); ++i) {
        if (ds.group_of(i) == g) out.push_back(i);
    }
    return out;
}

// The trapezoid rule converges geometrically for these smooth integrands, so
// coarser grids are fine inside optimiser loops.
inline double trapezoid_loglik(const GroupedDataset& ds, FamilyKind kind, const Eigen::VectorXd& beta,
                               double omega_sq, int points = 20000) {
    const Eigen::VectorXd eta = ds.x() * beta;
    double total = 0.0;
    for (int g = 0; g < ds.n_groups(); ++g) {
        const auto rows = rows_of(ds, g);
        auto log_f = [&](double gamma) {
            double s = -0.5 * std::log(2 * M_PI * omega_sq) - gamma * gamma / (2 * omega_sq);
            for (int i : rows) s += obs_loglik(kind, ds.y()(i), eta(i) + gamma);
            return s;
        };
        // shift by the grid maximum to keep the exponentials in range
        const double half = 10.0 + 8.0 * std::sqrt(omega_sq);
        const int n_pts = static_cast<int>(points * half / 10.0);
        double peak = -1e300;
        for (int k = 0; k <= 200; ++k) peak = std::max(peak, log_f(-half + k * half / 100.0));
        const double area = trapezoid([&](double gm) { return std::exp(log_f(gm) - peak); }, -half, half, n_pts);
        total += peak + std::log(area);
    }
    return total;
}

inline double gaussian_marginal(const GroupedDataset& ds, const Eigen::VectorXd& beta, double omega_sq,
                                double sigma_sq) {
    double total = 0.0;
    const Eigen::VectorXd r = ds.y() - ds.x() * beta;
    for (int g = 0; g < ds.n_groups(); ++g) {
        const auto rows = rows_of(ds, g);
        const int n = static_cast<int>(rows.size());
        Eigen::MatrixXd v = sigma_sq * Eigen::MatrixXd::Identity(n, n) + omega_sq * Eigen::MatrixXd::Ones(n, n);
        Eigen::VectorXd rg(n);
        for (int k = 0; k < n; ++k) rg(k) = r(rows[static_cast<std::size_t>(k)]);
        const Eigen::LLT<Eigen::MatrixXd> llt(v);
        const Eigen::MatrixXd l = llt.matrixL();
        const double logdet = 2.0 * l.diagonal().array().log().sum();
        total += -0.5 * (n * std::log(2 * M_PI) + logdet + rg.dot(llt.solve(rg)));
    }
    return total;
}

// Cluster sandwich of an unpenalised canonical-link fit written from scratch:
// bread sum v(mu) u u', meat sum_g (sum_i u_i (y_i - mu_i))(...)'.
inline Eigen::MatrixXd cluster_sandwich(const Eigen::MatrixXd& u, const Eigen::VectorXd& y,
                                        const Eigen::VectorXd& mu, const Eigen::VectorXd& w,
                                        const std::vector<int>& cluster, int n_clusters,
                                        const Eigen::MatrixXd& ridge) {
    const Eigen::MatrixXd bread = (u.transpose() * w.asDiagonal() * u + ridge).inverse();
    Eigen::MatrixXd scores = Eigen::MatrixXd::Zero(n_clusters, u.cols());
    for (Eigen::Index i = 0; i < u.rows(); ++i) scores.row(cluster[static_cast<std::size_t>(i)]) += u.row(i) * (y(i) - mu(i));
    return bread * (scores.transpose() * scores) * bread;
}

inline std::vector<int> clusters_of(const GroupedDataset& ds) {
    std::vector<int> c;
    for (int i = 0; i < ds.n_obs(); ++i) c.push_back(ds.group_of(i));
    return c;
}

}  // namespace testutil
