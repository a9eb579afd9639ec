#include "grouped_glm/mlm.hpp"

#include "grouped_glm/optimizer.hpp"
#include "grouped_glm/quadrature.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace grouped_glm {

namespace {

constexpr double kBoundary = 1e-10;
constexpr double kNearBoundary = 1e-4;
const double kLogVarianceFloor = std::log(1e-12);
const double kLog2Pi = std::log(2.0 * std::numbers::pi);

// Elementwise log-likelihood pieces for the non-Gaussian kernels; constants
// such as -log(y!) are handled by the caller.
void bernoulli_terms(const Eigen::ArrayXd& y, const Eigen::ArrayXXd& t, Eigen::ArrayXXd& value,
                     Eigen::ArrayXXd* d1) {
    const Eigen::ArrayXXd e = (-t.abs()).exp();
    const Eigen::ArrayXXd softplus = t.max(0.0) + e.log1p();
    value = (t.colwise() * y) - softplus;
    if (d1 != nullptr) {
        const Eigen::ArrayXXd mu = (t >= 0.0).select(1.0 / (1.0 + e), e / (1.0 + e));
        *d1 = (-mu).colwise() + y;
    }
}

void poisson_terms(const Eigen::ArrayXd& y, const Eigen::ArrayXXd& t, Eigen::ArrayXXd& value,
                   Eigen::ArrayXXd* d1) {
    const Eigen::ArrayXXd mu = t.exp();
    value = (t.colwise() * y) - mu;
    if (d1 != nullptr) *d1 = (-mu).colwise() + y;
}

// Log-likelihood kernel without normalising constants, for mode finding.
inline LoglikDerivs kernel_derivs(const FamilySpec& fam, double y, double t) {
    switch (fam.kind) {
        case FamilyKind::Bernoulli: {
            const double e = std::exp(-std::abs(t));
            const double mu = t >= 0.0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
            return {y * t - (std::max(t, 0.0) + std::log1p(e)), y - mu, -e / ((1.0 + e) * (1.0 + e))};
        }
        case FamilyKind::Poisson: {
            const double mu = std::exp(t);
            return {y * t - mu, y - mu, -mu};
        }
        case FamilyKind::Gaussian: {
            const double r = y - t;
            return {-0.5 * r * r / fam.dispersion, r / fam.dispersion, -1.0 / fam.dispersion};
        }
    }
    return {0.0, 0.0, 0.0};
}

double log_sum_exp(const Eigen::ArrayXd& v) {
    const double m = v.maxCoeff();
    if (!std::isfinite(m)) return m;
    return m + std::log((v - m).exp().sum());
}

// Log integrated likelihood of the random-intercept model and its gradient in
// (beta, log omega^2[, log sigma^2]).
class RiLikelihood {
public:
    RiLikelihood(const GroupedDataset& ds, const FamilySpec& family, const QuadratureSpec& quad)
        : ds_(ds), family_(family), quad_(quad), rule_(gauss_hermite(quad.n_nodes)) {
        if (!ds.intercept_only_z()) {
            throw std::invalid_argument("random-intercept likelihood requires an intercept-only random-effect design");
        }
        family.validate();
        quad.validate();
        for (int i = 0; i < ds.n_obs(); ++i) check_outcome(family, ds.y()(i));
        modes_.assign(static_cast<std::size_t>(ds.n_groups()), 0.0);
        group_const_.assign(static_cast<std::size_t>(ds.n_groups()), 0.0);
        if (family.kind == FamilyKind::Poisson) {
            for (int g = 0; g < ds.n_groups(); ++g) {
                double c = 0.0;
                for (int i = ds.group_begin(g); i < ds.group_end(g); ++i) c -= std::lgamma(ds.y()(i) + 1.0);
                group_const_[static_cast<std::size_t>(g)] = c;
            }
        }
    }

    bool gaussian() const { return family_.kind == FamilyKind::Gaussian; }
    int n_params() const { return ds_.n_fixed() + 1 + (gaussian() ? 1 : 0); }

    double value_grad(const Eigen::VectorXd& params, Eigen::VectorXd* grad) {
        const int p = ds_.n_fixed();
        const Eigen::VectorXd beta = params.head(p);
        const double omega_sq = std::exp(params(p));
        const double sigma_sq = gaussian() ? std::exp(params(p + 1)) : family_.dispersion;
        if (grad != nullptr) grad->setZero(n_params());
        if (gaussian()) return gaussian_value(beta, omega_sq, sigma_sq, grad);
        return quadrature_value(beta, omega_sq, grad);
    }

    double value_at(const Eigen::VectorXd& beta, double omega_sq, double sigma_sq) {
        if (gaussian()) return gaussian_value(beta, omega_sq, sigma_sq, nullptr);
        return quadrature_value(beta, omega_sq, nullptr);
    }

    Eigen::VectorXd modes(const Eigen::VectorXd& beta, double omega_sq, double sigma_sq) {
        Eigen::VectorXd out = Eigen::VectorXd::Zero(ds_.n_groups());
        if (omega_sq < kBoundary) return out;
        const Eigen::VectorXd eta = ds_.x() * beta;
        const FamilySpec fam = family_.with_dispersion(sigma_sq);
        for (int g = 0; g < ds_.n_groups(); ++g) {
            out(g) = find_mode(fam, g, eta, omega_sq, 0.0).first;
        }
        return out;
    }

    // Newton maximisation of f(gamma) = sum_i l(eta_i + gamma) - gamma^2 / (2 omega^2);
    // returns (mode, f''(mode)).
    std::pair<double, double> find_mode(const FamilySpec& fam, int g, const Eigen::VectorXd& eta, double omega_sq,
                                        double start) const {
        const int b = ds_.group_begin(g);
        const int m = ds_.group_size(g);
        auto derivs = [&](double gamma, double* value) {
            double s1 = -gamma / omega_sq;
            double s2 = -1.0 / omega_sq;
            double v = -0.5 * gamma * gamma / omega_sq;
            for (int i = b; i < b + m; ++i) {
                const LoglikDerivs d = kernel_derivs(fam, ds_.y()(i), eta(i) + gamma);
                s1 += d.d1;
                s2 += d.d2;
                v += d.value;
            }
            if (value != nullptr) *value = v;
            return std::pair<double, double>{s1, s2};
        };
        double gamma = std::isfinite(start) ? start : 0.0;
        double f_cur = 0.0;
        auto [s1, s2] = derivs(gamma, &f_cur);
        for (int it = 0; it < 200; ++it) {
            double step = -s1 / s2;
            if (!std::isfinite(step)) break;
            double f_new = 0.0;
            auto next = derivs(gamma + step, &f_new);
            int halvings = 0;
            while ((!std::isfinite(f_new) || f_new < f_cur - 1e-12 * std::abs(f_cur)) && halvings < 50) {
                step *= 0.5;
                next = derivs(gamma + step, &f_new);
                ++halvings;
            }
            gamma += step;
            f_cur = f_new;
            s1 = next.first;
            s2 = next.second;
            if (std::abs(step) < 1e-11 * (1.0 + std::abs(gamma)) || std::abs(s1) < 1e-12) break;
        }
        // One more Newton step so the gradient at the returned mode is at round-off level.
        if (std::abs(s1) > 0.0 && std::isfinite(s1 / s2)) {
            gamma -= s1 / s2;
            s2 = derivs(gamma, nullptr).second;
        }
        return {gamma, s2};
    }

private:
    double gaussian_value(const Eigen::VectorXd& beta, double omega_sq, double sigma_sq, Eigen::VectorXd* grad) const {
        const int p = ds_.n_fixed();
        const Eigen::VectorXd r_all = ds_.y() - ds_.x() * beta;
        double total = 0.0;
        double d_omega = 0.0;
        double d_sigma = 0.0;
        for (int g = 0; g < ds_.n_groups(); ++g) {
            const int b = ds_.group_begin(g);
            const int n = ds_.group_size(g);
            const auto r = r_all.segment(b, n);
            const double a = sigma_sq + n * omega_sq;
            const double s = r.sum();
            const double rr = r.squaredNorm();
            const double log_det = (n - 1) * std::log(sigma_sq) + std::log(a);
            const double quad = (rr - omega_sq * s * s / a) / sigma_sq;
            total += -0.5 * (n * kLog2Pi + log_det + quad);
            if (grad != nullptr) {
                const Eigen::VectorXd vinv_r = (r.array() - omega_sq * s / a).matrix() / sigma_sq;
                grad->head(p).noalias() += ds_.x().middleRows(b, n).transpose() * vinv_r;
                d_omega += -0.5 * n / a + 0.5 * (s / a) * (s / a);
                d_sigma += -0.5 * ((n - 1) / sigma_sq + 1.0 / a) + 0.5 * vinv_r.squaredNorm();
            }
        }
        if (grad != nullptr) {
            (*grad)(p) = omega_sq * d_omega;
            (*grad)(p + 1) = sigma_sq * d_sigma;
        }
        return total;
    }

    double quadrature_value(const Eigen::VectorXd& beta, double omega_sq, Eigen::VectorXd* grad) {
        const int p = ds_.n_fixed();
        const Eigen::VectorXd eta = ds_.x() * beta;
        double total = 0.0;
        double d_tau = 0.0;
        for (int g = 0; g < ds_.n_groups(); ++g) {
            double lg = group_value(g, eta, omega_sq, grad, &d_tau);
            if (!std::isfinite(lg)) {
                // Re-centre from zero once before giving up.
                modes_[static_cast<std::size_t>(g)] = 0.0;
                lg = group_value(g, eta, omega_sq, grad, &d_tau);
                if (!std::isfinite(lg)) {
                    throw std::runtime_error("non-finite integrand in group " + std::to_string(ds_.group_label(g)));
                }
            }
            total += lg;
        }
        if (grad != nullptr) (*grad)(p) = d_tau;
        return total;
    }

    double group_value(int g, const Eigen::VectorXd& eta, double omega_sq, Eigen::VectorXd* grad, double* d_tau) {
        const int p = ds_.n_fixed();
        const int b = ds_.group_begin(g);
        const int m = ds_.group_size(g);
        const Eigen::ArrayXd y = ds_.y().segment(b, m).array();
        const Eigen::ArrayXd eta_g = eta.segment(b, m).array();
        const double cst = group_const_[static_cast<std::size_t>(g)];

        if (omega_sq < kBoundary) {
            Eigen::ArrayXXd value;
            Eigen::ArrayXXd d1;
            eval_terms(y, eta_g.matrix(), value, grad != nullptr ? &d1 : nullptr);
            if (grad != nullptr) {
                grad->head(p).noalias() += ds_.x().middleRows(b, m).transpose() * d1.matrix().col(0);
            }
            return value.sum() + cst;
        }

        Eigen::ArrayXd nodes;
        Eigen::ArrayXd log_w;
        double log_scale = 0.0;
        const int k = quad_.n_nodes;
        if (quad_.adaptive) {
            auto& mode = modes_[static_cast<std::size_t>(g)];
            const auto [gamma_hat, curv] = find_mode(family_, g, eta, omega_sq, mode);
            mode = gamma_hat;
            const double s = 1.0 / std::sqrt(-curv);
            nodes = gamma_hat + std::numbers::sqrt2 * s * rule_.nodes.array();
            log_w = rule_.log_scaled_weights.array();
            log_scale = std::log(std::numbers::sqrt2 * s);
        } else {
            nodes = std::numbers::sqrt2 * std::sqrt(omega_sq) * rule_.nodes.array();
            log_w = rule_.weights.array().log() - 0.5 * std::log(std::numbers::pi);
        }

        const Eigen::ArrayXXd t = eta_g.replicate(1, k).rowwise() + nodes.transpose();
        Eigen::ArrayXXd value;
        Eigen::ArrayXXd d1;
        eval_terms(y, t.matrix(), value, grad != nullptr ? &d1 : nullptr);
        Eigen::ArrayXd f = value.colwise().sum().transpose() + cst;
        if (quad_.adaptive) {
            f += -0.5 * nodes.square() / omega_sq - 0.5 * (kLog2Pi + std::log(omega_sq));
        }
        const Eigen::ArrayXd terms = log_w + f;
        const double lse = log_sum_exp(terms);
        if (grad != nullptr && std::isfinite(lse)) {
            const Eigen::VectorXd pi = (terms - lse).exp().matrix();
            const Eigen::VectorXd u = d1.matrix() * pi;
            grad->head(p).noalias() += ds_.x().middleRows(b, m).transpose() * u;
            if (quad_.adaptive) {
                *d_tau += (pi.array() * (-0.5 + 0.5 * nodes.square() / omega_sq)).sum();
                adaptive_node_terms(g, eta_g, omega_sq, nodes, pi, d1, grad, d_tau);
            } else {
                // Nodes scale with omega: d gamma_k / d log omega^2 = gamma_k / 2.
                const Eigen::ArrayXd col_d1 = d1.colwise().sum().transpose();
                *d_tau += (pi.array() * col_d1 * 0.5 * nodes).sum();
            }
        }
        return log_scale + lse;
    }

    // The nodes move with the parameters through the mode and the curvature;
    // adds those chain-rule terms so the gradient matches the AGHQ value exactly.
    void adaptive_node_terms(int g, const Eigen::ArrayXd& eta_g, double omega_sq, const Eigen::ArrayXd& nodes,
                             const Eigen::VectorXd& pi, const Eigen::ArrayXXd& d1, Eigen::VectorXd* grad,
                             double* d_tau) const {
        const int p = ds_.n_fixed();
        const int b = ds_.group_begin(g);
        const int m = ds_.group_size(g);
        const double mode = modes_[static_cast<std::size_t>(g)];
        Eigen::ArrayXd l2(m);
        Eigen::ArrayXd l3(m);
        for (int i = 0; i < m; ++i) {
            const double t = eta_g(i) + mode;
            if (family_.kind == FamilyKind::Bernoulli) {
                const double e = std::exp(-std::abs(t));
                const double mu = t >= 0.0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
                l2(i) = -mu * (1.0 - mu);
                l3(i) = l2(i) * (1.0 - 2.0 * mu);
            } else {
                l2(i) = -std::exp(t);
                l3(i) = l2(i);
            }
        }
        const double h = l2.sum() - 1.0 / omega_sq;
        const double s = 1.0 / std::sqrt(-h);
        // f'(node_k) of the log integrand and d node_k / d s.
        const Eigen::ArrayXd fprime = d1.colwise().sum().transpose() - nodes / omega_sq;
        const Eigen::ArrayXd z = (nodes - mode) / s;
        const double dl_dmode = (pi.array() * fprime).sum();
        const double dl_ds = 1.0 / s + (pi.array() * fprime * z).sum();

        const auto xg = ds_.x().middleRows(b, m);
        const Eigen::VectorXd dmode_dbeta = -(xg.transpose() * l2.matrix()) / h;
        const double dmode_dtau = -(mode / omega_sq) / h;
        Eigen::VectorXd dh_dbeta = xg.transpose() * l3.matrix() + dmode_dbeta * l3.sum();
        const double dh_dtau = l3.sum() * dmode_dtau + 1.0 / omega_sq;
        const double ds_dh = 0.5 * s * s * s;
        grad->head(p) += dl_dmode * dmode_dbeta + dl_ds * ds_dh * dh_dbeta;
        *d_tau += dl_dmode * dmode_dtau + dl_ds * ds_dh * dh_dtau;
    }

    void eval_terms(const Eigen::ArrayXd& y, const Eigen::MatrixXd& t, Eigen::ArrayXXd& value,
                    Eigen::ArrayXXd* d1) const {
        if (family_.kind == FamilyKind::Bernoulli) {
            bernoulli_terms(y, t.array(), value, d1);
        } else {
            poisson_terms(y, t.array(), value, d1);
        }
    }

    const GroupedDataset& ds_;
    FamilySpec family_;
    QuadratureSpec quad_;
    GaussHermiteRule rule_;
    std::vector<double> modes_;
    std::vector<double> group_const_;
};

ValueGradFn negated(RiLikelihood& lik) {
    return [&lik](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
        try {
            const double v = lik.value_grad(x, &g);
            g = -g;
            if (!std::isfinite(v) || !g.allFinite()) return std::numeric_limits<double>::infinity();
            return -v;
        } catch (const std::exception&) {
            g.setZero(x.size());
            return std::numeric_limits<double>::infinity();
        }
    };
}

}  // namespace

void QuadratureSpec::validate() const {
    if (n_nodes < 1) throw std::invalid_argument("quadrature needs at least one node");
}

Eigen::VectorXd MlmFit::parameters() const {
    const bool gaussian = family.kind == FamilyKind::Gaussian;
    Eigen::VectorXd x(beta.size() + 1 + (gaussian ? 1 : 0));
    x.head(beta.size()) = beta;
    x(beta.size()) = std::log(std::max(omega_sq, 1e-12));
    if (gaussian) x(beta.size() + 1) = std::log(theta);
    return x;
}

double integrated_loglik(const GroupedDataset& ds, const FamilySpec& family, const Eigen::VectorXd& beta,
                         double omega_sq, double theta, const QuadratureSpec& quad) {
    if (!(omega_sq >= 0.0)) throw std::invalid_argument("omega_sq must be non-negative");
    if (beta.size() != ds.n_fixed()) throw std::invalid_argument("beta has the wrong length");
    const FamilySpec fam = family.with_dispersion(family.kind == FamilyKind::Gaussian ? theta : 1.0);
    RiLikelihood lik(ds, fam, quad);
    return lik.value_at(beta, omega_sq, fam.dispersion);
}

Eigen::VectorXd integrated_loglik_gradient(const GroupedDataset& ds, const FamilySpec& family,
                                           const Eigen::VectorXd& beta, double omega_sq, double theta,
                                           const QuadratureSpec& quad) {
    if (!(omega_sq > 0.0)) throw std::invalid_argument("omega_sq must be positive");
    if (beta.size() != ds.n_fixed()) throw std::invalid_argument("beta has the wrong length");
    const bool gaussian = family.kind == FamilyKind::Gaussian;
    RiLikelihood lik(ds, family.with_dispersion(gaussian ? theta : 1.0), quad);
    Eigen::VectorXd x(lik.n_params());
    x.head(beta.size()) = beta;
    x(beta.size()) = std::log(omega_sq);
    if (gaussian) x(beta.size() + 1) = std::log(theta);
    Eigen::VectorXd g;
    lik.value_grad(x, &g);
    return g;
}

MlmFit fit_ri_mlm(const GroupedDataset& ds, const FamilySpec& family, const QuadratureSpec& quad,
                  const MlmOptions& options) {
    RiLikelihood lik(ds, family, quad);
    const int p = ds.n_fixed();
    const bool gaussian = family.kind == FamilyKind::Gaussian;

    Eigen::VectorXd x0(lik.n_params());
    const Eigen::MatrixXd* init_hess = nullptr;
    Eigen::MatrixXd warm_inverse;
    if (options.warm_start != nullptr && options.warm_start->beta.size() == p) {
        x0 = options.warm_start->parameters();
        const auto& h = options.warm_start->hessian;
        if (h.rows() == x0.size()) {
            Eigen::LLT<Eigen::MatrixXd> llt(-h);
            if (llt.info() == Eigen::Success) {
                warm_inverse = llt.solve(Eigen::MatrixXd::Identity(h.rows(), h.cols()));
                init_hess = &warm_inverse;
            }
        }
    } else {
        const FitResult pooled = fit_glm(ds, family);
        x0.head(p) = pooled.beta;
        if (gaussian) {
            x0(p) = std::log(0.5 * pooled.theta);
            x0(p + 1) = std::log(0.5 * pooled.theta);
        } else {
            x0(p) = std::log(0.5);
        }
    }

    BfgsOptions bopts;
    bopts.max_iterations = options.max_iterations;
    Eigen::VectorXd lower = Eigen::VectorXd::Constant(x0.size(), -std::numeric_limits<double>::infinity());
    lower(p) = kLogVarianceFloor;
    if (gaussian) lower(p + 1) = kLogVarianceFloor;
    bopts.lower_bounds = lower;

    const ValueGradFn fn = negated(lik);
    const BfgsResult opt = minimize_bfgs(fn, x0, bopts, init_hess);

    MlmFit fit;
    fit.quadrature = quad;
    fit.beta = opt.x.head(p);
    fit.omega_sq = std::exp(opt.x(p));
    fit.theta = gaussian ? std::exp(opt.x(p + 1)) : 1.0;
    fit.family = family.with_dispersion(fit.theta);
    fit.converged = opt.converged && std::isfinite(opt.value);
    fit.iterations = opt.iterations;
    fit.loglik = -opt.value;
    fit.score_norm = opt.gradient.cwiseAbs().maxCoeff() / (1.0 + std::abs(fit.loglik));
    if (fit.omega_sq < kBoundary) {
        fit.at_boundary = true;
        fit.omega_sq = 0.0;
        fit.notes.push_back("random-effect variance estimated at the boundary 0");
    } else if (fit.converged && fit.omega_sq < kNearBoundary) {
        // The log scale approaches zero only asymptotically; take the pooled
        // GLM when it is at least as likely.
        const FitResult pooled = fit_glm(ds, family);
        if (pooled.converged) {
            const double ll0 = lik.value_at(pooled.beta, 0.0, gaussian ? pooled.theta : family.dispersion);
            if (ll0 >= fit.loglik - 1e-9 * (1.0 + std::abs(fit.loglik))) {
                fit.at_boundary = true;
                fit.omega_sq = 0.0;
                fit.beta = pooled.beta;
                fit.loglik = ll0;
                if (gaussian) {
                    fit.theta = pooled.theta;
                    fit.family = family.with_dispersion(fit.theta);
                }
                fit.notes.push_back("random-effect variance estimated at the boundary 0");
            }
        }
    }
    fit.omega = Eigen::MatrixXd::Constant(1, 1, fit.omega_sq);
    if (!fit.converged) fit.notes.push_back("outer optimiser did not converge");
    if (options.compute_hessian) {
        fit.hessian = -hessian_from_gradient(fn, opt.x);
    }
    fit.gamma = lik.modes(fit.beta, fit.omega_sq, fit.theta);
    return fit;
}

Eigen::VectorXd posterior_mode_gamma(const GroupedDataset& ds, const FamilySpec& family, const MlmFit& fit) {
    if (fit.omega.rows() > 1) {
        throw std::invalid_argument("posterior_mode_gamma handles random intercepts; use the Laplace fit's gamma");
    }
    const FamilySpec fam = family.with_dispersion(family.kind == FamilyKind::Gaussian ? fit.theta : 1.0);
    RiLikelihood lik(ds, fam, fit.quadrature);
    return lik.modes(fit.beta, fit.omega_sq, fam.dispersion);
}

Eigen::MatrixXd mle_covariance(const MlmFit& fit) {
    if (fit.hessian.size() == 0) throw std::runtime_error("fit has no Hessian");
    const Eigen::MatrixXd neg = -fit.hessian;
    Eigen::LLT<Eigen::MatrixXd> llt(neg);
    if (fit.at_boundary || llt.info() != Eigen::Success ||
        llt.matrixLLT().diagonal().minCoeff() <= 1e-8 * std::sqrt(neg.diagonal().cwiseAbs().maxCoeff())) {
        throw std::runtime_error(
            "Hessian of the integrated log-likelihood is not negative definite (random-effect variance at "
            "or near the boundary); model-based standard errors are unavailable, use the cluster bootstrap");
    }
    const Eigen::MatrixXd cov = llt.solve(Eigen::MatrixXd::Identity(neg.rows(), neg.cols()));
    const auto p = fit.beta.size();
    return cov.topLeftCorner(p, p);
}

double mlm_score_check(const GroupedDataset& ds, const MlmFit& fit) {
    if (fit.omega.rows() > 1 || !ds.intercept_only_z()) return fit.score_norm;
    RiLikelihood lik(ds, fit.family, fit.quadrature);
    const Eigen::VectorXd x = fit.parameters();
    const auto value = [&lik](const Eigen::VectorXd& v) { return lik.value_grad(v, nullptr); };
    Eigen::VectorXd g = numerical_gradient(value, x);
    if (fit.at_boundary) g(fit.beta.size()) = 0.0;
    return g.cwiseAbs().maxCoeff() / (1.0 + std::abs(fit.loglik));
}

Eigen::VectorXd mle_hessian_se(const MlmFit& fit) { return mle_covariance(fit).diagonal().cwiseSqrt(); }

// ---------------------------------------------------------------------------
// Laplace approximation for general Omega
// ---------------------------------------------------------------------------

namespace {

Eigen::MatrixXd omega_from_cholesky(const Eigen::VectorXd& theta, int d) {
    Eigen::MatrixXd l = Eigen::MatrixXd::Zero(d, d);
    int k = 0;
    for (int i = 0; i < d; ++i) {
        for (int j = 0; j <= i; ++j) {
            l(i, j) = i == j ? std::exp(theta(k)) : theta(k);
            ++k;
        }
    }
    return l * l.transpose();
}

Eigen::VectorXd cholesky_parameters(const Eigen::MatrixXd& omega) {
    const auto d = omega.rows();
    const Eigen::MatrixXd l = Eigen::LLT<Eigen::MatrixXd>(omega).matrixL();
    Eigen::VectorXd theta(d * (d + 1) / 2);
    int k = 0;
    for (Eigen::Index i = 0; i < d; ++i) {
        for (Eigen::Index j = 0; j <= i; ++j) {
            theta(k++) = i == j ? std::log(l(i, j)) : l(i, j);
        }
    }
    return theta;
}

struct LaplaceGroup {
    Eigen::VectorXd mode;
    double log_integral;
};

LaplaceGroup laplace_group(const GroupedDataset& ds, const FamilySpec& family, const Eigen::VectorXd& eta, int g,
                           const Eigen::MatrixXd& omega_inv, double log_det_omega, Eigen::VectorXd start) {
    const int d = ds.z_dim();
    const Eigen::MatrixXd z = ds.z_block(g);
    const int b = ds.group_begin(g);
    auto eval = [&](const Eigen::VectorXd& gamma, Eigen::VectorXd* grad, Eigen::MatrixXd* hess) {
        double v = -0.5 * gamma.dot(omega_inv * gamma);
        if (grad) *grad = -omega_inv * gamma;
        if (hess) *hess = -omega_inv;
        for (int r = 0; r < z.rows(); ++r) {
            const LoglikDerivs dd = loglik_obs_derivs(family, ds.y()(b + r), eta(b + r) + z.row(r).dot(gamma));
            v += dd.value;
            if (grad) *grad += dd.d1 * z.row(r).transpose();
            if (hess) *hess += dd.d2 * z.row(r).transpose() * z.row(r);
        }
        return v;
    };
    Eigen::VectorXd gamma = start.size() == d ? start : Eigen::VectorXd::Zero(d);
    Eigen::VectorXd grad;
    Eigen::MatrixXd hess;
    double f = eval(gamma, &grad, &hess);
    for (int it = 0; it < 100; ++it) {
        Eigen::VectorXd step = (-hess).llt().solve(grad);
        double f_new = eval(gamma + step, nullptr, nullptr);
        int halvings = 0;
        while ((!std::isfinite(f_new) || f_new < f - 1e-12 * std::abs(f)) && halvings < 50) {
            step *= 0.5;
            f_new = eval(gamma + step, nullptr, nullptr);
            ++halvings;
        }
        gamma += step;
        f = eval(gamma, &grad, &hess);
        if (step.cwiseAbs().maxCoeff() < 1e-11 * (1.0 + gamma.cwiseAbs().maxCoeff())) break;
    }
    const Eigen::LLT<Eigen::MatrixXd> llt(-hess);
    const double log_det_neg_h = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const double log_i = f - 0.5 * (d * kLog2Pi + log_det_omega) + 0.5 * d * kLog2Pi - 0.5 * log_det_neg_h;
    return {gamma, log_i};
}

}  // namespace

double laplace_loglik(const GroupedDataset& ds, const FamilySpec& family, const Eigen::VectorXd& beta,
                      const Eigen::MatrixXd& omega) {
    const Eigen::LLT<Eigen::MatrixXd> llt(omega);
    if (llt.info() != Eigen::Success) throw std::invalid_argument("Omega must be positive definite");
    const Eigen::MatrixXd omega_inv = llt.solve(Eigen::MatrixXd::Identity(omega.rows(), omega.cols()));
    const double log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    const Eigen::VectorXd eta = ds.x() * beta;
    double total = 0.0;
    for (int g = 0; g < ds.n_groups(); ++g) {
        total += laplace_group(ds, family, eta, g, omega_inv, log_det, {}).log_integral;
    }
    return total;
}

MlmFit fit_mlm_laplace(const GroupedDataset& ds, const FamilySpec& family, const MlmOptions& options) {
    family.validate();
    if (family.kind == FamilyKind::Gaussian) {
        throw std::invalid_argument("Laplace MLM is only provided for Bernoulli and Poisson families");
    }
    const int p = ds.n_fixed();
    const int d = ds.z_dim();
    const int n_chol = d * (d + 1) / 2;
    const FitResult pooled = fit_glm(ds, family);
    Eigen::VectorXd x0(p + n_chol);
    x0.head(p) = pooled.beta;
    x0.tail(n_chol) = cholesky_parameters(0.5 * Eigen::MatrixXd::Identity(d, d));

    std::vector<Eigen::VectorXd> modes(static_cast<std::size_t>(ds.n_groups()), Eigen::VectorXd::Zero(d));
    auto neg_loglik = [&](const Eigen::VectorXd& x) {
        const Eigen::MatrixXd omega = omega_from_cholesky(x.tail(n_chol), d);
        const Eigen::LLT<Eigen::MatrixXd> llt(omega);
        if (llt.info() != Eigen::Success) return std::numeric_limits<double>::infinity();
        const Eigen::MatrixXd omega_inv = llt.solve(Eigen::MatrixXd::Identity(d, d));
        const double log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
        const Eigen::VectorXd eta = ds.x() * x.head(p);
        double total = 0.0;
        for (int g = 0; g < ds.n_groups(); ++g) {
            auto res = laplace_group(ds, family, eta, g, omega_inv, log_det, modes[static_cast<std::size_t>(g)]);
            if (res.mode.allFinite()) modes[static_cast<std::size_t>(g)] = res.mode;
            total += res.log_integral;
        }
        return std::isfinite(total) ? -total : std::numeric_limits<double>::infinity();
    };
    const ValueGradFn fn = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
        const double v = neg_loglik(x);
        g = numerical_gradient(neg_loglik, x);
        return v;
    };
    BfgsOptions bopts;
    bopts.max_iterations = options.max_iterations;
    bopts.gradient_tolerance = 1e-7;
    Eigen::VectorXd lower = Eigen::VectorXd::Constant(x0.size(), -std::numeric_limits<double>::infinity());
    {
        int k = 0;
        for (int i = 0; i < d; ++i) {
            for (int j = 0; j <= i; ++j) {
                if (i == j) lower(p + k) = 0.5 * kLogVarianceFloor;
                ++k;
            }
        }
    }
    bopts.lower_bounds = lower;
    const BfgsResult opt = minimize_bfgs(fn, x0, bopts);

    MlmFit fit;
    fit.family = family;
    fit.beta = opt.x.head(p);
    fit.omega = omega_from_cholesky(opt.x.tail(n_chol), d);
    fit.omega_sq = fit.omega(0, 0);
    fit.converged = opt.converged;
    fit.iterations = opt.iterations;
    fit.loglik = -opt.value;
    fit.score_norm = opt.gradient.cwiseAbs().maxCoeff() / (1.0 + std::abs(fit.loglik));
    fit.quadrature = QuadratureSpec{1, true};
    fit.notes.push_back("experimental Laplace approximation with log-Cholesky Omega");
    const Eigen::MatrixXd omega_inv = fit.omega.inverse();
    const double log_det = std::log(fit.omega.determinant());
    const Eigen::VectorXd eta = ds.x() * fit.beta;
    fit.gamma.resize(static_cast<Eigen::Index>(ds.n_groups()) * d);
    for (int g = 0; g < ds.n_groups(); ++g) {
        fit.gamma.segment(static_cast<Eigen::Index>(g) * d, d) =
            laplace_group(ds, family, eta, g, omega_inv, log_det, modes[static_cast<std::size_t>(g)]).mode;
    }
    if (options.compute_hessian) fit.hessian = -hessian_from_gradient(fn, opt.x, 1e-3);
    return fit;
}

PenaltySpec penalty_from_mlm(const MlmFit& fit) {
    if (fit.at_boundary || !(fit.omega.size() > 0)) {
        throw std::invalid_argument("MLM random-effect variance is at the boundary; RegFE penalty is undefined");
    }
    return PenaltySpec::from_omega(fit.omega, fit.family);
}

FitResult to_fit_result(const MlmFit& fit, const std::string& estimator) {
    FitResult out;
    out.estimator = estimator;
    out.family = fit.family;
    out.beta = fit.beta;
    out.gamma = fit.gamma;
    out.theta = fit.theta;
    out.converged = fit.converged;
    out.iterations = fit.iterations;
    out.deviance = -2.0 * fit.loglik;
    out.objective = -fit.loglik;
    out.terms = GroupTerms::Penalized;
    out.penalty = fit.at_boundary ? PenaltySpec::zero(static_cast<int>(fit.omega.rows())) : penalty_from_mlm(fit);
    out.omega = fit.omega;
    out.notes = fit.notes;
    return out;
}

}  // namespace grouped_glm
