#include "helpers.hpp"

#include "grouped_glm/irls.hpp"
#include "grouped_glm/mlm.hpp"
#include "grouped_glm/quadrature.hpp"

#include <doctest.h>

using namespace grouped_glm;

namespace {

// log int prod_i p(y_i | eta_i + g) N(g; 0, omega_sq) dg by a dense trapezoid grid.
Eigen::MatrixXd marginal_cov(const GroupedDataset& ds, double omega_sq, double sigma_sq) {
    const int n = ds.n_obs();
    Eigen::MatrixXd v = sigma_sq * Eigen::MatrixXd::Identity(n, n);
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            if (ds.group_of(i) == ds.group_of(j)) v(i, j) += omega_sq;
        }
    }
    return v;
}

}  // namespace

TEST_CASE("Gauss-Hermite rules integrate polynomials exactly") {
    for (int n : {1, 2, 5, 10, 25, 40}) {
        const auto rule = gauss_hermite(n);
        REQUIRE(rule.nodes.size() == n);
        for (int k = 0; 2 * k < 2 * n; ++k) {
            double sum = 0.0;
            for (int i = 0; i < n; ++i) sum += rule.weights(i) * std::pow(rule.nodes(i), 2 * k);
            CHECK(sum == doctest::Approx(std::tgamma(k + 0.5)).epsilon(1e-10));
        }
        double odd = 0.0;
        for (int i = 0; i < n; ++i) odd += rule.weights(i) * rule.nodes(i);
        CHECK(std::abs(odd) < 1e-12);
        for (int i = 0; i < n; ++i) {
            CHECK(rule.log_scaled_weights(i) ==
                  doctest::Approx(std::log(rule.weights(i)) + rule.nodes(i) * rule.nodes(i)).epsilon(1e-12));
        }
    }
    CHECK_THROWS(gauss_hermite(0));
}

TEST_CASE("adaptive quadrature matches a dense trapezoid grid") {
    for (auto kind : {FamilyKind::Bernoulli, FamilyKind::Poisson}) {
        const auto ds = testutil::make(testutil::random_intercept_data(kind, 4, 6, 8));
        const auto fam = testutil::family_of(kind);
        for (double omega_sq : {0.05, 0.7, 3.0}) {
            Eigen::VectorXd beta(2);
            beta << 0.2, -0.4;
            const double q = integrated_loglik(ds, fam, beta, omega_sq, 1.0);
            const double t = testutil::trapezoid_loglik(ds, kind, beta, omega_sq);
            CHECK(std::abs(q - t) < 1e-8 * (1 + std::abs(t)));
        }
    }
}

TEST_CASE("Gaussian integrated likelihood equals the multivariate normal") {
    const auto ds = testutil::make(testutil::random_intercept_data(FamilyKind::Gaussian, 5, 4, 3));
    Eigen::VectorXd beta(2);
    beta << 0.1, 0.9;
    for (double omega_sq : {0.01, 0.5, 4.0}) {
        for (double sigma_sq : {0.3, 1.0, 2.2}) {
            const double got = integrated_loglik(ds, FamilySpec::gaussian(sigma_sq), beta, omega_sq, sigma_sq);
            const double want = testutil::gaussian_marginal(ds, beta, omega_sq, sigma_sq);
            CHECK(std::abs(got - want) < 1e-10 * (1 + std::abs(want)));
        }
    }
}

TEST_CASE("zero variance gives the GLM likelihood") {
    const auto ds = testutil::make(testutil::random_intercept_data(FamilyKind::Poisson, 4, 5, 12));
    Eigen::VectorXd beta(2);
    beta << 0.3, 0.2;
    double want = 0.0;
    for (int i = 0; i < ds.n_obs(); ++i) want += testutil::obs_loglik(FamilyKind::Poisson, ds.y()(i), ds.x().row(i).dot(beta));
    CHECK(integrated_loglik(ds, FamilySpec::poisson(), beta, 0.0, 1.0) == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("one-node adaptive quadrature is the Laplace approximation") {
    const auto ds = testutil::make(testutil::random_intercept_data(FamilyKind::Bernoulli, 6, 7, 14));
    Eigen::VectorXd beta(2);
    beta << -0.2, 0.6;
    QuadratureSpec one;
    one.n_nodes = 1;
    const double aghq = integrated_loglik(ds, FamilySpec::bernoulli(), beta, 0.8, 1.0, one);
    const double lap = laplace_loglik(ds, FamilySpec::bernoulli(), beta, Eigen::MatrixXd::Constant(1, 1, 0.8));
    CHECK(aghq == doctest::Approx(lap).epsilon(1e-9));
}

TEST_CASE("analytic gradient matches finite differences of the quadrature value") {
    for (FamilyKind kind : {FamilyKind::Bernoulli, FamilyKind::Poisson}) {
        const auto ds = testutil::make(testutil::random_intercept_data(kind, 5, 4, 21));
        const FamilySpec fam = testutil::family_of(kind);
        for (int nodes : {1, 3, 25}) {
            for (bool adaptive : {true, false}) {
                QuadratureSpec q;
                q.n_nodes = nodes;
                q.adaptive = adaptive;
                Eigen::VectorXd x(3);
                x << 0.1, 0.4, std::log(1.7);
                auto f = [&](const Eigen::VectorXd& v) {
                    return integrated_loglik(ds, fam, v.head(2), std::exp(v(2)), 1.0, q);
                };
                // fourth-order central differences
                Eigen::VectorXd fd(3);
                for (int j = 0; j < 3; ++j) {
                    const double h = 1e-3;
                    auto at = [&](double d) {
                        Eigen::VectorXd v = x;
                        v(j) += d;
                        return f(v);
                    };
                    fd(j) = (-at(2 * h) + 8 * at(h) - 8 * at(-h) + at(-2 * h)) / (12 * h);
                }
                const Eigen::VectorXd g = integrated_loglik_gradient(ds, fam, x.head(2), std::exp(x(2)), 1.0, q);
                CAPTURE(nodes);
                CAPTURE(adaptive);
                for (int j = 0; j < 3; ++j) CHECK(g(j) == doctest::Approx(fd(j)).epsilon(1e-7).scale(1.0));
            }
        }
    }
}

TEST_CASE("Gaussian MLM matches a profiled likelihood oracle") {
    const auto ds = testutil::make(testutil::random_intercept_data(FamilyKind::Gaussian, 12, 4, 19, 0.3, 0.8, 0.9, 0.7));
    const auto fit = fit_ri_mlm(ds, FamilySpec::gaussian());
    REQUIRE(fit.converged);
    REQUIRE(!fit.at_boundary);
    auto gls = [&](double om, double sg) {
        const Eigen::MatrixXd vinv = marginal_cov(ds, om, sg).inverse();
        return Eigen::VectorXd((ds.x().transpose() * vinv * ds.x()).inverse() * (ds.x().transpose() * vinv * ds.y()));
    };
    auto profile = [&](const Eigen::VectorXd& p) {
        const double om = std::exp(p(0));
        const double sg = std::exp(p(1));
        return -testutil::gaussian_marginal(ds, gls(om, sg), om, sg);
    };
    const Eigen::VectorXd opt = testutil::nelder_mead_restarts(profile, Eigen::Vector2d(0.0, 0.0));
    const double om = std::exp(opt(0));
    const double sg = std::exp(opt(1));
    CHECK(fit.omega_sq == doctest::Approx(om).epsilon(1e-4));
    CHECK(fit.theta == doctest::Approx(sg).epsilon(1e-4));
    const Eigen::VectorXd b = gls(om, sg);
    CHECK(fit.beta(0) == doctest::Approx(b(0)).epsilon(1e-5));
    CHECK(fit.beta(1) == doctest::Approx(b(1)).epsilon(1e-5));
    CHECK(fit.loglik == doctest::Approx(-profile(opt)).epsilon(1e-9));

    // Hessian standard errors against a finite-difference Hessian of the
    // multivariate normal likelihood in (beta, log omega^2, log sigma^2). The
    // beta / variance cross terms do not vanish on unbalanced data.
    Eigen::VectorXd at(4);
    at << fit.beta, std::log(fit.omega_sq), std::log(fit.theta);
    auto ll = [&](const Eigen::VectorXd& v) {
        return testutil::gaussian_marginal(ds, v.head(2), std::exp(v(2)), std::exp(v(3)));
    };
    Eigen::MatrixXd hess(4, 4);
    const double h = 1e-3;
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < 4; ++j) {
            auto shifted = [&](double di, double dj) {
                Eigen::VectorXd v = at;
                v(i) += di;
                v(j) += dj;
                return ll(v);
            };
            hess(i, j) = (shifted(h, h) - shifted(h, -h) - shifted(-h, h) + shifted(-h, -h)) / (4 * h * h);
        }
    }
    const Eigen::MatrixXd oracle_cov = (-hess).inverse();
    const Eigen::VectorXd se = mle_hessian_se(fit);
    CHECK(se(0) == doctest::Approx(std::sqrt(oracle_cov(0, 0))).epsilon(1e-4));
    CHECK(se(1) == doctest::Approx(std::sqrt(oracle_cov(1, 1))).epsilon(1e-4));

    // Posterior modes shrink group mean residuals by omega^2 n / (sigma^2 + omega^2 n).
    const Eigen::VectorXd modes = posterior_mode_gamma(ds, FamilySpec::gaussian(fit.theta), fit);
    const Eigen::VectorXd r = ds.y() - ds.x() * fit.beta;
    for (int g = 0; g < ds.n_groups(); ++g) {
        const auto rows = testutil::rows_of(ds, g);
        const double n = static_cast<double>(rows.size());
        double mean = 0.0;
        for (int i : rows) mean += r(i);
        mean /= n;
        CHECK(modes(g) == doctest::Approx(fit.omega_sq * n / (fit.theta + fit.omega_sq * n) * mean).epsilon(1e-7));
    }

    // RegFE at the MLM prior reproduces the MLM fixed effects.
    const auto regfe = fit_regfe(ds, FamilySpec::gaussian(fit.theta), penalty_from_mlm(fit));
    CHECK((regfe.beta - fit.beta).cwiseAbs().maxCoeff() < 1e-6);
    CHECK((regfe.gamma - modes).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("Gaussian MLM standard errors are GLS on a balanced within-centred design") {
    // Equal group sizes and a covariate centred within groups make the
    // beta / variance blocks of the information orthogonal at the optimum.
    std::mt19937_64 gen(31);
    std::normal_distribution<double> n01(0.0, 1.0);
    const int groups = 10;
    const int per = 5;
    Eigen::VectorXd y(groups * per);
    Eigen::MatrixXd x(groups * per, 2);
    std::vector<std::int64_t> ids;
    for (int g = 0; g < groups; ++g) {
        const double gamma = 0.8 * n01(gen);
        Eigen::VectorXd xs(per);
        for (int i = 0; i < per; ++i) xs(i) = n01(gen);
        xs.array() -= xs.mean();
        for (int i = 0; i < per; ++i) {
            const int row = g * per + i;
            x(row, 0) = 1.0;
            x(row, 1) = xs(i);
            y(row) = 0.4 + 0.7 * xs(i) + gamma + 0.6 * n01(gen);
            ids.push_back(g);
        }
    }
    const auto ds = GroupedDataset::build(y, x, ids);
    const auto fit = fit_ri_mlm(ds, FamilySpec::gaussian());
    REQUIRE(fit.converged);
    REQUIRE(!fit.at_boundary);
    const Eigen::MatrixXd vinv = marginal_cov(ds, fit.omega_sq, fit.theta).inverse();
    const Eigen::MatrixXd cov = (ds.x().transpose() * vinv * ds.x()).inverse();
    const Eigen::VectorXd se = mle_hessian_se(fit);
    CHECK(se(0) == doctest::Approx(std::sqrt(cov(0, 0))).epsilon(1e-6));
    CHECK(se(1) == doctest::Approx(std::sqrt(cov(1, 1))).epsilon(1e-6));
}

TEST_CASE("Bernoulli MLM matches a trapezoid-likelihood oracle") {
    const auto ds = testutil::make(testutil::random_intercept_data(FamilyKind::Bernoulli, 12, 8, 24, 0.2, 0.9, 1.2));
    const auto fit = fit_ri_mlm(ds, FamilySpec::bernoulli());
    REQUIRE(fit.converged);
    REQUIRE(!fit.at_boundary);
    CHECK(mlm_score_check(ds, fit) < 1e-6);
    auto f = [&](const Eigen::VectorXd& p) {
        return -testutil::trapezoid_loglik(ds, FamilyKind::Bernoulli, p.head(2), std::exp(p(2)), 1500);
    };
    Eigen::VectorXd start(3);
    start << fit.beta(0) + 0.1, fit.beta(1) - 0.1, std::log(fit.omega_sq) + 0.2;
    const Eigen::VectorXd opt = testutil::nelder_mead_restarts(f, start, 4);
    CHECK(fit.beta(1) == doctest::Approx(opt(1)).epsilon(1e-4));
    CHECK(fit.omega_sq == doctest::Approx(std::exp(opt(2))).epsilon(1e-3));
    // the oracle likelihood at the fit agrees, and its own optimiser finds nothing higher
    Eigen::VectorXd at_fit(3);
    at_fit << fit.beta, std::log(fit.omega_sq);
    CHECK(fit.loglik == doctest::Approx(testutil::trapezoid_loglik(ds, FamilyKind::Bernoulli, fit.beta, fit.omega_sq)).epsilon(1e-8));
    CHECK(-f(opt) <= fit.loglik + 1e-8);

    // more nodes do not move the likelihood
    QuadratureSpec many;
    many.n_nodes = 60;
    CHECK(integrated_loglik(ds, FamilySpec::bernoulli(), fit.beta, fit.omega_sq, 1.0, many) ==
          doctest::Approx(fit.loglik).epsilon(1e-10));

    // a warm start lands on the same optimum
    MlmOptions warm;
    warm.warm_start = &fit;
    const auto again = fit_ri_mlm(ds, FamilySpec::bernoulli(), {}, warm);
    CHECK((again.beta - fit.beta).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("no between-group variation puts the variance at the boundary") {
    // residuals sum to zero in every group, so the ML estimate of omega^2 is 0
    std::vector<std::int64_t> ids;
    Eigen::VectorXd y(24);
    Eigen::MatrixXd x(24, 2);
    const double pattern[4] = {0.9, -0.4, -1.1, 0.6};
    for (int g = 0; g < 6; ++g) {
        for (int i = 0; i < 4; ++i) {
            const int r = g * 4 + i;
            x(r, 0) = 1.0;
            x(r, 1) = i - 1.5;
            y(r) = 0.5 + 0.7 * x(r, 1) + pattern[(i + g) % 4];
            ids.push_back(g);
        }
    }
    const auto ds = GroupedDataset::build(y, x, ids);
    const auto fit = fit_ri_mlm(ds, FamilySpec::gaussian());
    CHECK(fit.at_boundary);
    CHECK(fit.omega_sq == 0.0);
    CHECK_THROWS(mle_covariance(fit));
    CHECK_THROWS(penalty_from_mlm(fit));
    const auto fr = to_fit_result(fit, "ri-mlm");
    CHECK(fr.gamma.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("MLM rejects random slopes in the quadrature path") {
    std::mt19937_64 gen(4);
    std::normal_distribution<double> n01;
    Eigen::VectorXd y(40);
    Eigen::MatrixXd x(40, 3);
    std::vector<std::int64_t> ids;
    for (int r = 0; r < 40; ++r) {
        x(r, 0) = 1.0;
        x(r, 1) = n01(gen);
        x(r, 2) = n01(gen);
        y(r) = (n01(gen) > 0) ? 1.0 : 0.0;
        ids.push_back(r / 5);
    }
    const auto ds = GroupedDataset::build(y, x, ids, {2});
    CHECK_THROWS(fit_ri_mlm(ds, FamilySpec::bernoulli()));
    const auto lap = fit_mlm_laplace(ds, FamilySpec::bernoulli());
    CHECK(lap.omega.rows() == 2);
    CHECK(lap.beta.size() == 3);
}
TEST_CASE("a profile peaking at zero variance is reported at the boundary") {
    // With this draw the trapezoid profile decreases in omega^2 from 0 on.
    const auto ds = testutil::make(testutil::random_intercept_data(FamilyKind::Bernoulli, 12, 8, 23, 0.2, 0.9, 1.2));
    const auto fit = fit_ri_mlm(ds, FamilySpec::bernoulli());
    REQUIRE(fit.converged);
    CHECK(fit.at_boundary);
    CHECK(fit.omega_sq == 0.0);
    const auto glm = fit_glm(ds, FamilySpec::bernoulli());
    CHECK((fit.beta - glm.beta).cwiseAbs().maxCoeff() < 1e-8);
    Eigen::VectorXd b = fit.beta;
    for (double w : {0.05, 0.5}) {
        auto nb = [&](const Eigen::VectorXd& v) { return -testutil::trapezoid_loglik(ds, FamilyKind::Bernoulli, v, w, 1500); };
        const Eigen::VectorXd best = testutil::nelder_mead_restarts(nb, b, 3);
        CHECK(-nb(best) < fit.loglik);
    }
    CHECK(mlm_score_check(ds, fit) < 1e-6);
}
