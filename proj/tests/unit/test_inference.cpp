#include "helpers.hpp"

#include "grouped_glm/estimators.hpp"
#include "grouped_glm/inference.hpp"

#include <doctest.h>

using namespace grouped_glm;

TEST_CASE("small-sample factors") {
    CHECK(crse_factor(CrseCorrection::None, 10, 100, 3) == 1.0);
    CHECK(crse_factor(CrseCorrection::GOverGMinus1, 10, 100, 3) == doctest::Approx(10.0 / 9.0));
    CHECK(crse_factor(CrseCorrection::Stata, 10, 100, 3) == doctest::Approx(10.0 / 9.0 * 99.0 / 97.0));
    CHECK_THROWS(crse_factor(CrseCorrection::GOverGMinus1, 1, 10, 2));
    CHECK(crse_correction_from_name("stata") == CrseCorrection::Stata);
    CHECK_THROWS(crse_correction_from_name("hc3"));
}

TEST_CASE("GLM cluster sandwich matches a direct computation and reduces to HC0") {
    const auto ds = testutil::make(testutil::random_intercept_data(FamilyKind::Bernoulli, 12, 5, 3));
    const auto fit = fit_glm(ds, FamilySpec::bernoulli());
    const Eigen::VectorXd mu = (1.0 + (-(ds.x() * fit.beta)).array().exp()).inverse().matrix();
    const Eigen::VectorXd w = (mu.array() * (1.0 - mu.array())).matrix();
    const auto v = crse_fe(fit, ds, FamilySpec::bernoulli(), 1.0);
    const Eigen::MatrixXd want =
        testutil::cluster_sandwich(ds.x(), ds.y(), mu, w, testutil::clusters_of(ds), ds.n_groups(), Eigen::MatrixXd::Zero(2, 2));
    CHECK((v.covariance - want).cwiseAbs().maxCoeff() < 1e-10 * want.cwiseAbs().maxCoeff());

    // every observation its own cluster: HC0
    std::vector<std::int64_t> own;
    for (int i = 0; i < ds.n_obs(); ++i) own.push_back(i);
    const auto single = GroupedDataset::build(ds.y(), ds.x(), own);
    const auto fit1 = fit_glm(single, FamilySpec::bernoulli());
    const auto v1 = crse_fe(fit1, single, FamilySpec::bernoulli(), 1.0);
    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(2, 2);
    for (int i = 0; i < single.n_obs(); ++i) {
        const double m = 1.0 / (1.0 + std::exp(-single.x().row(i).dot(fit1.beta)));
        meat += (single.y()(i) - m) * (single.y()(i) - m) * single.x().row(i).transpose() * single.x().row(i);
    }
    const Eigen::VectorXd m1 = (1.0 + (-(single.x() * fit1.beta)).array().exp()).inverse().matrix();
    const Eigen::MatrixXd bread =
        (single.x().transpose() * (m1.array() * (1 - m1.array())).matrix().asDiagonal() * single.x()).inverse();
    const Eigen::MatrixXd hc0 = bread * meat * bread;
    CHECK((v1.covariance - hc0).cwiseAbs().maxCoeff() < 1e-10 * hc0.cwiseAbs().maxCoeff());
}

TEST_CASE("FE sandwich equals the RegFE sandwich with a zero penalty") {
    for (auto kind : {FamilyKind::Gaussian, FamilyKind::Bernoulli, FamilyKind::Poisson}) {
        for (unsigned seed = 1; seed <= 5; ++seed) {
            const auto ds = testutil::make(testutil::random_intercept_data(kind, 9, 6, seed));
            const auto fam = testutil::family_of(kind);
            const auto fit = fit_fe(ds, fam);
            REQUIRE(fit.converged);
            const double c = crse_factor(CrseCorrection::GOverGMinus1, ds.n_groups(), ds.n_obs(), ds.n_fixed());
            const auto a = crse_fe(fit, ds, fam, c);
            const auto b = crse_regfe(fit, ds, fam, PenaltySpec::zero(1), c);
            CHECK((a.covariance - b.covariance).cwiseAbs().maxCoeff() <= 1e-8 * a.covariance.cwiseAbs().maxCoeff());
            // linear in c
            const auto b2 = crse_regfe(fit, ds, fam, PenaltySpec::zero(1), 2.0 * c);
            CHECK((b2.covariance - 2.0 * b.covariance).cwiseAbs().maxCoeff() <= 1e-12 * b2.covariance.cwiseAbs().maxCoeff());
        }
    }
}

TEST_CASE("Gaussian bias-corrected RegFE sandwich equals the ridge oracle") {
    for (unsigned seed : {4u, 8u, 15u}) {
        const auto ds = testutil::make(testutil::random_intercept_data(FamilyKind::Gaussian, 10, 4, seed));
        EstimatorConfig cfg;
        cfg.kind = EstimatorKind::BcRegFe;
        const Estimate est = fit_estimator(ds, FamilySpec::gaussian(), cfg);
        REQUIRE(est.fit.converged);
        REQUIRE(est.mlm);
        REQUIRE(!est.mlm->at_boundary);
        const auto& design = est.design;
        const int p = design.n_fixed();
        const int g_count = design.n_groups();
        Eigen::MatrixXd u = Eigen::MatrixXd::Zero(design.n_obs(), p + g_count);
        u.leftCols(p) = design.x();
        for (int i = 0; i < design.n_obs(); ++i) u(i, p + design.group_of(i)) = 1.0;
        const double lambda = est.mlm->theta / est.mlm->omega_sq;
        Eigen::MatrixXd ridge = Eigen::MatrixXd::Zero(p + g_count, p + g_count);
        ridge.bottomRightCorner(g_count, g_count) = lambda * Eigen::MatrixXd::Identity(g_count, g_count);
        const Eigen::VectorXd theta = (u.transpose() * u + ridge).ldlt().solve(u.transpose() * design.y());
        const Eigen::VectorXd coef = est.fit.fixed_coefficients();
        CHECK((coef - theta.head(p)).cwiseAbs().maxCoeff() < 1e-8);
        const double c = 1.3;
        const auto v = crse_regfe(est.fit, design, est.fit.family, est.fit.penalty, c);
        const Eigen::MatrixXd want =
            c * testutil::cluster_sandwich(u, design.y(), u * theta, Eigen::VectorXd::Ones(design.n_obs()), testutil::clusters_of(design),
                                 g_count, ridge)
                    .topLeftCorner(p, p);
        CHECK((v.covariance - want).cwiseAbs().maxCoeff() < 1e-8 * want.cwiseAbs().maxCoeff());
    }
}

TEST_CASE("model-based variance of a Gaussian GLM") {
    const auto ds = testutil::make(testutil::random_intercept_data(FamilyKind::Gaussian, 6, 5, 2));
    const auto fit = fit_glm(ds, FamilySpec::gaussian(2.0));
    const auto v = model_variance(fit, ds);
    // dispersion is re-estimated as RSS / n
    const Eigen::VectorXd ols = (ds.x().transpose() * ds.x()).ldlt().solve(ds.x().transpose() * ds.y());
    const double sigma_sq = (ds.y() - ds.x() * ols).squaredNorm() / ds.n_obs();
    CHECK(fit.theta == doctest::Approx(sigma_sq).epsilon(1e-10));
    const Eigen::MatrixXd want = sigma_sq * (ds.x().transpose() * ds.x()).inverse();
    CHECK((v.covariance - want).cwiseAbs().maxCoeff() < 1e-10);
    const Eigen::VectorXd se = v.standard_errors();
    CHECK(v.ci_upper(1) - v.estimate(1) == doctest::Approx(normal_quantile(0.975) * se(1)).epsilon(1e-12));
    CHECK(normal_quantile(0.975) == doctest::Approx(1.959963984540054).epsilon(1e-12));
}

TEST_CASE("sample quantiles use linear interpolation") {
    const std::vector<double> v = {1.0, 2.0, 4.0, 8.0};
    CHECK(sorted_quantile(v, 0.0) == 1.0);
    CHECK(sorted_quantile(v, 1.0) == 8.0);
    CHECK(sorted_quantile(v, 0.5) == doctest::Approx(3.0));
    CHECK(sorted_quantile(v, 0.25) == doctest::Approx(1.75));
}

TEST_CASE("cluster bootstrap is deterministic and thread independent") {
    const auto ds = testutil::make(testutil::random_intercept_data(FamilyKind::Poisson, 10, 5, 31));
    EstimatorConfig cfg;
    cfg.kind = EstimatorKind::Fe;
    BootstrapOptions bo;
    bo.replicates = 60;
    bo.seed = 9;
    bo.threads = 1;
    const auto a = cluster_bootstrap(ds, FamilySpec::poisson(), cfg, bo);
    bo.threads = 3;
    const auto b = cluster_bootstrap(ds, FamilySpec::poisson(), cfg, bo);
    CHECK(a.ci_lower == b.ci_lower);
    CHECK(a.ci_upper == b.ci_upper);
    CHECK(a.bootstrap_sd == b.bootstrap_sd);
    bo.seed = 10;
    const auto c = cluster_bootstrap(ds, FamilySpec::poisson(), cfg, bo);
    CHECK(c.ci_lower != a.ci_lower);
    CHECK(a.ci_lower(1) < a.estimate(1));
    CHECK(a.estimate(1) < a.ci_upper(1));
    CHECK(a.replicates == 60);
}

TEST_CASE("FE bootstrap keeps refits whose separated groups are excluded") {
    auto raw = testutil::random_intercept_data(FamilyKind::Bernoulli, 14, 6, 32);
    for (std::size_t i = 0; i < raw.ids.size(); ++i) {
        if (raw.ids[i] == raw.ids[0]) raw.y(static_cast<Eigen::Index>(i)) = 1.0;
    }
    const auto ds = testutil::make(raw);
    EstimatorConfig cfg;
    cfg.kind = EstimatorKind::Fe;
    const Estimate est = fit_estimator(ds, FamilySpec::bernoulli(), cfg);
    REQUIRE(est.fit.has_separation());
    BootstrapOptions bo;
    bo.replicates = 60;
    bo.threads = 1;
    const auto v = cluster_bootstrap(ds, FamilySpec::bernoulli(), cfg, bo, &est);
    CHECK(v.failures <= 12);
    CHECK(v.ci_lower(1) < v.estimate(1));
    CHECK(v.estimate(1) < v.ci_upper(1));
}

TEST_CASE("bootstrap rejects unusable inputs") {
    Eigen::VectorXd y(4);
    y << 1, 0, 2, 1;
    Eigen::MatrixXd x(4, 2);
    x << 1, 0.1, 1, 0.7, 1, -0.4, 1, 0.3;
    const std::vector<std::int64_t> one = {1, 1, 1, 1};
    const auto ds = GroupedDataset::build(y, x, one);
    EstimatorConfig cfg;
    cfg.kind = EstimatorKind::Glm;
    CHECK_THROWS(cluster_bootstrap(ds, FamilySpec::poisson(), cfg, {}));
    const auto ok = testutil::make(testutil::random_intercept_data(FamilyKind::Poisson, 6, 5, 3));
    BootstrapOptions few;
    few.replicates = 10;
    CHECK_THROWS(cluster_bootstrap(ok, FamilySpec::poisson(), cfg, few));
}

TEST_CASE("MLE variance needs an interior optimum") {
    const auto ds = testutil::make(testutil::random_intercept_data(FamilyKind::Bernoulli, 15, 6, 12, 0.0, 1.0, 1.0));
    const auto fit = fit_ri_mlm(ds, FamilySpec::bernoulli());
    REQUIRE(!fit.at_boundary);
    const auto v = mle_variance(fit);
    CHECK(v.covariance.rows() == 2);
    CHECK((v.standard_errors() - mle_hessian_se(fit)).cwiseAbs().maxCoeff() < 1e-12);
    MlmFit boundary = fit;
    boundary.at_boundary = true;
    CHECK_THROWS(mle_variance(boundary));
}
